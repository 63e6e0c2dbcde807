"""Dynamics hyperparameters and the two-time prior covariance of the weights.

Under the Langevin prior (no data term) every weight is an independent
Ornstein-Uhlenbeck process started from N(0, sigma0_2) and relaxing to
N(0, sigma2) at rate T / sigma2. Its autocovariance is the scalar ``m(t, t')``
from which every kernel in the package is built.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .errors import ConfigError


@dataclass(frozen=True)
class DynamicsParams:
    """Hyperparameters of the noisy learning dynamics.

    Attributes:
        T: noise level (temperature). ``T = 0`` is noiseless gradient flow.
        sigma2: variance of the equilibrium Gaussian prior (L2 regularizer).
        sigma0_2: variance of the i.i.d. Gaussian initialization.
        dt: integration step of the gradient phase (continuous time units).
        t_max: total integration time.
        t_switch: end of the fine-step region of the two-scale grid.
        dt_coarse: step used after ``t_switch``. ``None`` means a uniform grid.
    """

    T: float
    sigma2: float = 1.0
    sigma0_2: float = 1.0
    dt: float = 0.01
    t_max: float = 10.0
    t_switch: float = 10.0
    dt_coarse: Optional[float] = None

    def __post_init__(self):
        if not self.T >= 0:
            raise ConfigError(f"temperature must be >= 0, got {self.T}")
        if not self.sigma2 > 0:
            raise ConfigError(f"sigma2 must be > 0, got {self.sigma2}")
        if not self.sigma0_2 > 0:
            raise ConfigError(f"sigma0_2 must be > 0, got {self.sigma0_2}")
        if not self.dt > 0:
            raise ConfigError(f"dt must be > 0, got {self.dt}")
        if not self.t_max >= self.dt:
            raise ConfigError(f"t_max ({self.t_max}) must be >= dt ({self.dt})")
        if self.dt_coarse is not None and not self.dt_coarse > 0:
            raise ConfigError(f"dt_coarse must be > 0, got {self.dt_coarse}")

    @property
    def rate(self) -> float:
        """Relaxation rate ``T / sigma2`` of the prior process."""
        return self.T / self.sigma2

    @property
    def stationary(self) -> bool:
        """True when the prior is time-translation invariant (sigma0_2 == sigma2)."""
        return self.sigma0_2 == self.sigma2

    def with_(self, **changes) -> "DynamicsParams":
        return replace(self, **changes)

    @classmethod
    def two_scale(cls, T, sigma2=1.0, sigma0_2=1.0, dt=0.01, t_max=None,
                  t_switch=10.0, dt_coarse=None) -> "DynamicsParams":
        """Parameters for a run to ``t_max`` (default ``10 / T``) on the two-scale grid.

        The coarse step defaults to ``0.001 / T``, never smaller than ``dt``.
        """
        if T <= 0:
            raise ConfigError("two-scale grids need T > 0")
        if t_max is None:
            t_max = 10.0 / T
        if dt_coarse is None:
            dt_coarse = max(dt, 1e-3 / T)
        return cls(T=T, sigma2=sigma2, sigma0_2=sigma0_2, dt=dt, t_max=t_max,
                   t_switch=t_switch, dt_coarse=dt_coarse)


def decay_factor(params: DynamicsParams, t, t_prime):
    """``exp(-T |t - t'| / sigma2)``; equals 1 at equal times or T = 0."""
    t = np.asarray(t, dtype=float)
    t_prime = np.asarray(t_prime, dtype=float)
    out = np.exp(-params.rate * np.abs(t - t_prime))
    return out[()] if out.ndim == 0 else out


def prior_cov(params: DynamicsParams, t, t_prime):
    """Two-time covariance ``m(t, t')`` of a single weight under the prior.

    ``sigma2 * exp(-r|t-t'|) + (sigma0_2 - sigma2) * exp(-r(t+t'))`` with
    ``r = T / sigma2``. Broadcasts over array arguments and is exactly
    symmetric in its two time arguments.
    """
    t = np.asarray(t, dtype=float)
    t_prime = np.asarray(t_prime, dtype=float)
    r = params.rate
    out = (params.sigma2 * np.exp(-r * np.abs(t - t_prime))
           + (params.sigma0_2 - params.sigma2) * np.exp(-r * (t + t_prime)))
    return out[()] if out.ndim == 0 else out


def stationary_cov(params: DynamicsParams, lag):
    """``m`` in the long-time regime, a function of the lag only."""
    lag = np.asarray(lag, dtype=float)
    out = params.sigma2 * np.exp(-params.rate * np.abs(lag))
    return out[()] if out.ndim == 0 else out
