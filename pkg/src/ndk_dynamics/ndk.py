"""The Neural Dynamical Kernel and its NTK / NNGP specializations.

The recursion, evaluated bottom-up in one pass over layers::

    Kd^0 = e * K_in
    Kd^l = m(t,t') * Kdot^l * Kd^{l-1} + e * K^l

with ``e = exp(-T |t-t'| / sigma2)``. At t = t' = 0 this is the NTK with weight
variance sigma0_2; in the long-time regime its lag integral is
``(sigma2 / T) * K_GP``.
"""
from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .errors import ConfigError
from .kernels import Activation, KernelInputs, layer_kernels, time_covariances, _scalarize
from .prior import DynamicsParams, decay_factor, stationary_cov


class NdkParts(NamedTuple):
    """NDK at depth L split into its hidden-weight and readout contributions.

    ``kd = m_ab * hidden + decay * readout`` where ``hidden = Kdot^L * Kd^{L-1}``
    and ``readout = K^L``.
    """

    kd: np.ndarray
    hidden: np.ndarray
    readout: np.ndarray


def ndk_from_cov(act: Activation, L: int, m_ab, m_aa, m_bb, decay, kxx, kxy, kyy) -> NdkParts:
    k, kdot = layer_kernels(act, L, m_ab, m_aa, m_bb, kxx, kxy, kyy)
    kd = decay * k[0]
    hidden = None
    for l in range(1, L + 1):
        hidden = kdot[l] * kd
        kd = m_ab * hidden + decay * k[l]
    return NdkParts(kd, hidden, k[L])


def ndk_parts(act, L: int, params: DynamicsParams, t, t_prime, g: KernelInputs) -> NdkParts:
    act = Activation.parse(act)
    m = time_covariances(params, t, t_prime)
    return ndk_from_cov(act, L, *m, decay_factor(params, t, t_prime), *g.arrays())


def ndk(act, L: int, params: DynamicsParams, t, t_prime, g: KernelInputs):
    """``K^{d,L}(t, t', x, x')``; broadcasts over array times and Gram entries."""
    return _scalarize(ndk_parts(act, L, params, t, t_prime, g).kd)


def ntk(act, L: int, sigma0_2: float, g: KernelInputs):
    """The NTK of a network whose weights are all N(0, sigma0_2): the NDK at t = t' = 0."""
    act = Activation.parse(act)
    return _scalarize(ndk_from_cov(act, L, sigma0_2, sigma0_2, sigma0_2, 1.0, *g.arrays()).kd)


def nngp_equilibrium_kernel(act, L: int, sigma2: float, g: KernelInputs):
    """The standard NNGP kernel ``K_GP^L`` with weight variance sigma2."""
    act = Activation.parse(act)
    k, _ = layer_kernels(act, L, sigma2, sigma2, sigma2, *g.arrays())
    return _scalarize(k[L])


def stationary_ndk_parts(act, L: int, params: DynamicsParams, lag, g: KernelInputs) -> NdkParts:
    """NDK in the long-time regime, where it depends on the lag ``t - t'`` only."""
    act = Activation.parse(act)
    lag = np.asarray(lag, dtype=float)
    s2 = params.sigma2
    decay = np.exp(-params.rate * np.abs(lag))
    return ndk_from_cov(act, L, stationary_cov(params, lag), s2, s2, decay, *g.arrays())


def long_time_integral(act, L: int, params: DynamicsParams, g: KernelInputs, t_window: float,
                       dt: float | None = None) -> float:
    """``int_0^window Kd(lag) dlag`` in the stationary regime.

    Uses the solver's causal rectangle rule: ``dt * sum_{j=1..n} Kd(j dt)``.
    ``dt`` defaults to ``min(params.dt, 1e-3 * sigma2 / T)``.
    """
    if t_window < 0:
        raise ConfigError("t_window must be non-negative")
    if dt is None:
        dt = params.dt if params.T == 0 else min(params.dt, 1e-3 / params.rate)
    n = int(round(t_window / dt))
    if n == 0:
        return 0.0
    lags = dt * np.arange(1, n + 1)
    return float(dt * np.sum(stationary_ndk_parts(act, L, params, lags, g).kd))
