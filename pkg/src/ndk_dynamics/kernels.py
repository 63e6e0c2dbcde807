"""Two-time NNGP kernels, derivative kernels and mean kernels.

Three activations have closed forms: linear, ReLU (arc-cosine recursion) and
erf (arcsine recursion). Every function here broadcasts over numpy arrays in
the time arguments and in the three input Gram scalars, which is what the
integral-equation solver relies on to fill whole kernel rows at once.

A Monte Carlo oracle samples the layer recursion directly from bivariate
Gaussians and never touches the closed forms.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import erf as _erf

from .errors import ConfigError, NumericalDomainError
from .prior import DynamicsParams, prior_cov

# Arguments of arccos / arcsin may overshoot +-1 by rounding on collinear
# inputs at equal times; beyond this they indicate a real bug.
CLAMP_TOL = 1e-9


class Activation(str, Enum):
    LINEAR = "linear"
    RELU = "relu"
    ERF = "erf"

    @classmethod
    def parse(cls, value) -> "Activation":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ConfigError(f"unknown activation {value!r}; expected one of "
                              f"{[a.value for a in cls]}") from None

    @property
    def odd(self) -> bool:
        return self is not Activation.RELU


def phi(act: Activation, z):
    if act is Activation.RELU:
        return np.maximum(z, 0.0)
    if act is Activation.ERF:
        return _erf(z)
    return z


def dphi(act: Activation, z):
    """Derivative of the activation; the ReLU subgradient at 0 is taken as 0."""
    if act is Activation.RELU:
        return (z > 0).astype(float)
    if act is Activation.ERF:
        return (2.0 / math.sqrt(math.pi)) * np.exp(-np.square(z))
    return np.ones_like(z)


@dataclass(frozen=True)
class KernelInputs:
    """Normalized input Gram entries ``x.x/N0``, ``x.x'/N0`` and ``x'.x'/N0``."""

    kxx: float
    kxy: float
    kyy: float

    def __post_init__(self):
        kxx, kxy, kyy = (np.asarray(v, dtype=float) for v in (self.kxx, self.kxy, self.kyy))
        if np.any(kxx <= 0) or np.any(kyy <= 0):
            raise ConfigError("self-Gram entries must be positive")
        if np.any(kxy * kxy > kxx * kyy * (1 + CLAMP_TOL)):
            raise ConfigError("input Gram entries violate Cauchy-Schwarz")

    def swapped(self) -> "KernelInputs":
        return KernelInputs(self.kyy, self.kxy, self.kxx)

    def arrays(self):
        return (np.asarray(self.kxx, dtype=float), np.asarray(self.kxy, dtype=float),
                np.asarray(self.kyy, dtype=float))


def input_gram(x, x_prime, n0=None) -> float:
    """``(1/N0) x . x'``."""
    x = np.asarray(x, dtype=float).ravel()
    x_prime = np.asarray(x_prime, dtype=float).ravel()
    if x.shape != x_prime.shape:
        raise ConfigError(f"dimension mismatch: {x.shape[0]} vs {x_prime.shape[0]}")
    n0 = x.shape[0] if n0 is None else n0
    if n0 != x.shape[0]:
        raise ConfigError(f"vectors have length {x.shape[0]}, expected {n0}")
    return float(x @ x_prime) / n0


def _clamp_unit(arg, what):
    arg = np.asarray(arg, dtype=float)
    if np.any(np.abs(arg) > 1.0 + CLAMP_TOL):
        worst = float(np.max(np.abs(arg)))
        raise NumericalDomainError(f"{what} argument {worst!r} outside [-1, 1]")
    return np.clip(arg, -1.0, 1.0)


def relu_J(theta):
    """Arc-cosine kernel angular factor ``(pi - theta) cos(theta) + sin(theta)``."""
    theta = np.asarray(theta, dtype=float)
    if np.any(theta < -CLAMP_TOL) or np.any(theta > math.pi + CLAMP_TOL):
        raise NumericalDomainError("relu_J needs theta in [0, pi]")
    theta = np.clip(theta, 0.0, math.pi)
    out = (math.pi - theta) * np.cos(theta) + np.sin(theta)
    return out[()] if out.ndim == 0 else out


def _J(theta):
    return (math.pi - theta) * np.cos(theta) + np.sin(theta)


def layer_kernels(act: Activation, L: int, m_ab, m_aa, m_bb, kxx, kxy, kyy):
    """Cross kernels ``K^l`` for l = 0..L and derivative kernels ``Kdot^l`` for l = 1..L.

    ``m_ab`` is the weight covariance between the two times, ``m_aa`` / ``m_bb``
    the equal-time variances at each time. ``kdot[0]`` is ``None``.
    ``Kdot^l`` is the expectation of ``phi'`` over the layer-l pre-activations,
    whose covariance is ``m * K^{l-1}``.
    """
    if L < 1:
        raise ConfigError(f"depth must be >= 1, got {L}")
    k = [np.asarray(kxy, dtype=float)]
    kdot = [None]

    if act is Activation.LINEAR:
        one = np.ones(np.broadcast(m_ab, kxy).shape)
        for _ in range(L):
            k.append(m_ab * k[-1])
            kdot.append(one)
        return k, kdot

    if act is Activation.RELU:
        norm = np.sqrt(kxx * kyy)
        scale = np.sqrt(m_aa * m_bb)
        rho = m_ab / scale
        theta = np.arccos(_clamp_unit(rho * (kxy / norm), "arccos"))
        for l in range(1, L + 1):
            j = _J(theta)
            k.append(norm * scale ** l / (math.pi * 2 ** l) * j)
            kdot.append((math.pi - theta) / (2 * math.pi))
            if l < L:
                theta = np.arccos(_clamp_unit(rho * j / math.pi, "arccos"))
        return k, kdot

    if act is Activation.ERF:
        kaa = np.asarray(kxx, dtype=float)
        kbb = np.asarray(kyy, dtype=float)
        kab = k[0]
        for l in range(1, L + 1):
            sa = 1.0 + 2.0 * m_aa * kaa
            sb = 1.0 + 2.0 * m_bb * kbb
            c = 2.0 * m_ab * kab
            kab = (2.0 / math.pi) * np.arcsin(_clamp_unit(c / np.sqrt(sa * sb), "arcsin"))
            k.append(kab)
            kdot.append((4.0 / math.pi) / np.sqrt(sa * sb - c * c))
            if l < L:
                kaa = (2.0 / math.pi) * np.arcsin(2.0 * m_aa * kaa / sa)
                kbb = (2.0 / math.pi) * np.arcsin(2.0 * m_bb * kbb / sb)
        return k, kdot

    raise ConfigError(f"unsupported activation {act!r}")


def time_covariances(params: DynamicsParams, t, t_prime):
    """``(m(t,t'), m(t,t), m(t',t'))`` broadcast against each other."""
    return prior_cov(params, t, t_prime), prior_cov(params, t, t), prior_cov(params, t_prime, t_prime)


def _scalarize(x):
    x = np.asarray(x)
    return x[()] if x.ndim == 0 else x


def nngp_two_time(act, L: int, params: DynamicsParams, t, t_prime, g: KernelInputs):
    """Two-time NNGP kernel ``K^L(t, t', x, x')``."""
    act = Activation.parse(act)
    k, _ = layer_kernels(act, L, *time_covariances(params, t, t_prime), *g.arrays())
    return _scalarize(k[L])


def deriv_two_time(act, L: int, params: DynamicsParams, t, t_prime, g: KernelInputs):
    """Two-time derivative kernel ``Kdot^L(t, t', x, x')``."""
    act = Activation.parse(act)
    _, kdot = layer_kernels(act, L, *time_covariances(params, t, t_prime), *g.arrays())
    return _scalarize(kdot[L])


def gp_diag(act, L: int, sigma2: float, kxx):
    """Equal-input equilibrium NNGP kernel ``K_GP^L(x, x)`` (prior variance sigma2)."""
    act = Activation.parse(act)
    kxx = np.asarray(kxx, dtype=float)
    k, _ = layer_kernels(act, L, sigma2, sigma2, sigma2, kxx, kxx, kxx)
    return _scalarize(k[L])


def mean_kernel(act, L: int, sigma2: float, g: KernelInputs):
    """Product-of-means kernel ``(1/N_L) <x^L(x)> . <x^L(x')>`` under W ~ N(0, sigma2).

    Odd activations give exactly zero. For ReLU each unit of layer L sees a
    centred Gaussian pre-activation of variance ``sigma2 * K_GP^{L-1}(x, x)``,
    whose rectified mean is ``sqrt(variance / (2 pi))``.
    """
    act = Activation.parse(act)
    kxx, kxy, kyy = g.arrays()
    if act.odd:
        return _scalarize(np.zeros(np.broadcast(kxx, kxy, kyy).shape))
    if L == 1:
        vx, vy = kxx, kyy
    else:
        vx, vy = gp_diag(act, L - 1, sigma2, kxx), gp_diag(act, L - 1, sigma2, kyy)
    out = sigma2 * np.sqrt(vx * vy) / (2 * math.pi)
    return _scalarize(np.broadcast_to(out, np.broadcast(out, kxy).shape).copy())


def _bivariate(rng, n, saa, sab, sbb):
    if saa <= 0 or sbb <= 0:
        raise NumericalDomainError("non-positive pre-activation variance")
    rho = sab / math.sqrt(saa * sbb)
    if abs(rho) > 1 + CLAMP_TOL:
        raise NumericalDomainError(f"time covariance is not PSD (correlation {rho!r})")
    rho = min(1.0, max(-1.0, rho))
    u = rng.standard_normal(n)
    v = rng.standard_normal(n)
    za = math.sqrt(saa) * u
    zb = math.sqrt(sbb) * (rho * u + math.sqrt(max(0.0, 1.0 - rho * rho)) * v)
    return za, zb


def mc_kernel_oracle(act, L: int, params: DynamicsParams, t, t_prime, g: KernelInputs,
                     n_samples: int = 10 ** 6, seed: int = 0, quantity: str = "k",
                     n_batches: int = 20):
    """Monte Carlo estimate of ``K^L`` (``quantity="k"``) or ``Kdot^L`` (``"kdot"``).

    Pre-activation pairs ``(z_t(x), z_t'(x'))`` are drawn layer by layer from the
    bivariate Gaussian implied by the weight covariances and the previous
    layer's (sampled) kernels. The samples are split into independent batches,
    each running the whole layer chain, and the standard error is taken over
    batch means so that it includes the noise of the intermediate layers.

    Returns ``(estimate, stderr)``.
    """
    act = Activation.parse(act)
    if n_samples < 1000:
        raise ConfigError("mc_kernel_oracle needs at least 1000 samples")
    if quantity not in ("k", "kdot"):
        raise ConfigError(f"quantity must be 'k' or 'kdot', got {quantity!r}")
    m_ab, m_aa, m_bb = (float(v) for v in time_covariances(params, t, t_prime))
    kxx, kxy, kyy = (float(v) for v in g.arrays())
    rng = np.random.default_rng(seed)
    per_batch = n_samples // n_batches
    means = np.empty(n_batches)
    for b in range(n_batches):
        saa, sab, sbb = m_aa * kxx, m_ab * kxy, m_bb * kyy
        for l in range(1, L + 1):
            za, zb = _bivariate(rng, per_batch, saa, sab, sbb)
            if l == L:
                if quantity == "k":
                    vals = phi(act, za) * phi(act, zb)
                else:
                    vals = dphi(act, za) * dphi(act, zb)
                means[b] = vals.mean()
            else:
                pa, pb = phi(act, za), phi(act, zb)
                saa = m_aa * np.mean(pa * pa)
                sbb = m_bb * np.mean(pb * pb)
                sab = m_ab * np.mean(pa * pb)
    return float(means.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))


def mc_mean_kernel(act, L: int, sigma2: float, g: KernelInputs, n_samples: int = 10 ** 6,
                   seed: int = 0, n_batches: int = 20):
    """Monte Carlo estimate of :func:`mean_kernel`; returns ``(estimate, stderr)``."""
    act = Activation.parse(act)
    kxx, _, kyy = (float(v) for v in g.arrays())
    rng = np.random.default_rng(seed)
    per_batch = n_samples // n_batches

    def unit_mean(kin):
        var = sigma2 * kin
        for l in range(1, L + 1):
            z = math.sqrt(var) * rng.standard_normal(per_batch)
            if l == L:
                return phi(act, z).mean()
            var = sigma2 * np.mean(phi(act, z) ** 2)

    means = np.array([unit_mean(kxx) * unit_mean(kyy) for _ in range(n_batches)])
    return float(means.mean()), float(means.std(ddof=1) / math.sqrt(n_batches))
