"""Representational drift: predictors with the readout frozen at time t0.

After ``t0`` the learning signal is switched off and the hidden weights follow
the prior process while the readout stays at its ``t0`` value. The mean output
is then an integral over the pre-freeze history::

    f_drift(x, t) = sum_{t' < t0} w(t') [m(t0, t') H(t, t') + exp(-r (t0 - t')) K^L(t, t')] v(t')

with ``H = Kdot^L Kd^{L-1}`` the hidden-weight part of the NDK, ``v = Y - f_train``
and ``r = T / sigma2``. This is ``exp(r (t - t0))`` times the NDK integral, the
factor undoing the readout decay that no longer happens once it is frozen.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .dynamics import KernelTable, LearningProblem, Trajectory, gp_matrices, quadrature_weights
from .errors import ConfigError, DegenerateInputError
from .kernels import KernelInputs
from .ndk import stationary_ndk_parts
from .prior import decay_factor, prior_cov

# t0 >= EQUILIBRIUM_FREEZE * sigma2 / T selects the stationary (equilibrium) path.
EQUILIBRIUM_FREEZE = 5.0
TIE_RTOL = 1e-12


@dataclass(frozen=True)
class DriftConfig:
    """Freeze time ``t0`` and the evaluation times (all ``>= t0``) for one problem."""

    t0: float
    t_grid: np.ndarray
    problem: LearningProblem

    def __post_init__(self):
        t_grid = np.atleast_1d(np.asarray(self.t_grid, dtype=float))
        object.__setattr__(self, "t_grid", t_grid)
        if np.any(np.diff(t_grid) < 0):
            raise ConfigError("drift evaluation times must be nondecreasing")
        if t_grid.size and t_grid[0] < self.t0:
            raise ConfigError(f"drift evaluation time {t_grid[0]} precedes t0={self.t0}")

    @property
    def at_equilibrium(self) -> bool:
        p = self.problem.params
        return p.T > 0 and self.t0 >= EQUILIBRIUM_FREEZE * p.sigma2 / p.T


def _weighted_residual(traj: Trajectory) -> np.ndarray:
    # Same products the solver accumulates, so sums reproduce it bit for bit.
    w = quadrature_weights(traj.times)
    return w[:, None] * (traj.targets[None, :] - traj.f_train)


def _contract(K, wv):
    return np.einsum("mij,mj->i", K, wv)


def _check_which(which):
    if which not in ("train", "test"):
        raise ConfigError(f"which must be 'train' or 'test', got {which!r}")


def drift_predictor(cfg: DriftConfig, traj: Trajectory, which: str = "test",
                    path: str = "auto") -> np.ndarray:
    """Mean frozen-readout predictor at each ``cfg.t_grid`` time.

    Returns an array ``(len(t_grid), Q)`` (or ``P`` columns with ``which="train"``).
    ``path`` is ``"general"`` (integral over the solved history), ``"equilibrium"``
    (stationary closed form with lag ``t - t0``) or ``"auto"``, which uses the
    equilibrium form when ``t0 >= 5 sigma2 / T``. At ``t == t0`` the live
    trajectory value is always reproduced exactly.
    """
    _check_which(which)
    if path not in ("auto", "general", "equilibrium"):
        raise ConfigError(f"unknown drift path {path!r}")
    problem = cfg.problem
    n0 = traj.index_of(cfg.t0)
    t0 = traj.times[n0]
    live = traj.f_train if which == "train" else traj.f_test
    use_eq = path == "equilibrium" or (path == "auto" and cfg.at_equilibrium)
    width = problem.P if which == "train" else problem.Q
    out = np.empty((cfg.t_grid.size, width))
    if use_eq:
        later = cfg.t_grid > t0
        out[~later] = live[n0]
        if later.any():
            out[later] = drift_predictor_equilibrium(problem, cfg.t_grid[later] - t0, which)
        return out
    table = KernelTable(problem, traj.times)
    wv = _weighted_residual(traj)[:n0]
    tp = traj.times[:n0]
    p = problem.params
    m0 = prior_cov(p, t0, tp)[:, None, None]
    e0 = decay_factor(p, t0, tp)[:, None, None]
    for i, t in enumerate(cfg.t_grid):
        if t == t0:
            out[i] = live[n0]
            continue
        parts = table.parts(t, tp, which)
        out[i] = _contract(m0 * parts.hidden + e0 * parts.readout, wv)
    return out


def pure_prior_predictor(cfg: DriftConfig, traj: Trajectory, which: str = "test") -> np.ndarray:
    """Mean predictor when every weight, readout included, follows the prior after t0.

    This is the bare NDK integral over ``[0, t0]``; it decays to chance on the
    ``1/T`` time scale.
    """
    _check_which(which)
    n0 = traj.index_of(cfg.t0)
    table = KernelTable(cfg.problem, traj.times)
    wv = _weighted_residual(traj)[:n0]
    tp = traj.times[:n0]
    return np.stack([_contract(table.parts(t, tp, which).kd, wv) for t in cfg.t_grid])


def _gp_weights(problem: LearningProblem) -> np.ndarray:
    K, _ = gp_matrices(problem)
    return np.linalg.solve(K + problem.params.rate * np.eye(problem.P), problem.targets)


def drift_predictor_equilibrium(problem: LearningProblem, delta, which: str = "test") -> np.ndarray:
    """``k^L(x, delta)^T (I T/sigma2 + K_GP)^{-1} Y`` with the stationary two-time kernel.

    ``delta`` may be an array of lags (``inf`` allowed); returns ``(len(delta), width)``
    or a 1-D array for scalar ``delta``.
    """
    _check_which(which)
    delta = np.asarray(delta, dtype=float)
    alpha = _gp_weights(problem)
    inputs = problem.train_inputs() if which == "train" else problem.test_inputs()
    lags = np.atleast_1d(delta)
    with np.errstate(over="ignore"):
        k = stationary_ndk_parts(problem.act, problem.L, problem.params, lags[:, None, None],
                                 KernelInputs(*inputs)).readout
    width = problem.P if which == "train" else problem.Q
    k = np.broadcast_to(k, (lags.size, width, problem.P))
    out = k @ alpha
    return out[0] if delta.ndim == 0 else out


def temporal_correlation(problem: LearningProblem, traj: Trajectory, t0: float, t: float,
                         which: str = "test", printed_decay: bool = False) -> np.ndarray:
    """Overlap between the readout at ``t0`` and the hidden representation at ``t``.

    For ``t0 < t`` the frozen-readout integral over ``[0, t0]`` plus the
    hidden-weight kicks received during ``[t0, t)``, weighted by ``m(t', t0)``.
    For ``t0 > t`` the predictor at ``t`` decayed to ``t0`` plus the readout
    kicks received during ``[t, t0)``, each decayed by ``exp(-r (t0 - t'))``.
    ``printed_decay=True`` uses ``exp(-r (t0 - t))`` for the latter instead.
    """
    _check_which(which)
    n0, n = traj.index_of(t0), traj.index_of(t)
    t0, t = traj.times[n0], traj.times[n]
    live = traj.f_train if which == "train" else traj.f_test
    if n == n0:
        return live[n].copy()
    p = problem.params
    table = KernelTable(problem, traj.times)
    wv = _weighted_residual(traj)
    if t > t0:
        cfg = DriftConfig(t0, [t], problem)
        frozen = drift_predictor(cfg, traj, which, path="general")[0]
        tp = traj.times[n0:n]
        hidden = table.parts(t, tp, which).hidden
        m = prior_cov(p, tp, t0)[:, None, None]
        return frozen + _contract(m * hidden, wv[n0:n])
    tp = traj.times[n:n0]
    readout = table.parts(t, tp, which).readout
    if printed_decay:
        e = np.full((tp.size, 1, 1), decay_factor(p, t0, t))
    else:
        e = decay_factor(p, t0, tp)[:, None, None]
    return decay_factor(p, t0, t) * live[n] + _contract(e * readout, wv[n:n0])


@dataclass(frozen=True)
class ThresholdFit:
    threshold: float
    sign: int
    accuracy: float


def fit_threshold(values, labels) -> ThresholdFit:
    """Best 1-D threshold classifier ``sign * (value - threshold)`` on training data.

    Both orientations are tried; among thresholds with minimal training error
    the one closest to the midpoint of the two class means is kept. Values
    closer than ``TIE_RTOL`` (relative) are treated as equal.
    """
    v = np.asarray(values, dtype=float).ravel()
    y = np.asarray(labels).ravel()
    if v.shape != y.shape:
        raise ConfigError("values and labels must have the same length")
    pos = y > 0
    if pos.all() or not pos.any():
        raise DegenerateInputError("threshold classifier needs both classes")
    order = np.argsort(v, kind="stable")
    vs, ps = v[order], pos[order]
    n = v.size
    # split k puts sorted entries [0, k) below the threshold
    pos_below = np.concatenate([[0], np.cumsum(ps)])
    k = np.arange(n + 1)
    neg_below = k - pos_below
    err_up = pos_below + (neg_below[-1] - neg_below)     # predict +1 above
    err_down = neg_below + (pos_below[-1] - pos_below)   # predict +1 below
    # gaps at rounding level are ties, not information
    tol = TIE_RTOL * max(1.0, float(np.max(np.abs(vs))))
    valid = np.ones(n + 1, dtype=bool)
    valid[1:n] = vs[1:] - vs[:-1] > tol
    best = min(err_up[valid].min(), err_down[valid].min())
    lo = np.concatenate([[vs[0] - 1.0], vs])
    hi = np.concatenate([vs, [vs[-1] + 1.0]])
    thr = 0.5 * (lo + hi)
    mid = 0.5 * (v[pos].mean() + v[~pos].mean())
    cand = [(abs(thr[i] - mid), -s, thr[i]) for s, err in ((1, err_up), (-1, err_down))
            for i in np.nonzero(valid & (err == best))[0]]
    _, neg_sign, threshold = min(cand)
    return ThresholdFit(float(threshold), -neg_sign, 1.0 - best / n)


def drift_readout_accuracy(train_drift_values, labels) -> np.ndarray:
    """Training accuracy of a refitted threshold classifier at every time row."""
    values = np.atleast_2d(np.asarray(train_drift_values, dtype=float))
    return np.array([fit_threshold(row, labels).accuracy for row in values])


def drift_histograms(train_drift_values, labels, bin_width: float = 0.05,
                     edges: Optional[np.ndarray] = None):
    """Per-time histograms of drifted training predictors, split by class.

    Returns ``(edges, counts_pos, counts_neg)`` with counts of shape
    ``(n_times, n_bins)``. Default edges are multiples of ``bin_width``
    covering all values.
    """
    values = np.atleast_2d(np.asarray(train_drift_values, dtype=float))
    pos = np.asarray(labels).ravel() > 0
    if edges is None:
        lo = np.floor(values.min() / bin_width)
        hi = np.ceil(values.max() / bin_width)
        edges = bin_width * np.arange(lo, max(hi, lo + 1) + 1)
    counts_pos = np.stack([np.histogram(row[pos], edges)[0] for row in values])
    counts_neg = np.stack([np.histogram(row[~pos], edges)[0] for row in values])
    return edges, counts_pos, counts_neg
