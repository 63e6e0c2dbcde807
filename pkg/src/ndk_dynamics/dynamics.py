"""Mean-predictor dynamics: the NDK integral equations and their limits.

The training predictor obeys the Volterra equation of the second kind

    f(t) = int_0^t Kd(t, t') (Y - f(t')) dt'

and test predictions are the same integral with the test kernel rows. It is
discretized with a strictly causal left-endpoint rule on a (possibly
non-uniform) grid ``t_0 = 0 < t_1 < ...``::

    f_n = sum_{m<n} (t_{m+1} - t_m) Kd(t_n, t_m) (Y - f_m)

which is explicit, first order, and deterministic.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional

import numpy as np

from .errors import ConfigError, DivergenceError, SingularKernelError
from .kernels import Activation, KernelInputs
from .ndk import NdkParts, ndk_from_cov, nngp_equilibrium_kernel, ntk, stationary_ndk_parts
from .prior import DynamicsParams, decay_factor, prior_cov

# Above this many cached lag entries the stationary lattice cache is skipped.
_LATTICE_CACHE_LIMIT = 20_000_000


@dataclass
class LearningProblem:
    """A training set (through its Gram matrix), labels and network/dynamics settings.

    ``test_gram[q, mu]`` holds ``x_q . x_mu / N0`` and ``test_self[q]`` the test
    self-Gram. ``test_targets`` is optional and only used for error metrics.
    """

    train_gram: np.ndarray
    targets: np.ndarray
    act: Activation
    L: int
    params: DynamicsParams
    test_gram: np.ndarray = None
    test_self: np.ndarray = None
    test_targets: Optional[np.ndarray] = None

    def __post_init__(self):
        self.act = Activation.parse(self.act)
        self.train_gram = np.atleast_2d(np.asarray(self.train_gram, dtype=float))
        self.targets = np.asarray(self.targets, dtype=float).ravel()
        P = self.targets.shape[0]
        if self.train_gram.shape != (P, P):
            raise ConfigError(f"train Gram has shape {self.train_gram.shape}, expected ({P}, {P})")
        if not np.allclose(self.train_gram, self.train_gram.T, rtol=0, atol=1e-12):
            raise ConfigError("train Gram must be symmetric")
        if np.any(np.diag(self.train_gram) <= 0):
            raise ConfigError("train Gram diagonal must be positive")
        if np.linalg.eigvalsh(self.train_gram).min() < -1e-8 * P:
            raise ConfigError("train Gram is not positive semidefinite")
        if not np.all(np.isfinite(self.targets)):
            raise ConfigError("targets must be finite")
        if self.L < 1:
            raise ConfigError(f"depth must be >= 1, got {self.L}")
        if self.test_gram is None:
            self.test_gram = np.zeros((0, P))
            self.test_self = np.zeros(0)
        self.test_gram = np.asarray(self.test_gram, dtype=float).reshape(-1, P)
        Q = self.test_gram.shape[0]
        self.test_self = (np.ones(Q) if self.test_self is None
                          else np.asarray(self.test_self, dtype=float).reshape(Q))
        if self.test_targets is not None:
            self.test_targets = np.asarray(self.test_targets, dtype=float).reshape(Q)

    @property
    def P(self) -> int:
        return self.targets.shape[0]

    @property
    def Q(self) -> int:
        return self.test_gram.shape[0]

    def with_params(self, params: DynamicsParams) -> "LearningProblem":
        return LearningProblem(self.train_gram, self.targets, self.act, self.L, params,
                               self.test_gram, self.test_self, self.test_targets)

    def train_inputs(self):
        d = np.diag(self.train_gram)
        return d[:, None], self.train_gram, d[None, :]

    def test_inputs(self):
        d = np.diag(self.train_gram)
        return self.test_self[:, None], self.test_gram, d[None, :]

    def kernel_matrices(self, kernel: Callable[[KernelInputs], np.ndarray]):
        """Apply a kernel function ``g -> value`` to the (train, test) input pairs."""
        return (np.asarray(kernel(KernelInputs(*self.train_inputs()))),
                np.asarray(kernel(KernelInputs(*self.test_inputs()))).reshape(self.Q, self.P))


@dataclass
class Trajectory:
    """Mean predictor on a time grid.

    ``f_train[n]`` is the P-vector at ``times[n]``; ``f_test[n]`` holds one value
    per test point.
    """

    times: np.ndarray
    f_train: np.ndarray
    f_test: np.ndarray
    targets: np.ndarray
    params: DynamicsParams
    ntk_crossover: Optional[float] = None
    meta: dict = field(default_factory=dict)

    @property
    def weights(self) -> np.ndarray:
        return quadrature_weights(self.times)

    @property
    def residual(self) -> np.ndarray:
        return self.targets[None, :] - self.f_train

    def index_of(self, t: float) -> int:
        """Index of the grid point equal to ``t`` (within rounding)."""
        n = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[n] - t) > 1e-9 * max(1.0, abs(t)):
            raise ConfigError(f"time {t} is not on the solver grid")
        return n


def time_grid(params: DynamicsParams) -> np.ndarray:
    """Uniform grid at ``dt``, or the two-scale grid when ``dt_coarse`` is set.

    The two-scale grid uses ``dt`` on ``[0, t_switch]`` and ``dt_coarse`` after.
    """
    dt, t_max = params.dt, params.t_max
    if params.dt_coarse is None or params.t_switch >= t_max:
        n = int(round(t_max / dt))
        return dt * np.arange(n + 1)
    n_fine = int(round(params.t_switch / dt))
    fine = dt * np.arange(n_fine + 1)
    n_coarse = int(round((t_max - fine[-1]) / params.dt_coarse))
    coarse = fine[-1] + params.dt_coarse * np.arange(1, n_coarse + 1)
    return np.concatenate([fine, coarse])


def stability_grid(params: DynamicsParams, rate_bound: Callable[[float], float],
                   dt_max: Optional[float] = None, safety: float = 1.0) -> np.ndarray:
    """Non-uniform grid whose step never exceeds ``safety / rate_bound(t)``.

    The explicit causal rule behaves like forward Euler on the fast modes, so it
    needs ``step * lambda_max(Kd(t,t)) < 2``. Large initial variances inflate
    the equal-time NDK until the transient decays. Steps are otherwise those of
    :func:`time_grid`: ``params.dt`` before ``t_switch`` and ``dt_max``
    (default ``params.dt_coarse`` or ``params.dt``) after.
    """
    dt_max = dt_max or params.dt_coarse or params.dt
    times = [0.0]
    t = 0.0
    eps = 1e-12 * max(1.0, params.t_max)
    while t < params.t_max - eps:
        h = params.dt if t < params.t_switch - eps else dt_max
        h = min(h, safety / max(rate_bound(t), 1e-300))
        if t < params.t_switch - eps:
            h = min(h, params.t_switch - t)
        t = min(t + h, params.t_max)
        times.append(t)
    return np.asarray(times)


def equal_time_rate(params: DynamicsParams, lam_of_m: Callable[[float], float],
                    n_nodes: int = 65) -> Callable[[float], float]:
    """Upper bound on the stiffness ``lambda_max(Kd(t,t))`` as a function of time.

    At equal times the NDK is the NTK with weight variance ``m(t,t)``, which
    moves monotonically from sigma0_2 to sigma2. ``lam_of_m`` is tabulated on
    that interval and the larger bracketing node value is returned.
    """
    lo, hi = sorted((params.sigma0_2, params.sigma2))
    nodes = np.linspace(lo, hi, n_nodes)
    lam = np.array([lam_of_m(m) for m in nodes])
    upper = np.maximum(lam, np.concatenate([lam[1:], lam[-1:]]))

    def rate(t):
        m = prior_cov(params, t, t)
        j = min(int(np.searchsorted(nodes, m, side="right")) - 1, n_nodes - 1)
        return float(upper[max(j, 0)])
    return rate


def auto_grid(params: DynamicsParams, lam_of_m: Callable[[float], float],
              safety: float = 1.5) -> np.ndarray:
    """:func:`time_grid`, refined by :func:`stability_grid` where it would be unstable."""
    times = time_grid(params)
    if params.stationary:
        lam = lam_of_m(params.sigma2)
        if np.max(np.diff(times)) * lam <= safety:
            return times
        rate = lambda t: lam  # noqa: E731
    else:
        rate = equal_time_rate(params, lam_of_m)
        if all(h * rate(t) <= safety for h, t in zip(np.diff(times), times)):
            return times
    return stability_grid(params, rate, safety=safety)


def quadrature_weights(times: np.ndarray) -> np.ndarray:
    w = np.empty_like(times)
    w[:-1] = np.diff(times)
    w[-1] = 0.0
    return w


class KernelTable:
    """NDK rows ``Kd(t_n, t_m)`` for m < n over all train/test input pairs.

    When the prior is stationary and the grid lies on a lattice of the base
    step, the kernel depends only on the integer lag and is computed once per
    lag (Toeplitz in time). Otherwise each row is evaluated on demand.
    """

    def __init__(self, problem: LearningProblem, times: np.ndarray, use_lattice: bool = True):
        self.problem = problem
        self.times = np.asarray(times, dtype=float)
        self.params = problem.params
        self._tr = problem.train_inputs()
        self._te = problem.test_inputs()
        self._lattice = None
        if use_lattice and self.params.stationary:
            self._lattice = self._build_lattice()

    def _build_lattice(self):
        h = self.params.dt
        idx = np.rint(self.times / h)
        if np.max(np.abs(idx * h - self.times)) > 1e-9 * max(1.0, self.times[-1]):
            return None
        n_lags = int(idx[-1]) + 1
        P, Q = self.problem.P, self.problem.Q
        if n_lags * P * (P + Q) > _LATTICE_CACHE_LIMIT:
            return None
        lags = h * np.arange(n_lags)
        act, L = self.problem.act, self.problem.L
        ktr = stationary_ndk_parts(act, L, self.params, lags[:, None, None],
                                   KernelInputs(*self._tr)).kd
        kte = stationary_ndk_parts(act, L, self.params, lags[:, None, None],
                                   KernelInputs(*self._te)).kd
        return idx.astype(np.int64), ktr, kte.reshape(n_lags, Q, P)

    def parts(self, t, t_prime, which="train") -> NdkParts:
        """NDK parts between time(s) ``t`` and array ``t_prime`` (leading axis)."""
        t = np.asarray(t, dtype=float)
        tp = np.asarray(t_prime, dtype=float)[:, None, None]
        kxx, kxy, kyy = self._tr if which == "train" else self._te
        p = self.params
        m_ab = prior_cov(p, t, tp)
        m_aa = prior_cov(p, t, t)
        m_bb = prior_cov(p, tp, tp)
        return ndk_from_cov(self.problem.act, self.problem.L, m_ab, m_aa, m_bb,
                            decay_factor(p, t, tp), kxx, kxy, kyy)

    def row(self, n: int):
        """``(Kd_train[m], Kd_test[m])`` for m = 0..n-1, shapes (n,P,P) and (n,Q,P)."""
        if self._lattice is not None:
            idx, ktr, kte = self._lattice
            lag = idx[n] - idx[:n]
            return ktr[lag], kte[lag]
        t = self.times[n]
        tp = self.times[:n]
        ktr = self.parts(t, tp, "train").kd
        kte = self.parts(t, tp, "test").kd
        P, Q = self.problem.P, self.problem.Q
        return (np.broadcast_to(ktr, (n, P, P)), np.broadcast_to(kte, (n, Q, P)))


def _integrate(times, Y, row, Q):
    """Causal left-endpoint solve; ``row(n)`` returns kernel rows against m < n."""
    N = times.shape[0]
    P = Y.shape[0]
    w = quadrature_weights(times)
    f = np.zeros((N, P))
    ft = np.zeros((N, Q))
    wv = np.zeros((N, P))
    wv[0] = w[0] * Y
    for n in range(1, N):
        ktr, kte = row(n)
        f[n] = np.einsum("mij,mj->i", ktr, wv[:n])
        if Q:
            ft[n] = np.einsum("mij,mj->i", kte, wv[:n])
        if not (np.all(np.isfinite(f[n])) and np.all(np.isfinite(ft[n]))):
            raise DivergenceError(f"non-finite predictor at time index {n} (t={times[n]})",
                                  index=n)
        wv[n] = w[n] * (Y - f[n])
    return f, ft


def ntk_crossover_time(times, f_train, targets, T, eq_residual: float = 0.0) -> Optional[float]:
    """End of the gradient-driven phase: first time the training residual is O(T).

    The threshold is ``10 * max(T, eq_residual)`` on ``max|Y - f_train|``, where
    ``eq_residual`` is the residual of the NNGP equilibrium itself. For deep
    ReLU nets the kernels shrink like ``(sigma2/2)^L``, the equilibrium residual
    ``~T/k`` then exceeds ``T``, and a bare ``10 T`` would never be reached.
    """
    if T <= 0:
        return None
    res = np.max(np.abs(targets[None, :] - f_train), axis=1)
    hit = np.nonzero(res <= 10.0 * max(T, eq_residual))[0]
    return float(times[hit[0]]) if hit.size else None


def _train_ntk_lambda(problem: LearningProblem, m: float) -> float:
    K = np.asarray(ntk(problem.act, problem.L, m, KernelInputs(*problem.train_inputs())))
    return float(np.linalg.eigvalsh(K).max())


def solve_mean_predictor(problem: LearningProblem, times: Optional[np.ndarray] = None,
                         use_lattice: bool = True) -> Trajectory:
    """Solve the mean-predictor integral equations on ``times``.

    The default grid is :func:`auto_grid`: the configured uniform or two-scale
    grid, unless the explicit rule would be unstable on it.
    """
    if times is None:
        times = auto_grid(problem.params, lambda m: _train_ntk_lambda(problem, m))
    times = np.asarray(times, dtype=float)
    if times[0] != 0.0 or np.any(np.diff(times) <= 0):
        raise ConfigError("time grid must start at 0 and be strictly increasing")
    table = KernelTable(problem, times, use_lattice=use_lattice)
    f, ft = _integrate(times, problem.targets, table.row, problem.Q)
    eq_res = 0.0
    if problem.params.T > 0:
        eq_res = float(np.max(np.abs(problem.targets - nngp_equilibrium_predictor(problem)[0])))
    return Trajectory(times, f, ft, problem.targets.copy(), problem.params,
                      ntk_crossover_time(times, f, problem.targets, problem.params.T, eq_res))


def _synthetic_inputs(O_test):
    diag = KernelInputs(1.0, 1.0, 1.0)
    off = KernelInputs(1.0, 0.0, 1.0)
    test = KernelInputs(1.0, O_test, 1.0)
    return diag, off, test


def solve_synthetic_reduced(act, L: int, params: DynamicsParams, O_test: float = 0.75,
                            times: Optional[np.ndarray] = None) -> Trajectory:
    """Scalar reduction of the orthogonal synthetic task.

    With orthonormal training inputs and balanced +-1 labels the P-vector
    equation collapses to ``f = int (kd_diag - kd_off)(1 - f)`` for the +1
    training points and ``f_test = int (kd_test - kd_off)(1 - f)``, independent
    of P and N0. The returned trajectory has one training and one test column.
    """
    act = Activation.parse(act)
    if not 0.0 < O_test < 1.0:
        raise ConfigError(f"O_test must lie in (0, 1), got {O_test}")
    diag, off, test = _synthetic_inputs(O_test)
    if times is None:
        times = auto_grid(params, lambda m: float(ntk(act, L, m, diag) - ntk(act, L, m, off)))
    times = np.asarray(times, dtype=float)
    stationary = params.stationary
    if stationary:
        h = params.dt
        idx = np.rint(times / h).astype(np.int64)
        on_lattice = np.max(np.abs(idx * h - times)) <= 1e-9 * max(1.0, times[-1])
        stationary = on_lattice and idx[-1] < 50_000_000
    if stationary:
        lags = h * np.arange(idx[-1] + 1)
        kd = {name: stationary_ndk_parts(act, L, params, lags, g).kd
              for name, g in (("diag", diag), ("off", off), ("test", test))}
        tr_lag = (kd["diag"] - kd["off"])[:, None, None]
        te_lag = (kd["test"] - kd["off"])[:, None, None]

        def row(n):
            lag = idx[n] - idx[:n]
            return tr_lag[lag], te_lag[lag]
    else:
        def row(n):
            t, tp = times[n], times[:n]
            m = (prior_cov(params, t, tp), prior_cov(params, t, t), prior_cov(params, tp, tp))
            e = decay_factor(params, t, tp)
            kdiag, koff, ktest = (ndk_from_cov(act, L, *m, e, *g.arrays()).kd
                                  for g in (diag, off, test))
            return (kdiag - koff)[:, None, None], (ktest - koff)[:, None, None]

    Y = np.ones(1)
    f, ft = _integrate(times, Y, row, 1)
    k_gp = float(nngp_equilibrium_kernel(act, L, params.sigma2, diag)
                 - nngp_equilibrium_kernel(act, L, params.sigma2, off))
    eq_res = params.rate / (k_gp + params.rate)
    return Trajectory(times, f, ft, Y, params, ntk_crossover_time(times, f, Y, params.T, eq_res),
                      meta={"reduced": True, "O_test": O_test, "act": act.value, "L": L})


def _check_spd(K, what):
    evals, evecs = np.linalg.eigh(K)
    if evals.min() < 1e-12 * max(evals.max(), 0.0) or evals.max() <= 0:
        raise SingularKernelError(f"{what} is singular (eigenvalues {evals.min():.3g}"
                                  f" .. {evals.max():.3g})")
    return evals, evecs


def ntk_matrices(problem: LearningProblem):
    return problem.kernel_matrices(lambda g: ntk(problem.act, problem.L,
                                                 problem.params.sigma0_2, g))


def gp_matrices(problem: LearningProblem, sigma2: Optional[float] = None):
    s2 = problem.params.sigma2 if sigma2 is None else sigma2
    return problem.kernel_matrices(lambda g: nngp_equilibrium_kernel(problem.act, problem.L, s2, g))


def ntk_closed_form(problem: LearningProblem, t):
    """Gradient-phase predictor with the kernel frozen at the NTK.

    ``f_train = (I - exp(-K t)) Y`` and ``f_test = k^T K^{-1} (I - exp(-K t)) Y``
    via the eigendecomposition of the train NTK. ``t`` may be an array; ``inf``
    gives the NTK equilibrium.
    """
    K, k = ntk_matrices(problem)
    evals, evecs = _check_spd(K, "train NTK")
    t = np.asarray(t, dtype=float)
    coeff = evecs.T @ problem.targets
    with np.errstate(over="ignore"):
        relax = -np.expm1(-np.multiply.outer(t, evals))
    f_train = (relax * coeff) @ evecs.T
    f_test = (relax * coeff / evals) @ (k @ evecs).T
    return f_train, f_test


def nngp_equilibrium_predictor(problem: LearningProblem):
    """Posterior-mean (kernel ridge) predictor ``k_GP^T (I T/sigma2 + K_GP)^{-1} Y``."""
    K, k = gp_matrices(problem)
    A = K + np.eye(problem.P) * problem.params.rate
    if problem.params.T == 0:
        _check_spd(A, "train NNGP kernel")
    alpha = np.linalg.solve(A, problem.targets)
    return K @ alpha, k @ alpha


@dataclass(frozen=True)
class EarlyStopping:
    t_star: float
    delta_tT: float
    index: int
    test_mse: np.ndarray


def find_early_stopping(traj: Trajectory, test_targets, rtol: float = 1e-9) -> EarlyStopping:
    """Time of minimal mean squared test error, and its distance from ``t_max`` times T.

    ``t_star`` is the first minimizer, except that a minimum within ``rtol``
    (relative) of the final error counts as no early stopping (``t_star = t_max``),
    so rounding wobble near equilibrium is not reported as an optimum.
    """
    y = np.asarray(test_targets, dtype=float).reshape(1, -1)
    mse = np.mean((traj.f_test - y) ** 2, axis=1)
    n = int(np.argmin(mse))
    if mse[-1] - mse[n] <= rtol * abs(mse[-1]):
        n = mse.size - 1
    t_star = float(traj.times[n])
    return EarlyStopping(t_star, (float(traj.times[-1]) - t_star) * traj.params.T, n, mse)


def equilibria_compare(problems: Mapping[tuple, LearningProblem]) -> list[dict]:
    """Test MSE of the NTK and NNGP equilibrium predictors for each keyed problem.

    Keys are ``(dataset, P, L)`` tuples; problems must carry ``test_targets``.
    """
    rows = []
    for key, problem in problems.items():
        if problem.test_targets is None:
            raise ConfigError(f"problem {key} has no test targets")
        _, f_ntk = ntk_closed_form(problem, math.inf)
        _, f_gp = nngp_equilibrium_predictor(problem)
        y = problem.test_targets
        dataset, P, L = key
        rows.append({"dataset": dataset, "P": P, "L": L,
                     "ntk_mse": float(np.mean((f_ntk - y) ** 2)),
                     "nngp_mse": float(np.mean((f_gp - y) ** 2))})
    return rows
