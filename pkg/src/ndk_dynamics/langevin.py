"""Finite-width fully connected networks trained by discrete Langevin dynamics.

The network is ``f(x) = a . x^L / sqrt(N_L)`` with ``x^l = phi(W^l x^{l-1} / sqrt(N_{l-1}))``
and the energy ``E = 1/2 sum_mu (f(x_mu) - y_mu)^2 + (T / 2 sigma2) |Theta|^2``.
One step of size ``lr`` is::

    Theta <- Theta - lr * grad E + sqrt(2 T lr) * xi

Replicas are stored batched along a leading axis. The first-layer weights only
act on the span of the inputs, and their component orthogonal to it evolves
independently of everything observable, so by default they are kept in an
orthonormal basis of that span (exact in distribution, much cheaper).
"""
from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DivergenceError
from .kernels import Activation, dphi, phi
from .prior import DynamicsParams

DIVERGENCE_LIMIT = 1e3
_INIT_STREAM, _NOISE_STREAM = 0, 1


class Mode(str, Enum):
    FULL = "full"
    FROZEN_READOUT = "frozen_readout"
    PURE_PRIOR = "pure_prior"

    @classmethod
    def parse(cls, value) -> "Mode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower().replace("-", "_"))
        except ValueError:
            raise ConfigError(f"unknown simulation mode {value!r}") from None


@dataclass
class SimConfig:
    """Ensemble simulation settings.

    ``widths = (N0, N1, ..., NL)``. ``t0`` is the freeze time for the drift
    modes: afterwards the loss is dropped, and in ``frozen_readout`` mode the
    readout also stops moving. Replicas use seeds ``base_seed + i`` and are
    integrated in chunks of ``chunk_size``; ``threads`` only sets how many
    chunks run at once and never changes results.
    """

    widths: Sequence[int]
    act: Activation
    params: DynamicsParams
    lr: float = 0.01
    n_seeds: int = 1
    base_seed: int = 0
    checkpoints: Sequence[float] = (0.0,)
    mode: Mode = Mode.FULL
    t0: Optional[float] = None
    chunk_size: int = 50
    noise_block: int = 32
    threads: int = 1
    reduce_inputs: bool = True

    def __post_init__(self):
        self.act = Activation.parse(self.act)
        self.mode = Mode.parse(self.mode)
        self.widths = tuple(int(n) for n in self.widths)
        if len(self.widths) < 2 or min(self.widths) < 1:
            raise ConfigError(f"widths must list N0 and at least one hidden width, got {self.widths}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.n_seeds < 1:
            raise ConfigError(f"n_seeds must be >= 1, got {self.n_seeds}")
        if self.chunk_size < 1 or self.noise_block < 1 or self.threads < 1:
            raise ConfigError("chunk_size, noise_block and threads must be >= 1")
        self.checkpoints = np.sort(np.atleast_1d(np.asarray(self.checkpoints, dtype=float)))
        if self.checkpoints[0] < 0 or self.checkpoints[-1] > self.params.t_max + 1e-9:
            raise ConfigError("checkpoints must lie in [0, t_max]")
        if self.mode is not Mode.FULL and self.t0 is None:
            raise ConfigError(f"mode {self.mode.value} needs a freeze time t0")

    @property
    def L(self) -> int:
        return len(self.widths) - 1

    def step_of(self, t) -> np.ndarray:
        return np.rint(np.asarray(t, dtype=float) / self.lr).astype(np.int64)


@dataclass
class MLPState:
    """Weights of S replicas: ``W[l]`` is ``(S, N_{l+1}, d_l)`` and ``a`` is ``(S, N_L)``.

    ``d_0`` is N0, or the reduced input dimension when ``basis`` is set; the
    forward scale always uses the true ``n0``.
    """

    W: list
    a: np.ndarray
    n0: int
    basis: Optional[np.ndarray] = None

    @property
    def S(self) -> int:
        return self.a.shape[0]

    def copy(self) -> "MLPState":
        return MLPState([w.copy() for w in self.W], self.a.copy(), self.n0, self.basis)

    def replica(self, i: int) -> "MLPState":
        return MLPState([w[i:i + 1].copy() for w in self.W], self.a[i:i + 1].copy(),
                        self.n0, self.basis)

    def flat(self) -> np.ndarray:
        """All parameters per replica, shape ``(S, n_params)``."""
        return np.concatenate([w.reshape(self.S, -1) for w in self.W] + [self.a], axis=1)

    def project(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        return x if self.basis is None else x @ self.basis


def input_basis(inputs, tol: float = 1e-12) -> np.ndarray:
    """Orthonormal basis ``(N0, d)`` of the span of the rows of ``inputs``."""
    u, s, _ = np.linalg.svd(np.asarray(inputs, dtype=float).T, full_matrices=False)
    return u[:, s > tol * max(s.max(), 1e-300)]


def _replica_generator(seed: int, stream: int, block: int = 0) -> np.random.Generator:
    # Philox keyed by (seed, stream); the counter's high word indexes noise blocks.
    counter = np.array([0, 0, 0, block], dtype=np.uint64)
    key = np.array([seed, stream], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key, counter=counter))


def init_network(widths: Sequence[int], sigma0_2: float, seeds, basis=None) -> MLPState:
    """I.i.d. N(0, sigma0_2) weights, one replica per seed; deterministic in the seed.

    With ``basis`` the first layer is drawn directly in the reduced coordinates,
    which is the same distribution as projecting a full Gaussian matrix.
    """
    seeds = [int(s) for s in np.atleast_1d(seeds)]
    widths = tuple(int(n) for n in widths)
    d0 = widths[0] if basis is None else basis.shape[1]
    dims = (d0,) + widths[1:]
    sd = math.sqrt(sigma0_2)
    W = [np.empty((len(seeds), dims[l + 1], dims[l])) for l in range(len(widths) - 1)]
    a = np.empty((len(seeds), widths[-1]))
    for i, seed in enumerate(seeds):
        rng = _replica_generator(seed, _INIT_STREAM)
        for w in W:
            w[i] = sd * rng.standard_normal(w.shape[1:])
        a[i] = sd * rng.standard_normal(widths[-1])
    return MLPState(W, a, widths[0], basis)


def _forward_all(state: MLPState, act: Activation, x):
    """Pre-activations and activations per layer, for inputs already in state coordinates."""
    zs, hs = [], [x]
    h = np.broadcast_to(x, (state.S,) + x.shape)
    fan_in = state.n0
    for w in state.W:
        z = np.matmul(h, np.swapaxes(w, 1, 2)) / math.sqrt(fan_in)
        h = phi(act, z)
        zs.append(z)
        hs.append(h)
        fan_in = w.shape[1]
    f = np.einsum("snk,sk->sn", h, state.a) / math.sqrt(fan_in)
    return f, zs, hs


def forward(state: MLPState, act, x) -> np.ndarray:
    """Network outputs ``(S, n)`` for inputs ``x`` of shape ``(n, N0)`` (or one vector)."""
    act = Activation.parse(act)
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[1] != state.n0:
        raise ConfigError(f"input dimension {x.shape[1]} does not match N0={state.n0}")
    return _forward_all(state, act, state.project(x))[0]


def _backprop(state: MLPState, act, zs, hs, out_grad):
    """Parameter gradients of ``sum_n out_grad[s, n] * f[s, n]`` per replica."""
    NL = state.a.shape[1]
    grad_a = np.einsum("snk,sn->sk", hs[-1], out_grad) / math.sqrt(NL)
    delta = out_grad[:, :, None] * state.a[:, None, :] / math.sqrt(NL) * dphi(act, zs[-1])
    grads_W = [None] * len(state.W)
    for l in range(len(state.W) - 1, -1, -1):
        fan_in = state.n0 if l == 0 else state.W[l - 1].shape[1]
        h_prev = hs[l] if l else np.broadcast_to(hs[0], (state.S,) + hs[0].shape)
        grads_W[l] = np.matmul(np.swapaxes(delta, 1, 2), h_prev) / math.sqrt(fan_in)
        if l:
            delta = np.matmul(delta, state.W[l]) / math.sqrt(fan_in) * dphi(act, zs[l - 1])
    return grads_W, grad_a


def energy_gradient(state: MLPState, act, x_train, y_train, T: float, sigma2: float,
                    data: bool = True):
    """Gradient of the energy for every replica; inputs in state coordinates."""
    act = Activation.parse(act)
    ridge = T / sigma2
    if data:
        f, zs, hs = _forward_all(state, act, x_train)
        grads_W, grad_a = _backprop(state, act, zs, hs, f - y_train[None, :])
    else:
        grads_W, grad_a = [np.zeros_like(w) for w in state.W], np.zeros_like(state.a)
    grads_W = [g + ridge * w for g, w in zip(grads_W, state.W)]
    return grads_W, grad_a + ridge * state.a


def energy(state: MLPState, act, x_train, y_train, T: float, sigma2: float) -> np.ndarray:
    f = _forward_all(state, Activation.parse(act), x_train)[0]
    norm2 = sum(np.sum(w ** 2, axis=(1, 2)) for w in state.W) + np.sum(state.a ** 2, axis=1)
    return 0.5 * np.sum((f - y_train[None, :]) ** 2, axis=1) + 0.5 * T / sigma2 * norm2


def langevin_step(state: MLPState, act, x_train, y_train, params: DynamicsParams, lr: float,
                  noise: Optional[np.ndarray] = None, data: bool = True,
                  move_readout: bool = True, step: Optional[int] = None) -> MLPState:
    """One Euler-Maruyama step, in place; ``noise`` is ``(S, n_params)`` standard normal.

    ``data=False`` drops the loss (prior-only drift); ``move_readout=False``
    freezes the readout. Raises :class:`DivergenceError` on non-finite gradients.
    """
    grads_W, grad_a = energy_gradient(state, act, x_train, y_train, params.T, params.sigma2, data)
    if not all(np.all(np.isfinite(g)) for g in grads_W + [grad_a]):
        raise DivergenceError(f"non-finite gradient at step {step}", index=step)
    amp = math.sqrt(2.0 * params.T * lr)
    offset = 0
    for w, g in zip(state.W, grads_W):
        w -= lr * g
        if noise is not None and amp:
            size = w[0].size
            w += amp * noise[:, offset:offset + size].reshape(w.shape)
            offset += size
    if move_readout:
        state.a -= lr * grad_a
        if noise is not None and amp:
            state.a += amp * noise[:, offset:offset + state.a.shape[1]]
    return state


def _n_params(state: MLPState) -> int:
    return sum(w[0].size for w in state.W) + state.a.shape[1]


def _noise_block(seeds, block: int, n_steps: int, n_params: int) -> np.ndarray:
    out = np.empty((n_steps, len(seeds), n_params))
    for i, seed in enumerate(seeds):
        out[:, i] = _replica_generator(seed, _NOISE_STREAM, block).standard_normal((n_steps, n_params))
    return out


@dataclass
class EnsembleResult:
    """Ensemble statistics at the checkpoints.

    ``samples_train[s, c, mu]`` is replica s at checkpoint c; means and
    standard errors are taken over replicas in ascending seed order.
    """

    times: np.ndarray
    seeds: np.ndarray
    samples_train: np.ndarray
    samples_test: np.ndarray
    meta: dict = field(default_factory=dict)

    @staticmethod
    def _stats(x):
        n = x.shape[0]
        mean = np.mean(x, axis=0)
        err = np.std(x, axis=0, ddof=1) / math.sqrt(n) if n > 1 else np.full_like(mean, np.nan)
        return mean, err

    @property
    def mean_train(self):
        return self._stats(self.samples_train)[0]

    @property
    def stderr_train(self):
        return self._stats(self.samples_train)[1]

    @property
    def mean_test(self):
        return self._stats(self.samples_test)[0]

    @property
    def stderr_test(self):
        return self._stats(self.samples_test)[1]

    def save(self, path) -> None:
        """Flat float64 dump of ``samples_test`` then ``samples_train``, plus a JSON sidecar."""
        path = Path(path)
        with open(path, "wb") as fh:
            fh.write(np.ascontiguousarray(self.samples_test, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(self.samples_train, dtype="<f8").tobytes())
        sidecar = {"dtype": "<f8", "order": ["samples_test", "samples_train"],
                   "samples_test_shape": list(self.samples_test.shape),
                   "samples_train_shape": list(self.samples_train.shape),
                   "times": self.times.tolist(), "seeds": self.seeds.tolist(), **self.meta}
        path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))

    @classmethod
    def load(cls, path) -> "EnsembleResult":
        path = Path(path)
        meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
        raw = np.fromfile(path, dtype=meta["dtype"])
        st, sr = meta.pop("samples_test_shape"), meta.pop("samples_train_shape")
        n_te = int(np.prod(st))
        test = raw[:n_te].reshape(st)
        train = raw[n_te:].reshape(sr)
        times, seeds = np.asarray(meta.pop("times")), np.asarray(meta.pop("seeds"))
        for key in ("dtype", "order"):
            meta.pop(key)
        return cls(times, seeds, train, test, meta)


def _run_chunk(cfg: SimConfig, seeds, x_train, y_train, x_test, basis):
    state = init_network(cfg.widths, cfg.params.sigma0_2, seeds, basis)
    xtr = state.project(x_train)
    x_all = np.concatenate([xtr, state.project(x_test)], axis=0) if len(x_test) else xtr
    P = xtr.shape[0]
    ck_steps = cfg.step_of(cfg.checkpoints)
    freeze = None if cfg.mode is Mode.FULL else int(cfg.step_of(cfg.t0))
    out = np.empty((len(seeds), ck_steps.size, x_all.shape[0]))
    n_params = _n_params(state)
    n_total = int(ck_steps[-1])
    c = 0
    step = 0
    noise = None
    while True:
        while c < ck_steps.size and ck_steps[c] == step:
            f = _forward_all(state, cfg.act, x_all)[0]
            bad = ~np.all(np.isfinite(f) & (np.abs(f) <= DIVERGENCE_LIMIT), axis=1)
            if bad.any():
                i = int(np.argmax(bad))
                raise DivergenceError(f"replica with seed {seeds[i]} diverged by step {step}",
                                      index=step, seed=seeds[i])
            out[:, c] = f
            c += 1
        if step >= n_total:
            break
        k = step % cfg.noise_block
        if k == 0 and cfg.params.T > 0:
            noise = _noise_block(seeds, step // cfg.noise_block, cfg.noise_block, n_params)
        frozen = freeze is not None and step >= freeze
        langevin_step(state, cfg.act, xtr, y_train, cfg.params, cfg.lr,
                      None if noise is None else noise[k], data=not frozen,
                      move_readout=not (frozen and cfg.mode is Mode.FROZEN_READOUT), step=step)
        step += 1
        if step % 1000 == 0:
            f = _forward_all(state, cfg.act, xtr)[0]
            bad = ~np.all(np.isfinite(f) & (np.abs(f) <= DIVERGENCE_LIMIT), axis=1)
            if bad.any():
                i = int(np.argmax(bad))
                raise DivergenceError(f"replica with seed {seeds[i]} diverged by step {step}",
                                      index=step, seed=seeds[i])
    return out[:, :, :P], out[:, :, P:]


def run_ensemble(cfg: SimConfig, x_train, y_train, x_test=()) -> EnsembleResult:
    """Simulate ``cfg.n_seeds`` replicas and record predictors at the checkpoints.

    ``x_train`` is ``(P, N0)`` raw inputs, ``x_test`` ``(Q, N0)``. Replicas are
    bitwise reproducible per seed for fixed inputs. With ``reduce_inputs`` the
    first-layer draws are taken in a basis of the train and test span, so
    changing the test set changes them (not their distribution).
    """
    x_train = np.atleast_2d(np.asarray(x_train, dtype=float))
    y_train = np.asarray(y_train, dtype=float).ravel()
    x_test = np.asarray(x_test, dtype=float).reshape(-1, x_train.shape[1])
    if x_train.shape[1] != cfg.widths[0]:
        raise ConfigError(f"input dimension {x_train.shape[1]} does not match N0={cfg.widths[0]}")
    if y_train.shape[0] != x_train.shape[0]:
        raise ConfigError("one label per training input is required")
    basis = input_basis(np.concatenate([x_train, x_test])) if cfg.reduce_inputs else None
    seeds = cfg.base_seed + np.arange(cfg.n_seeds)
    chunks = [seeds[i:i + cfg.chunk_size] for i in range(0, cfg.n_seeds, cfg.chunk_size)]
    run = lambda s: _run_chunk(cfg, [int(v) for v in s], x_train, y_train, x_test, basis)  # noqa: E731
    if cfg.threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(s) for s in chunks]
    train = np.concatenate([p[0] for p in parts])
    test = np.concatenate([p[1] for p in parts])
    meta = {"widths": list(cfg.widths), "act": cfg.act.value, "lr": cfg.lr, "mode": cfg.mode.value,
            "t0": cfg.t0, "T": cfg.params.T, "sigma2": cfg.params.sigma2,
            "sigma0_2": cfg.params.sigma0_2, "base_seed": cfg.base_seed}
    return EnsembleResult(np.asarray(cfg.checkpoints), seeds, train, test, meta)


def empirical_ntk(state: MLPState, act, inputs) -> np.ndarray:
    """Gram matrix of parameter gradients ``grad f(x_i) . grad f(x_j)``, shape ``(S, n, n)``.

    Assembled layer by layer from backpropagated vectors and activations, which
    equals the full gradient inner product without materializing it.
    """
    act = Activation.parse(act)
    x = state.project(np.atleast_2d(np.asarray(inputs, dtype=float)))
    _, zs, hs = _forward_all(state, act, x)
    S, n = state.S, x.shape[0]
    NL = state.a.shape[1]
    gram = np.einsum("sik,sjk->sij", hs[-1], hs[-1]) / NL
    g = state.a[:, None, :] / math.sqrt(NL) * dphi(act, zs[-1])
    for l in range(len(state.W) - 1, -1, -1):
        fan_in = state.n0 if l == 0 else state.W[l - 1].shape[1]
        h_prev = hs[l] if l else np.broadcast_to(hs[0], (S,) + hs[0].shape)
        gram += (np.einsum("sik,sjk->sij", g, g)
                 * np.einsum("sik,sjk->sij", h_prev, h_prev) / fan_in)
        if l:
            g = np.matmul(g, state.W[l]) / math.sqrt(fan_in) * dphi(act, zs[l - 1])
    return gram
