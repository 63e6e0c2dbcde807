"""Command-line entry point: ``ndk {kernel,trajectory,langevin,drift,equilibria}``.

Settings come from built-in defaults, then an optional ``--config`` JSON file
(keys are the long flag names, dashes or underscores), then explicit flags.
Every command writes a CSV table to ``--out`` and a JSON sidecar next to it.

Exit codes: 0 success, 2 configuration or usage error, 3 data-format or
degenerate-input error, 4 numerical failure (divergence, singular kernel).
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import datasets, drift, dynamics, langevin
from .errors import ConfigError, NDKError
from .kernels import Activation, KernelInputs, layer_kernels
from .ndk import ndk_from_cov
from .prior import DynamicsParams, decay_factor, prior_cov

DEFAULTS = {
    "dataset": "synthetic", "classes": None, "data": None, "n_per_class": 50,
    "n_test_per_class": 1, "normalize": None, "P": 2, "o_test": 0.75,
    "act": "relu", "depth": 1, "temperature": 1e-3, "sigma2": 1.0, "sigma0_2": 1.0,
    "dt": 0.01, "t_max": None, "t_switch": 10.0, "dt_coarse": None, "reduced": False,
    "seeds": 200, "base_seed": 0, "threads": 1, "width": 500, "n0": 50, "lr": None,
    "checkpoints": None, "mode": "full", "t0": None, "dump": None,
    "kxx": 1.0, "kxy": 0.75, "kyy": 1.0, "n_times": 41,
    "lags": None, "bin_width": 0.05, "depths": "1,2,3", "sizes": "10,25,50",
    "out": None,
}
DEFAULT_CLASSES = {"mnist": "0,1", "cifar": "3,5"}
FLOAT_KEYS = {"o_test", "temperature", "sigma2", "sigma0_2", "dt", "t_max", "t_switch",
              "dt_coarse", "lr", "t0", "kxx", "kxy", "kyy", "bin_width"}
INT_KEYS = {"n_per_class", "n_test_per_class", "P", "depth", "seeds", "base_seed", "threads",
            "width", "n0", "n_times"}


def _float_list(text):
    return [float(v) for v in str(text).split(",") if v.strip()]


def _int_list(text):
    return [int(v) for v in str(text).split(",") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    g = common.add_argument_group("problem")
    g.add_argument("--config", help="JSON file with default settings")
    g.add_argument("--dataset", choices=["synthetic", "mnist", "cifar"])
    g.add_argument("--classes", help="class pair a,b (a is labeled +1)")
    g.add_argument("--data", help="dataset file (default: looked up in $NDK_DATA_DIR)")
    g.add_argument("--n-per-class", type=int, dest="n_per_class")
    g.add_argument("--n-test-per-class", type=int, dest="n_test_per_class")
    g.add_argument("--normalize", choices=list(datasets.NORMALIZE_MODES))
    g.add_argument("--P", type=int, help="synthetic training set size (even)")
    g.add_argument("--o-test", type=float, dest="o_test", help="synthetic test overlap")
    g.add_argument("--act", choices=[a.value for a in Activation])
    g.add_argument("--depth", type=int, help="number of hidden layers L")
    d = common.add_argument_group("dynamics")
    d.add_argument("--temperature", type=float, help="noise level T")
    d.add_argument("--sigma2", type=float, help="prior weight variance")
    d.add_argument("--sigma0-2", type=float, dest="sigma0_2", help="initial weight variance")
    d.add_argument("--dt", type=float, help="fine time step")
    d.add_argument("--t-max", type=float, dest="t_max", help="final time (default 10/T)")
    d.add_argument("--t-switch", type=float, dest="t_switch")
    d.add_argument("--dt-coarse", type=float, dest="dt_coarse", help="default 0.001/T")
    d.add_argument("--reduced", action="store_true", help="scalar solver (synthetic only)")
    o = common.add_argument_group("run")
    o.add_argument("--seeds", type=int, help="ensemble size")
    o.add_argument("--base-seed", type=int, dest="base_seed")
    o.add_argument("--threads", type=int, help="worker cap; never changes results")
    o.add_argument("--out", help="output CSV path")

    parser = argparse.ArgumentParser(prog="ndk", description="Neural dynamical kernel toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    k = sub.add_parser("kernel", parents=[common], help="two-time kernel table",
                       argument_default=argparse.SUPPRESS)
    k.add_argument("--kxx", type=float)
    k.add_argument("--kxy", type=float)
    k.add_argument("--kyy", type=float)
    k.add_argument("--n-times", type=int, dest="n_times")
    sub.add_parser("trajectory", parents=[common], help="mean predictor dynamics",
                   argument_default=argparse.SUPPRESS)
    lg = sub.add_parser("langevin", parents=[common], help="finite-width simulation vs theory",
                        argument_default=argparse.SUPPRESS)
    lg.add_argument("--width", type=int, help="hidden width N")
    lg.add_argument("--n0", type=int, help="input dimension for synthetic vectors")
    lg.add_argument("--lr", type=float, help="step size (default dt)")
    lg.add_argument("--checkpoints", help="comma-separated times")
    lg.add_argument("--mode", choices=[m.value for m in langevin.Mode])
    lg.add_argument("--t0", type=float, help="freeze time for drift modes")
    lg.add_argument("--dump", help="write raw ensemble samples here")
    dr = sub.add_parser("drift", parents=[common], help="frozen-readout drift histograms",
                        argument_default=argparse.SUPPRESS)
    dr.add_argument("--t0", type=float, help="freeze time (default t_max)")
    dr.add_argument("--lags", help="comma-separated lags t - t0")
    dr.add_argument("--bin-width", type=float, dest="bin_width")
    eq = sub.add_parser("equilibria", parents=[common], help="NTK vs NNGP equilibrium MSE",
                        argument_default=argparse.SUPPRESS)
    eq.add_argument("--depths", help="comma-separated L values")
    eq.add_argument("--sizes", help="comma-separated examples per class")
    return parser


def resolve_settings(args: argparse.Namespace) -> dict:
    given = vars(args).copy()
    command = given.pop("command")
    cfg = dict(DEFAULTS)
    if "config" in given:
        path = Path(given.pop("config"))
        try:
            loaded = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON in {path}: {exc}") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must hold a JSON object")
        for key, value in loaded.items():
            key = key.replace("-", "_").lstrip("_")
            if key not in cfg:
                raise ConfigError(f"unknown config key {key!r} in {path}")
            cfg[key] = value
    cfg.update(given)
    try:
        for key in FLOAT_KEYS:
            if cfg[key] is not None:
                cfg[key] = float(cfg[key])
        for key in INT_KEYS:
            cfg[key] = int(cfg[key])
    except (TypeError, ValueError):
        raise ConfigError(f"setting {key!r} has invalid value {cfg[key]!r}") from None
    if cfg["classes"] is None and cfg["dataset"] in DEFAULT_CLASSES:
        cfg["classes"] = DEFAULT_CLASSES[cfg["dataset"]]
    if cfg["classes"] is not None:
        classes = _int_list(cfg["classes"]) if isinstance(cfg["classes"], str) else list(cfg["classes"])
        if len(classes) != 2:
            raise ConfigError(f"--classes needs exactly two labels, got {cfg['classes']!r}")
        cfg["classes"] = classes
    cfg["command"] = command
    if cfg["normalize"] is None:
        # drift keeps relative norms: they are the information that survives decorrelation
        cfg["normalize"] = "global" if command == "drift" else "unit"
    if cfg["out"] is None:
        cfg["out"] = f"{command}.csv"
    return cfg


def make_params(cfg: dict) -> DynamicsParams:
    T = cfg["temperature"]
    t_max = cfg["t_max"]
    if t_max is None:
        if T <= 0:
            raise ConfigError("--t-max is required when T = 0")
        t_max = 10.0 / T
    dt_coarse = cfg["dt_coarse"]
    if dt_coarse is None and T > 0:
        dt_coarse = max(cfg["dt"], 1e-3 / T)
    return DynamicsParams(T=T, sigma2=cfg["sigma2"], sigma0_2=cfg["sigma0_2"], dt=cfg["dt"],
                          t_max=t_max, t_switch=cfg["t_switch"], dt_coarse=dt_coarse)


def make_slice(cfg: dict, n_per_class=None) -> datasets.DatasetSlice:
    if cfg["dataset"] == "synthetic":
        return datasets.synthetic_slice(datasets.SyntheticSpec(cfg["P"], cfg["o_test"]), cfg["n0"])
    return datasets.load_dataset(cfg["dataset"], cfg["classes"],
                                 n_per_class or cfg["n_per_class"], cfg["data"],
                                 cfg["normalize"], cfg["n_test_per_class"])


def make_problem(cfg: dict, params: DynamicsParams, n_per_class=None, L=None):
    L = cfg["depth"] if L is None else L
    if cfg["dataset"] == "synthetic":
        spec = datasets.SyntheticSpec(cfg["P"], cfg["o_test"])
        return datasets.synthetic_problem(spec, cfg["act"], L, params)
    return datasets.build_problem(make_slice(cfg, n_per_class), cfg["act"], L, params)


def fmt(value) -> str:
    """Shortest decimal that round-trips a float exactly."""
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return str(int(value))
    return str(value)


def write_table(path, header, rows, meta=None) -> None:
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for row in rows:
                writer.writerow([fmt(v) for v in row])
        if meta is not None:
            Path(str(path) + ".json").write_text(json.dumps(meta, indent=2, default=_json_default))
    except OSError as exc:
        raise ConfigError(f"cannot write {exc.filename or path}: {exc.strerror}") from None


def _cell(value):
    try:
        return float(value)
    except ValueError:
        return value


def read_table(path):
    """Parse a CSV written by this module into a header and an array.

    The array is float when every cell is numeric, otherwise an object array
    holding floats and strings.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        rows = [[_cell(v) for v in row] for row in reader]
    numeric = all(isinstance(v, float) for row in rows for v in row)
    out = np.array(rows, dtype=float if numeric else object)
    return header, out.reshape(len(rows), len(header))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def _settings_meta(cfg):
    return {k: v for k, v in cfg.items() if k != "out"}


def cmd_kernel(cfg: dict) -> None:
    params = make_params(cfg)
    act = Activation.parse(cfg["act"])
    g = KernelInputs(cfg["kxx"], cfg["kxy"], cfg["kyy"])
    times = np.linspace(0.0, params.t_max, cfg["n_times"])
    t, tp = (a.ravel() for a in np.meshgrid(times, times, indexing="ij"))
    m = (prior_cov(params, t, tp), prior_cov(params, t, t), prior_cov(params, tp, tp))
    L = cfg["depth"]
    k, kdot = layer_kernels(act, L, *m, *g.arrays())
    kd = ndk_from_cov(act, L, *m, decay_factor(params, t, tp), *g.arrays()).kd
    rows = zip(t, tp, np.broadcast_to(kd, t.shape), np.broadcast_to(k[L], t.shape),
               np.broadcast_to(kdot[L], t.shape))
    write_table(cfg["out"], ["t", "t_prime", "kd", "k", "kdot"], rows, _settings_meta(cfg))


def cmd_trajectory(cfg: dict) -> None:
    params = make_params(cfg)
    problem = make_problem(cfg, params)
    if cfg["reduced"]:
        if cfg["dataset"] != "synthetic":
            raise ConfigError("--reduced applies to the synthetic dataset only")
        traj = dynamics.solve_synthetic_reduced(cfg["act"], cfg["depth"], params, cfg["o_test"])
        test_targets = np.ones(1)
    else:
        traj = dynamics.solve_mean_predictor(problem)
        test_targets = problem.test_targets
    P, Q = traj.f_train.shape[1], traj.f_test.shape[1]
    meta = _settings_meta(cfg)
    header = ["t"] + [f"f_train_{i + 1}" for i in range(P)] + [f"f_test_{i + 1}" for i in range(Q)]
    columns = [traj.times[:, None], traj.f_train, traj.f_test]
    if not cfg["reduced"]:
        try:
            ntk_tr, ntk_te = dynamics.ntk_closed_form(problem, traj.times)
            header += [f"ntk_train_{i + 1}" for i in range(P)] + [f"ntk_test_{i + 1}" for i in range(Q)]
            columns += [ntk_tr, ntk_te]
        except NDKError as exc:
            meta["ntk_reference"] = f"unavailable: {exc}"
        if params.T > 0:
            gp_tr, gp_te = dynamics.nngp_equilibrium_predictor(problem)
            meta["nngp_train"] = gp_tr
            meta["nngp_test"] = gp_te
            header += [f"nngp_test_{i + 1}" for i in range(Q)]
            columns.append(np.broadcast_to(gp_te, (traj.times.size, Q)))
    meta["ntk_crossover"] = traj.ntk_crossover
    if Q and test_targets is not None:
        es = dynamics.find_early_stopping(traj, test_targets)
        meta["early_stopping"] = {"t_star": es.t_star, "delta_tT": es.delta_tT,
                                  "test_mse_min": float(es.test_mse[es.index]),
                                  "test_mse_final": float(es.test_mse[-1])}
    write_table(cfg["out"], header, np.concatenate(columns, axis=1), meta)


def _checkpoints(cfg, params):
    if cfg["checkpoints"] is not None:
        cks = cfg["checkpoints"]
        return _float_list(cks) if isinstance(cks, str) else [float(c) for c in cks]
    hi = params.t_max
    return [0.0] + list(np.geomspace(min(0.1, hi), hi, 12))


def cmd_langevin(cfg: dict) -> None:
    params = make_params(cfg)
    lr = cfg["lr"] or cfg["dt"]
    data = make_slice(cfg)
    problem = datasets.build_problem(data, cfg["act"], cfg["depth"], params)
    widths = (data.n0,) + (cfg["width"],) * cfg["depth"]
    mode = langevin.Mode.parse(cfg["mode"])
    t0 = cfg["t0"]
    checkpoints = np.round(np.asarray(_checkpoints(cfg, params)) / lr) * lr
    sim = langevin.SimConfig(widths, cfg["act"], params, lr=lr, n_seeds=cfg["seeds"],
                             base_seed=cfg["base_seed"], checkpoints=checkpoints, mode=mode,
                             t0=t0, threads=cfg["threads"])
    result = langevin.run_ensemble(sim, data.inputs, data.labels, data.test_inputs)
    if cfg["dump"]:
        result.save(cfg["dump"])
    times = np.union1d(dynamics.time_grid(params), checkpoints)
    if mode is not langevin.Mode.FULL:
        times = np.union1d(times, [t0])
    traj = dynamics.solve_mean_predictor(problem, times=times)
    theory_train = np.empty((checkpoints.size, problem.P))
    theory_test = np.empty((checkpoints.size, problem.Q))
    for c, t in enumerate(checkpoints):
        if mode is langevin.Mode.FULL or t <= t0:
            n = traj.index_of(t)
            theory_train[c], theory_test[c] = traj.f_train[n], traj.f_test[n]
        else:
            dc = drift.DriftConfig(t0, [t], problem)
            fn = (drift.drift_predictor if mode is langevin.Mode.FROZEN_READOUT
                  else drift.pure_prior_predictor)
            kw = {"path": "general"} if mode is langevin.Mode.FROZEN_READOUT else {}
            theory_train[c] = fn(dc, traj, "train", **kw)[0]
            theory_test[c] = fn(dc, traj, "test", **kw)[0]
    rows = []
    zs = []
    for kind, theory, mean, err in (("train", theory_train, result.mean_train, result.stderr_train),
                                    ("test", theory_test, result.mean_test, result.stderr_test)):
        for c, t in enumerate(checkpoints):
            for i in range(theory.shape[1]):
                z = (mean[c, i] - theory[c, i]) / err[c, i] if err[c, i] > 0 else math.nan
                if kind == "test" and not math.isnan(z):
                    zs.append(abs(z))
                rows.append([t, kind, i + 1, theory[c, i], mean[c, i], err[c, i], z])
    meta = _settings_meta(cfg)
    meta["max_abs_z_test"] = max(zs) if zs else None
    write_table(cfg["out"], ["t", "kind", "index", "theory", "mean", "stderr", "z"], rows, meta)


def cmd_drift(cfg: dict) -> None:
    params = make_params(cfg)
    problem = make_problem(cfg, params)
    t0 = params.t_max if cfg["t0"] is None else cfg["t0"]
    lags = cfg["lags"]
    if lags is None:
        lags = [0.0] + list(np.geomspace(1e-3, 10.0, 25) * params.sigma2 / max(params.T, 1e-300))
    elif isinstance(lags, str):
        lags = _float_list(lags)
    lags = np.asarray(lags, dtype=float)
    dc = drift.DriftConfig(t0, t0 + lags, problem)
    if dc.at_equilibrium:
        gp_tr, _ = dynamics.nngp_equilibrium_predictor(problem)
        values = drift.drift_predictor_equilibrium(problem, lags, "train")
        values[lags == 0] = gp_tr
    else:
        grid = dynamics.time_grid(params.with_(t_max=max(t0 + lags.max(), params.dt)))
        traj = dynamics.solve_mean_predictor(problem, times=np.union1d(grid, [t0]))
        values = drift.drift_predictor(dc, traj, "train", path="general")
    acc = drift.drift_readout_accuracy(values, problem.targets)
    pos = problem.targets > 0
    edges, cp, cn = drift.drift_histograms(values, problem.targets, cfg["bin_width"])
    out = Path(cfg["out"])
    meta = _settings_meta(cfg)
    meta.update({"t0": t0, "at_equilibrium": dc.at_equilibrium,
                 "histograms": str(out.with_name(out.stem + "_hist.csv"))})
    write_table(out, ["lag", "accuracy", "mean_pos", "mean_neg"],
                zip(lags, acc, values[:, pos].mean(axis=1), values[:, ~pos].mean(axis=1)), meta)
    hist_rows = [[lag, edges[b], edges[b + 1], cp[i, b], cn[i, b]]
                 for i, lag in enumerate(lags) for b in range(edges.size - 1)]
    write_table(out.with_name(out.stem + "_hist.csv"),
                ["lag", "bin_lo", "bin_hi", "count_pos", "count_neg"], hist_rows)


def cmd_equilibria(cfg: dict) -> None:
    params = make_params(cfg)
    depths = _int_list(cfg["depths"]) if isinstance(cfg["depths"], str) else list(cfg["depths"])
    sizes = _int_list(cfg["sizes"]) if isinstance(cfg["sizes"], str) else list(cfg["sizes"])
    problems = {}
    for n in sizes:
        for L in depths:
            if cfg["dataset"] == "synthetic":
                spec = datasets.SyntheticSpec(2 * n, cfg["o_test"])
                prob = datasets.synthetic_problem(spec, cfg["act"], L, params)
            else:
                prob = make_problem(cfg, params, n_per_class=n, L=L)
            problems[(cfg["dataset"], prob.P, L)] = prob
    rows = dynamics.equilibria_compare(problems)
    write_table(cfg["out"], ["dataset", "P", "L", "ntk_mse", "nngp_mse"],
                ([r["dataset"], r["P"], r["L"], r["ntk_mse"], r["nngp_mse"]] for r in rows),
                _settings_meta(cfg))


COMMANDS = {"kernel": cmd_kernel, "trajectory": cmd_trajectory, "langevin": cmd_langevin,
            "drift": cmd_drift, "equilibria": cmd_equilibria}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_settings(args)
        COMMANDS[cfg["command"]](cfg)
    except NDKError as exc:
        print(f"ndk {args.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
