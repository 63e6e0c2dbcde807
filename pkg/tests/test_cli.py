import csv
import json
import math

import numpy as np
import pytest

from ndk_dynamics import KernelInputs, ntk, solve_mean_predictor
from ndk_dynamics.cli import build_parser, main, read_table, resolve_settings
from ndk_dynamics.dynamics import solve_synthetic_reduced

from .conftest import MNIST_IMAGES, synthetic_p2


def run(tmp_path, *argv, name="out.csv"):
    out = tmp_path / name
    code = main(list(argv) + ["--out", str(out)])
    return code, out


class TestSettings:
    def test_precedence(self, tmp_path):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(json.dumps({"temperature": 0.5, "depth": 3, "act": "erf"}))
        args = build_parser().parse_args(["trajectory", "--config", str(cfg_file), "--depth", "2"])
        cfg = resolve_settings(args)
        assert cfg["temperature"] == 0.5 and cfg["depth"] == 2 and cfg["act"] == "erf"
        assert cfg["normalize"] == "unit" and cfg["out"] == "trajectory.csv"
        drift_cfg = resolve_settings(build_parser().parse_args(["drift"]))
        assert drift_cfg["normalize"] == "global"

    @pytest.mark.parametrize("content", ['{"bogus": 1}', '[1, 2]', '{"depth": "x"}', "{not json"])
    def test_bad_config_exits_2(self, tmp_path, content):
        cfg_file = tmp_path / "c.json"
        cfg_file.write_text(content)
        assert run(tmp_path, "kernel", "--config", str(cfg_file))[0] == 2

    def test_exit_codes(self, tmp_path):
        assert run(tmp_path, "kernel", "--sigma2", "-1")[0] == 2
        assert run(tmp_path, "kernel", "--config", str(tmp_path / "missing.json"))[0] == 2
        assert run(tmp_path, "trajectory", "--dataset", "mnist", "--classes", "1,2,3")[0] == 2
        bad = tmp_path / "train-images-idx3-ubyte"
        bad.write_bytes(b"\0\0\x08\x01" + b"\0" * 20)
        assert run(tmp_path, "equilibria", "--dataset", "mnist", "--data", str(bad))[0] == 3
        # a huge step on a wide initialization blows up the linear net: numerical error
        assert run(tmp_path, "langevin", "--act", "linear", "--seeds", "2", "--width", "20", "--n0", "5",
                   "--lr", "3.0", "--t-max", "300", "--checkpoints", "0,300", "--sigma0-2", "50")[0] == 4

    def test_unwritable_output(self, tmp_path):
        assert main(["kernel", "--n-times", "3", "--out", str(tmp_path / "no" / "dir.csv")]) == 2


class TestKernel:
    def test_table(self, tmp_path):
        code, out = run(tmp_path, "kernel", "--n-times", "5", "--temperature", "0.1", "--t-max", "40")
        assert code == 0
        header, data = read_table(out)
        assert header == ["t", "t_prime", "kd", "k", "kdot"]
        assert data.shape == (25, 5)
        np.testing.assert_allclose(data[0, 2], ntk("relu", 1, 1.0, KernelInputs(1.0, 0.75, 1.0)), rtol=1e-15)
        diag = data[data[:, 0] == data[:, 1]]
        assert np.all(diag[:, 2] > 0)
        meta = json.loads((tmp_path / "out.csv.json").read_text())
        assert meta["temperature"] == 0.1

    def test_linear_decays_with_lag(self, tmp_path):
        code, out = run(tmp_path, "kernel", "--act", "linear", "--n-times", "9", "--temperature", "0.1",
                        "--t-max", "80")
        _, data = read_table(out)
        row = data[data[:, 1] == 0.0]
        assert np.all(np.diff(row[:, 2]) < 0)


class TestTrajectory:
    def test_round_trip_full_precision(self, tmp_path):
        code, out = run(tmp_path, "trajectory", "--t-max", "2", "--dt-coarse", "0.01")
        assert code == 0
        header, data = read_table(out)
        traj = solve_mean_predictor(synthetic_p2(t_max=2.0, dt_coarse=0.01))
        np.testing.assert_array_equal(data[:, 0], traj.times)
        np.testing.assert_array_equal(data[:, 1:3], traj.f_train)
        np.testing.assert_array_equal(data[:, 3], traj.f_test[:, 0])
        assert header[4:7] == ["ntk_train_1", "ntk_train_2", "ntk_test_1"]
        meta = json.loads((tmp_path / "out.csv.json").read_text())
        assert "early_stopping" in meta and meta["ntk_crossover"] is None

    def test_reduced(self, tmp_path):
        code, out = run(tmp_path, "trajectory", "--reduced", "--t-max", "1")
        header, data = read_table(out)
        assert header == ["t", "f_train_1", "f_test_1"]
        traj = solve_synthetic_reduced("relu", 1, synthetic_p2(t_max=1.0).params.with_(dt_coarse=0.1))
        np.testing.assert_array_equal(data[:, 1], traj.f_train[:, 0])
        assert run(tmp_path, "trajectory", "--reduced", "--dataset", "mnist", "--data", str(MNIST_IMAGES))[0] == 2

    def test_mnist_fixture(self, tmp_path):
        code, out = run(tmp_path, "trajectory", "--dataset", "mnist", "--data", str(MNIST_IMAGES),
                        "--n-per-class", "5", "--n-test-per-class", "0", "--t-max", "1", "--temperature", "0.01")
        assert code == 0
        header, data = read_table(out)
        assert header[-1] == "ntk_train_10"


class TestLangevin:
    def test_table(self, tmp_path):
        code, out = run(tmp_path, "langevin", "--seeds", "4", "--width", "30", "--n0", "5",
                        "--t-max", "1", "--checkpoints", "0,0.5,1")
        assert code == 0
        with open(out, newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3 * 2 + 3 * 1
        assert {r["kind"] for r in rows} == {"train", "test"}
        _, table = read_table(out)
        assert table[0, 1] == "train" and table[0, 3] == 0.0
        assert float(rows[0]["theory"]) == 0.0
        meta = json.loads((tmp_path / "out.csv.json").read_text())
        assert meta["max_abs_z_test"] is not None

    def test_single_seed_has_no_z(self, tmp_path):
        code, out = run(tmp_path, "langevin", "--seeds", "1", "--width", "30", "--n0", "5", "--temperature", "0",
                        "--t-max", "1", "--checkpoints", "0,1", "--dump", str(tmp_path / "ens.bin"))
        assert code == 0
        with open(out, newline="") as fh:
            assert all(math.isnan(float(r["z"])) for r in csv.DictReader(fh))
        assert (tmp_path / "ens.bin.json").exists()

    def test_drift_mode(self, tmp_path):
        code, _ = run(tmp_path, "langevin", "--seeds", "3", "--width", "20", "--n0", "5", "--t-max", "1",
                      "--checkpoints", "0,0.5,1", "--mode", "frozen_readout", "--t0", "0.5")
        assert code == 0


class TestDriftAndEquilibria:
    def test_drift_synthetic(self, tmp_path):
        code, out = run(tmp_path, "drift", "--temperature", "0.05", "--t-max", "20", "--t0", "10",
                        "--lags", "0,5,10", "--dt", "0.05")
        assert code == 0
        header, data = read_table(out)
        assert header == ["lag", "accuracy", "mean_pos", "mean_neg"]
        assert data[0, 1] == 1.0
        hist_header, hist = read_table(tmp_path / "out_hist.csv")
        assert hist_header[:3] == ["lag", "bin_lo", "bin_hi"]
        assert hist[:, 3:].sum() == 3 * 2

    def test_drift_erf_goes_to_chance(self, tmp_path):
        code, out = run(tmp_path, "drift", "--act", "erf", "--dataset", "mnist", "--data", str(MNIST_IMAGES),
                        "--n-per-class", "20", "--temperature", "0.1", "--lags", "0,1000")
        _, data = read_table(out)
        assert data[0, 1] > 0.9
        assert abs(data[1, 2]) < 1e-6 and abs(data[1, 3]) < 1e-6

    def test_equilibria(self, tmp_path):
        code, out = run(tmp_path, "equilibria", "--act", "linear", "--sizes", "2,4", "--depths", "1,2",
                        "--temperature", "1e-4")
        assert code == 0
        _, data = read_table(out)
        assert data.shape == (4, 5)
        assert list(data[:, 0]) == ["synthetic"] * 4
        np.testing.assert_allclose(data[:, 3].astype(float), data[:, 4].astype(float), atol=1e-3)
