import json
import os
import shutil
import subprocess
import sys

import numpy as np
import pytest

from kernelblend import cli
from kernelblend.oracle import OracleEstimate

FIXTURES = os.path.join(os.path.dirname(__file__), os.pardir, "fixtures")


def _write(path, obj):
    with open(path, "w") as fh:
        if isinstance(obj, str):
            fh.write(obj)
        else:
            json.dump(obj, fh)
    return str(path)


def _csv(path, header, rows):
    lines = [",".join(header)] + [",".join(repr(float(v)) for v in r) for r in rows]
    return _write(path, "\n".join(lines) + "\n")


@pytest.fixture
def gau_dir(tmp_path):
    rng = np.random.default_rng(3)
    x = np.linspace(-2, 2, 10)
    y = np.sin(x) + 0.05 * rng.standard_normal(10)
    _csv(tmp_path / "train.csv", ["x0", "y"], zip(x, y))
    _csv(tmp_path / "test.csv", ["x0"], [[-1.0], [0.3]])
    cfg = {
        "objective": "gau",
        "likelihood": {"name": "gaussian", "sigma2": 0.05},
        "kernels": [{"kind": "squared-exponential", "lengthscale": 1.0}],
        "data": {"train": "train.csv", "test": "test.csv"},
    }
    _write(tmp_path / "config.json", cfg)
    return tmp_path


def _run(*args):
    return cli.run([str(a) for a in args])


def _report(d):
    with open(os.path.join(d, "out", "report.json")) as fh:
        return json.load(fh)


class TestFit:
    def test_smoke(self, gau_dir):
        assert _run("fit", "--config", gau_dir / "config.json") == cli.EXIT_OK
        rep = _report(gau_dir)
        assert rep["status"] == "converged" and len(rep["theta_hat"]) == 1
        assert rep["projected_grad_norm"] <= 1e-5
        with open(gau_dir / "out" / "trace.csv") as fh:
            assert fh.readline().strip() == "iter,phase_t,objective,grad_norm,alpha,theta_0"

    def test_byte_identical_runs(self, gau_dir, tmp_path_factory):
        other = tmp_path_factory.mktemp("second")
        assert _run("fit", "--config", gau_dir / "config.json") == 0
        assert _run("fit", "--config", gau_dir / "config.json", "--out", other) == 0
        with open(other / "report.json") as fh:
            b = json.load(fh)
        assert json.dumps(_report(gau_dir)["theta_hat"]) == json.dumps(b["theta_hat"])

    def test_config_echo_is_normalised(self, gau_dir):
        _run("fit", "--config", gau_dir / "config.json")
        echo = _report(gau_dir)["config"]
        assert cli.normalize_config(echo) == echo
        assert echo["solver"]["outer_tol"] == 1e-5

    def test_non_convergence_still_reports(self, gau_dir):
        cfg = json.loads((gau_dir / "config.json").read_text())
        cfg["solver"] = {"max_outer": 1}
        _write(gau_dir / "config.json", cfg)
        assert _run("fit", "--config", gau_dir / "config.json") == cli.EXIT_SOLVER
        assert _report(gau_dir)["status"] == "max-iter"

    def test_no_temp_files_left(self, gau_dir):
        _run("fit", "--config", gau_dir / "config.json")
        assert sorted(os.listdir(gau_dir / "out")) == ["report.json", "trace.csv"]

    def test_thread_count_does_not_change_result(self, gau_dir, monkeypatch, tmp_path_factory):
        _run("fit", "--config", gau_dir / "config.json")
        monkeypatch.setenv("KERNELBLEND_THREADS", "4")
        other = tmp_path_factory.mktemp("threads")
        _run("fit", "--config", gau_dir / "config.json", "--out", other)
        with open(other / "report.json") as fh:
            assert json.load(fh)["theta_hat"] == _report(gau_dir)["theta_hat"]


class TestErrors:
    def test_hinge_is_config_error(self, gau_dir, capsys):
        cfg = json.loads((gau_dir / "config.json").read_text())
        cfg["likelihood"] = {"name": "hinge"}
        cfg["objective"] = "map"
        _write(gau_dir / "config.json", cfg)
        assert _run("fit", "--config", gau_dir / "config.json") == cli.EXIT_CONFIG
        assert "correspondence table" in capsys.readouterr().err

    def test_unknown_key(self, gau_dir):
        cfg = json.loads((gau_dir / "config.json").read_text())
        cfg["learning_rate"] = 0.1
        _write(gau_dir / "config.json", cfg)
        assert _run("fit", "--config", gau_dir / "config.json") == cli.EXIT_CONFIG

    def test_missing_config(self, tmp_path):
        assert _run("fit", "--config", tmp_path / "none.json") == cli.EXIT_CONFIG

    def test_bad_thread_variable(self, gau_dir, monkeypatch):
        monkeypatch.setenv("KERNELBLEND_THREADS", "-2")
        assert _run("fit", "--config", gau_dir / "config.json") == cli.EXIT_CONFIG

    def test_bad_data(self, gau_dir):
        _write(gau_dir / "train.csv", "x0,y\n0.1,abc\n")
        assert _run("fit", "--config", gau_dir / "config.json") == cli.EXIT_DATA

    def test_logistic_labels_checked(self, gau_dir):
        cfg = json.loads((gau_dir / "config.json").read_text())
        cfg["likelihood"] = {"name": "logistic"}
        cfg["objective"] = "vb"
        _write(gau_dir / "config.json", cfg)
        assert _run("fit", "--config", gau_dir / "config.json") == cli.EXIT_DATA

    def test_theta_length(self, gau_dir):
        cfg = json.loads((gau_dir / "config.json").read_text())
        cfg["theta"] = [1.0, 2.0]
        _write(gau_dir / "config.json", cfg)
        assert _run("fit", "--config", gau_dir / "config.json") == cli.EXIT_CONFIG


class TestPredict:
    def test_interpolation(self, tmp_path):
        x = np.linspace(-1, 1, 6)
        _csv(tmp_path / "train.csv", ["x0", "y"], zip(x, np.cos(2 * x)))
        _csv(tmp_path / "test.csv", ["x0"], [[x[2]]])
        cfg = {
            "objective": "gau",
            "likelihood": {"name": "gaussian", "sigma2": 1e-9},
            "kernels": [{"kind": "squared-exponential", "lengthscale": 0.5}],
            "theta": [1.0],
            "solver": {"max_outer": 1},
            "data": {"train": "train.csv", "test": "test.csv"},
        }
        _write(tmp_path / "config.json", cfg)
        _run("fit", "--config", tmp_path / "config.json")  # report written either way
        rep = _report(tmp_path)
        rep["theta_hat"] = [1.0]
        from kernelblend.kernels import KernelFunctionSpec, assemble_gram, build_base_kernels
        bs = build_base_kernels([KernelFunctionSpec("squared-exponential", 0.5)], x[:, None])
        K = assemble_gram([1.0], bs).K
        rep["inner"]["u_hat"] = list(K @ np.linalg.solve(K + 1e-9 * np.eye(6), np.cos(2 * x)))
        _write(tmp_path / "out" / "report.json", rep)
        assert _run("predict", "--config", tmp_path / "config.json") == 0
        lines = (tmp_path / "out" / "pred.csv").read_text().splitlines()
        assert lines[0] == "mean"
        assert abs(float(lines[1]) - np.cos(2 * x[2])) <= 1e-4

    def test_after_fit(self, gau_dir):
        assert _run("fit", "--config", gau_dir / "config.json") == 0
        assert _run("predict", "--config", gau_dir / "config.json") == 0
        pred = np.loadtxt(gau_dir / "out" / "pred.csv", skiprows=1, delimiter=",")
        np.testing.assert_allclose(pred, np.sin([-1.0, 0.3]), atol=0.15)

    def test_empty_test_file(self, gau_dir):
        _run("fit", "--config", gau_dir / "config.json")
        _write(gau_dir / "test.csv", "x0\n")
        assert _run("predict", "--config", gau_dir / "config.json") == 0
        assert (gau_dir / "out" / "pred.csv").read_text() == "mean\n"

    def test_logistic_class_column(self, tmp_path):
        x = np.linspace(-2, 2, 12)
        _csv(tmp_path / "train.csv", ["x0", "y"], zip(x, np.where(x > 0, 1.0, -1.0)))
        _csv(tmp_path / "test.csv", ["x0"], [[-1.5], [1.5]])
        cfg = {
            "objective": "map",
            "likelihood": {"name": "logistic"},
            "kernels": [{"kind": "linear"}, {"kind": "squared-exponential"}],
            "data": {"train": "train.csv", "test": "test.csv"},
        }
        _write(tmp_path / "config.json", cfg)
        assert _run("fit", "--config", tmp_path / "config.json") == 0
        assert _run("predict", "--config", tmp_path / "config.json") == 0
        lines = (tmp_path / "out" / "pred.csv").read_text().splitlines()
        assert lines[0] == "mean,class"
        for line, expect in zip(lines[1:], (-1.0, 1.0)):
            mean, cls = map(float, line.split(","))
            assert cls == np.sign(mean) == expect

    def test_precomputed_rejected(self, gau_dir, capsys):
        np.savetxt(gau_dir / "K.csv", np.eye(10), delimiter=",")
        cfg = json.loads((gau_dir / "config.json").read_text())
        cfg["kernels"] = [{"kind": "precomputed", "path": "K.csv"}]
        _write(gau_dir / "config.json", cfg)
        assert _run("predict", "--config", gau_dir / "config.json") == cli.EXIT_CONFIG
        assert "precomputed" in capsys.readouterr().err

    def test_missing_model(self, gau_dir):
        assert _run("predict", "--config", gau_dir / "config.json") == cli.EXIT_DATA


class TestSynth:
    def _cfg(self, tmp_path, name="gaussian"):
        cfg = {
            "objective": "vb",
            "likelihood": {"name": name},
            "kernels": [{"kind": "squared-exponential"}, {"kind": "linear"}],
            "synth": {"n": 8, "n_test": 3, "dim": 2, "theta": [1.0, 0.5]},
        }
        return _write(tmp_path / "config.json", cfg)

    def test_writes_tables(self, tmp_path):
        assert _run("synth", "--config", self._cfg(tmp_path), "--seed", 4) == 0
        train = np.loadtxt(tmp_path / "out" / "train.csv", skiprows=1, delimiter=",")
        test = np.loadtxt(tmp_path / "out" / "test.csv", skiprows=1, delimiter=",")
        assert train.shape == (8, 3) and test.shape == (3, 3)
        assert (tmp_path / "out" / "train.csv").read_text().startswith("x1,x2,y\n")
        meta = json.loads((tmp_path / "out" / "synth.json").read_text())
        assert meta["seed"] == 4

    def test_seeded(self, tmp_path):
        cfg = self._cfg(tmp_path, "logistic")
        _run("synth", "--config", cfg, "--seed", 9, "--out", tmp_path / "a")
        _run("synth", "--config", cfg, "--seed", 9, "--out", tmp_path / "b")
        _run("synth", "--config", cfg, "--seed", 10, "--out", tmp_path / "c")
        a = (tmp_path / "a" / "train.csv").read_text()
        assert a == (tmp_path / "b" / "train.csv").read_text()
        assert a != (tmp_path / "c" / "train.csv").read_text()
        y = np.loadtxt(tmp_path / "a" / "train.csv", skiprows=1, delimiter=",")[:, -1]
        assert set(np.unique(y)) <= {-1.0, 1.0}

    def test_fit_improves_on_start(self, tmp_path):
        from kernelblend.kernels import KernelFunctionSpec, build_base_kernels
        from kernelblend.objectives import eval_phi_gau

        cfg = {
            "objective": "gau",
            "likelihood": {"name": "gaussian", "sigma2": 0.1},
            "kernels": [{"kind": "squared-exponential"}, {"kind": "linear"}],
            "synth": {"n": 30, "dim": 1, "theta": [2.0, 0.0]},
            "data": {"train": "out/train.csv"},
        }
        path = _write(tmp_path / "config.json", cfg)
        assert _run("synth", "--config", path, "--seed", 2) == 0
        assert _run("fit", "--config", path, "--out", tmp_path / "fit") == 0
        rep = json.loads((tmp_path / "fit" / "report.json").read_text())
        data = np.loadtxt(tmp_path / "out" / "train.csv", skiprows=1, delimiter=",")
        bs = build_base_kernels([KernelFunctionSpec("squared-exponential"),
                                 KernelFunctionSpec("linear")], data[:, :1])
        start = eval_phi_gau(np.ones(2), bs, 0.1, data[:, 1])
        assert rep["objective"] < start
        assert rep["objective"] == pytest.approx(
            eval_phi_gau(rep["theta_hat"], bs, 0.1, data[:, 1]), abs=1e-9)

    def test_requires_section(self, gau_dir):
        assert _run("synth", "--config", gau_dir / "config.json") == cli.EXIT_CONFIG


def _copy_fixture(name, tmp_path):
    dst = tmp_path / name
    shutil.copytree(os.path.join(FIXTURES, name), dst)
    return dst


class TestTaxonomy:
    def _rows(self, d):
        import csv
        with open(d / "out" / "taxonomy.csv") as fh:
            return list(csv.DictReader(fh))

    def test_gaussian_fixture(self, tmp_path):
        d = _copy_fixture("taxonomy_gaussian_n3", tmp_path)
        assert _run("taxonomy-check", "--config", d / "config.json") == 0
        rows = self._rows(d)
        names = {r["relation"] for r in rows}
        assert {"vb_bound_gap_gaussian", "vb_ge_mlm", "vb_z0_eq_map", "mkl_minus_map",
                "map_closed_form_gaussian"} <= names
        assert all(r["pass"] == "True" for r in rows)

    def test_inconsistent_oracle_fails(self, tmp_path, monkeypatch):
        d = _copy_fixture("taxonomy_gaussian_n3", tmp_path)
        monkeypatch.setattr(cli, "mlm_monte_carlo",
                            lambda *a, **k: OracleEstimate(1e3, 1e-3, "importance", 10**6))
        assert _run("taxonomy-check", "--config", d / "config.json") == cli.EXIT_TAXONOMY
        fails = [r["relation"] for r in self._rows(d) if r["pass"] != "True"]
        assert fails == ["vb_ge_mlm"]

    def test_n1_uses_quadrature(self, tmp_path):
        _csv(tmp_path / "train.csv", ["x0", "y"], [[0.4, 1.0]])
        cfg = {"likelihood": {"name": "logistic"}, "kernels": [{"kind": "squared-exponential"}],
               "theta": [1.2]}
        _write(tmp_path / "config.json", cfg)
        assert _run("taxonomy-check", "--config", tmp_path / "config.json") == 0
        row = [r for r in self._rows(tmp_path) if r["relation"] == "vb_ge_mlm"][0]
        assert row["kind"] == "quadrature"

    def test_too_many_points(self, gau_dir):
        assert _run("taxonomy-check", "--config", gau_dir / "config.json") == cli.EXIT_DATA


def test_installed_entry_point(tmp_path):
    d = _copy_fixture("fit_gaussian", tmp_path)
    exe = shutil.which("kernelblend")
    cmd = [exe] if exe else [sys.executable, "-m", "kernelblend.cli"]
    out = subprocess.run(cmd + ["fit", "--config", str(d / "config.json")],
                         capture_output=True, text=True)
    assert out.returncode == 0, out.stderr
    assert (d / "out" / "report.json").exists()
