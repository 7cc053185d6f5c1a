"""Command-line front end.

    kernelblend fit|predict|taxonomy-check|synth --config <path> [--out <dir>] [--seed <int>]

Exit codes: 0 success, 2 invalid config, 3 data error, 4 solver did not
converge (the report is still written), 5 a taxonomy relation failed.
Relative paths in a config are resolved against the config's directory.
"""
from __future__ import annotations

import argparse
import copy
import csv
import io
import json
import os
import sys
import tempfile
import time

import jsonschema
import numpy as np

from . import __version__
from .kernels import (
    KernelError,
    KernelFunctionSpec,
    assemble_gram,
    build_base_kernels,
    mix,
    posterior_mean_predict,
)
from .likelihoods import Gaussian, LikelihoodError, make_likelihood
from .objectives import (
    ObjectiveError,
    ObjectiveSpec,
    eval_phi_gau,
    eval_phi_map,
    eval_phi_map_gau,
    eval_phi_mkl,
    eval_psi_vb_gamma,
    eval_psi_vb_z,
    optimize_gamma,
    regularizer,
)
from .oracle import mlm_gauss_hermite, mlm_monte_carlo
from .solver import SolverConfig, fit

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_SOLVER, EXIT_TAXONOMY = 0, 2, 3, 4, 5
TAXONOMY_MAX_N = 6
DETERMINISTIC_TOL = 1e-9
QUADRATURE_TOL = 1e-8

_SOLVER_KEYS = list(SolverConfig().to_dict())

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["likelihood", "kernels"],
    "properties": {
        "objective": {"enum": ["mkl", "map", "gau", "mapgau", "rr", "vb"]},
        "p": {"type": "number", "minimum": 1},
        "lambda": {"type": "number", "exclusiveMinimum": 0},
        "likelihood": {
            "type": "object",
            "additionalProperties": False,
            "required": ["name"],
            "properties": {
                # hinge and epsilon-insensitive pass the schema so that the
                # likelihood factory can explain why they are unusable
                "name": {"enum": ["gaussian", "laplace", "logistic", "hinge",
                                  "epsilon-insensitive"]},
                "sigma2": {"type": "number", "exclusiveMinimum": 0},
                "tau": {"type": "number", "exclusiveMinimum": 0},
            },
        },
        "kernels": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["kind"],
                "properties": {
                    "kind": {"enum": ["linear", "squared-exponential", "precomputed"]},
                    "lengthscale": {"type": "number", "exclusiveMinimum": 0},
                    "variance": {"type": "number", "exclusiveMinimum": 0},
                    "path": {"type": "string"},
                    "name": {"type": "string"},
                },
            },
        },
        "normalize_kernels": {"type": "boolean"},
        "theta": {"type": "array", "items": {"type": "number", "exclusiveMinimum": 0}},
        "solver": {
            "type": "object",
            "additionalProperties": False,
            "properties": {k: {"type": "number"} for k in _SOLVER_KEYS},
        },
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "train": {"type": "string"},
                "test": {"type": "string"},
                "model": {"type": "string"},
            },
        },
        "synth": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n", "theta"],
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "n_test": {"type": "integer", "minimum": 0},
                "dim": {"type": "integer", "minimum": 1},
                "theta": {"type": "array", "items": {"type": "number", "minimum": 0}},
            },
        },
        "oracle": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "samples": {"type": "integer", "minimum": 100000},
                "nodes": {"type": "integer", "minimum": 20},
            },
        },
        "seed": {"type": "integer", "minimum": 0},
        "output": {"type": "string"},
    },
}

DEFAULTS = {
    "objective": "vb",
    "p": 1.0,
    "lambda": 1.0,
    "normalize_kernels": False,
    "data": {"train": "train.csv"},
    "seed": 0,
    "output": "out",
    "oracle": {"samples": 1_000_000, "nodes": 100},
}


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _config_error(msg):
    return CliError(EXIT_CONFIG, f"config error: {msg}")


def _data_error(msg):
    return CliError(EXIT_DATA, f"data error: {msg}")


# ---------------------------------------------------------------------------
# config


def normalize_config(raw):
    """Validate against the schema and fill defaults; idempotent."""
    try:
        jsonschema.validate(raw, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise _config_error(f"{where}: {exc.message}") from None
    cfg = copy.deepcopy(raw)
    for key, val in DEFAULTS.items():
        if isinstance(val, dict):
            cfg[key] = {**val, **cfg.get(key, {})}
        else:
            cfg.setdefault(key, val)
    cfg["p"] = float(cfg["p"])
    cfg["lambda"] = float(cfg["lambda"])
    try:
        cfg["solver"] = SolverConfig.from_dict(cfg.get("solver", {})).to_dict()
    except (TypeError, ValueError) as exc:
        raise _config_error(f"solver: {exc}") from None
    return cfg


def load_config(path):
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise _config_error(f"{path} not found") from None
    except json.JSONDecodeError as exc:
        raise _config_error(f"{path}: invalid JSON ({exc})") from None
    return normalize_config(raw)


def _resolve(base_dir, path):
    return path if os.path.isabs(path) else os.path.join(base_dir, path)


def build_spec(cfg):
    lik_cfg = {k: v for k, v in cfg["likelihood"].items() if k != "name"}
    try:
        model = make_likelihood(cfg["likelihood"]["name"], **lik_cfg)
        return ObjectiveSpec(cfg["objective"], model, cfg["p"], cfg["lambda"])
    except (LikelihoodError, ObjectiveError) as exc:
        raise _config_error(str(exc)) from None


def kernel_specs(cfg, base_dir):
    specs = []
    for k in cfg["kernels"]:
        kw = dict(k)
        if "path" in kw:
            kw["path"] = _resolve(base_dir, kw["path"])
        try:
            specs.append(KernelFunctionSpec(**kw))
        except KernelError as exc:
            raise _config_error(str(exc)) from None
    return specs


# ---------------------------------------------------------------------------
# files


def atomic_write(path, text):
    """Write ``text`` to a temporary file beside ``path``, then rename it."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_table(path):
    """CSV with a header row; returns (column names, float array of rows)."""
    try:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh) if r]
    except OSError as exc:
        raise _data_error(f"cannot read {path}: {exc.strerror}") from None
    if not rows:
        raise _data_error(f"{path}: missing header row")
    header, body = [h.strip() for h in rows[0]], rows[1:]
    try:
        values = np.array([[float(v) for v in r] for r in body], dtype=float)
    except ValueError as exc:
        raise _data_error(f"{path}: {exc}") from None
    values = values.reshape(len(body), len(header))
    if any(len(r) != len(header) for r in body):
        raise _data_error(f"{path}: ragged rows")
    if not np.all(np.isfinite(values)):
        raise _data_error(f"{path}: non-finite values")
    return header, values


def load_training(path):
    """Inputs are every column except ``y``; returns (X or None, y)."""
    header, values = read_table(path)
    if "y" not in header:
        raise _data_error(f"{path}: no 'y' column")
    j = header.index("y")
    y = values[:, j]
    X = np.delete(values, j, axis=1)
    if y.size == 0:
        raise _data_error(f"{path}: no rows")
    return (X if X.shape[1] else None), y


def write_table(path, header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(v)) for v in r])
    atomic_write(path, buf.getvalue())


def _out_dir(cfg, base_dir, override):
    return override if override else _resolve(base_dir, cfg["output"])


# ---------------------------------------------------------------------------
# shared setup


def prepare(cfg, base_dir):
    spec = build_spec(cfg)
    specs = kernel_specs(cfg, base_dir)
    X, y = load_training(_resolve(base_dir, cfg["data"]["train"]))
    try:
        y = spec.likelihood.check_labels(y)
        bases = build_base_kernels(specs, X, normalize=cfg["normalize_kernels"])
    except LikelihoodError as exc:
        raise _data_error(str(exc)) from None
    except (KernelError, OSError) as exc:
        raise _data_error(str(exc)) from None
    if bases.n != y.size:
        raise _data_error(f"{bases.n} kernel rows but {y.size} labels")
    theta = cfg.get("theta")
    if theta is not None and len(theta) != bases.M:
        raise _config_error(f"theta has {len(theta)} entries for {bases.M} kernels")
    return spec, bases, y


def _summary(v):
    return None if v is None else [float(x) for x in np.asarray(v).ravel()]


# ---------------------------------------------------------------------------
# commands


def cmd_fit(cfg, base_dir, out_dir):
    spec, bases, y = prepare(cfg, base_dir)
    config = SolverConfig.from_dict(cfg["solver"])
    start = time.perf_counter()
    res = fit(spec, bases, y, config, theta0=cfg.get("theta"))
    wall = time.perf_counter() - start
    atomic_write(os.path.join(out_dir, "trace.csv"), res.trace.to_csv())
    inner = res.inner
    report = {
        "tool": "kernelblend",
        "version": __version__,
        "status": res.status,
        "message": res.message,
        "theta_hat": _summary(res.theta_hat),
        "sparsity": [bool(s) for s in res.sparsity],
        "kernel_names": list(bases.names),
        "objective": float(res.objective),
        "projected_grad_norm": float(res.projected_grad_norm),
        "n_iter": int(res.n_iter),
        "inner": {
            "u_hat": _summary(inner.u) if inner is not None else None,
            "gamma": _summary(inner.gamma) if inner is not None else None,
            "z": _summary(inner.z) if inner is not None else None,
        },
        "diagnostics": {k: float(v) for k, v in res.diagnostics.items()},
        "wall_time": wall,
        "trace_path": "trace.csv",
        "config": cfg,
    }
    atomic_write(os.path.join(out_dir, "report.json"), json.dumps(report, indent=2) + "\n")
    if not res.converged:
        raise CliError(EXIT_SOLVER, f"solver status {res.status}: {res.message}")
    return report


def cmd_predict(cfg, base_dir, out_dir):
    if any(k["kind"] == "precomputed" for k in cfg["kernels"]):
        raise _config_error(
            "prediction needs kernel values between training and test inputs; "
            "precomputed kernel matrices only cover the training set"
        )
    if "test" not in cfg["data"]:
        raise _config_error("data/test is required for predict")
    spec, bases, y = prepare(cfg, base_dir)
    model_path = _resolve(base_dir, cfg["data"].get("model", os.path.join(out_dir, "report.json")))
    try:
        with open(model_path) as fh:
            report = json.load(fh)
        theta = np.asarray(report["theta_hat"], dtype=float)
        u_hat = np.asarray(report["inner"]["u_hat"], dtype=float)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise _data_error(f"cannot use fitted report {model_path}: {exc}") from None
    if theta.size != bases.M or u_hat.size != bases.n:
        raise _data_error("fitted report does not match the configured kernels and data")
    header, values = read_table(_resolve(base_dir, cfg["data"]["test"]))
    cols = [j for j, h in enumerate(header) if h != "y"]
    Xs = values[:, cols]
    logistic = spec.likelihood.classification
    out_header = ["mean", "class"] if logistic else ["mean"]
    if Xs.shape[0] == 0:
        write_table(os.path.join(out_dir, "pred.csv"), out_header, [])
        return []
    d = 0 if bases.inputs is None else bases.inputs.shape[1]
    if Xs.shape[1] != d:
        raise _data_error(f"test inputs have {Xs.shape[1]} columns, training had {d}")
    gram = assemble_gram(theta, bases, SolverConfig.from_dict(cfg["solver"]).jitter)
    cross = np.tensordot(theta, bases.cross(Xs), axes=1)
    mean = posterior_mean_predict(u_hat, gram, cross)
    rows = [(m, np.sign(m)) for m in mean] if logistic else [(m,) for m in mean]
    write_table(os.path.join(out_dir, "pred.csv"), out_header, rows)
    return mean


def _row(name, kind, lhs, rhs, margin, tol, passed):
    return {"relation": name, "kind": kind, "lhs": float(lhs), "rhs": float(rhs),
            "margin": float(margin), "tolerance": float(tol), "pass": bool(passed)}


def _deterministic(name, lhs, rhs):
    margin = abs(lhs - rhs) / max(1.0, abs(rhs))
    return _row(name, "deterministic", lhs, rhs, margin, DETERMINISTIC_TOL,
                margin <= DETERMINISTIC_TOL)


def taxonomy_rows(spec, bases, y, theta, seed, samples=1_000_000, nodes=100,
                  p=1.0, lam=1.0, jitter=1e-8):
    """Evaluate the relations between the objectives at one theta."""
    model = spec.likelihood
    theta = np.asarray(theta, dtype=float)
    gram = assemble_gram(theta, bases, jitter)
    n = bases.n
    rows = []

    # MLM oracle
    if n == 1:
        est = mlm_gauss_hermite(gram.K[0, 0], model, y, nodes)
    else:
        est = mlm_monte_carlo(gram, model, y, samples, seed)

    if isinstance(model, Gaussian):
        gamma = np.full(n, model.sigma2)
        psi_vb = eval_psi_vb_gamma(theta, bases, model, y, gamma, jitter)
        phi_gau = eval_phi_gau(theta, bases, model.sigma2, y, jitter)
        rows.append(_deterministic("vb_bound_gap_gaussian", psi_vb, phi_gau))
        map_closed = eval_phi_map_gau(theta, bases, model.sigma2, y, jitter) + n * np.log(
            2 * np.pi * model.sigma2)
    else:
        gamma, psi_vb = optimize_gamma(theta, bases, model, y, jitter=jitter)
        map_closed = None

    gap = psi_vb - est.value
    if est.std_error == 0.0:
        # Gauss-Hermite at n = 1: equality for a Gaussian likelihood, a bound otherwise
        tol = QUADRATURE_TOL * max(1.0, abs(est.value))
        ok = abs(gap) <= tol if isinstance(model, Gaussian) else gap >= -tol
        rows.append(_row("vb_ge_mlm", "quadrature", psi_vb, est.value, gap, tol, ok))
    else:
        rows.append(_row("vb_ge_mlm", "stochastic", psi_vb, est.value, gap,
                         3.0 * est.std_error, gap >= -3.0 * est.std_error))

    phi_map, u_map = eval_phi_map(theta, bases, ObjectiveSpec("map", model), y, jitter,
                                  return_u=True)
    psi_z0 = eval_psi_vb_z(theta, bases, model, y, u_map, np.zeros(n), jitter)
    rows.append(_deterministic("vb_z0_eq_map", psi_z0, phi_map))

    phi_mkl, u_mkl = eval_phi_mkl(theta, bases, ObjectiveSpec("mkl", model, p, lam), y, jitter,
                                  u0=u_map, return_u=True)
    rows.append(_deterministic("mkl_minus_map", phi_mkl - phi_map,
                               regularizer(theta, p, lam) - gram.logdet()))
    if map_closed is not None:
        rows.append(_deterministic("map_closed_form_gaussian", phi_map, map_closed))
    return rows, est


def cmd_taxonomy_check(cfg, base_dir, out_dir, seed):
    spec, bases, y = prepare(cfg, base_dir)
    if bases.n > TAXONOMY_MAX_N:
        raise _data_error(
            f"taxonomy-check needs n <= {TAXONOMY_MAX_N} for the marginal-likelihood oracle, "
            f"got n = {bases.n}"
        )
    solver_cfg = SolverConfig.from_dict(cfg["solver"])
    theta = cfg.get("theta")
    if theta is None:
        res = fit(spec, bases, y, solver_cfg)
        if res.status == "error":
            raise CliError(EXIT_SOLVER, f"fit for taxonomy point failed: {res.message}")
        theta = np.maximum(res.theta_hat, 1e-6 * max(np.max(res.theta_hat), 1e-12))
    rows, est = taxonomy_rows(spec, bases, y, theta, seed, cfg["oracle"]["samples"],
                              cfg["oracle"]["nodes"], cfg["p"], cfg["lambda"],
                              solver_cfg.jitter)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    atomic_write(os.path.join(out_dir, "taxonomy.csv"), buf.getvalue())
    failed = [r["relation"] for r in rows if not r["pass"]]
    if failed:
        raise CliError(EXIT_TAXONOMY, "taxonomy relations failed: " + ", ".join(failed))
    return rows


def cmd_synth(cfg, base_dir, out_dir, seed):
    if "synth" not in cfg:
        raise _config_error("synth section is required")
    syn = cfg["synth"]
    spec = build_spec(cfg)
    specs = kernel_specs(cfg, base_dir)
    if any(s.kind == "precomputed" for s in specs):
        raise _config_error("synth draws new inputs, so precomputed kernels are not allowed")
    if len(syn["theta"]) != len(specs):
        raise _config_error("synth/theta needs one weight per kernel")
    n, n_test, dim = syn["n"], syn.get("n_test", 0), syn.get("dim", 1)
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2.0, 2.0, size=(n + n_test, dim))
    bases = build_base_kernels(specs, X, normalize=cfg["normalize_kernels"])
    K = mix(np.asarray(syn["theta"], dtype=float), bases)
    K[np.diag_indices_from(K)] += 1e-8
    u = np.linalg.cholesky(K) @ rng.standard_normal(n + n_test)
    yy = spec.likelihood.sample(u, rng)
    header = [f"x{j + 1}" for j in range(dim)] + ["y"]
    write_table(os.path.join(out_dir, "train.csv"), header, np.column_stack([X[:n], yy[:n]]))
    if n_test:
        write_table(os.path.join(out_dir, "test.csv"), header,
                    np.column_stack([X[n:], yy[n:]]))
    meta = {"seed": seed, "theta_star": [float(t) for t in syn["theta"]], "config": cfg}
    atomic_write(os.path.join(out_dir, "synth.json"), json.dumps(meta, indent=2) + "\n")
    return X, yy


# ---------------------------------------------------------------------------
# entry point


def build_parser():
    parser = argparse.ArgumentParser(prog="kernelblend", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kernelblend {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("fit", "predict", "taxonomy-check", "synth"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
    return parser


def run(argv=None):
    """Parse arguments and run a command; returns the exit code."""
    args = build_parser().parse_args(argv)
    try:
        threads = os.environ.get("KERNELBLEND_THREADS", "0")
        if not threads.isdigit():
            raise _config_error(f"KERNELBLEND_THREADS must be a nonnegative integer, got {threads!r}")
        cfg = load_config(args.config)
        base_dir = os.path.dirname(os.path.abspath(args.config))
        out_dir = _out_dir(cfg, base_dir, args.out)
        seed = cfg["seed"] if args.seed is None else args.seed
        if args.seed is not None:
            cfg["seed"] = seed
        if args.command == "fit":
            cmd_fit(cfg, base_dir, out_dir)
        elif args.command == "predict":
            cmd_predict(cfg, base_dir, out_dir)
        elif args.command == "taxonomy-check":
            cmd_taxonomy_check(cfg, base_dir, out_dir, seed)
        else:
            cmd_synth(cfg, base_dir, out_dir, seed)
    except CliError as exc:
        print(f"kernelblend: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
