"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Tolerances are pinned below. Criterion 7a targets theta = 3.99, which is the
stationary point of the Gaussian-marginal objective, not of the MAP-Gaussian
one (3.979975...); it is checked as stated and is expected to fail.
"""
import csv
import os
import shutil
import time

import numpy as np
import pytest

from kernelblend import cli
from kernelblend.kernels import (
    BaseKernelSet,
    KernelFunctionSpec,
    assemble_gram,
    build_base_kernels,
    mix,
)
from kernelblend.likelihoods import Gaussian, Laplace, Logistic
from kernelblend.objectives import (
    Criterion,
    ObjectiveSpec,
    eval_phi_gau,
    eval_phi_map,
    eval_phi_map_gau,
    eval_phi_mkl,
    eval_phi_rr,
    eval_psi_vb_gamma,
    eval_psi_vb_z,
    optimize_gamma,
    regularizer,
    theta_gradient,
)
from kernelblend.oracle import (
    finite_diff_gradient,
    grid_min,
    mlm_gauss_hermite,
    mlm_monte_carlo,
)
from kernelblend.solver import TangentBound, fit, refit_lambda

from conftest import labels_for, random_bases

GH_TOL = 1e-8
MC_SAMPLES = 1_000_000
MC_SIGMAS = 3.0
C1_SECONDS = 60.0
IDENTITY_RTOL = 1e-9
COLLAPSE_TOL = 1e-10
GRAD_RTOL = 1e-4
HESS_RTOL = 1e-3
TANGENCY_TOL = 1e-10
PG_TOL = 1e-5
FIT_SECONDS = 10.0
SCALAR_TOL = 1e-3
CONVEXITY_TOL = 1e-10
TAXONOMY_TOL = 1e-9

FIXTURES = os.path.join(os.path.dirname(__file__), os.pardir, "fixtures")


@pytest.fixture
def report(capsys):
    def _report(label, passed, detail):
        with capsys.disabled():
            print(f"\n[acceptance] criterion {label}: {'PASS' if passed else 'FAIL'} ({detail})")
    return _report


def _instances(seed, count, models):
    rng = np.random.default_rng(seed)
    for i in range(count):
        n = int(rng.integers(1, 4))
        M = int(rng.integers(1, 4))
        model = models[i % len(models)]
        yield rng, model, random_bases(rng, M, n), rng.uniform(0.3, 2.0, M), labels_for(model, rng, n)


def test_c1_gaussian_exactness(report):
    start = time.perf_counter()
    worst_det, worst_sig, count = 0.0, 0.0, 0
    models = [Gaussian(0.2), Gaussian(0.5), Gaussian(1.3)]
    for i, (rng, model, bs, th, y) in enumerate(_instances(101, 20, models)):
        exact = eval_phi_gau(th, bs, model.sigma2, y)
        gram = assemble_gram(th, bs)
        if bs.n == 1:
            est = mlm_gauss_hermite(gram.K[0, 0], model, y)
            worst_det = max(worst_det, abs(est.value - exact))
        else:
            est = mlm_monte_carlo(gram, model, y, MC_SAMPLES, seed=1000 + i)
            worst_sig = max(worst_sig, abs(est.value - exact) / est.std_error)
        count += 1
    wall = time.perf_counter() - start
    ok = worst_det <= GH_TOL and worst_sig <= MC_SIGMAS and wall < C1_SECONDS and count == 20
    report("1 gaussian exactness", ok,
           f"quadrature err {worst_det:.2e} <= {GH_TOL:g}, worst |z| {worst_sig:.2f} <= 3, "
           f"{wall:.1f}s < 60s")
    assert ok


def test_c2_bound_hierarchy(report):
    worst_sig, worst_z0, worst_mkl = np.inf, 0.0, 0.0
    models = [Logistic(1.0), Laplace(1.5), Logistic(2.0), Laplace(0.7)]
    for i, (rng, model, bs, th, y) in enumerate(_instances(202, 20, models)):
        gram = assemble_gram(th, bs)
        _, psi_vb = optimize_gamma(th, bs, model, y)
        if bs.n == 1:
            est = mlm_gauss_hermite(gram.K[0, 0], model, y)
        else:
            est = mlm_monte_carlo(gram, model, y, MC_SAMPLES, seed=2000 + i)
        gap = psi_vb - est.value
        worst_sig = min(worst_sig, gap / est.std_error if est.std_error else np.sign(gap) * np.inf)
        phi_map, u = eval_phi_map(th, bs, ObjectiveSpec("map", model), y, return_u=True)
        z0 = eval_psi_vb_z(th, bs, model, y, u, np.zeros(bs.n))
        worst_z0 = max(worst_z0, abs(z0 - phi_map) / max(1.0, abs(phi_map)))
        p, lam = (1.0, 2.0)[i % 2], 0.5
        phi_mkl = eval_phi_mkl(th, bs, ObjectiveSpec("mkl", model, p, lam), y, u0=u)
        rhs = regularizer(th, p, lam) - gram.logdet()
        worst_mkl = max(worst_mkl, abs((phi_mkl - phi_map) - rhs) / max(1.0, abs(rhs)))
    ok = worst_sig >= -MC_SIGMAS and worst_z0 <= IDENTITY_RTOL and worst_mkl <= IDENTITY_RTOL
    report("2 bound hierarchy", ok,
           f"min gap/SE {worst_sig:.1f} >= -3, z=0 vs MAP {worst_z0:.1e}, "
           f"MKL-MAP identity {worst_mkl:.1e} <= 1e-9")
    assert ok


def test_c3_gaussian_collapse(report):
    worst = 0.0
    models = [Gaussian(0.05), Gaussian(0.4), Gaussian(2.0)]
    for rng, model, bs, th, y in _instances(303, 30, models):
        vb = eval_psi_vb_gamma(th, bs, model, y, np.full(bs.n, model.sigma2))
        gau = eval_phi_gau(th, bs, model.sigma2, y)
        worst = max(worst, abs(vb - gau))
    ok = worst <= COLLAPSE_TOL
    report("3 gaussian collapse", ok, f"max |psi_vb - phi_gau| {worst:.1e} <= 1e-10")
    assert ok


def _outer_value(spec, bs, y):
    m, kind = spec.likelihood, spec.kind
    if kind == "gau":
        return lambda t: eval_phi_gau(t, bs, m.sigma2, y), None
    if kind == "mapgau":
        return lambda t: eval_phi_map_gau(t, bs, m.sigma2, y), None
    if kind == "rr":
        return lambda t: eval_phi_rr(t, bs, m.sigma2, y, spec.p, spec.lam), None
    if kind in ("map", "mkl"):
        ev = eval_phi_map if kind == "map" else eval_phi_mkl
        return (lambda t: ev(t, bs, spec, y),
                lambda t: ev(t, bs, spec, y, return_u=True)[1])
    if isinstance(m, Gaussian):
        return lambda t: optimize_gamma(t, bs, m, y)[1], None
    return lambda t: optimize_gamma(t, bs, m, y)[1], lambda t: optimize_gamma(t, bs, m, y)[0]


def _fd(f, x, h=1e-6):
    g = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h * (1 + abs(x[i]))
        g[i] = (f(x + e) - f(x - e)) / (2 * e[i])
    return g


def _rel(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-12))


def test_c4_derivatives(report):
    rng = np.random.default_rng(404)
    general = [Gaussian(0.3), Laplace(1.5), Logistic(1.0)]
    worst_g, worst_h, checks = 0.0, 0.0, 0
    for kind in ("mkl", "map", "gau", "mapgau", "rr", "vb"):
        pool = [Gaussian(0.3)] if kind in ("gau", "mapgau", "rr") else general
        for i in range(10):
            model = pool[i % len(pool)]
            n, M = int(rng.integers(2, 6)), int(rng.integers(1, 4))
            bs = random_bases(rng, M, n)
            th = rng.uniform(0.3, 2.0, M)
            y = labels_for(model, rng, n)
            spec = ObjectiveSpec(kind, model, p=(1.0, 2.0)[i % 2], lam=0.5)
            f, inner = _outer_value(spec, bs, y)
            g = theta_gradient(spec, th, bs, y, None if inner is None else inner(th))
            worst_g = max(worst_g, _rel(g, finite_diff_gradient(f, th)))

            crit = Criterion(spec, bs, y)
            w = crit.initial_inner(th)
            if crit.inner_dim:
                w = w + 0.3 * rng.standard_normal(w.size)
            x0 = np.concatenate([th, w])
            H = crit.convex_hessian(th, w)
            cols = [_fd(lambda x, j=j: np.concatenate(crit.convex_gradient(x[:M], x[M:]))[j], x0)
                    for j in range(x0.size)]
            Hfd = np.array(cols)
            worst_h = max(worst_h, _rel(H, 0.5 * (Hfd + Hfd.T)))
            checks += 1
    ok = worst_g <= GRAD_RTOL and worst_h <= HESS_RTOL and checks == 60
    report("4 derivatives", ok,
           f"{checks} instances, gradient rel err {worst_g:.1e} <= 1e-4, "
           f"Hessian rel err {worst_h:.1e} <= 1e-3")
    assert ok


def test_c5_tangent_bound(report):
    rng = np.random.default_rng(505)
    worst_tan, violations, checked = 0.0, 0, 0
    for _ in range(20):
        M, n = int(rng.integers(1, 5)), int(rng.integers(2, 7))
        bs = random_bases(rng, M, n, rank=int(rng.integers(1, n + 1)))
        anchor = rng.uniform(0.05, 3.0, M)
        gram = assemble_gram(anchor, bs)
        lam = refit_lambda(gram, bs)
        tb = TangentBound.logdet(gram, bs)
        np.testing.assert_array_equal(tb.lam, lam)
        worst_tan = max(worst_tan, abs(tb.value(anchor) - gram.logdet()))
        for th in rng.uniform(0.0, 5.0, (100, M)):
            ld = assemble_gram(th, bs).logdet()
            violations += tb.value(th) < ld - 1e-12 * max(1.0, abs(ld))
            checked += 1
    # refits inside the solver
    fit_tan = 0.0
    for model, kind in ((Logistic(1.0), "map"), (Laplace(1.5), "vb"), (Gaussian(0.3), "gau")):
        bs = random_bases(rng, 3, 8)
        res = fit(ObjectiveSpec(kind, model), bs, labels_for(model, rng, 8))
        fit_tan = max(fit_tan, res.diagnostics["tangency"])
    ok = worst_tan <= TANGENCY_TOL and violations == 0 and fit_tan <= TANGENCY_TOL
    report("5 tangent bound", ok,
           f"tangency {worst_tan:.1e} (in-solver {fit_tan:.1e}) <= 1e-10, "
           f"{violations} violations in {checked} draws")
    assert ok


def _synthetic(model, seed=606, n=50):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-2, 2, (n, 2))
    specs = [KernelFunctionSpec("squared-exponential", 0.5),
             KernelFunctionSpec("squared-exponential", 1.5),
             KernelFunctionSpec("squared-exponential", 4.0),
             KernelFunctionSpec("linear")]
    bs = build_base_kernels(specs, X, normalize=True)
    K = mix(np.array([20.0, 30.0, 0.0, 5.0]), bs) + 1e-8 * np.eye(n)
    u = np.linalg.cholesky(K) @ rng.standard_normal(n)
    return bs, model.sample(u, rng)


@pytest.mark.parametrize("model", [Gaussian(0.1), Laplace(2.0), Logistic(1.0)],
                         ids=["gaussian", "laplace", "logistic"])
def test_c6_algorithm(report, model):
    bs, y = _synthetic(model)
    start = time.perf_counter()
    res = fit(ObjectiveSpec("vb", model), bs, y)
    wall = time.perf_counter() - start
    ok = (res.converged and res.projected_grad_norm <= PG_TOL and res.trace.is_monotone(0.0)
          and wall <= FIT_SECONDS)
    report(f"6 algorithm ({type(model).__name__.lower()})", ok,
           f"status {res.status}, pg {res.projected_grad_norm:.1e} <= 1e-5, "
           f"monotone {res.trace.is_monotone(0.0)}, {wall:.2f}s <= 10s")
    assert ok


def _scalar():
    return BaseKernelSet(np.ones((1, 1, 1)), ("k",))


def test_c7a_map_gaussian_scalar(report):
    s2, y = 0.01, 2.0
    res = fit(ObjectiveSpec("mapgau", Gaussian(s2)), _scalar(), [y])
    x_grid, _ = grid_min(lambda t: eval_phi_map_gau([t], _scalar(), s2, [y]), 0.1, 100.0)
    th = res.theta_hat[0]
    ok = res.converged and abs(th - 3.99) <= SCALAR_TOL
    report("7a mapgau scalar", ok,
           f"theta {th:.6f} (grid {x_grid:.6f}) vs 3.99 +- 1e-3")
    assert ok


def test_c7a_companion_gaussian_marginal(report):
    s2, y = 0.01, 2.0
    res = fit(ObjectiveSpec("gau", Gaussian(s2)), _scalar(), [y])
    th = res.theta_hat[0]
    ok = res.converged and abs(th - 3.99) <= SCALAR_TOL
    report("7a' gau scalar (y^2 - s2)", ok, f"theta {th:.6f} vs 3.99 +- 1e-3")
    assert ok


def test_c7b_ridge_scalar(report):
    y, lam, s2 = 2.0, 0.25, 1e-9
    res = fit(ObjectiveSpec("rr", Gaussian(s2), p=1.0, lam=lam), _scalar(), [y])
    th = res.theta_hat[0]
    target = y / np.sqrt(lam)
    ok = res.converged and abs(th - target) <= SCALAR_TOL
    report("7b rr scalar", ok, f"theta {th:.6f} vs y/sqrt(lambda) = {target:g} +- 1e-3")
    assert ok


def test_c8_convexity(report):
    rng = np.random.default_rng(808)
    bs = random_bases(rng, 3, 4)
    yr = rng.standard_normal(4)
    yc = labels_for(Logistic(), rng, 4)
    worst = {}

    def check(name, f, sign, lo=0.0):
        w = 0.0
        for a, b in rng.uniform(lo, 3.0, (200, 2, 3)):
            mid, ends = f(0.5 * (a + b)), 0.5 * (f(a) + f(b))
            excess = sign * (mid - ends) / max(1.0, abs(ends))
            w = max(w, excess)
        worst[name] = w

    for p in (1.0, 2.0):
        spec = ObjectiveSpec("mkl", Logistic(1.0), p, 0.5)
        check(f"mkl p={p:g}", lambda t: eval_phi_mkl(t, bs, spec, yc), 1.0)
        check(f"rr p={p:g}", lambda t: eval_phi_rr(t, bs, 0.3, yr, p, 0.5), 1.0)
    check("logdet", lambda t: assemble_gram(t, bs).logdet(), -1.0)
    for p in (2.0, 3.0):
        check(f"logdet root p={p:g}", lambda t: assemble_gram(t ** (1 / p), bs).logdet(), -1.0)
    ok = all(v <= CONVEXITY_TOL for v in worst.values())
    report("8 convexity", ok,
           ", ".join(f"{k} {max(v, 0.0):.0e}" for k, v in worst.items()) + " <= 1e-10")
    assert ok


def test_c9_taxonomy_cli(report, tmp_path):
    d = tmp_path / "fixture"
    shutil.copytree(os.path.join(FIXTURES, "taxonomy_logistic_n2"), d)
    code = cli.run(["taxonomy-check", "--config", str(d / "config.json")])
    with open(d / "out" / "taxonomy.csv") as fh:
        rows = list(csv.DictReader(fh))
    det = [float(r["margin"]) for r in rows if r["kind"] == "deterministic"]
    ok = code == 0 and len(det) >= 2 and max(det) <= TAXONOMY_TOL
    report("9 taxonomy cli", ok, f"exit {code}, max deterministic margin {max(det):.1e} <= 1e-9")
    assert ok
