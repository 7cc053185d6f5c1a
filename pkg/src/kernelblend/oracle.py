"""Brute-force reference values for testing: marginal likelihoods, grid minima
and finite-difference gradients.

Nothing here is used by the solver. The Monte-Carlo estimator draws from a
defensive mixture of the variational Gaussian and the prior so that the
importance weights stay bounded for every likelihood in this package.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy.integrate import quad
from scipy.optimize import minimize_scalar
from scipy.special import logsumexp, roots_hermite

from .kernels import BaseKernelSet, GramFactor, assemble_gram, cholesky
from .likelihoods import Gaussian, Laplace
from .objectives import optimize_gamma, vb_posterior

MC_MAX_N = 6
MC_MIN_SAMPLES = 100_000
GH_MIN_NODES = 20
GH_CHECK_TOL = 1e-10
BATCH = 1 << 16


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class OracleEstimate:
    value: float
    std_error: float
    method: str
    samples_or_nodes: int

    def __post_init__(self):
        if not self.std_error >= 0:
            raise OracleError("std_error must be nonnegative")


def _gh_log_evidence(k, model, y, centre, scale, nodes):
    x, wts = roots_hermite(int(nodes))
    keep = wts > 0  # outermost weights underflow for large node counts
    x, wts = x[keep], wts[keep]
    u = centre + scale * x
    logf = (-0.5 * np.log(2 * np.pi * k) - 0.5 * u**2 / k
            - 0.5 * model.pointwise(np.full(u.shape, y), u) + x**2 + np.log(scale))
    return float(logsumexp(logf + np.log(wts))), float(np.max(logf + np.log(wts)))


def mlm_gauss_hermite(k, model, y, nodes=100):
    """-2 ln int N(u|0,k) P(y|u) du for a single site by adaptive Gauss-Hermite.

    The nodes are centred and scaled on the variational Gaussian posterior,
    which is the exact posterior for a Gaussian likelihood. For other sites
    the rule is repeated with twice the nodes; if the two disagree by more
    than GH_CHECK_TOL, or the site has a kink (Laplace), the integral is
    instead done by adaptive quadrature with breakpoints at the posterior
    mean and at the site's transition point.
    """
    if not k > 0:
        raise OracleError("kernel value k must be positive")
    if nodes < GH_MIN_NODES:
        raise OracleError(f"need at least {GH_MIN_NODES} nodes")
    k = float(k)
    yv = model.check_labels(np.asarray(y, dtype=float).reshape(-1)[:1])
    gram = assemble_gram(np.ones(1), BaseKernelSet(np.full((1, 1, 1), k), ("k",)), 1e-300)
    m, V = _proposal(gram, model, yv)
    centre, scale = float(m[0]), float(np.sqrt(2.0 * V[0, 0]))
    logz, peak = _gh_log_evidence(k, model, yv[0], centre, scale, nodes)
    if isinstance(model, Gaussian):
        return OracleEstimate(-2.0 * logz, 0.0, "gauss-hermite", int(nodes))
    if not isinstance(model, Laplace):
        check, _ = _gh_log_evidence(k, model, yv[0], centre, scale, 2 * nodes)
        if abs(2.0 * (check - logz)) <= GH_CHECK_TOL:
            return OracleEstimate(-2.0 * logz, 0.0, "gauss-hermite", int(nodes))
    kink = yv[0] if isinstance(model, Laplace) else 0.0
    logz = _split_quad(k, model, yv[0], centre, kink, peak)
    return OracleEstimate(-2.0 * logz, 0.0, "split-quadrature", int(nodes))


def _split_quad(k, model, y, centre, kink, shift):
    """ln of the single-site evidence by adaptive quadrature with breakpoints.

    The window of 40 prior standard deviations around ``centre`` holds all
    the mass to double precision.
    """
    def f(u):
        lp = -0.5 * np.log(2 * np.pi * k) - 0.5 * u**2 / k - 0.5 * model.pointwise([y], [u])[0]
        return np.exp(lp - shift)

    a, b = centre - 40.0 * np.sqrt(k), centre + 40.0 * np.sqrt(k)
    pts = sorted({p for p in (centre, kink) if a < p < b})
    val, _ = quad(f, a, b, points=pts, epsabs=0.0, epsrel=1e-13, limit=500)
    return float(shift + np.log(val))


def _threads():
    try:
        return max(int(os.environ.get("KERNELBLEND_THREADS", "0")), 0)
    except ValueError:
        return 0


def _mvn_logpdf(x, mean, L):
    """log N(x | mean, L L^T) for the rows of x."""
    from scipy.linalg import solve_triangular

    z = solve_triangular(L, (x - mean).T, lower=True, check_finite=False)
    n = L.shape[0]
    return (
        -0.5 * np.sum(z**2, axis=0)
        - np.sum(np.log(np.diag(L)))
        - 0.5 * n * np.log(2 * np.pi)
    )


def _proposal(gram, model, y):
    """Mean and covariance of the variational Gaussian at the optimal widths."""
    if isinstance(model, Gaussian):
        gamma = np.full(gram.n, model.sigma2)
    else:
        # a one-base set reproducing K exactly, so optimize_gamma sees this gram
        bases = BaseKernelSet((gram.K - gram.jitter * np.eye(gram.n))[None], ("K",))
        gamma, _ = optimize_gamma(np.ones(1), bases, model, y, jitter=gram.jitter)
    return vb_posterior(gram, model, y, gamma)


def mlm_monte_carlo(gram, model, y, samples=1_000_000, seed=None, prior_weight=0.05):
    """-2 ln Z by importance sampling, Z = int N(u|0,K) P(y|u) du.

    Proposal: (1 - prior_weight) N(m, V) + prior_weight N(0, K), with (m, V)
    the variational Gaussian. The prior component keeps the weights bounded
    by ``max P(y|u) / prior_weight``; for a Gaussian likelihood the relative
    weight variance is about ``prior_weight / (1 - prior_weight)``. Samples are drawn in fixed-size batches, each
    from its own child of ``np.random.SeedSequence(seed)``, so the estimate
    does not depend on the number of worker threads.
    """
    if seed is None:
        raise OracleError("mlm_monte_carlo requires an explicit seed")
    if not isinstance(gram, GramFactor):
        raise OracleError("gram must be a GramFactor")
    n = gram.n
    if n > MC_MAX_N:
        raise OracleError(f"Monte-Carlo oracle limited to n <= {MC_MAX_N}, got {n}")
    samples = int(samples)
    if samples < MC_MIN_SAMPLES:
        raise OracleError(f"need at least {MC_MIN_SAMPLES} samples")
    if not 0 < prior_weight < 1:
        raise OracleError("prior_weight must lie in (0, 1)")
    y = model.check_labels(y)
    m, V = _proposal(gram, model, y)
    LV = cholesky(V + 1e-12 * np.trace(V) / n * np.eye(n))
    LK = gram.chol
    zero = np.zeros(n)
    log_mix = np.log([1.0 - prior_weight, prior_weight])

    sizes = [BATCH] * (samples // BATCH)
    if samples % BATCH:
        sizes.append(samples % BATCH)
    children = np.random.SeedSequence(seed).spawn(len(sizes))

    def batch(i):
        rng = np.random.default_rng(children[i])
        size = sizes[i]
        from_prior = rng.random(size) < prior_weight
        z = rng.standard_normal((size, n))
        u = np.where(from_prior[:, None], z @ LK.T, m + z @ LV.T)
        logq = np.logaddexp(
            log_mix[0] + _mvn_logpdf(u, m, LV), log_mix[1] + _mvn_logpdf(u, zero, LK)
        )
        loss = model.pointwise(np.tile(y, size), u.reshape(-1)).reshape(size, n)
        logp = _mvn_logpdf(u, zero, LK) - 0.5 * np.sum(loss, axis=1)
        lw = logp - logq
        if not np.all(np.isfinite(lw)):
            raise OracleError("degenerate proposal: non-finite importance weights")
        return logsumexp(lw), logsumexp(2.0 * lw)

    workers = _threads()
    if workers > 1 and len(sizes) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(batch, range(len(sizes))))
    else:
        parts = [batch(i) for i in range(len(sizes))]
    log_s1 = logsumexp([p[0] for p in parts])
    log_s2 = logsumexp([p[1] for p in parts])
    N = float(samples)
    log_mean = log_s1 - np.log(N)
    # relative variance of the weights: E[w^2]/E[w]^2 - 1
    rel_var = max(np.exp(log_s2 - np.log(N) - 2.0 * log_mean) - 1.0, 0.0)
    rel_se = np.sqrt(rel_var / N)
    return OracleEstimate(float(-2.0 * log_mean), float(2.0 * rel_se), "monte-carlo", samples)


def finite_diff_gradient(f, theta, step_rule=None):
    """Central differences; steps default to 1e-5 (1 + |theta_m|).

    Steps that would leave the positive orthant are halved until they fit;
    a step below 1e-12 is an error.
    """
    theta = np.asarray(theta, dtype=float).reshape(-1)
    rule = step_rule or (lambda x: 1e-5 * (1.0 + abs(x)))
    g = np.empty_like(theta)
    for m, x in enumerate(theta):
        h = float(rule(x))
        while x - h <= 0:
            h *= 0.5
            if h < 1e-12:
                raise OracleError(f"coordinate {m} is too close to the boundary for a central difference")
        e = np.zeros_like(theta)
        e[m] = h
        g[m] = (f(theta + e) - f(theta - e)) / (2.0 * h)
    return g


def grid_min(f, lo, hi, points=200):
    """Log-spaced scan of [lo, hi] refined by a golden-section search."""
    if not lo < hi:
        raise OracleError("need lo < hi")
    if points < 100:
        raise OracleError("need at least 100 grid points")
    xs = np.geomspace(lo, hi, int(points)) if lo > 0 else np.linspace(lo, hi, int(points))
    with np.errstate(all="ignore"):
        fs = np.array([f(x) for x in xs], dtype=float)
    fs = np.where(np.isfinite(fs), fs, np.inf)
    if not np.any(np.isfinite(fs)):
        raise OracleError("objective is not finite anywhere on the grid")
    i = int(np.argmin(fs))
    if 0 < i < xs.size - 1:
        res = minimize_scalar(f, bracket=(xs[i - 1], xs[i], xs[i + 1]), method="golden",
                              options={"xtol": 1e-12})
    else:
        a, b = xs[max(i - 1, 0)], xs[min(i + 1, xs.size - 1)]
        res = minimize_scalar(f, bounds=(a, b), method="bounded", options={"xatol": 1e-12})
    if res.fun <= fs[i]:
        return float(res.x), float(res.fun)
    return float(xs[i]), float(fs[i])
