"""Likelihoods, their losses -2 ln P(y|u), and scaled-Gaussian site bounds.

Every likelihood here is log-concave, so the loss is convex in ``u`` and the
likelihood is a supremum of scaled Gaussians

    -2 ln P(y_i|u_i) = min_{gamma>0}  s_i^2/gamma - 2 beta_i s_i + h_i(gamma)

where ``s_i = u_i`` for classification sites and ``s_i = u_i - y_i`` for
regression (residual) sites, which carry ``beta = 0``.
"""
from __future__ import annotations

import numpy as np
from scipy.special import expit

LN2 = np.log(2.0)

# Loss functions without a likelihood counterpart; kept for error messages only.
NO_LIKELIHOOD = {
    "hinge": "SVM hinge loss max(0, 1 - y u)",
    "epsilon-insensitive": "SVM epsilon-insensitive loss max(0, |y - u|/eps - 1)",
}


class LikelihoodError(ValueError):
    pass


class UnsupportedLikelihood(LikelihoodError):
    """A loss that no normalised likelihood induces."""


def _check_finite(u):
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise LikelihoodError("latent values must be finite")
    return u


class Likelihood:
    name = "base"
    classification = False

    def check_labels(self, y):
        y = np.asarray(y, dtype=float).reshape(-1)
        if not np.all(np.isfinite(y)):
            raise LikelihoodError("labels must be finite")
        return y

    def neg_log2_lik(self, y, u, smooth=False):
        return float(np.sum(self.pointwise(y, u, smooth)))

    def beta(self, y):
        return np.zeros_like(self.check_labels(y))

    def site_bound(self, y, u, gamma):
        """Upper bound on -2 ln P(y|u) from the scaled Gaussian of width gamma."""
        y = self.check_labels(y)
        s = u - y if not self.classification else np.asarray(u, dtype=float)
        h, _, _ = self.site_h(gamma)
        return s**2 / gamma - 2.0 * self.beta(y) * s + h

    def to_config(self):
        raise NotImplementedError


class Gaussian(Likelihood):
    name = "gaussian"

    def __init__(self, sigma2):
        if not sigma2 > 0:
            raise LikelihoodError("sigma2 must be positive")
        self.sigma2 = float(sigma2)

    @property
    def fixed_gamma(self):
        return self.sigma2

    def pointwise(self, y, u, smooth=False):
        y = self.check_labels(y)
        u = _check_finite(u)
        return (y - u) ** 2 / self.sigma2 + np.log(2 * np.pi * self.sigma2)

    def derivatives(self, y, u):
        y = self.check_labels(y)
        u = _check_finite(u)
        return 2.0 * (u - y) / self.sigma2, np.full_like(u, 2.0 / self.sigma2)

    def site_h(self, gamma):
        # The Gaussian is its own bound: only gamma = sigma2 is admissible.
        gamma = np.asarray(gamma, dtype=float)
        if np.any(gamma <= 0):
            raise LikelihoodError("gamma must be positive")
        ok = np.isclose(gamma, self.sigma2, rtol=1e-12, atol=0.0)
        h = np.where(ok, np.log(2 * np.pi * self.sigma2), np.inf)
        zero = np.zeros_like(gamma)
        return h, zero, zero

    def log_density(self, y, u):
        return -0.5 * self.pointwise(y, u)

    def sample(self, u, rng):
        return u + np.sqrt(self.sigma2) * rng.standard_normal(np.shape(u))

    def to_config(self):
        return {"name": self.name, "sigma2": self.sigma2}


class Laplace(Likelihood):
    """P(y|u) = tau/2 exp(-tau |y - u|).

    ``smooth=True`` replaces |r| by a Huber function with half-width ``delta``
    so that Newton steps on u are well defined.
    """

    name = "laplace"

    def __init__(self, tau, delta=1e-6):
        if not tau > 0:
            raise LikelihoodError("tau must be positive")
        self.tau = float(tau)
        self.delta = float(delta)

    def _abs(self, r, smooth):
        a = np.abs(r)
        if not smooth:
            return a
        d = self.delta
        return np.where(a <= d, 0.5 * r**2 / d + 0.5 * d, a)

    def pointwise(self, y, u, smooth=False):
        y = self.check_labels(y)
        u = _check_finite(u)
        return 2.0 * self.tau * self._abs(u - y, smooth) - 2.0 * np.log(self.tau / 2.0)

    def derivatives(self, y, u):
        y = self.check_labels(y)
        u = _check_finite(u)
        r = u - y
        inside = np.abs(r) <= self.delta
        grad = 2.0 * self.tau * np.where(inside, r / self.delta, np.sign(r))
        curv = np.where(inside, 2.0 * self.tau / self.delta, 0.0)
        return grad, curv

    def site_h(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        if np.any(gamma <= 0):
            raise LikelihoodError("gamma must be positive")
        t2 = self.tau**2
        h = t2 * gamma - 2.0 * np.log(self.tau / 2.0)
        return h, np.full_like(gamma, t2), np.zeros_like(gamma)

    def log_density(self, y, u):
        return -0.5 * self.pointwise(y, u)

    def sample(self, u, rng):
        return u + rng.laplace(0.0, 1.0 / self.tau, np.shape(u))

    def to_config(self):
        return {"name": self.name, "tau": self.tau}


def _lam(xi):
    """tanh(xi/2) / (4 xi) and its derivative, stable near 0."""
    xi = np.asarray(xi, dtype=float)
    x = 0.5 * xi
    small = x < 1e-2
    xs = np.where(small, x, 1.0)
    xl = np.where(small, 1.0, x)
    lam_s = 0.125 - xs**2 / 24 + xs**4 / 60 - 17 * xs**6 / 2520
    dlam_s = 0.5 * (-xs / 12 + xs**3 / 15 - 17 * xs**5 / 420)
    t = np.tanh(xl)
    lam_l = t / (8 * xl)
    dlam_l = (xl * (1 - t**2) - t) / (16 * xl**2)
    return np.where(small, lam_s, lam_l), np.where(small, dlam_s, dlam_l)


def _solve_xi(c):
    """Positive root of tanh(xi/2)/(4 xi) = c for c in (0, 1/8)."""
    c = np.asarray(c, dtype=float)
    lo = np.zeros_like(c)
    hi = 1.0 / (4.0 * c)
    xi = np.minimum(np.sqrt(np.maximum(96.0 * (0.125 - c), 0.0)), hi)
    xi = np.where(xi <= 0, 0.5 * hi, xi)
    for _ in range(200):
        lam, dlam = _lam(xi)
        f = lam - c
        lo = np.where(f > 0, xi, lo)
        hi = np.where(f > 0, hi, xi)
        with np.errstate(divide="ignore", invalid="ignore"):
            step = xi - f / dlam
        bad = ~np.isfinite(step) | (step <= lo) | (step >= hi)
        new = np.where(bad, 0.5 * (lo + hi), step)
        if np.all(np.abs(new - xi) <= 1e-15 * np.maximum(1.0, xi)):
            return new
        xi = new
    return xi


class Logistic(Likelihood):
    """P(y|u) = 1 / (1 + exp(-tau y u)), y in {-1, +1}.

    Site bound: the tangent-quadratic bound in s = tau y u with
    1/(2 gamma) = tau^2 lam(xi), lam(xi) = tanh(xi/2)/(4 xi), beta = tau y / 2.
    """

    name = "logistic"
    classification = True

    def __init__(self, tau=1.0):
        if not tau > 0:
            raise LikelihoodError("tau must be positive")
        self.tau = float(tau)

    def check_labels(self, y):
        y = super().check_labels(y)
        if not np.all(np.isin(y, (-1.0, 1.0))):
            raise LikelihoodError("logistic labels must be -1 or +1")
        return y

    def pointwise(self, y, u, smooth=False):
        y = self.check_labels(y)
        u = _check_finite(u)
        return 2.0 * np.logaddexp(0.0, -self.tau * y * u)

    def derivatives(self, y, u):
        y = self.check_labels(y)
        u = _check_finite(u)
        s = self.tau * y * u
        grad = -2.0 * self.tau * y * expit(-s)
        curv = 2.0 * self.tau**2 * expit(s) * expit(-s)
        return grad, curv

    def beta(self, y):
        return 0.5 * self.tau * self.check_labels(y)

    def site_h(self, gamma):
        gamma = np.asarray(gamma, dtype=float)
        if np.any(gamma <= 0):
            raise LikelihoodError("gamma must be positive")
        t2 = self.tau**2
        flat = gamma <= 4.0 / t2
        g = np.where(flat, 8.0 / t2, gamma)
        xi = _solve_xi(1.0 / (2.0 * t2 * g))
        lam, dlam = _lam(xi)
        logcosh2 = 0.5 * xi + np.log1p(np.exp(-xi))  # ln(2 cosh(xi/2))
        h = 2.0 * logcosh2 - xi**2 / (t2 * g)
        dh = xi**2 / (t2 * g**2)
        # d xi / d gamma from gamma = 1 / (2 tau^2 lam(xi))
        with np.errstate(divide="ignore", invalid="ignore"):
            dxi = -2.0 * t2 * lam**2 / dlam
            d2h = 2.0 * xi * dxi / (t2 * g**2) - 2.0 * xi**2 / (t2 * g**3)
        d2h = np.where(np.isfinite(d2h), d2h, 3.0 * t2**2 / 16.0)
        return (
            np.where(flat, 2.0 * LN2, h),
            np.where(flat, 0.0, dh),
            np.where(flat, 0.0, d2h),
        )

    def site_xi(self, gamma):
        """Tangent point xi of the bound with width gamma (0 on the flat branch)."""
        gamma = np.asarray(gamma, dtype=float)
        t2 = self.tau**2
        flat = gamma <= 4.0 / t2
        xi = _solve_xi(1.0 / (2.0 * t2 * np.where(flat, 8.0 / t2, gamma)))
        return np.where(flat, 0.0, xi)

    def log_density(self, y, u):
        return -0.5 * self.pointwise(y, u)

    def sample(self, u, rng):
        p = expit(self.tau * np.asarray(u))
        return np.where(rng.random(np.shape(u)) < p, 1.0, -1.0)

    def to_config(self):
        return {"name": self.name, "tau": self.tau}


def make_likelihood(name, **params):
    name = name.lower()
    if name in NO_LIKELIHOOD:
        raise UnsupportedLikelihood(
            f"{name}: the {NO_LIKELIHOOD[name]} has no likelihood counterpart "
            "(marked as nonexistent in the loss/likelihood correspondence table), "
            "so it cannot be used in probabilistic kernel learning"
        )
    if name == "gaussian":
        return Gaussian(params.get("sigma2", 1.0))
    if name == "laplace":
        return Laplace(params.get("tau", 1.0))
    if name == "logistic":
        return Logistic(params.get("tau", 1.0))
    raise LikelihoodError(f"unknown likelihood {name!r}")


# Functional interface.


def neg_log2_lik(model, y, u, smooth=False):
    return model.neg_log2_lik(y, u, smooth)


def lik_derivatives(model, y, u):
    return model.derivatives(y, u)


def site_bound_h(model, gamma_i):
    if not np.all(np.asarray(gamma_i) > 0):
        raise LikelihoodError("gamma must be positive")
    h, dh, _ = model.site_h(gamma_i)
    return h, dh


def beta_vector(model, y):
    return model.beta(y)
