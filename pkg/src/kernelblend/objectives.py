"""Kernel-learning objectives over a linear kernel combination.

All objectives are expressed as ``-2 ln`` quantities with their normalising
constants kept, so identities between them hold exactly, not up to constants.

Each objective kind is wrapped in a :class:`Criterion` exposing the joint
function psi(theta, w) of the kernel weights and an inner block ``w``
(latent values ``u`` for MAP/MKL, ``log gamma`` for VB, empty otherwise),
split into a convex part and a concave log-determinant part.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve

from .kernels import DEFAULT_JITTER, as_theta, assemble_gram, cholesky, trace_products
from .likelihoods import Gaussian, Likelihood

OBJECTIVE_KINDS = ("mkl", "map", "gau", "mapgau", "rr", "vb")
LOG2PI = np.log(2 * np.pi)


class ObjectiveError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    pass


@dataclass(frozen=True)
class ObjectiveSpec:
    kind: str
    likelihood: Likelihood
    p: float = 1.0
    lam: float = 1.0

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ObjectiveError(f"unknown objective {self.kind!r}")
        if self.kind in ("mkl", "rr"):
            if not self.p >= 1:
                raise ObjectiveError("p must be >= 1")
            if not self.lam > 0:
                raise ObjectiveError("lambda must be positive")
        if self.kind in ("gau", "mapgau", "rr") and not isinstance(self.likelihood, Gaussian):
            raise ObjectiveError(f"{self.kind} requires a Gaussian likelihood")


@dataclass
class VariationalState:
    u: np.ndarray
    gamma: np.ndarray
    z: np.ndarray

    @property
    def v(self):
        return signed_sqrt(self.u, self.z)


def signed_sqrt(u, z):
    """sign(u) * sqrt(u^2 + z) with sign(0) = +1."""
    return np.where(u >= 0, 1.0, -1.0) * np.sqrt(u**2 + z)


def regularizer(theta, p, lam):
    return lam * np.sum(theta**p)


def _spd_inverse(L):
    return cho_solve((L, True), np.eye(L.shape[0]), check_finite=False)


def regularized_cholesky(H, rho0=1e-10, rho_max=1e6):
    """Cholesky of H + rho I with rho = 0, then rho0 doubling until success."""
    H = 0.5 * (H + H.T)
    rho = 0.0
    eye = np.eye(H.shape[0])
    while True:
        try:
            return cholesky(H + rho * eye), rho
        except np.linalg.LinAlgError:
            rho = rho0 if rho == 0.0 else 2.0 * rho
            if rho > rho_max:
                raise ConvergenceError(
                    f"Hessian regularisation exceeded {rho_max:g}: degenerate scaling"
                ) from None


# ---------------------------------------------------------------------------
# inner latent-value problem  min_u u^T K^{-1} u + loss(y, u)


def _map_value(K, alpha, model, y, smooth):
    u = K @ alpha
    return float(alpha @ u) + model.neg_log2_lik(y, u, smooth)


def _exact_step(alpha, u, d_alpha, Kd, model, y):
    """Minimise the convex objective along alpha + s d_alpha, s in (0, 1].

    The directional derivative is monotone in s, so its root is bracketed and
    found by regula falsi (Illinois variant). With a Huber loss the objective is
    piecewise quadratic and this identifies the active kinks exactly, which plain
    backtracking does not.
    """

    def slope(s):
        g_l, _ = model.derivatives(y, u + s * Kd)
        return float((2.0 * (alpha + s * d_alpha) + g_l) @ Kd)

    d0 = slope(0.0)
    d1 = slope(1.0)
    if d1 <= 0:
        return 1.0
    lo, hi, f_lo, f_hi = 0.0, 1.0, d0, d1
    side = 0
    s = 1.0
    for _ in range(100):
        s = (lo * f_hi - hi * f_lo) / (f_hi - f_lo)
        if not lo < s < hi:
            s = 0.5 * (lo + hi)
        f_s = slope(s)
        if f_s == 0 or hi - lo <= 1e-15 * hi:
            break
        if f_s < 0:
            lo, f_lo = s, f_s
            if side == -1:
                f_hi *= 0.5
            side = -1
        else:
            hi, f_hi = s, f_s
            if side == 1:
                f_lo *= 0.5
            side = 1
    return lo if lo > 0 else s


def inner_map_solve(gram, model, y, u0=None, tol=None, max_iter=200, smooth=True,
                    return_alpha=False, max_steps=None):
    """Global minimiser of u^T K^{-1} u + loss(y, u) by damped Newton.

    Iterates on alpha = K^{-1} u with u = K alpha, using the
    B = I + W^{1/2} K W^{1/2} form so that no K^{-1} is ever formed.
    ``max_steps`` caps the number of Newton steps without raising.
    """
    y = model.check_labels(y)
    n = gram.n
    tol = 1e-8 * n if tol is None else tol
    K = gram.K
    alpha = np.zeros(n) if u0 is None else gram.solve(np.asarray(u0, dtype=float))
    limit = max_iter if max_steps is None else max_steps
    converged = False
    decrement = np.inf
    for it in range(limit + 1):
        u = K @ alpha
        g_l, c_l = model.derivatives(y, u)
        grad = 2.0 * alpha + g_l
        if np.linalg.norm(grad) <= tol or decrement <= tol**2:
            converged = True
            break
        if it == limit:
            break
        W = 0.5 * c_l
        sW = np.sqrt(W)
        B = np.eye(n) + sW[:, None] * K * sW[None, :]
        LB = cholesky(B)
        b = W * u - 0.5 * g_l
        a_new = b - sW * cho_solve((LB, True), sW * (K @ b))
        d_alpha = a_new - alpha
        Kd = K @ d_alpha
        # Newton decrement; scale-free even when K is close to singular
        decrement = -float(grad @ Kd)
        if decrement <= tol**2:
            converged = True
            break
        step = _exact_step(alpha, u, d_alpha, Kd, model, y)
        if step <= 0:
            converged = decrement <= 1e-8 * (1.0 + abs(_map_value(K, alpha, model, y, smooth)))
            break
        alpha = alpha + step * d_alpha
    if not converged and max_steps is None:
        raise ConvergenceError(
            f"inner MAP solve did not converge (gradient norm {np.linalg.norm(grad):.3e}, "
            f"Newton decrement {decrement:.3e})"
        )
    u = K @ alpha
    f = _map_value(K, alpha, model, y, smooth)
    if return_alpha:
        return u, f, alpha
    return u, f


# ---------------------------------------------------------------------------
# Gaussian closed forms


def _gauss_parts(theta, bases, sigma2, y, jitter):
    gram = assemble_gram(theta, bases, jitter)
    A = gram.K + sigma2 * np.eye(gram.n)
    LA = cholesky(A)
    a = cho_solve((LA, True), y, check_finite=False)
    return gram, LA, a


def eval_phi_gau(theta, bases, sigma2, y, jitter=DEFAULT_JITTER):
    """y^T (K + s2 I)^{-1} y + ln|K + s2 I| + n ln(2 pi)."""
    y = np.asarray(y, dtype=float)
    _, LA, a = _gauss_parts(theta, bases, sigma2, y, jitter)
    return float(y @ a) + 2.0 * np.sum(np.log(np.diag(LA))) + y.size * LOG2PI


def eval_phi_map_gau(theta, bases, sigma2, y, jitter=DEFAULT_JITTER):
    """y^T (K + s2 I)^{-1} y + ln|K|."""
    y = np.asarray(y, dtype=float)
    gram, _, a = _gauss_parts(theta, bases, sigma2, y, jitter)
    return float(y @ a) + gram.logdet()


def eval_phi_rr(theta, bases, sigma2, y, p, lam, jitter=DEFAULT_JITTER):
    """y^T (K + s2 I)^{-1} y + lam ||theta||_p^p."""
    theta = as_theta(theta, bases.M)
    y = np.asarray(y, dtype=float)
    _, _, a = _gauss_parts(theta, bases, sigma2, y, jitter)
    return float(y @ a) + regularizer(theta, p, lam)


# ---------------------------------------------------------------------------
# MAP and MKL


def eval_phi_map(theta, bases, spec, y, jitter=DEFAULT_JITTER, u0=None, return_u=False):
    gram = assemble_gram(theta, bases, jitter)
    u, f = inner_map_solve(gram, spec.likelihood, y, u0)
    val = f + gram.logdet()
    return (val, u) if return_u else val


def eval_phi_mkl(theta, bases, spec, y, jitter=DEFAULT_JITTER, u0=None, return_u=False):
    theta = as_theta(theta, bases.M)
    gram = assemble_gram(theta, bases, jitter)
    u, f = inner_map_solve(gram, spec.likelihood, y, u0)
    val = f + regularizer(theta, spec.p, spec.lam)
    return (val, u) if return_u else val


# ---------------------------------------------------------------------------
# variational bound, gamma parametrisation


def _vb_pieces(K, model, y, gamma):
    """Factor C = K + Gamma and the data-dependent vectors of psi_VB."""
    n = K.shape[0]
    C = K + np.diag(gamma)
    LC = cholesky(C)
    Ci = _spd_inverse(LC)
    if model.classification:
        beta = model.beta(y)
        w = Ci @ (gamma * beta)
        s = beta - w
        # beta^T Gamma C^{-1} Gamma beta - beta^T Gamma beta
        quad = float((gamma * beta) @ w - beta @ (gamma * beta))
        vec = s  # d quad / d gamma_i = -s_i^2
        cvec = w  # d quad / d theta_m = -cvec^T K_m cvec
    else:
        a = Ci @ y
        quad = float(y @ a)
        vec = a
        cvec = a
    logdetC = 2.0 * np.sum(np.log(np.diag(LC)))
    return LC, Ci, quad, vec, cvec, logdetC, n


def eval_psi_vb_gamma(theta, bases, model, y, gamma, jitter=DEFAULT_JITTER):
    """psi_VB(theta, gamma) computed from the Cholesky factor of C = K + Gamma.

    Classification sites:  ln|C| - ln|Gamma| + b^T C^{-1} b - beta^T Gamma beta + h,
    b = Gamma beta.  Regression (residual) sites:  y^T C^{-1} y + ln|C| - ln|Gamma| + h.
    """
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise ObjectiveError("gamma must be positive")
    y = model.check_labels(y)
    gram = assemble_gram(theta, bases, jitter)
    _, _, quad, _, _, logdetC, _ = _vb_pieces(gram.K, model, y, gamma)
    h, _, _ = model.site_h(gamma)
    return logdetC - np.sum(np.log(gamma)) + quad + float(np.sum(h))


def eval_psi_vb_split(theta, bases, model, y, gamma, jitter=DEFAULT_JITTER):
    """psi_VB as ln|K^{-1} + Gamma^{-1}| + h + min_u R(u) + ln|K| with explicit inverses.

    Independent second route to :func:`eval_psi_vb_gamma`.
    """
    gamma = np.asarray(gamma, dtype=float)
    y = model.check_labels(y)
    gram = assemble_gram(theta, bases, jitter)
    A = gram.inverse() + np.diag(1.0 / gamma)
    sign, logdetA = np.linalg.slogdet(A)
    V = np.linalg.inv(A)
    if model.classification:
        beta = model.beta(y)
        min_r = -float(beta @ V @ beta)
    else:
        b = y / gamma
        min_r = float(y @ b) - float(b @ V @ b)
    h, _, _ = model.site_h(gamma)
    return logdetA + float(np.sum(h)) + min_r + gram.logdet()


def optimal_z(theta, bases, gamma, jitter=DEFAULT_JITTER):
    """diag(V), V = (K^{-1} + Gamma^{-1})^{-1} = Gamma - Gamma C^{-1} Gamma."""
    gamma = np.asarray(gamma, dtype=float)
    if np.any(gamma <= 0):
        raise ObjectiveError("gamma must be positive")
    gram = assemble_gram(theta, bases, jitter)
    LC = cholesky(gram.K + np.diag(gamma))
    Ci = _spd_inverse(LC)
    return gamma - gamma**2 * np.diag(Ci)


def vb_posterior(gram, model, y, gamma):
    """Mean and covariance of the Gaussian approximation Q(u|y; gamma)."""
    y = model.check_labels(y)
    LC = cholesky(gram.K + np.diag(gamma))
    Ci = _spd_inverse(LC)
    V = np.diag(gamma) - gamma[:, None] * Ci * gamma[None, :]
    V = 0.5 * (V + V.T)
    if model.classification:
        m = V @ model.beta(y)
    else:
        m = V @ (y / gamma)
    return m, V


def optimize_gamma(theta, bases, model, y, gamma0=None, jitter=DEFAULT_JITTER, tol=None,
                   max_iter=200, max_steps=None):
    """phi_VB(theta) = min_gamma psi_VB(theta, gamma) by Newton on log gamma."""
    y = model.check_labels(y)
    gram = assemble_gram(theta, bases, jitter)
    if isinstance(model, Gaussian):
        gamma = np.full(y.size, model.sigma2)
        return gamma, eval_psi_vb_gamma(theta, bases, model, y, gamma, jitter)
    crit = Criterion(ObjectiveSpec("vb", model), bases, y, jitter)
    rho0 = crit.initial_inner(gram.theta) if gamma0 is None else np.log(gamma0)
    rho = crit.solve_log_gamma(gram, rho0, tol=tol, max_iter=max_iter, max_steps=max_steps)
    gamma = np.exp(rho)
    return gamma, crit.value(gram.theta, rho)


# ---------------------------------------------------------------------------
# variational bound, z parametrisation


def vb_conjugate(gram, z, gamma_hint=None, tol=1e-12, max_iter=100):
    """g*(z) = min_{pi > 0} z^T pi - ln|K^{-1} + diag(pi)|, and the minimiser.

    The minimiser satisfies diag((K^{-1} + diag(pi))^{-1}) = z, so at
    z = optimal_z(gamma) it is pi = 1/gamma and g* is the tangent dual value.
    """
    K = gram.K
    n = gram.n
    z = np.asarray(z, dtype=float)
    if np.any(z <= 0):
        raise ObjectiveError("the conjugate needs z > 0")
    logdetK = gram.logdet()

    def pieces(pi):
        g = 1.0 / pi
        LC = cholesky(K + np.diag(g))
        Ci = _spd_inverse(LC)
        V = np.diag(g) - g[:, None] * Ci * g[None, :]
        # ln|K^{-1} + Pi| = ln|C| - ln|Gamma| - ln|K|
        ld = 2.0 * np.sum(np.log(np.diag(LC))) + np.sum(np.log(pi)) - logdetK
        return float(z @ pi) - ld, V

    if gamma_hint is not None:
        pi = 1.0 / np.asarray(gamma_hint, dtype=float)
    else:
        pi = np.maximum(1.0 / z - 1.0 / np.diag(K), 1e-3 / z)
    f, V = pieces(pi)
    for _ in range(max_iter):
        grad = z - np.diag(V)
        if np.max(np.abs(grad) / z) <= tol:
            return f, pi
        H = V * V
        L, _ = regularized_cholesky(H)
        d = -cho_solve((L, True), grad)
        step = 1.0
        neg = d < 0
        if np.any(neg):
            step = min(1.0, 0.99 * np.min(-pi[neg] / d[neg]))
        slope = grad @ d
        while True:
            trial = pi + step * d
            f_new, V_new = pieces(trial)
            if f_new <= f + 1e-4 * step * slope:
                break
            step *= 0.5
            if step < 1e-14:
                return f, pi
        pi, f, V = trial, f_new, V_new
    raise ConvergenceError("conjugate evaluation did not converge; z may be infeasible")


def vb_smoothed_loss(model, y, u, z):
    """2 beta^T (v - u) - 2 ln P(y|v), v = sign(s) sqrt(s^2 + z) on site variable s."""
    y = model.check_labels(y)
    u = np.asarray(u, dtype=float)
    if model.classification:
        v = signed_sqrt(u, z)
        beta = model.beta(y)
        return 2.0 * float(beta @ (v - u)) + model.neg_log2_lik(y, v, smooth=True)
    v = y + signed_sqrt(u - y, z)
    return model.neg_log2_lik(y, v, smooth=True)


def eval_psi_vb_z(theta, bases, model, y, u, z, jitter=DEFAULT_JITTER, gamma_hint=None):
    """u^T K^{-1} u + smoothed loss - g*(z) + ln|K| at the given u.

    ``z = 0`` is the MAP corner: the loss is unsmoothed and the conjugate term
    is dropped, which reproduces the joint MAP criterion. A ``None`` u is
    replaced by the MAP inner minimiser when z = 0.
    """
    z = np.asarray(z, dtype=float)
    if np.any(z < 0):
        raise ObjectiveError("z must be nonnegative")
    gram = assemble_gram(theta, bases, jitter)
    if np.all(z == 0):
        if u is None:
            u, _ = inner_map_solve(gram, model, y)
        return gram.quad(u) + vb_smoothed_loss(model, y, u, z) + gram.logdet()
    if np.any(z == 0):
        raise ObjectiveError("z must be all zero (MAP corner) or strictly positive")
    if u is None:
        raise ObjectiveError("u is required for z > 0")
    gstar, _ = vb_conjugate(gram, z, gamma_hint)
    return gram.quad(u) + vb_smoothed_loss(model, y, u, z) - gstar + gram.logdet()


# ---------------------------------------------------------------------------
# joint criteria psi_#(theta, w) = psi~(theta, w) + concave(theta)


class Criterion:
    """Joint objective of (theta, w) for one ObjectiveSpec.

    ``w`` is the inner block: ``u`` (MAP, MKL), ``log gamma`` (VB with a
    non-Gaussian likelihood) or empty. The concave part is ln|K| for MAP and
    MAPGAU, ln|K + s2 I| for GAU, ln|K + Gamma| for VB (jointly concave in
    theta and gamma), and absent for MKL and RR.
    """

    def __init__(self, spec, bases, y, jitter=DEFAULT_JITTER):
        self.spec = spec
        self.bases = bases
        self.model = spec.likelihood
        self.y = self.model.check_labels(y)
        if self.y.size != bases.n:
            raise ObjectiveError(f"{self.y.size} labels for {bases.n} kernel rows")
        self.jitter = jitter
        self.kind = spec.kind
        self.n = bases.n
        self.M = bases.M
        self._alpha = None

    # -- structure -----------------------------------------------------------
    @property
    def inner_dim(self):
        if self.kind in ("map", "mkl"):
            return self.n
        if self.kind == "vb" and not isinstance(self.model, Gaussian):
            return self.n
        return 0

    @property
    def has_concave(self):
        return self.kind not in ("mkl", "rr")

    @property
    def sigma2(self):
        return self.model.sigma2

    def gram(self, theta):
        return assemble_gram(theta, self.bases, self.jitter)

    def initial_inner(self, theta):
        if self.kind in ("map", "mkl"):
            return np.zeros(self.n)
        if self.inner_dim:
            t2 = getattr(self.model, "tau", 1.0) ** 2
            g0 = 8.0 / t2 if self.model.classification else 1.0 / t2
            return np.full(self.n, np.log(g0))
        return np.zeros(0)

    # -- alpha cache (MAP/MKL) -------------------------------------------------
    def _alpha_for(self, gram, u):
        key = (gram.theta.tobytes(), np.asarray(u).tobytes())
        if self._alpha is not None and self._alpha[0] == key:
            return self._alpha[1]
        return gram.solve(u)

    def _remember_alpha(self, theta, u, alpha):
        self._alpha = ((np.asarray(theta, dtype=float).tobytes(), u.tobytes()), alpha)

    # -- values ----------------------------------------------------------------
    def split_value(self, theta, w):
        """(convex part, concave part) of psi_# at (theta, w)."""
        theta = as_theta(theta, self.M)
        gram = self.gram(theta)
        k = self.kind
        if k in ("map", "mkl"):
            alpha = self._alpha_for(gram, w)
            convex = float(w @ alpha) + self.model.neg_log2_lik(self.y, w, smooth=True)
            if k == "mkl":
                return convex + regularizer(theta, self.spec.p, self.spec.lam), 0.0
            return convex, gram.logdet()
        if k in ("gau", "mapgau", "rr"):
            A = gram.K + self.sigma2 * np.eye(self.n)
            LA = cholesky(A)
            fit = float(self.y @ cho_solve((LA, True), self.y))
            if k == "gau":
                return fit + self.n * LOG2PI, 2.0 * np.sum(np.log(np.diag(LA)))
            if k == "mapgau":
                return fit, gram.logdet()
            return fit + regularizer(theta, self.spec.p, self.spec.lam), 0.0
        gamma = self._gamma(w)
        _, _, quad, _, _, logdetC, _ = _vb_pieces(gram.K, self.model, self.y, gamma)
        h, _, _ = self.model.site_h(gamma)
        # ln|C| is jointly concave in (theta, gamma); the rest is convex
        return float(np.sum(h)) - np.sum(np.log(gamma)) + quad, logdetC

    def value(self, theta, w):
        a, b = self.split_value(theta, w)
        return a + b

    def _gamma(self, w):
        if isinstance(self.model, Gaussian):
            return np.full(self.n, self.model.sigma2)
        return np.exp(w)

    # -- gradients ---------------------------------------------------------------
    def inner_native(self, w):
        """Inner variable in which the concave part is concave: gamma = exp(w) for VB."""
        if self.kind == "vb" and self.inner_dim:
            return np.exp(w)
        return np.zeros(0)

    def concave_slopes(self, theta, w=None):
        """Tangent slopes of the concave part: (d/d theta, d/d native inner).

        ln|K| for MAP/MAPGAU, ln|K + s2 I| for GAU and ln|C| = ln|K + Gamma|
        for VB, whose inner slope is diag(C^{-1}).
        """
        theta = as_theta(theta, self.M)
        if not self.has_concave:
            return np.zeros(self.M), np.zeros(0)
        gram = self.gram(theta)
        if self.kind in ("gau", "vb"):
            gamma = self._gamma(w) if self.kind == "vb" else np.full(self.n, self.sigma2)
            Ci = _spd_inverse(cholesky(gram.K + np.diag(gamma)))
            lam = np.einsum("ij,mji->m", Ci, self.bases.bases)
            return lam, (np.diag(Ci).copy() if self.inner_dim else np.zeros(0))
        return trace_products(gram, self.bases), np.zeros(0)

    def concave_gradient(self, theta, w=None):
        """lambda = theta-gradient of the concave part (the Fenchel tangent slope)."""
        return self.concave_slopes(theta, w)[0]

    def gradient(self, theta, w):
        """(d psi_# / d theta, d psi_# / d w)."""
        theta = as_theta(theta, self.M)
        gram = self.gram(theta)
        Km = self.bases.bases
        k = self.kind
        if k in ("map", "mkl"):
            alpha = self._alpha_for(gram, w)
            Ka = Km @ alpha  # (M, n)
            g_theta = -np.einsum("mi,i->m", Ka, alpha)
            if k == "mkl":
                g_theta += self.spec.lam * self.spec.p * theta ** (self.spec.p - 1)
            else:
                g_theta += trace_products(gram, self.bases)
            g_l, _ = self.model.derivatives(self.y, w)
            return g_theta, 2.0 * alpha + g_l
        if k in ("gau", "mapgau", "rr"):
            A = gram.K + self.sigma2 * np.eye(self.n)
            Ai = _spd_inverse(cholesky(A))
            a = Ai @ self.y
            g_theta = -np.einsum("mi,i->m", Km @ a, a)
            if k == "gau":
                g_theta += np.einsum("ij,mji->m", Ai, Km)
            elif k == "mapgau":
                g_theta += trace_products(gram, self.bases)
            else:
                g_theta += self.spec.lam * self.spec.p * theta ** (self.spec.p - 1)
            return g_theta, np.zeros(0)
        gamma = self._gamma(w)
        _, Ci, _, vec, cvec, _, _ = _vb_pieces(gram.K, self.model, self.y, gamma)
        g_theta = np.einsum("ij,mji->m", Ci, Km) - np.einsum("mi,i->m", Km @ cvec, cvec)
        if not self.inner_dim:
            return g_theta, np.zeros(0)
        _, dh, _ = self.model.site_h(gamma)
        g_gamma = np.diag(Ci) - 1.0 / gamma - vec**2 + dh
        return g_theta, gamma * g_gamma

    def convex_gradient(self, theta, w):
        g_theta, g_w = self.gradient(theta, w)
        lam, lam_in = self.concave_slopes(theta, w)
        if lam_in.size:
            g_w = g_w - lam_in * self.inner_native(w)
        return g_theta - lam, g_w

    # -- Hessian of the convex part -------------------------------------------
    def convex_hessian(self, theta, w):
        """Dense Hessian of psi~ over [theta; w]."""
        theta = as_theta(theta, self.M)
        gram = self.gram(theta)
        Km = self.bases.bases
        M, n, k = self.M, self.n, self.kind
        if k in ("map", "mkl"):
            Ki = gram.inverse()
            alpha = self._alpha_for(gram, w)
            Ka = Km @ alpha  # rows K_m alpha
            KiKa = Ka @ Ki  # rows K^{-1} K_m alpha
            H = np.zeros((M + n, M + n))
            H[:M, :M] = 2.0 * Ka @ KiKa.T
            if k == "mkl":
                p, lam = self.spec.p, self.spec.lam
                H[:M, :M] += np.diag(lam * p * (p - 1) * theta ** (p - 2)) if p != 1 else 0.0
            H[:M, M:] = -2.0 * KiKa
            H[M:, :M] = H[:M, M:].T
            _, c_l = self.model.derivatives(self.y, w)
            H[M:, M:] = 2.0 * Ki + np.diag(c_l)
            return H
        if k in ("gau", "mapgau", "rr"):
            A = gram.K + self.sigma2 * np.eye(n)
            Ai = _spd_inverse(cholesky(A))
            a = Ai @ self.y
            Ka = Km @ a
            H = 2.0 * Ka @ Ai @ Ka.T
            if k == "rr" and self.spec.p != 1:
                p, lam = self.spec.p, self.spec.lam
                H += np.diag(lam * p * (p - 1) * theta ** (p - 2))
            return H
        gamma = self._gamma(w)
        _, Ci, _, vec, cvec, _, _ = _vb_pieces(gram.K, self.model, self.y, gamma)
        # ln|C| removed: only the quadratic data term couples theta
        Kc = Km @ cvec
        Hth = 2.0 * Kc @ Ci @ Kc.T
        if not self.inner_dim:
            return Hth
        H = np.zeros((M + n, M + n))
        H[:M, :M] = Hth
        CKc = Kc @ Ci  # rows C^{-1} K_m cvec
        sign = -1.0 if self.model.classification else 1.0
        cross = sign * 2.0 * vec[None, :] * CKc
        _, dh, d2h = self.model.site_h(gamma)
        g_gamma = -1.0 / gamma - vec**2 + dh
        Hgg = np.diag(1.0 / gamma**2) + 2.0 * np.outer(vec, vec) * Ci + np.diag(d2h)
        H[:M, M:] = cross * gamma[None, :]
        H[M:, :M] = H[:M, M:].T
        H[M:, M:] = gamma[:, None] * Hgg * gamma[None, :] + np.diag(gamma * g_gamma)
        return H

    def inner_hessian(self, theta, w):
        """Hessian of the full psi_# in the inner block w at fixed theta."""
        H = self.convex_hessian(theta, w)[self.M:, self.M:]
        if self.kind == "vb" and self.inner_dim:
            gamma = self._gamma(w)
            gram = self.gram(theta)
            Ci = _spd_inverse(cholesky(gram.K + np.diag(gamma)))
            # ln|C| in log-gamma coordinates
            H = H - gamma[:, None] * (Ci * Ci) * gamma[None, :] + np.diag(gamma * np.diag(Ci))
        return H

    # -- inner minimisation ----------------------------------------------------
    def solve_log_gamma(self, gram, rho, tol=None, max_iter=200, max_steps=None):
        """Newton on log gamma for fixed theta with backtracking."""
        theta = gram.theta
        tol = 1e-7 * self.n if tol is None else tol
        f = self.value(theta, rho)
        limit = max_iter if max_steps is None else max_steps
        for it in range(limit + 1):
            g_w = self.gradient(theta, rho)[1]
            if np.linalg.norm(g_w) <= tol:
                return rho
            if it == limit:
                break
            H = self.inner_hessian(theta, rho)
            L, _ = regularized_cholesky(H)
            d = -cho_solve((L, True), g_w)
            slope = g_w @ d
            step = 1.0
            # keep the log-width step moderate so exp() stays finite
            step = min(step, 5.0 / max(np.max(np.abs(d)), 1e-300))
            while True:
                trial = rho + step * d
                f_new = self.value(theta, trial)
                if f_new <= f + 1e-4 * step * slope:
                    break
                step *= 0.5
                if step < 1e-14:
                    if np.linalg.norm(g_w) <= 1e3 * tol or max_steps is not None:
                        return rho
                    raise ConvergenceError(
                        f"gamma optimisation stalled (gradient norm {np.linalg.norm(g_w):.3e})"
                    )
            rho, f = trial, f_new
        if max_steps is not None:
            return rho
        raise ConvergenceError("gamma optimisation hit the iteration cap")

    def inner_solve(self, theta, w0=None, max_steps=None):
        """Minimise psi_# over w for fixed theta (at most ``max_steps`` Newton steps)."""
        theta = as_theta(theta, self.M)
        if not self.inner_dim:
            return np.zeros(0)
        gram = self.gram(theta)
        if self.kind in ("map", "mkl"):
            u, _, alpha = inner_map_solve(
                gram, self.model, self.y, w0, return_alpha=True, max_steps=max_steps
            )
            self._remember_alpha(theta, u, alpha)
            return u
        rho = self.initial_inner(theta) if w0 is None else w0
        return self.solve_log_gamma(gram, rho, max_steps=max_steps)

    def inner_gradient_norm(self, theta, w):
        if not self.inner_dim:
            return 0.0
        return float(np.linalg.norm(self.gradient(theta, w)[1]))

    def inner_decrement(self, theta, w):
        """Inner Newton decrement g^T H^{-1} g; small even where smoothed kinks are stiff."""
        if not self.inner_dim:
            return 0.0
        g_w = self.gradient(theta, w)[1]
        L, _ = regularized_cholesky(self.inner_hessian(theta, w))
        return float(g_w @ cho_solve((L, True), g_w))

    def outer_value(self, theta, w0=None):
        """phi(theta) = min_w psi_#(theta, w); returns (value, w_hat)."""
        w = self.inner_solve(theta, w0)
        return self.value(theta, w), w

    def inner_state(self, theta, w):
        """VariationalState-style summary of the inner variables at (theta, w)."""
        theta = as_theta(theta, self.M)
        gram = self.gram(theta)
        if self.kind in ("map", "mkl"):
            return VariationalState(w, np.zeros(0), np.zeros(self.n))
        if self.kind == "vb":
            gamma = self._gamma(w)
            m, V = vb_posterior(gram, self.model, self.y, gamma)
            return VariationalState(m, gamma, np.diag(V).copy())
        A = gram.K + self.sigma2 * np.eye(self.n)
        u = gram.K @ cho_solve((cholesky(A), True), self.y)
        return VariationalState(u, np.zeros(0), np.zeros(self.n))


def theta_gradient(spec, theta, bases, y, inner=None, jitter=DEFAULT_JITTER, tol=1e-5):
    """Outer gradient d phi / d theta at converged inner variables.

    ``inner`` is ``u`` (MAP, MKL), ``gamma`` (VB) or None for closed forms.
    Raises unless the inner gradient or the inner Newton decrement shows
    the inner variables are optimal to ``tol``.
    """
    crit = Criterion(spec, bases, y, jitter)
    if crit.inner_dim:
        if inner is None:
            raise ObjectiveError(f"{spec.kind} needs the inner state")
        w = np.log(inner) if spec.kind == "vb" else np.asarray(inner, dtype=float)
        gnorm = crit.inner_gradient_norm(theta, w)
        scale = max(1.0, crit.n)
        if gnorm > tol * scale and crit.inner_decrement(theta, w) > tol**2 * scale:
            raise ConvergenceError(f"inner state not converged (gradient norm {gnorm:.3e})")
    else:
        w = np.zeros(0)
    return crit.gradient(theta, w)[0]


def make_criterion(spec, bases, y, jitter=DEFAULT_JITTER):
    return Criterion(spec, bases, y, jitter)
