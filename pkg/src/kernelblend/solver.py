"""Double-loop Newton solver for the kernel-weight criteria.

Each outer iteration optionally takes a few Newton steps on the inner block,
refits the tangent (Fenchel) bound of the concave log-determinant term, takes
a joint Newton step on the convexified criterion plus a log barrier for
theta >= 0, and line-searches the true criterion. The barrier multiplier ``t``
grows between phases.

All functions accept a :class:`~kernelblend.objectives.Criterion` (or any
object with the same interface) wherever a specification is required.
"""
from __future__ import annotations

import csv
import io
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
from scipy.linalg import cho_solve

from .kernels import DEFAULT_JITTER, CholeskyError, as_theta, cholesky, trace_products
from .objectives import ConvergenceError, Criterion, ObjectiveError

STATUSES = ("converged", "max-iter", "error")


class SolverError(RuntimeError):
    pass


class LineSearchError(SolverError):
    """No sufficient decrease within the allowed number of trials."""


@dataclass(frozen=True)
class SolverConfig:
    outer_tol: float = 1e-5
    max_outer: int = 200
    inner_newton_steps: int = 3
    barrier_t0: float = 10.0
    barrier_mult: float = 10.0
    barrier_every: int = 5
    barrier_t_max: float = 1e8
    armijo_c: float = 1e-4
    backtrack: float = 0.5
    max_backtrack: int = 50
    fraction_to_boundary: float = 0.99
    jitter: float = DEFAULT_JITTER
    sparsity_tol: float = 1e-6
    rho0: float = 1e-10
    rho_max: float = 1e6
    max_expand: int = 30

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name in ("inner_newton_steps", "max_expand"):
                if v < 0:
                    raise ValueError("inner_newton_steps must be >= 0")
            elif not v > 0:
                raise ValueError(f"{f.name} must be positive")
        if self.max_expand < 0:
            raise ValueError("max_expand must be >= 0")
        if not 0 < self.backtrack < 1:
            raise ValueError("backtrack factor must lie in (0, 1)")
        if not 0 < self.fraction_to_boundary < 1:
            raise ValueError("fraction_to_boundary must lie in (0, 1)")
        if self.barrier_mult <= 1:
            raise ValueError("barrier_mult must exceed 1")
        if self.barrier_t_max < self.barrier_t0:
            raise ValueError("barrier_t_max must be >= barrier_t0")

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown solver settings: {sorted(unknown)}")
        ints = {"max_outer", "inner_newton_steps", "barrier_every", "max_backtrack", "max_expand"}
        return cls(**{k: (int(v) if k in ints else float(v)) for k, v in d.items()})

    def to_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class ConvergenceTrace:
    """One row per outer iteration.

    ``objective`` is the phase merit psi - sum(ln theta)/t, the quantity the
    line search decreases; it is non-increasing within each barrier phase.
    """

    iters: np.ndarray
    phase_t: np.ndarray
    objective: np.ndarray
    grad_norm: np.ndarray
    alpha: np.ndarray
    theta: np.ndarray

    @classmethod
    def from_rows(cls, rows, M):
        if not rows:
            z = np.zeros(0)
            return cls(z.astype(int), z, z, z, z, np.zeros((0, M)))
        cols = list(zip(*rows))
        out = cls(
            np.array(cols[0], dtype=int),
            np.array(cols[1], dtype=float),
            np.array(cols[2], dtype=float),
            np.array(cols[3], dtype=float),
            np.array(cols[4], dtype=float),
            np.array(cols[5], dtype=float).reshape(len(rows), M),
        )
        for a in (out.iters, out.phase_t, out.objective, out.grad_norm, out.alpha, out.theta):
            a.setflags(write=False)
        return out

    def __len__(self):
        return self.iters.size

    def phases(self):
        """List of index arrays, one per run of constant ``phase_t``."""
        if len(self) == 0:
            return []
        cuts = np.flatnonzero(np.diff(self.phase_t) != 0) + 1
        return np.split(np.arange(len(self)), cuts)

    def is_monotone(self, slack=1e-12):
        for idx in self.phases():
            obj = self.objective[idx]
            if np.any(np.diff(obj) > slack * np.maximum(1.0, np.abs(obj[:-1]))):
                return False
        return True

    def header(self):
        M = self.theta.shape[1]
        return ["iter", "phase_t", "objective", "grad_norm", "alpha"] + [
            f"theta_{m}" for m in range(M)
        ]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.header())
        for i in range(len(self)):
            w.writerow(
                [int(self.iters[i])]
                + [repr(float(v)) for v in (self.phase_t[i], self.objective[i],
                                           self.grad_norm[i], self.alpha[i])]
                + [repr(float(v)) for v in self.theta[i]]
            )
        return buf.getvalue()


@dataclass(frozen=True)
class FitResult:
    theta_hat: np.ndarray
    inner: object
    w: np.ndarray
    objective: float
    trace: ConvergenceTrace
    status: str
    message: str = ""
    projected_grad_norm: float = np.nan
    n_iter: int = 0
    sparsity: np.ndarray = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def converged(self):
        return self.status == "converged"

    @property
    def theta_sparse(self):
        return np.where(self.sparsity, 0.0, self.theta_hat)


@dataclass(frozen=True)
class SolverState:
    theta: np.ndarray
    w: np.ndarray
    value: float
    merit: float


@dataclass(frozen=True)
class NewtonDirection:
    theta: np.ndarray
    inner: np.ndarray
    rho: float

    @property
    def vector(self):
        return np.concatenate([self.theta, self.inner])


# ---------------------------------------------------------------------------
# tangent bound of the concave term


def refit_lambda(gram, bases):
    """lambda = grad ln|K_theta| = [tr(K^{-1} K_m)]_m at the gram's theta."""
    return trace_products(gram, bases)


@dataclass(frozen=True)
class TangentBound:
    """lam^T theta + lam_inner^T x - fstar >= concave(theta, x), equality at the anchor.

    ``x`` is the native inner variable the concave part depends on (gamma for
    VB, absent otherwise).
    """

    lam: np.ndarray
    anchor: np.ndarray
    fstar: float
    lam_inner: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @classmethod
    def at(cls, lam, anchor, concave_value, lam_inner=None, inner_anchor=None):
        lam = np.asarray(lam, dtype=float)
        anchor = np.asarray(anchor, dtype=float)
        lam_inner = np.zeros(0) if lam_inner is None else np.asarray(lam_inner, dtype=float)
        x0 = np.zeros(0) if inner_anchor is None else np.asarray(inner_anchor, dtype=float)
        fstar = float(lam @ anchor + lam_inner @ x0 - concave_value)
        return cls(lam, anchor, fstar, lam_inner)

    @classmethod
    def logdet(cls, gram, bases):
        return cls.at(refit_lambda(gram, bases), gram.theta, gram.logdet())

    def value(self, theta, inner=None):
        v = float(self.lam @ np.asarray(theta, dtype=float) - self.fstar)
        if self.lam_inner.size:
            v += float(self.lam_inner @ np.asarray(inner, dtype=float))
        return v


def refit_bound(crit, theta, w):
    """Tangent bound of the criterion's concave part at (theta, w)."""
    lam, lam_in = crit.concave_slopes(theta, w)
    _, concave = crit.split_value(theta, w)
    return TangentBound.at(lam, theta, concave, lam_in, crit.inner_native(w))


# ---------------------------------------------------------------------------
# Newton direction


def _barrier_terms(theta, t):
    if t is None:
        return np.zeros_like(theta), np.zeros_like(theta)
    return -1.0 / (t * theta), 1.0 / (t * theta**2)


def _surrogate_gradient(crit, theta, w, lam, lam_inner=None):
    """Gradient of psi~ + lam^T theta (+ lam_inner^T x(w)) at (theta, w)."""
    g_theta, g_w = crit.convex_gradient(theta, w)
    if crit.has_concave:
        g_theta = g_theta + lam
        if lam_inner is not None and len(lam_inner):
            g_w = g_w + lam_inner * crit.inner_native(w)
    return g_theta, g_w


def _dense_direction(crit, theta, w, g, D, rho_start, config, lam_inner=None):
    H = crit.convex_hessian(theta, w)
    H = 0.5 * (H + H.T)
    M = theta.size
    H[:M, :M] += np.diag(D)
    if lam_inner is not None and len(lam_inner):
        # curvature of the linear gamma bound in log-gamma coordinates
        H[M:, M:] += np.diag(lam_inner * crit.inner_native(w))
    scale = max(1.0, float(np.max(np.abs(np.diag(H)))))
    rho = rho_start
    eye = np.eye(H.shape[0])
    while True:
        try:
            L = cholesky(H + rho * scale * eye)
            break
        except np.linalg.LinAlgError:
            rho = config.rho0 if rho == 0.0 else 2.0 * rho
            if rho > config.rho_max:
                raise SolverError(
                    f"Hessian regularisation exceeded {config.rho_max:g}: degenerate scaling"
                ) from None
    d = -cho_solve((L, True), g)
    return d[:M], d[M:], rho


def _map_direction(crit, theta, w, g_theta, g_u, D, rho_start, config):
    """Schur-complement Newton step for the (theta, u) blocks of MAP/MKL.

    Uses B = I + W^{1/2} K W^{1/2} with W = l''/2 so that K^{-1} is never
    formed; equal to the dense solve in exact arithmetic.
    """
    gram = crit.gram(theta)
    K = gram.K
    n = crit.n
    alpha = crit._alpha_for(gram, w)
    P = (crit.bases.bases @ alpha).T  # columns K_m alpha
    _, c_l = crit.model.derivatives(crit.y, w)
    rho = rho_start
    while True:
        try:
            W = 0.5 * (c_l + rho)
            sW = np.sqrt(W)
            LB = cholesky(np.eye(n) + sW[:, None] * K * sW[None, :])

            def inv_iwk(v):
                # (I + W K)^{-1} v
                return v - sW * cho_solve((LB, True), sW * (K @ v))

            def inv_ikw(v):
                # (I + K W)^{-1} v
                return v - K @ (sW * cho_solve((LB, True), sW * v))

            sP = sW[:, None] * P
            S = 2.0 * sP.T @ cho_solve((LB, True), sP) + np.diag(D + rho)
            rhs = -g_theta - P.T @ inv_iwk(g_u)
            LS = cholesky(0.5 * (S + S.T))
            break
        except np.linalg.LinAlgError:
            rho = config.rho0 if rho == 0.0 else 2.0 * rho
            if rho > config.rho_max:
                raise SolverError(
                    f"Hessian regularisation exceeded {config.rho_max:g}: degenerate scaling"
                ) from None
    d_theta = cho_solve((LS, True), rhs)
    d_u = inv_ikw(P @ d_theta) - 0.5 * (K @ inv_iwk(g_u))
    return d_theta, d_u, rho


def joint_newton_direction(crit, theta, w, lam=None, t=None, config=None, rho_start=0.0,
                           dense=False, lam_inner=None):
    """Newton direction for psi_lam = psi~ + lam^T theta (+ barrier when ``t`` is set).

    With ``t`` the system is that of psi_lam - sum(ln theta)/t. ``lam`` (and,
    for VB, ``lam_inner``, the slope in gamma) default to the tangent slopes at
    (theta, w), which makes the gradient equal to that of the true criterion.
    MAP/MKL use a Schur-complement solve unless ``dense`` is requested.
    """
    config = config or SolverConfig()
    theta = as_theta(theta, crit.M)
    w = np.asarray(w, dtype=float)
    if lam is None:
        lam, lam_inner = crit.concave_slopes(theta, w)
    g_theta, g_w = _surrogate_gradient(crit, theta, w, lam, lam_inner)
    b_grad, b_curv = _barrier_terms(theta, t)
    g_theta = g_theta + b_grad
    D = b_curv.copy()
    if crit.kind in ("map", "mkl") and not dense:
        if crit.kind == "mkl" and crit.spec.p != 1:
            p, lam_r = crit.spec.p, crit.spec.lam
            D = D + lam_r * p * (p - 1) * theta ** (p - 2)
        d_theta, d_w, rho = _map_direction(crit, theta, w, g_theta, g_w, D, rho_start, config)
    else:
        g = np.concatenate([g_theta, g_w])
        d_theta, d_w, rho = _dense_direction(crit, theta, w, g, D, rho_start, config,
                                             lam_inner)
    return NewtonDirection(d_theta, d_w, rho)


# ---------------------------------------------------------------------------
# merit and line search


def barrier_objective(crit, theta, inner, t):
    """t psi_#(theta, inner) - sum(ln theta)."""
    theta = as_theta(theta, crit.M)
    if np.any(theta <= 0):
        raise ValueError("barrier objective needs theta > 0")
    return t * crit.value(theta, np.asarray(inner, dtype=float)) - float(np.sum(np.log(theta)))


def _merit(crit, theta, w, t, bound=None, record=None):
    """(psi_#, psi_# - sum(ln theta)/t); non-finite on factorisation failure."""
    if np.any(theta <= 0):
        return np.inf, np.inf
    try:
        convex, concave = crit.split_value(theta, w)
    except (np.linalg.LinAlgError, ObjectiveError, ValueError, FloatingPointError):
        return np.inf, np.inf
    if bound is not None and record is not None:
        gap = concave - bound.value(theta, crit.inner_native(w))
        record["bound_violation"] = max(
            record.get("bound_violation", -np.inf), gap / max(1.0, abs(concave))
        )
    value = convex + concave
    if not np.isfinite(value):
        return np.inf, np.inf
    return value, value - float(np.sum(np.log(theta))) / t


def max_step(theta, d_theta, fraction=0.99, limit=1.0):
    """Largest alpha <= limit keeping theta + alpha d >= (1 - fraction) theta."""
    neg = d_theta < 0
    if not np.any(neg):
        return float(limit)
    return float(min(limit, fraction * np.min(-theta[neg] / d_theta[neg])))


def linesearch(crit, state, d, t, config=None, slope=None, bound=None, record=None):
    """Backtracking Armijo on the phase merit along ``d``.

    Returns (alpha, new_state); raises LineSearchError after
    ``config.max_backtrack`` trials without sufficient decrease.
    """
    config = config or SolverConfig()
    if slope is None:
        g_theta, g_w = crit.gradient(state.theta, state.w)
        g_theta = g_theta - 1.0 / (t * state.theta)
        slope = float(g_theta @ d.theta + g_w @ d.inner)
    if not slope < 0:
        raise LineSearchError(f"not a descent direction (slope {slope:.3e})")
    cap = max_step(state.theta, d.theta, config.fraction_to_boundary, np.inf)
    alpha = min(1.0, cap)
    for _ in range(config.max_backtrack):
        theta = state.theta + alpha * d.theta
        w = state.w + alpha * d.inner
        value, merit = _merit(crit, theta, w, t, bound, record)
        if merit <= state.merit + config.armijo_c * alpha * slope:
            best = (alpha, SolverState(theta, w, value, merit))
            if alpha < 1.0:
                return best
            # full step accepted: keep minimising along the ray while it pays
            for _ in range(config.max_expand):
                trial = min(2.0 * best[0], cap)
                if trial <= best[0]:
                    break
                theta = state.theta + trial * d.theta
                w = state.w + trial * d.inner
                value, merit = _merit(crit, theta, w, t, bound, record)
                if not merit < best[1].merit:
                    break
                best = (trial, SolverState(theta, w, value, merit))
            return best
        alpha *= config.backtrack
    raise LineSearchError("no sufficient decrease along the Newton direction")


def projected_gradient(theta, g):
    """theta - max(theta - g, 0): the stationarity residual for theta >= 0."""
    return theta - np.maximum(theta - g, 0.0)


# ---------------------------------------------------------------------------
# Algorithm driver


def fit(spec, bases, y, config=None, theta0=None, w0=None, criterion=None):
    """Minimise the criterion of ``spec`` over theta >= 0 (and the inner block).

    ``criterion`` may replace the Criterion built from (spec, bases, y).
    """
    config = config or SolverConfig()
    crit = criterion if criterion is not None else Criterion(spec, bases, y, config.jitter)
    M = crit.M
    theta = np.ones(M) if theta0 is None else as_theta(theta0, M).copy()
    if np.any(theta <= 0):
        raise ValueError("initial theta must be strictly positive")
    start = time.perf_counter()
    diag = {"tangency": 0.0, "gradient_certificate": 0.0, "bound_violation": -np.inf,
            "rho_max_used": 0.0, "lambda_refits": 0, "linesearch_retries": 0}
    rows = []
    status, message = "max-iter", f"no convergence within {config.max_outer} outer iterations"
    t = config.barrier_t0
    phase_iter = 0
    it = 0
    pg_norm = np.nan

    def finish_inner(theta, w):
        if crit.inner_dim:
            return crit.inner_solve(theta, w)
        return w

    def pg_of(theta, w):
        g_theta, _ = crit.gradient(theta, w)
        return float(np.linalg.norm(projected_gradient(theta, g_theta)))

    try:
        w = crit.initial_inner(theta) if w0 is None else np.asarray(w0, dtype=float)
        if crit.inner_dim and config.inner_newton_steps:
            w = crit.inner_solve(theta, w, max_steps=config.inner_newton_steps)
        value, merit = _merit(crit, theta, w, t)
        if not np.isfinite(merit):
            raise SolverError("criterion is not finite at the initial point")
        pg_norm = pg_of(theta, w)
        rows.append((0, t, merit, pg_norm, 0.0, theta.copy()))
        while it < config.max_outer:
            it += 1
            phase_iter += 1
            if crit.inner_dim and config.inner_newton_steps:
                w = crit.inner_solve(theta, w, max_steps=config.inner_newton_steps)
                value, merit = _merit(crit, theta, w, t)
            state = SolverState(theta, w, value, merit)

            # refit the tangent bound and check the certificates
            bound = None
            lam, lam_in = np.zeros(M), np.zeros(0)
            if crit.has_concave:
                bound = refit_bound(crit, theta, w)
                lam, lam_in = bound.lam, bound.lam_inner
                convex, _ = crit.split_value(theta, w)
                diag["lambda_refits"] += 1
                diag["tangency"] = max(
                    diag["tangency"],
                    abs(convex + bound.value(theta, crit.inner_native(w)) - value),
                )
            g_theta, g_w = crit.gradient(theta, w)
            g_sur, g_sur_w = _surrogate_gradient(crit, theta, w, lam, lam_in)
            diag["gradient_certificate"] = max(
                diag["gradient_certificate"],
                float(np.max(np.abs(np.concatenate([g_sur - g_theta, g_sur_w - g_w])))),
            )
            g_merit = np.concatenate([g_theta - 1.0 / (t * theta), g_w])

            d = joint_newton_direction(crit, theta, w, lam, t, config, lam_inner=lam_in)
            slope = float(g_merit @ d.vector)
            decrement = -slope
            diag["rho_max_used"] = max(diag["rho_max_used"], d.rho)
            # barrier KKT residual t theta_m g_m = 1, scale-free in theta
            kkt = float(np.max(np.abs(t * theta * g_theta - 1.0)))
            centered = decrement <= 0.5 * config.outer_tol**2 or kkt <= 0.1

            alpha = 0.0
            if decrement > 1e-15 * max(1.0, abs(merit)):
                try:
                    alpha, state = linesearch(crit, state, d, t, config, slope, bound, diag)
                except LineSearchError:
                    # refit and retry once with a more strongly regularised system
                    diag["linesearch_retries"] += 1
                    if crit.has_concave:
                        bound = refit_bound(crit, theta, w)
                        lam, lam_in = bound.lam, bound.lam_inner
                    d = joint_newton_direction(crit, theta, w, lam, t, config,
                                               rho_start=max(1e-6, 10.0 * d.rho),
                                               lam_inner=lam_in)
                    slope = float(g_merit @ d.vector)
                    try:
                        alpha, state = linesearch(crit, state, d, t, config, slope, bound, diag)
                    except LineSearchError:
                        if decrement <= 1e-8 * max(1.0, abs(merit)):
                            centered = True  # round-off floor of the merit
                        else:
                            raise
            else:
                centered = True
            if merit - state.merit <= 1e-14 * max(1.0, abs(merit)):
                centered = True  # stagnation at the round-off floor
            theta, w, value, merit = state.theta, state.w, state.value, state.merit

            grow = False
            if centered or t >= config.barrier_t_max:
                w_full = finish_inner(theta, w)
                value, merit = _merit(crit, theta, w_full, t)
                w = w_full
                pg_norm = pg_of(theta, w)
                if pg_norm <= config.outer_tol:
                    rows.append((it, t, merit, pg_norm, alpha, theta.copy()))
                    status, message = "converged", ""
                    break
                grow = centered
            else:
                pg_norm = pg_of(theta, w)
            rows.append((it, t, merit, pg_norm, alpha, theta.copy()))
            if (grow or phase_iter >= config.barrier_every) and t < config.barrier_t_max:
                t = min(t * config.barrier_mult, config.barrier_t_max)
                phase_iter = 0
                value, merit = _merit(crit, theta, w, t)
    except (SolverError, ConvergenceError, np.linalg.LinAlgError, ObjectiveError,
            ValueError) as exc:
        status, message = "error", f"{type(exc).__name__}: {exc}"
        if isinstance(exc, CholeskyError):
            message += f" (pivot {exc.pivot})"

    try:
        w = finish_inner(theta, w) if status != "error" else w
        value = crit.value(theta, w)
        inner = crit.inner_state(theta, w)
    except Exception:  # noqa: BLE001 - report the state we have
        inner = None
        value = np.nan
    theta = np.asarray(theta, dtype=float)
    sparsity = theta <= config.sparsity_tol * np.max(theta)
    diag["final_t"] = t
    diag["wall_time"] = time.perf_counter() - start
    if diag["bound_violation"] == -np.inf:
        diag["bound_violation"] = 0.0
    return FitResult(
        theta_hat=theta,
        inner=inner,
        w=np.asarray(w, dtype=float),
        objective=float(value),
        trace=ConvergenceTrace.from_rows(rows, M),
        status=status,
        message=message,
        projected_grad_norm=float(pg_norm),
        n_iter=it,
        sparsity=sparsity,
        diagnostics=diag,
    )
