"""Base kernels, the mixed Gram matrix K(theta) and its Cholesky factor."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, lapack, solve_triangular
from scipy.spatial.distance import cdist

DEFAULT_JITTER = 1e-8
KERNEL_KINDS = ("linear", "squared-exponential", "precomputed")
_EIG_CHECK_MAX_N = 2000


class KernelError(ValueError):
    """Invalid kernel specification or base matrix."""


class CholeskyError(np.linalg.LinAlgError):
    """Cholesky breakdown of a matrix that should be positive definite."""

    def __init__(self, pivot, message=None):
        self.pivot = pivot
        super().__init__(message or f"Cholesky breakdown at pivot {pivot}")


@dataclass(frozen=True)
class KernelFunctionSpec:
    kind: str
    lengthscale: float = 1.0
    variance: float = 1.0
    path: str | None = None
    name: str | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise KernelError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "squared-exponential":
            if not (self.lengthscale > 0 and self.variance > 0):
                raise KernelError("squared-exponential needs lengthscale > 0 and variance > 0")
        if self.kind == "precomputed" and not self.path:
            raise KernelError("precomputed kernel needs a matrix path")

    @property
    def label(self):
        if self.name:
            return self.name
        if self.kind == "squared-exponential":
            return f"se(l={self.lengthscale:g},s2={self.variance:g})"
        if self.kind == "precomputed":
            return f"precomputed({os.path.basename(self.path)})"
        return "linear"

    def evaluate(self, X1, X2):
        """Cross-kernel matrix k(X1[i], X2[j])."""
        if self.kind == "linear":
            return X1 @ X2.T
        if self.kind == "squared-exponential":
            d2 = cdist(X1, X2, "sqeuclidean")
            return self.variance * np.exp(-0.5 * d2 / self.lengthscale**2)
        raise KernelError("precomputed kernels cannot be evaluated at new inputs")


@dataclass(frozen=True, eq=False)
class BaseKernelSet:
    """M fixed PSD base matrices sharing one training set.

    ``scales`` holds the normalisation factor applied to each base matrix so
    that cross kernels for prediction can be scaled identically.
    """

    bases: np.ndarray
    names: tuple
    inputs: np.ndarray | None = None
    specs: tuple | None = None
    scales: np.ndarray | None = None

    def __post_init__(self):
        bases = np.asarray(self.bases, dtype=float)
        if bases.ndim != 3 or bases.shape[0] < 1 or bases.shape[1] < 1:
            raise KernelError("bases must be a non-empty stack of square matrices")
        if bases.shape[1] != bases.shape[2]:
            raise KernelError(f"base matrices must be square, got {bases.shape[1:]}")
        if len(self.names) != bases.shape[0]:
            raise KernelError("one name per base matrix required")
        checked = np.empty_like(bases)
        for m, K in enumerate(bases):
            checked[m] = validate_psd(K, self.names[m])
        checked.setflags(write=False)
        object.__setattr__(self, "bases", checked)
        if self.scales is None:
            object.__setattr__(self, "scales", np.ones(bases.shape[0]))

    @property
    def M(self):
        return self.bases.shape[0]

    @property
    def n(self):
        return self.bases.shape[1]

    def permuted(self, order):
        order = list(order)
        return BaseKernelSet(
            self.bases[order],
            tuple(self.names[i] for i in order),
            self.inputs,
            None if self.specs is None else tuple(self.specs[i] for i in order),
            self.scales[order],
        )

    def cross(self, test_inputs):
        """Stack of per-base cross kernels, shape (M, n, n_test)."""
        if self.specs is not None and any(s.kind == "precomputed" for s in self.specs):
            raise KernelError(
                "precomputed kernels have no values at new inputs, so cross kernels are unavailable"
            )
        if self.specs is None or self.inputs is None:
            raise KernelError("cross kernels need function-based kernels and training inputs")
        Xs = _as_inputs(test_inputs, self.inputs.shape[1])
        return np.stack(
            [c * s.evaluate(self.inputs, Xs) for s, c in zip(self.specs, self.scales)]
        )


@dataclass(frozen=True, eq=False)
class GramFactor:
    """K(theta) = sum_m theta_m K_m + jitter*I with its lower Cholesky factor."""

    K: np.ndarray
    chol: np.ndarray
    jitter: float
    theta: np.ndarray = field(default=None)

    @property
    def n(self):
        return self.K.shape[0]

    def logdet(self):
        return 2.0 * np.sum(np.log(np.diag(self.chol)))

    def solve(self, b):
        return cho_solve((self.chol, True), b, check_finite=False)

    def half_solve(self, b):
        """L^{-1} b."""
        return solve_triangular(self.chol, b, lower=True, check_finite=False)

    def quad(self, u):
        """u^T K^{-1} u."""
        w = self.half_solve(u)
        return float(w @ w)

    def inverse(self):
        return self.solve(np.eye(self.n))


def _as_inputs(X, d=None):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise KernelError("inputs must be an (n, d) array")
    if not np.all(np.isfinite(X)):
        raise KernelError("inputs contain non-finite coordinates")
    if d is not None and X.shape[1] != d:
        raise KernelError(f"input dimension mismatch: expected {d}, got {X.shape[1]}")
    return X


def validate_psd(K, name="kernel"):
    """Check symmetry and PSD up to round-off; return the exactly symmetrised matrix."""
    K = np.asarray(K, dtype=float)
    if not np.all(np.isfinite(K)):
        raise KernelError(f"{name}: non-finite entries")
    scale = max(np.max(np.abs(K)), np.finfo(float).tiny)
    if np.max(np.abs(K - K.T)) > 1e-12 * scale:
        raise KernelError(f"{name}: matrix is not symmetric")
    K = 0.5 * (K + K.T)
    n = K.shape[0]
    if n <= _EIG_CHECK_MAX_N:
        ev = np.linalg.eigvalsh(K)
        if ev[0] < -1e-8 * max(ev[-1], 0.0) and ev[0] < -np.finfo(float).tiny:
            raise KernelError(f"{name}: not positive semidefinite (min eigenvalue {ev[0]:.3e})")
    else:
        _, info = lapack.dpotrf(K + 1e-8 * scale * np.eye(n), lower=1, clean=1)
        if info != 0:
            raise KernelError(f"{name}: Cholesky probe failed, matrix is not PSD")
    return K


def build_base_kernels(specs, inputs, normalize=False):
    """Evaluate each kernel spec on the training inputs.

    Precomputed specs are loaded from their CSV path. With ``normalize`` every
    base matrix is rescaled to unit trace.
    """
    specs = list(specs)
    if not specs:
        raise KernelError("at least one kernel spec is required")
    X = None if inputs is None else _as_inputs(inputs)
    mats = []
    for spec in specs:
        if spec.kind == "precomputed":
            mats.append(load_matrix_csv(spec.path))
        else:
            if X is None:
                raise KernelError(f"{spec.label} needs training inputs")
            mats.append(spec.evaluate(X, X))
    n = mats[0].shape[0]
    for spec, Km in zip(specs, mats):
        if Km.shape != (n, n):
            raise KernelError(f"{spec.label}: dimension mismatch {Km.shape} vs ({n}, {n})")
    if X is not None and X.shape[0] != n:
        raise KernelError(f"precomputed size {n} does not match {X.shape[0]} inputs")
    scales = np.ones(len(mats))
    if normalize:
        scales = np.array([1.0 / np.trace(Km) if np.trace(Km) > 0 else 1.0 for Km in mats])
    bases = np.stack([c * Km for c, Km in zip(scales, mats)])
    return BaseKernelSet(bases, tuple(s.label for s in specs), X, tuple(specs), scales)


def load_matrix_csv(path):
    K = np.loadtxt(path, delimiter=",", ndmin=2)
    if K.shape[0] != K.shape[1]:
        raise KernelError(f"{path}: expected a square matrix, got {K.shape}")
    return K


def as_theta(theta, M=None):
    theta = np.asarray(theta, dtype=float).reshape(-1)
    if M is not None and theta.shape[0] != M:
        raise ValueError(f"theta has {theta.shape[0]} entries, expected {M}")
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    if np.any(theta < 0):
        raise ValueError("theta must be nonnegative")
    return theta


def mix(theta, bases):
    """sum_m theta_m K_m without jitter."""
    return np.tensordot(theta, bases.bases, axes=1)


def cholesky(A):
    """Lower Cholesky factor; raises CholeskyError with the 0-based failing pivot."""
    L, info = lapack.dpotrf(A, lower=1, clean=1)
    if info > 0:
        raise CholeskyError(info - 1)
    if info < 0:
        raise ValueError("invalid argument to dpotrf")
    return L


def assemble_gram(theta, bases, jitter=DEFAULT_JITTER):
    theta = as_theta(theta, bases.M)
    if not jitter > 0:
        raise ValueError("jitter must be positive")
    K = mix(theta, bases)
    K[np.diag_indices_from(K)] += jitter
    try:
        L = cholesky(K)
    except CholeskyError as exc:
        raise CholeskyError(
            exc.pivot, f"K(theta) is indefinite beyond jitter {jitter:g} at pivot {exc.pivot}"
        ) from None
    return GramFactor(K, L, jitter, theta)


def _threads():
    try:
        return max(int(os.environ.get("KERNELBLEND_THREADS", "0")), 0)
    except ValueError:
        return 0


def trace_products(gram, bases):
    """[tr(K^{-1} K_m)]_m via triangular solves."""
    if bases.n != gram.n:
        raise ValueError("gram and bases dimension mismatch")

    def one(Km):
        A = gram.half_solve(Km)
        B = gram.half_solve(A.T)
        return np.trace(B)

    workers = _threads()
    if workers > 1 and bases.M > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return np.array(list(pool.map(one, bases.bases)))
    return np.array([one(Km) for Km in bases.bases])


def posterior_mean_predict(u_hat, gram, cross_kernel):
    """u(x*) = u_hat^T K^{-1} k*, one value per column of ``cross_kernel``."""
    u_hat = np.asarray(u_hat, dtype=float)
    cross_kernel = np.asarray(cross_kernel, dtype=float)
    if cross_kernel.ndim == 1:
        cross_kernel = cross_kernel[:, None]
    if u_hat.shape[0] != gram.n or cross_kernel.shape[0] != gram.n:
        raise ValueError("dimension mismatch between u_hat, gram and cross kernel")
    return cross_kernel.T @ gram.solve(u_hat)
