import numpy as np
import pytest

from kernelblend.kernels import BaseKernelSet, KernelFunctionSpec, build_base_kernels
from kernelblend.likelihoods import Gaussian, Laplace, Logistic


def random_bases(rng, M, n, rank=None):
    """M random PSD matrices of size n, scaled to unit trace."""
    mats = []
    for _ in range(M):
        A = rng.standard_normal((n, rank or n))
        K = A @ A.T
        mats.append(K / np.trace(K))
    return BaseKernelSet(np.stack(mats), tuple(f"K{m}" for m in range(M)))


def smooth_bases(rng, M, n, d=1):
    """Squared-exponential and linear kernels on random inputs, unit trace."""
    X = rng.uniform(-2, 2, size=(n, d))
    kinds = [
        KernelFunctionSpec("squared-exponential", lengthscale=0.5),
        KernelFunctionSpec("squared-exponential", lengthscale=2.0),
        KernelFunctionSpec("linear"),
        KernelFunctionSpec("squared-exponential", lengthscale=1.0),
    ]
    return build_base_kernels(kinds[:M], X, normalize=True), X


def labels_for(model, rng, n):
    if isinstance(model, Logistic):
        y = np.where(rng.random(n) < 0.5, -1.0, 1.0)
        y[0] = 1.0
        if n > 1:
            y[1] = -1.0
        return y
    return rng.standard_normal(n)


MODELS = {
    "gaussian": lambda: Gaussian(0.3),
    "laplace": lambda: Laplace(1.5),
    "logistic": lambda: Logistic(1.0),
}


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
