"""Multiple kernel learning with probabilistic criteria.

Kernel weights theta >= 0 of K(theta) = sum_m theta_m K_m are learned by
minimising one of several related criteria (regularised risk, joint MAP,
Gaussian marginal likelihood, ridge, variational bound) with a double-loop
Newton method.
"""
__version__ = "0.1.0"

from .kernels import (  # noqa: E402
    BaseKernelSet,
    CholeskyError,
    GramFactor,
    KernelError,
    KernelFunctionSpec,
    assemble_gram,
    build_base_kernels,
    posterior_mean_predict,
    trace_products,
)
from .likelihoods import Gaussian, Laplace, Logistic, UnsupportedLikelihood, make_likelihood  # noqa: E402
from .objectives import (  # noqa: E402
    Criterion,
    ObjectiveSpec,
    VariationalState,
    eval_phi_gau,
    eval_phi_map,
    eval_phi_map_gau,
    eval_phi_mkl,
    eval_phi_rr,
    eval_psi_vb_gamma,
    eval_psi_vb_z,
    inner_map_solve,
    optimize_gamma,
    theta_gradient,
)
from .oracle import (  # noqa: E402
    OracleEstimate,
    finite_diff_gradient,
    grid_min,
    mlm_gauss_hermite,
    mlm_monte_carlo,
)
from .solver import ConvergenceTrace, FitResult, SolverConfig, fit, refit_lambda  # noqa: E402
