"""Generalized first-order methods on GOE matrices, their explicit Gaussian
coupling, state evolution, and the accompanying error and Wasserstein bounds."""
from .conditioning import AdaptedLinearSystem, cond_gaussian, recursive_conditionals
from .coupling import CoupledRun, OrderedBasis, build_coupling, gram_schmidt_step, verify_identity
from .diagnostics import (
    ErrorReport,
    bound_thm4,
    check_chol_pert,
    check_concentration,
    check_stability,
    compute_Bn_Sn,
    deltas,
    psi_terms,
    tail_frequency,
)
from .dynamics import SystemSpec, amp_from_f, run_comparison, run_gfom
from .errors import *  # noqa: F401,F403
from .functions import Composite, Constant, Linear, MatrixLinear, Separable, from_dict
from .linalg_rand import RngStream, cholesky_upper, norms, pinv, sample_gaussian_matrix, sample_goe
from .state_evolution import (
    LinearCaseSpec,
    SeParams,
    b_stein,
    se_amp,
    se_linear_closed_form,
    se_monte_carlo,
)
from .wasserstein import GaussianLaw, LbReport, ar_alpha_sq, lb_linear_case, sandwich, w2_gaussian

__version__ = "0.1.0"
