"""Influence-guided replay-buffer selection for continual learning.

The package keeps every quantity small enough to check against exact
oracles: convex models with analytic derivatives, matrix-free conjugate
gradients for the inverse-Hessian solves, influence scores with their
second-order interference regularizer, greedy and brute-force selectors,
and a continual-learning harness with retraining and rank-agreement
validation built in.
"""

from .numkit import (
    DEFAULT_DAMPING,
    CgConfig,
    CgResult,
    ConvergenceError,
    SpdOperator,
    cg_solve,
    deterministic_sum,
)
from .models import (
    Dataset,
    FitConfig,
    FitError,
    ModelSpec,
    Params,
    Sample,
    accuracy,
    fit,
    grad,
    loss,
    sample_hvp,
    set_hvp,
)
from .influence import (
    CriterionConfig,
    InfluenceContext,
    SecondOrderCase,
    SelectionWeights,
    TaylorGradResult,
    build_context,
    first_order_influence,
    gradient_matching_distance,
    identical_hessian_form,
    regularizer,
    regularizer_taylor_grad,
    second_order_influence,
    total_interference,
)
from .selection import (
    ReplayBuffer,
    SelectionTrace,
    SelectorKind,
    select_exhaustive,
    select_greedy,
    select_reservoir,
    select_ring,
)
from .harness import (
    AccuracyMatrix,
    OracleConfig,
    RunReport,
    Stream,
    StreamSpec,
    acc_bwt,
    finite_eps_second_order,
    kendall_tau,
    loo_retrain_delta,
    make_stream,
    run_continual,
)

__version__ = "0.1.0"
