"""Gauss-Newton preconditioned subgradient solvers with a low-rank tensor
sensing benchmark harness and structural diagnostics."""

from .linalg import (
    CGResult,
    RandomStream,
    SelfAdjointAction,
    cg_min_norm,
    conditioned_factor,
    gaussian_matrix,
    singular_values,
    uniform_in_ball,
)
from .oracles import (
    CompositeOracle,
    PullbackBundle,
    RunRecord,
    SolverConfig,
    TraceRow,
    best_iterate,
)
from .sensing import (
    TensorSensingInstance,
    generate_instance,
    gram_apply,
    image_distance,
    make_oracle,
    measure,
    objective,
    pullback_of_image_difference,
    reference_optimal_value,
    subgradient_pullback,
)
from .solvers import (
    RestartState,
    SolverError,
    StepInfo,
    gnp,
    gnp_step,
    polyak_subgrad,
    predicted_iterations,
    rgnp,
    rpolyak,
    scaled_sm,
)
from .diagnostics import (
    TheoryConstants,
    constant_rank_report,
    derive_constants,
    estimate_sharpness,
    fd_pullback_check,
    numerical_rank,
    rate_report,
)

__version__ = "0.1.0"
