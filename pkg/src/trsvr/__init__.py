"""Trust-region optimization with variance-reduced gradients for finite sums."""

from .core import (
    CallableProblem,
    ConfigurationError,
    ContractViolation,
    FiniteSumProblem,
    InputError,
    IterateState,
    NumericFailure,
    RandomSource,
    evaluate_objective,
    full_gradient,
)
from .drivers import IterationRecord, RunConfig, Trace, run, run_sgd, run_svrg, run_tr_deterministic, run_trsvr
from .estimators import (
    BatchSampler,
    GradientEstimate,
    estimator_variance,
    exact_estimator_variance,
    minibatch_gradient,
    sample_batch,
    variance_reduced_gradient,
)
from .problems import (
    Dataset,
    make_least_squares,
    make_logistic,
    make_problem,
    make_robust_nonconvex,
    parse_libsvm,
    serialize_libsvm,
    synth_data,
)
from .theory import (
    LyapunovSchedule,
    TheoryConstants,
    best_z,
    convergence_bound,
    estimate_constants,
    lyapunov_schedule,
    verify_decrease_lemmas,
    verify_theorem_bound,
    verify_variance_bound,
)
from .tr_solver import (
    HessianMode,
    RadiusPolicy,
    Step,
    TrustRegionModel,
    build_model,
    cauchy_step,
    check_cauchy_decrease,
    steihaug_cg,
    update_radius,
)

__version__ = "0.1.0"
