"""Straggler-tolerant least squares via erasure-coded second moments.

The pipeline: precompute the Gram system (M = X'X, b = X'y) once, encode the
rows of M with an erasure code, hand one coded row bundle to each worker, and
run projected gradient descent where every step needs only the inner products
that survive the round's stragglers.
"""

from momentenc.linalg import (
    DataSet,
    MomentSystem,
    gram,
    moment_setup,
    loss,
    exact_gradient,
    generate_dataset,
    save_dataset,
    load_dataset,
    import_csv,
)
from momentenc.codes import (
    CodeConstructionError,
    UnrecoverableError,
    LdpcParams,
    ParityCheck,
    GeneratorMatrix,
    DecodeOutcome,
    build_regular_ldpc,
    systematic_generator,
    build_ldpc_code,
    encode,
    peel_decode,
    ml_erasure_decode,
    random_mds_generator,
    mds_decode,
    identity_generator,
    replication2_generator,
    density_evolution,
    erasure_threshold,
)
from momentenc.coded_gd import (
    TaskAllocation,
    WorkerResponse,
    RecoveredGradient,
    EncodedProblem,
    GradientCodingDesign,
    partition_rows,
    encode_moment_exact,
    encode_moment_ldpc,
    worker_compute,
    recover_exact,
    recover_approx,
    build_problem,
    gc_fraction_repetition,
    gc_criterion_check,
)
from momentenc.optimize import (
    Projection,
    FixedRate,
    BoundRate,
    OptimizerConfig,
    IterateTrace,
    project,
    pgd_step,
    run_coded_pgd,
    psgd_single_sample,
    averaged_iterate_bound,
    estimate_gradient_bound,
    spectral_norm,
)
from momentenc.runtime import (
    StragglerModel,
    RoundOutcome,
    SimulatedRuntime,
    sample_stragglers,
    simulate_round,
)

__version__ = "0.1.0"
