"""splitsim: a deterministic simulator for split learning over vertically
partitioned features.

Feature-holding clients own partial networks; a computation server owns the
shared trunk; one client also holds the labels.  Cut-layer activations are
merged (concat/max/avg/sum/mul), gradients are routed back, traffic is
byte-counted, and everything is reproducible from a single seed.
"""

from .config import (
    CsvSpec,
    DropSpec,
    ExperimentConfig,
    ModelSpec,
    PartitionSpec,
    SyntheticSpec,
    apply_overrides,
    load_config,
)
from .data import (
    DEFAULT_SPLIT_SEED,
    DEFAULT_TEST_FRACTION,
    Dataset,
    MetricsReport,
    PartitionPlan,
    SplitDataset,
    evaluate,
    load_csv,
    make_plan,
    synth_blobs,
    train_test_indices,
    vertical_split,
)
from .errors import (
    ConfigError,
    DataError,
    PlanError,
    ProtocolError,
    ShapeError,
    SplitSimError,
    StragglerError,
)
from .merge import (
    MergeCache,
    MergeStrategy,
    PresenceMask,
    merge_backward,
    merge_forward,
    validate_cut_shapes,
)
from .nn import (
    DenseLayer,
    ForwardCache,
    GradientSet,
    Mlp,
    SgdConfig,
    SgdState,
    backward,
    count_flops_per_sample,
    count_params,
    finite_diff_grads,
    forward,
    init_mlp,
    sgd_step,
    softmax_cross_entropy,
)
from .protocol import (
    DropSchedule,
    EpochRecord,
    Party,
    Role,
    Simulation,
    TrafficLog,
    WireMessage,
    apply_drop,
    build_simulation,
    compute_gradients,
    evaluate_with_drop,
    party_costs,
    predict_epoch_traffic,
    run_training,
    schedule_from_config,
    train_iteration,
)
from .tensor import (
    Matrix,
    Rng,
    concat_cols,
    ewise,
    matmul,
    scale,
    slice_cols,
    take_rows,
    transpose,
)

__version__ = "0.1.0"
