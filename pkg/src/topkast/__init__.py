"""Always-sparse neural network training.

The forward pass runs on the top D-fraction of each layer's weights by
magnitude; gradients flow to a slightly larger top-(D+M) coordinate block;
an exploration penalty keeps the mask adapting. Baselines (dense, static
random mask, SET prune/regrow) share the same engine, and every run is
reproducible bit-for-bit from its config and seed.
"""

from .baselines import BaselineKind, set_regrow, static_mask_init
from .checkpoint import (
    Checkpoint,
    CheckpointFormatError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    load_checkpoint,
    save_checkpoint,
)
from .data import (
    BatchCursor,
    Dataset,
    IdxFormatError,
    IdxTruncatedError,
    TeacherSpec,
    load_idx,
    load_idx_dataset,
    make_image_classes,
    save_idx,
    synth_teacher_student,
)
from .experiment import (
    ConfigError,
    TrainConfig,
    TrainingDiverged,
    evaluate_checkpoint,
    parse_config,
    run_experiment,
)
from .masking import (
    MaskPair,
    SparsitySpec,
    apply_mask,
    compute_masks,
    random_b_complement,
    refresh_due,
    topk_indices,
)
from .metrics import (
    FlopReport,
    MaskSnapshot,
    ReservoirTracker,
    flop_estimate,
    mask_churn,
    reservoir_activation,
)
from .optimizer import (
    AblationSwitches,
    OptimizerState,
    SupportViolation,
    apply_update,
    exploration_grad,
    exploration_loss,
    lr_schedule,
    train_step,
)
from .tensor import (
    ComputeGraph,
    DenseParamStore,
    DimensionError,
    GraphStateError,
    Node,
    NumericError,
    SparseGrad,
    Tensor,
    finite_diff_grad,
    init_mlp_params,
    mlp_graph,
)

__version__ = "0.1.0"
