"""Similarity-memory segmentation: a float64 autodiff core, a prototype
memory bank with loss-driven slot replacement, memory-matched attention and
dual-similarity enhancement blocks, a dual-encoder segmentation network, and
a reproducible training harness."""

from .errors import (
    MemsegError, DimensionError, ContractError, StateError, FormatError,
    InsufficientDataError, NonFiniteError, TrainingDiverged,
)
# the factory function tensor.tensor and the entry point train.train stay
# module-qualified: re-exporting them here would shadow their submodules
from .tensor import (
    Tensor, GradTape, backward, no_grad, use_tape, finite_diff_check,
)
from .memory import (
    PrototypeMemoryBank, kmeans, init_kmeans, assign_tokens,
    compute_update_budget, apply_wld_update,
)
from .attention import DecisionPlan, MemoryAttentionBlock
from .enhance import DualSimilarityBlock, decay_schedule
from .network import (
    Network, NetworkConfig, WindowedBlock, SkipGate,
    save_checkpoint, load_checkpoint, checkpoint_bytes, checkpoint_from_bytes,
)
from .metrics import (
    SegMetrics, dsc, hd95, boundary_points, evaluate_pair,
    dice_loss, ce_loss, combined_loss,
)
from .data import (
    SyntheticSample, generate_synthetic_dataset, audit_dataset,
    save_dataset, load_dataset, split_dataset, read_pgm, write_pgm,
)
from .train import (
    TrainConfig, RunSummary, AdamW, evaluate_network, class_mean_rows,
    parse_run_config, simulate_k, parse_loss_file,
)

__version__ = "0.1.0"
