"""Task calibration of latent LLM beliefs and MBR decoding."""

from .calibrate import Calibrator, FitConfig, apply_calibrator, deserialize, fit, nll, serialize
from .core import (
    Dataset,
    LatentSpace,
    NumericalError,
    PredictionRecord,
    SimplexPoint,
    ValidationError,
    binary_set_view,
    estimate_push_forward,
    load_dataset,
    product_space,
)
from .decision import (
    argmax_policy,
    bas_threshold_decide,
    bayes_risk,
    decode_pipeline,
    group_by_mbr_action,
    mbr_decode,
    mbr_decode_batch,
)
from .harness import ExperimentConfig, emit_report, generate_synthetic, kfold_split, run_experiment
from .losses import LossMatrix, LossSpec, bas_loss, build_loss_matrix
from .metrics import (
    TceBinConfig,
    action_movement_matrix,
    bin_index,
    divergence,
    ece_confidence,
    expected_task_loss,
    generalized_entropy,
    tce_binned,
    tce_kde,
)

__version__ = "0.1.0"
