"""Dialogue representation calibration: locality/isotropy metrics and losses."""

__version__ = "0.1.0"

from .dialogue import (
    CONTEXT_ID,
    EOU_ID,
    Dialogue,
    Segmentation,
    VocabularyMap,
    flatten_dialogue,
    load_dialogues,
    validate_segmentation,
)
from .geometry import (
    MetricReport,
    block_contrast,
    coherence_score,
    cosine,
    isotropy_distance,
    isotropy_value,
    locality_distance,
    locality_value,
    metric_report,
    similarity_matrix,
)
from .losses import (
    CalibrationConfig,
    LossReport,
    isotropy_loss,
    locality_loss,
    simdrc_loss,
    simdrc_loss_grad,
    token_repulsion_baseline,
)
