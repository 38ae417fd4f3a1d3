"""Class-balanced self-training for unsupervised domain adaptation."""

from .confidence import (
    PaceSchedule,
    ThresholdSet,
    determine_k,
    determine_kc,
    pixel_confidence,
    portion_at_round,
    predicted_labels,
)
from .pseudolabel import SelectionMetric, generate_cbst, generate_cbst_sp, generate_st, oracle_label
from .tensor_io import IGNORE, ProbMap

__version__ = "0.1.0"
