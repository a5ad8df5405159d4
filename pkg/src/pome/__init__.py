"""Data-free editing of fine-tuned checkpoints: truncate each selected layer's
fine-tuning delta to its leading singular directions, equalize them, rescale."""

from .core import (
    EditedDelta,
    PomeParams,
    RmsBudget,
    apply_edit,
    delta,
    optimal_p_star,
    orthogonalize,
    resolve_k,
    rms_to_rms_norm,
    verify_theorem_bound,
)
from .linalg import SvdResult, frobenius_norm, newton_schulz, spectral_norm, svd

__version__ = "0.1.0"
