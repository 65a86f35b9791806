"""Multi-modal multi-instance distillation for volumetric disease-progression prediction.

A multi-modal teacher (volume + clinical scalars) and a volume-only student
share a 3D residual/double-attention backbone. The teacher's knowledge is
transferred by matching softmax distributions over per-patch disease scores,
either sequentially from a frozen teacher or mutually (deep mutual learning).
Everything runs on float64 numpy with a small reverse-mode autodiff core.
"""

from .errors import ContractViolation, ParseError

__version__ = "0.1.0"

__all__ = ["ContractViolation", "ParseError", "__version__"]
