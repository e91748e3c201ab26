"""CSASN: a dual-branch CNN + ViT classifier with cascaded channel-spatial attention.

Everything runs on a small numpy autodiff engine (``csasn.tensor``).
"""

from .estimators import CSASNClassifier, DCTBandpass
from .model import CSASN, ModelConfig, VARIANTS
from .tensor import Tensor, get_precision, set_precision

__all__ = ["CSASN", "CSASNClassifier", "DCTBandpass", "ModelConfig", "Tensor", "VARIANTS",
           "get_precision", "set_precision"]
__version__ = "0.1.0"
