"""Software model of a pruned, vector-quantized, basis-projected DPM detector."""

from .engine import DetectorConfig, Detection, detect, detect_pyramid
from .frontend import Image, PyramidConfig, load_image, pyramid_features
from .metrics import CostLedger, report
from .model import DpmModel, compile_model, load_compiled, load_model
from .oracle import dense_scores
from .vq import Codebook, load_codebook, train_codebook

__all__ = [
    "Codebook",
    "CostLedger",
    "Detection",
    "DetectorConfig",
    "DpmModel",
    "Image",
    "PyramidConfig",
    "compile_model",
    "dense_scores",
    "detect",
    "detect_pyramid",
    "load_codebook",
    "load_compiled",
    "load_image",
    "load_model",
    "pyramid_features",
    "report",
    "train_codebook",
]
__version__ = "0.1.0"
