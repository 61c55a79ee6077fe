"""Lightweight host intrusion detection over system-call traces.

A small 1-D CNN is trained with the DeepSVDD objective to map normal
windows close to a center, an isolation forest fit on those features
scores new windows, and a ``mean + k * std`` threshold over validation
scores turns scores into labels.  An int8 post-training quantized copy
of the extractor can stand in for the float one.
"""

from .detect import Pipeline, Threshold, calibrate_threshold, deploy_pipeline, evaluate
from .errors import LightHidsError
from .iforest import IsolationForestModel, c_factor, fit, score
from .kernels import ExtractorModel, extractor_backward, extractor_forward, init_model
from .quantize import QuantizedModel, quantize_model, quantized_forward
from .svdd import TrainConfig, train

__version__ = "0.1.0"

__all__ = [
    "ExtractorModel",
    "IsolationForestModel",
    "LightHidsError",
    "Pipeline",
    "QuantizedModel",
    "Threshold",
    "TrainConfig",
    "c_factor",
    "calibrate_threshold",
    "deploy_pipeline",
    "evaluate",
    "extractor_backward",
    "extractor_forward",
    "fit",
    "init_model",
    "quantize_model",
    "quantized_forward",
    "score",
    "train",
]
