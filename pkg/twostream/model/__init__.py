from twostream.model.model_base import TwoStreamModel, count_parameters
from twostream.model.model_config import AttentionConfig, ModelConfig
from twostream.model.model_inputs import ImageInput, StreamOutputs, TextInput, compute_spatial5

__all__ = [
    "AttentionConfig",
    "ImageInput",
    "ModelConfig",
    "StreamOutputs",
    "TextInput",
    "TwoStreamModel",
    "compute_spatial5",
    "count_parameters",
]
