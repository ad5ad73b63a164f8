"""Speech watermarking with an invertible teacher network and a distilled student encoder."""
from .dsp import AudioClip, ComplexSpec, StftConfig, istft, stft
from .watermark_net import STUDENT_CONFIG, TEACHER_CONFIG, ModelConfig, WatermarkModel

__version__ = "0.1.0"

__all__ = [
    "AudioClip",
    "ComplexSpec",
    "StftConfig",
    "stft",
    "istft",
    "ModelConfig",
    "WatermarkModel",
    "TEACHER_CONFIG",
    "STUDENT_CONFIG",
]
