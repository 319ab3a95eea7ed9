"""Toy-scale feature distillation where a classifier-guided diffusion model denoises student features."""

from .config import RunConfig, load_config
from .data import ContainerError, Dataset, read_container, write_container
from .diffusion import ConfigError, NoisePredictor, NoiseSchedule, make_schedule
from .guidance import GuidanceConfig, NoiseAdapter, TeacherClassifier, denoise_student, guided_step
from .losses import LshHead, dskd_loss, global_loss, kd_loss, local_loss
from .networks import ConvNetSpec, ModelBundle, Projector
from .tensor import NumericError, ShapeError, Tensor

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContainerError", "ConvNetSpec", "Dataset", "GuidanceConfig", "LshHead", "ModelBundle",
    "NoiseAdapter", "NoisePredictor", "NoiseSchedule", "NumericError", "Projector", "RunConfig", "ShapeError",
    "TeacherClassifier", "Tensor", "denoise_student", "dskd_loss", "global_loss", "guided_step", "kd_loss",
    "load_config", "local_loss", "make_schedule", "read_container", "write_container",
]
