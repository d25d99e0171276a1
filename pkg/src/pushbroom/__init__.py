"""Line-by-line hyperspectral denoising with a power-scalable, fault-filtering
mixture of state-space U-Net denoisers, built on a small numpy autodiff."""

from .denoiser import Denoiser, DenoiserConfig, DenoiserStream, denoiser_step
from .mixture import Aggregator, Mixture, MixtureStream, detect_faults

__version__ = "0.1.0"

__all__ = [
    "Aggregator",
    "Denoiser",
    "DenoiserConfig",
    "DenoiserStream",
    "Mixture",
    "MixtureStream",
    "denoiser_step",
    "detect_faults",
]
