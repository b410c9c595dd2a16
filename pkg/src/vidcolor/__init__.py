"""Reference-propagating latent diffusion for toy video colorization."""

from .frames_io import FrameSequence, load_sequence, save_sequence
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = ["FrameSequence", "load_sequence", "save_sequence", "KERNEL_BACKEND", "__version__"]
