"""Complex Swin transformer network for multi-echo MRI enhancement and SMWI.

Submodules: ``tensor`` (autodiff), ``fft``, ``mri`` (volumes, k-space,
phantoms), ``swin``, ``model``, ``smwi``, ``metrics``, ``train``,
``gradcheck`` and ``cli``.
"""

from .model import CSTNConfig, enhance, bicubic_baseline, init_weights, load_checkpoint, save_checkpoint
from .mri import ComplexImage, KSpace, MultiEchoVolume, generate_phantom, simulate_lowres
from .smwi import SMWIParams, reconstruct_smwi
from .swin import RSTBConfig

__version__ = "0.1.0"

__all__ = [
    "CSTNConfig", "RSTBConfig", "SMWIParams", "ComplexImage", "KSpace", "MultiEchoVolume",
    "enhance", "bicubic_baseline", "init_weights", "load_checkpoint", "save_checkpoint",
    "generate_phantom", "simulate_lowres", "reconstruct_smwi",
]
