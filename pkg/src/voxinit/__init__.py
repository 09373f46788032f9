"""Learned weight initialization for volumetric segmentation, in numpy."""
from voxinit.autodiff import Tape, Tensor, backward, no_grad
from voxinit.checkpoint import Checkpoint
from voxinit.dataio import FormatError, SynthSpec, VolumeSample
from voxinit.initzoo import InitSpec
from voxinit.model import SEG_HEADS, SSL_HEADS, HybridSegModel, ModelConfig
from voxinit.optim import AdamW, NumericalError, SGD
from voxinit.pipeline import (Step1Config, Step2Config, evaluate, sliding_window_infer, train_step1,
                              train_step2, transfer_weights)

__version__ = "0.1.0"

__all__ = [
    "AdamW", "Checkpoint", "FormatError", "HybridSegModel", "InitSpec", "ModelConfig", "NumericalError",
    "SEG_HEADS", "SGD", "SSL_HEADS", "Step1Config", "Step2Config", "SynthSpec", "Tape", "Tensor",
    "VolumeSample", "backward", "evaluate", "no_grad", "sliding_window_infer", "train_step1", "train_step2",
    "transfer_weights",
]
