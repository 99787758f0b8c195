"""Gated fully convolutional text-line recognition in plain numpy.

Submodules: ``tensor`` (reverse-mode autodiff), ``functional`` (layers),
``model``, ``audit`` (parameter and receptive-field accounting), ``ctc``,
``metrics``, ``data``, ``train`` and ``cli``.
"""

from .ctc import brute_force_ctc, ctc_loss, ctc_loss_and_gradient, greedy_decode
from .data import Charset, DatasetManifest, LineSample, synth_generate, synth_samples
from .metrics import cer_wer, levenshtein
from .model import ArchitectureConfig, Model, build_model
from .tensor import Tensor, backward, no_grad
from .train import Checkpoint, TrainConfig, evaluate, fit

__version__ = "0.1.0"

__all__ = [
    "ArchitectureConfig",
    "Charset",
    "Checkpoint",
    "DatasetManifest",
    "LineSample",
    "Model",
    "Tensor",
    "TrainConfig",
    "backward",
    "brute_force_ctc",
    "build_model",
    "cer_wer",
    "ctc_loss",
    "ctc_loss_and_gradient",
    "evaluate",
    "fit",
    "greedy_decode",
    "levenshtein",
    "no_grad",
    "synth_generate",
    "synth_samples",
]
