"""Multi-level CNN-RNN valence/arousal estimation on numpy.

A small reverse-mode autodiff core, conv/GRU kernels, backbones with named
feature taps, recurrent heads over several taps, CCC metrics and loss,
landmark alignment, utterance-level post-processing, ensemble fusion and a
seeded synthetic face-video generator.
"""
__version__ = "0.1.0"

from .tensor import Tensor, backward, precision
from .metrics import ccc, pcc, mse, ccc_loss, score
from .zoo import HeadSpec, ModelGraph, build_model, enumerate_ablations, toy_backbone, vgg_face_backbone
from .data import SyntheticSpec, generate, load_dataset, synthesize
from .trainer import TrainConfig, evaluate, train

__all__ = ["Tensor", "backward", "precision", "ccc", "pcc", "mse", "ccc_loss", "score", "HeadSpec", "ModelGraph",
           "build_model", "enumerate_ablations", "toy_backbone", "vgg_face_backbone", "SyntheticSpec", "generate",
           "load_dataset", "synthesize", "TrainConfig", "evaluate", "train"]
