"""Convolutional-recurrent CTC handwriting recognizer built on a small numpy autodiff engine."""

from .ctc import CTCInfeasibleError, ctc_brute_force, ctc_loss, greedy_decode
from .dataset import Alphabet, DataError, SynthConfig, load_manifest, read_image, synth_generate
from .metrics import EvalReport, corpus_scores, edit_distance
from .network import Network, NetworkConfig, build_model
from .preprocessing import AugmentParams, CanvasSpec, augment, fit_to_canvas, make_batch, pad_transcript
from .tensor import Tensor, backward, no_grad
from .train import TrainConfig, ablate, evaluate, lr_schedule, multitask_loss, train

__version__ = "0.1.0"
