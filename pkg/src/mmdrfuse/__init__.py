"""Tiny infrared/visible image fusion: a 113-parameter fusion network
distilled from a 13-layer teacher, with training, inference and a full
fusion metric suite. Pure numpy compute with OpenCV-backed filtering."""

from .autodiff import Tensor, no_grad
from .data import ImagePair, PatchSet, load_image, load_pair, make_patches, save_png
from .formats import FormatError
from .losses import (LossWeights, STUDENT_WEIGHTS, TEACHER_WEIGHTS,
                     comprehensive_loss, distill_loss, total_loss)
from .metrics import MetricReport, evaluate_dataset, evaluate_pair
from .nets import (StudentNet, TeacherNet, count_macs, count_params,
                   fuse_pair, init_params, load_weights, payload_bytes,
                   save_weights)
from .ops import ShapeError
from .refresh import RefreshStore
from .train import Adam, TrainAbort, TrainConfig, train_student, train_teacher
from .vgg import VggWeights, extract_taps, load_vgg, make_random_vgg, save_vgg

__version__ = "0.1.0"

__all__ = [
    "Adam", "FormatError", "ImagePair", "LossWeights", "MetricReport",
    "PatchSet", "RefreshStore", "ShapeError", "StudentNet", "STUDENT_WEIGHTS",
    "TeacherNet", "TEACHER_WEIGHTS", "Tensor", "TrainAbort", "TrainConfig",
    "VggWeights", "comprehensive_loss", "count_macs", "count_params",
    "distill_loss", "evaluate_dataset", "evaluate_pair", "extract_taps",
    "fuse_pair", "init_params", "load_image", "load_pair", "load_vgg",
    "load_weights", "make_patches", "make_random_vgg", "no_grad",
    "payload_bytes", "save_png", "save_vgg", "save_weights", "total_loss",
    "train_student", "train_teacher",
]
