"""One-shot VGG-19 checkpoint conversion.

Pulls the sixteen conv layers out of a torchvision VGG-19, validates them
against the canonical layout, writes the backbone blob, and runs the same
tap pipeline the fusion toolkit uses (grayscale in [0,1], duplicated to
three channels, ImageNet-normalized, zero-padded 3x3 convs, taps at the
last activation of each block) to produce a reference feature dump. The
dump is the cross-framework oracle: the toolkit's own extractor must
reproduce it from the blob alone.
"""

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import blob

# (out, in) per conv layer, canonical VGG-19 order; all kernels 3x3
VGG19_SHAPES = [
    (64, 3), (64, 64),
    (128, 64), (128, 128),
    (256, 128), (256, 256), (256, 256), (256, 256),
    (512, 256), (512, 512), (512, 512), (512, 512),
    (512, 512), (512, 512), (512, 512), (512, 512),
]
# 0-based conv indices whose post-relu activation is a tap (relu1_2,
# relu2_2, relu3_4, relu4_4, relu5_4); pooling follows all but the last
TAP_LAYERS = (1, 3, 7, 11, 15)

MIN_INPUT = 32


class ExportError(ValueError):
    pass


@dataclass
class ExportReport:
    source: str
    layers: list  # sixteen [out, in, kh, kw] entries
    blob_checksum: str
    dump_path: str

    def to_json(self):
        return json.dumps(self.__dict__, indent=2, sort_keys=True) + "\n"


def _conv_layers(model):
    """Conv weights and biases from model.features, validated in order."""
    import torch.nn as nn

    convs = [m for m in model.features if isinstance(m, nn.Conv2d)]
    for i, (o, c) in enumerate(VGG19_SHAPES):
        if i >= len(convs):
            raise ExportError(
                f"layer {i} missing: checkpoint has {len(convs)} conv "
                f"layers, expected 16")
        w = convs[i].weight
        if tuple(w.shape) != (o, c, 3, 3):
            raise ExportError(
                f"layer {i}: weight shape {tuple(w.shape)}, "
                f"expected {(o, c, 3, 3)}")
        b = convs[i].bias
        if b is None or tuple(b.shape) != (o,):
            got = None if b is None else tuple(b.shape)
            raise ExportError(
                f"layer {i}: bias shape {got}, expected {(o,)}")
    if len(convs) > 16:
        raise ExportError(
            f"checkpoint has {len(convs)} conv layers, expected 16")
    return [(c.weight.detach().numpy().astype(np.float32, copy=False),
             c.bias.detach().numpy().astype(np.float32, copy=False))
            for c in convs]


def _load_layers(checkpoint_ref):
    import torch
    from torchvision.models import vgg19

    if hasattr(checkpoint_ref, "features"):  # a ready-made module
        return _conv_layers(checkpoint_ref), "in-memory model"
    ref = str(checkpoint_ref)
    if ref == "pretrained":
        try:
            from torchvision.models import VGG19_Weights
            model = vgg19(weights=VGG19_Weights.IMAGENET1K_V1)
            return _conv_layers(model), "torchvision vgg19 IMAGENET1K_V1"
        except ExportError:
            raise
        except Exception as e:  # download blocked or cache missing
            torch.manual_seed(0)
            model = vgg19(weights=None)
            return _conv_layers(model), (
                f"random init seed 0 (pretrained weights unavailable: "
                f"{type(e).__name__})")
    if ref.startswith("random:"):
        torch.manual_seed(int(ref.split(":", 1)[1]))
        model = vgg19(weights=None)
        return _conv_layers(model), f"random init seed {ref.split(':', 1)[1]}"
    state = torch.load(ref, map_location="cpu", weights_only=True)
    model = vgg19(weights=None)
    model.load_state_dict(state)
    return _conv_layers(model), ref


def _load_test_image(path):
    img = Image.open(path).convert("L")
    arr = np.asarray(img, np.float32) / 255.0
    h, w = arr.shape
    if min(h, w) < MIN_INPUT or h % 16 or w % 16:
        raise ExportError(
            f"test image is {w}x{h}: the tap pipeline needs dims >= "
            f"{MIN_INPUT} and divisible by 16")
    return arr


def _compute_taps(layers, image):
    import torch
    import torch.nn.functional as F

    x = torch.from_numpy(image).reshape(1, 1, *image.shape).repeat(1, 3, 1, 1)
    mean = torch.tensor(blob.IMAGENET_MEAN).reshape(1, 3, 1, 1)
    std = torch.tensor(blob.IMAGENET_STD).reshape(1, 3, 1, 1)
    x = (x - mean) / std
    taps = []
    with torch.no_grad():
        for i, (w, b) in enumerate(layers):
            x = F.relu(F.conv2d(x, torch.from_numpy(w), torch.from_numpy(b),
                                padding=1))
            if i in TAP_LAYERS:
                taps.append(x.numpy())
                if i != TAP_LAYERS[-1]:
                    x = F.max_pool2d(x, 2)
    return taps


def _sibling(blob_path, ext):
    return os.path.splitext(str(blob_path))[0] + ext


def export(checkpoint_ref, out_blob_path, test_image_path,
           dump_path=None, report_path=None) -> ExportReport:
    """Write blob, feature dump and JSON report; return the report."""
    layers, source = _load_layers(checkpoint_ref)
    image = _load_test_image(test_image_path)
    checksum = blob.write_blob(layers, out_blob_path)
    dump_path = dump_path or _sibling(out_blob_path, ".vggd")
    blob.write_dump(_compute_taps(layers, image), dump_path)
    report = ExportReport(
        source=source,
        layers=[list(w.shape) for w, _ in layers],
        blob_checksum=f"{checksum:#018x}",
        dump_path=str(dump_path))
    report_path = report_path or _sibling(out_blob_path, ".report.json")
    with open(report_path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    return report
