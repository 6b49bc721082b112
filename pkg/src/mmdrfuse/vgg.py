"""Fixed-weight VGG-19 feature extractor.

Provides the five tap feature maps (the last activation before each pool:
relu1_2, relu2_2, relu3_4, relu4_4, relu5_4) for the perception and refresh
losses, with gradient flow back to the input image. Weights are immutable
after load; nothing here ever trains.

Single-channel inputs are duplicated to three channels and normalized with
the canonical pretrained-model constants before the conv stack.
"""

import numpy as np

from . import autodiff as ad
from . import formats
from .autodiff import Tensor

_MAGIC = b"VGGB"
_VERSION = 1

# (out, in) per conv layer, canonical VGG-19 order; all kernels 3x3
VGG_SHAPES = [
    (64, 3), (64, 64),
    (128, 64), (128, 128),
    (256, 128), (256, 256), (256, 256), (256, 256),
    (512, 256), (512, 512), (512, 512), (512, 512),
    (512, 512), (512, 512), (512, 512), (512, 512),
]
# 0-based indices of the conv layers whose post-relu activation is a tap
TAP_LAYERS = (1, 3, 7, 11, 15)
TAP_CHANNELS = (64, 128, 256, 512, 512)

IMAGENET_MEAN = np.array([0.485, 0.456, 0.406], np.float32)
IMAGENET_STD = np.array([0.229, 0.224, 0.225], np.float32)

MIN_INPUT = 32


class VggWeights:
    def __init__(self, layers, mean, std):
        if len(layers) != 16:
            raise formats.FormatError(
                f"backbone: {len(layers)} conv layers, expected 16")
        for i, ((w, b), (o, c)) in enumerate(zip(layers, VGG_SHAPES)):
            if w.shape != (o, c, 3, 3):
                raise formats.FormatError(
                    f"backbone: layer {i} shape {w.shape}, expected {(o, c, 3, 3)}")
            if b.shape != (o,):
                raise formats.FormatError(
                    f"backbone: layer {i} bias shape {b.shape}, expected ({o},)")
        # weight tensors never require grad: conv backward then skips the
        # (expensive, unused) weight-gradient GEMMs and only chains to input
        self.layers = [(Tensor(np.ascontiguousarray(w, np.float32)),
                        Tensor(np.ascontiguousarray(b, np.float32)))
                       for w, b in layers]
        self.mean = np.asarray(mean, np.float32)
        self.std = np.asarray(std, np.float32)


def save_vgg(vgg: VggWeights, path=None):
    buf = bytearray()
    buf += _MAGIC
    buf += formats.pack_u32(_VERSION, len(vgg.layers))
    for w, b in vgg.layers:
        o, c, kh, kw = w.data.shape
        buf += formats.pack_u32(o, c, kh, kw)
        buf += formats.pack_f32_array(w.data)
        buf += formats.pack_f32_array(b.data)
    for v in vgg.mean:
        buf += formats.pack_f32(float(v))
    for v in vgg.std:
        buf += formats.pack_f32(float(v))
    blob = formats.finalize(buf)
    if path is not None:
        with open(path, "wb") as f:
            f.write(blob)
    return blob


def load_vgg(source) -> VggWeights:
    blob = source
    if not isinstance(source, (bytes, bytearray)):
        with open(source, "rb") as f:
            blob = f.read()
    body = formats.split_checked(blob, "backbone blob")
    r = formats.Reader(body, "backbone blob")
    r.expect_magic(_MAGIC)
    version = r.u32()
    if version != _VERSION:
        raise formats.FormatError(f"backbone blob: unsupported version {version}")
    n = r.u32()
    layers = []
    for _ in range(n):
        o, c, kh, kw = r.u32(), r.u32(), r.u32(), r.u32()
        w = r.f32_array(o * c * kh * kw, (o, c, kh, kw))
        b = r.f32_array(o)
        layers.append((w, b))
    mean = np.array([r.f32() for _ in range(3)], np.float32)
    std = np.array([r.f32() for _ in range(3)], np.float32)
    r.done()
    return VggWeights(layers, mean, std)


def make_random_vgg(seed) -> VggWeights:
    """Synthetic backbone with He-scaled random weights.

    Every structural and gradient property of the real backbone holds (the
    acceptance suite runs on this); only absolute feature values differ from
    the pretrained network.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    layers = []
    for o, c in VGG_SHAPES:
        scale = np.sqrt(2.0 / (c * 9))
        w = rng.normal(0.0, scale, size=(o, c, 3, 3)).astype(np.float32)
        b = np.zeros(o, np.float32)
        layers.append((w, b))
    return VggWeights(layers, IMAGENET_MEAN, IMAGENET_STD)


def extract_taps(image, vgg: VggWeights):
    """Five tap tensors for a single-channel image in [0,1].

    image: Tensor or ndarray, (N,1,H,W) or (H,W); min(H,W) >= 32, and H, W
    must survive four halvings (divisible by 16) to reach the deepest tap.
    """
    x = image if isinstance(image, Tensor) else Tensor(np.asarray(image))
    if x.data.ndim == 2:
        x = ad.reshape(x, (1, 1) + x.data.shape)
    if x.data.ndim != 4 or x.data.shape[1] != 1:
        raise ValueError(f"extract_taps wants a single-channel image, got {x.shape}")
    h, w = x.data.shape[2:]
    if min(h, w) < MIN_INPUT:
        raise ValueError(
            f"extract_taps needs spatial dims >= {MIN_INPUT}, got ({h},{w})")
    x3 = ad.concat_channels([x, x, x])
    scale = (1.0 / vgg.std).reshape(1, 3, 1, 1)
    shift = (-vgg.mean / vgg.std).reshape(1, 3, 1, 1)
    y = ad.affine_channels(x3, scale, shift)
    taps = []
    for i, (w_t, b_t) in enumerate(vgg.layers):
        y = ad.relu(ad.conv2d(y, w_t, b_t, pad="zero"))
        if i in TAP_LAYERS:
            taps.append(y)
            if i != TAP_LAYERS[-1]:
                y = ad.maxpool2(y)
    return taps


def extract_taps_data(image, vgg: VggWeights):
    """Taps as plain float32 arrays, no graph. For constants and caches."""
    with ad.no_grad():
        return [t.data for t in extract_taps(np.asarray(image), vgg)]


def backward_to_input(image, vgg: VggWeights, cotangents):
    """Gradient of sum_i <cotangent_i, tap_i> w.r.t. the input image."""
    x = Tensor(np.asarray(image), requires_grad=True)
    taps = extract_taps(x, vgg)
    if len(cotangents) != len(taps):
        raise ValueError("need one cotangent per tap")
    total = None
    for t, ct in zip(taps, cotangents):
        term = ad.tsum(t * Tensor(np.asarray(ct, t.data.dtype)))
        total = term if total is None else total + term
    total.backward()
    return x.grad


# ---------------------------------------------------------------------------
# reference feature dump ("VGGD"): tap count, then per tap a rank-4 shape
# and the f32 payload. Used to cross-check against an external exporter.

_DUMP_MAGIC = b"VGGD"


def save_dump(taps, path=None):
    buf = bytearray()
    buf += _DUMP_MAGIC
    buf += formats.pack_u32(len(taps))
    for t in taps:
        arr = np.asarray(t, np.float32)
        buf += formats.pack_u32(*arr.shape)
        buf += formats.pack_f32_array(arr)
    blob = bytes(buf)
    if path is not None:
        with open(path, "wb") as f:
            f.write(blob)
    return blob


def load_dump(source):
    blob = source
    if not isinstance(source, (bytes, bytearray)):
        with open(source, "rb") as f:
            blob = f.read()
    r = formats.Reader(blob, "feature dump")
    r.expect_magic(_DUMP_MAGIC)
    n = r.u32()
    taps = []
    for _ in range(n):
        shape = (r.u32(), r.u32(), r.u32(), r.u32())
        taps.append(r.f32_array(int(np.prod(shape)), shape))
    r.done()
    return taps
