"""Teacher and student fusion networks.

The student is two 3x3 convolutions (4 feature channels, then 1 output
channel): 113 trainable values, a 452-byte payload. The teacher is a
13-convolution dense-growth network ending in the same two tap shapes so
the distillation taps align semantically: a 4-channel penultimate feature
map and a 1-channel sigmoid output.

Both nets consume the channel concatenation [ir, vis] of two luminance
images and preserve spatial size via reflect padding.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import formats
from .autodiff import Tensor
from .ops import ShapeError

ARCH_STUDENT = 1
ARCH_TEACHER = 2
ARCH_ADAM = 3

_MAGIC = b"MMDR"
_VERSION = 1

LEAKY_SLOPE = 0.2


@dataclass
class NetTaps:
    """The two distillation tap points of either network."""
    feat: Tensor  # 4-channel penultimate features (T1 / S1)
    out: Tensor   # 1-channel sigmoid output (T2 / S2)


class _Conv:
    def __init__(self, out_ch, in_ch, kh, kw):
        self.w = Tensor(np.zeros((out_ch, in_ch, kh, kw), np.float32),
                        requires_grad=True)
        self.b = Tensor(np.zeros(out_ch, np.float32), requires_grad=True)

    @property
    def dims(self):
        return self.w.data.shape

    def __call__(self, x, pad="reflect"):
        return ad.conv2d(x, self.w, self.b, pad=pad)


def _check_pair(ir, vis):
    if ir.shape != vis.shape:
        raise ShapeError(f"ir/vis shape mismatch: {ir.shape} vs {vis.shape}")
    if ir.ndim == 2:
        ir = ir[None, None]
        vis = vis[None, None]
    if ir.ndim != 4 or ir.shape[1] != 1:
        raise ShapeError(f"expected single-channel images, got {ir.shape}")
    return ir, vis


class StudentNet:
    """SConv1 (4,2,3,3) + leaky_relu(0.2), SConv2 (1,4,3,3) + sigmoid."""

    arch_id = ARCH_STUDENT

    def __init__(self):
        self.conv1 = _Conv(4, 2, 3, 3)
        self.conv2 = _Conv(1, 4, 3, 3)
        assert count_params(self) == 113

    def layers(self):
        return [self.conv1, self.conv2]

    def forward(self, ir, vis):
        ir, vis = _check_pair(np.asarray(ir), np.asarray(vis))
        x = Tensor(np.concatenate([ir, vis], axis=1))
        feat = ad.leaky_relu(self.conv1(x), LEAKY_SLOPE)
        out = ad.sigmoid(self.conv2(feat))
        return NetTaps(feat=feat, out=out)


class TeacherNet:
    """13 convolutions: a 16-channel stem, five dense layers of growth 16,
    a 1x1 transition to 64 channels, four 64-channel refinement layers, a
    4-channel head and a 1-channel output layer."""

    arch_id = ARCH_TEACHER

    def __init__(self):
        self.stem = _Conv(16, 2, 3, 3)
        self.dense = [_Conv(16, 16 + 16 * k, 3, 3) for k in range(5)]
        self.transition = _Conv(64, 96, 1, 1)
        self.refine = [_Conv(64, 64, 3, 3) for _ in range(4)]
        self.head = _Conv(4, 64, 3, 3)
        self.out_layer = _Conv(1, 4, 3, 3)

    def layers(self):
        return ([self.stem] + self.dense + [self.transition]
                + self.refine + [self.head, self.out_layer])

    def forward(self, ir, vis):
        ir, vis = _check_pair(np.asarray(ir), np.asarray(vis))
        x = Tensor(np.concatenate([ir, vis], axis=1))
        feats = [ad.leaky_relu(self.stem(x), LEAKY_SLOPE)]
        for conv in self.dense:
            grown = ad.leaky_relu(conv(ad.concat_channels(feats)), LEAKY_SLOPE)
            feats.append(grown)
        y = ad.leaky_relu(self.transition(ad.concat_channels(feats), pad=None),
                          LEAKY_SLOPE)
        for conv in self.refine:
            y = ad.leaky_relu(conv(y), LEAKY_SLOPE)
        feat = ad.leaky_relu(self.head(y), LEAKY_SLOPE)
        out = ad.sigmoid(self.out_layer(feat))
        return NetTaps(feat=feat, out=out)


def params(net):
    out = []
    for layer in net.layers():
        out.extend([layer.w, layer.b])
    return out


def count_params(net):
    return sum(int(np.prod(l.w.data.shape)) + l.b.data.size
               for l in net.layers())


def count_macs(net, h, w):
    """Multiply-accumulate count for one forward pass at h x w resolution.

    Convolutions only; stride-1 same-size layout means every layer runs at
    full resolution.
    """
    per_pixel = sum(int(np.prod(l.w.data.shape)) for l in net.layers())
    return per_pixel * h * w


def init_params(net, seed):
    """Kaiming-uniform fan-in weights, zero biases. Deterministic in seed."""
    rng = np.random.Generator(np.random.PCG64(seed))
    for layer in net.layers():
        o, c, kh, kw = layer.w.data.shape
        bound = np.sqrt(6.0 / (c * kh * kw))
        layer.w.data[...] = rng.uniform(-bound, bound,
                                        size=(o, c, kh, kw)).astype(np.float32)
        layer.b.data[...] = 0.0
    return net


# ---------------------------------------------------------------------------
# weight container: magic "MMDR", version, arch-id, layer count, then per
# layer four u32 dims plus f32 weights and biases, FNV-1a checksum.

def save_weights(net, path=None):
    blob = _encode_records(net.arch_id,
                           [(l.dims, l.w.data, l.b.data) for l in net.layers()])
    if path is not None:
        with open(path, "wb") as f:
            f.write(blob)
    return blob


def _encode_records(arch_id, records):
    buf = bytearray()
    buf += _MAGIC
    buf += formats.pack_u32(_VERSION, arch_id, len(records))
    for dims, w, b in records:
        buf += formats.pack_u32(*dims)
        buf += formats.pack_f32_array(w)
        buf += formats.pack_f32_array(b)
    return formats.finalize(buf)


def _decode_records(blob, what):
    body = formats.split_checked(blob, what)
    r = formats.Reader(body, what)
    r.expect_magic(_MAGIC)
    version = r.u32()
    if version != _VERSION:
        raise formats.FormatError(f"{what}: unsupported version {version}")
    arch_id = r.u32()
    n = r.u32()
    records = []
    for _ in range(n):
        dims = (r.u32(), r.u32(), r.u32(), r.u32())
        o = dims[0]
        w = r.f32_array(int(np.prod(dims)), dims)
        b = r.f32_array(o)
        records.append((dims, w, b))
    r.done()
    return arch_id, records


def load_weights(source, expect_arch=None):
    """Load a net from a path or bytes. Rejects cross-architecture files."""
    blob = source
    if not isinstance(source, (bytes, bytearray)):
        with open(source, "rb") as f:
            blob = f.read()
    arch_id, records = _decode_records(blob, "weight file")
    if expect_arch is not None and arch_id != expect_arch:
        raise formats.FormatError(
            f"weight file: arch-id {arch_id} does not match expected {expect_arch}")
    net = {ARCH_STUDENT: StudentNet, ARCH_TEACHER: TeacherNet}.get(arch_id)
    if net is None:
        raise formats.FormatError(f"weight file: unknown arch-id {arch_id}")
    net = net()
    layers = net.layers()
    if len(records) != len(layers):
        raise formats.FormatError(
            f"weight file: {len(records)} layers, expected {len(layers)}")
    for layer, (dims, w, b) in zip(layers, records):
        if dims != layer.dims:
            raise formats.FormatError(
                f"weight file: layer dims {dims} do not match {layer.dims}")
        layer.w.data[...] = w
        layer.b.data[...] = b
    return net


def payload_bytes(net):
    """Serialized parameter payload size, excluding header and checksum."""
    return 4 * count_params(net)


def fuse_pair(net, ir, vis):
    """Inference-only fusion of one pair of (H,W) luminance images."""
    ir = np.asarray(ir, np.float32)
    vis = np.asarray(vis, np.float32)
    with ad.no_grad():
        taps = net.forward(ir[None, None], vis[None, None])
    return taps.out.data[0, 0]
