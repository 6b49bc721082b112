"""Dense NCHW tensor kernels.

Every differentiable operation comes as a forward function plus an explicit
backward (vector-Jacobian product). Kernels are dtype-generic so the same
code path can be checked in float64 against finite differences; production
tensors are float32.

Convolution dispatches between an im2col/BLAS path (wide layers) and a
cv2.filter2D path (narrow 3x3 layers on large images, where per-pixel BLAS
overhead would dominate). Both are plain cross-correlations; they agree to
float rounding and the test oracle is an independent direct-summation loop.
"""

import numpy as np

try:
    import cv2
    cv2.setNumThreads(1)
except ImportError:  # pragma: no cover
    cv2 = None

# Largest out*in channel product still routed to the per-channel cv2 path.
# Above this the single big GEMM wins; below it, on megapixel inputs, the
# im2col buffer traffic does not fit any cache and filter2D is ~6x faster.
_CV2_CHANNEL_BUDGET = 64


class ShapeError(ValueError):
    """Raised when operand shapes do not line up; names the offending dim."""


def _require(cond, msg):
    if not cond:
        raise ShapeError(msg)


# ---------------------------------------------------------------------------
# padding

def pad_spatial(x, width, mode):
    """Pad the last two axes by `width` pixels. mode: 'reflect' or 'zero'.

    Reflect mirrors without repeating the edge pixel, so backward must fold
    each pad pixel's cotangent onto the interior pixel it mirrored.
    """
    if width == 0:
        return x
    pad = [(0, 0)] * (x.ndim - 2) + [(width, width), (width, width)]
    if mode == "reflect":
        _require(x.shape[-1] > width and x.shape[-2] > width,
                 "reflect padding needs spatial dims > pad width")
        return np.pad(x, pad, mode="reflect")
    if mode == "zero":
        return np.pad(x, pad, mode="constant")
    raise ValueError(f"unknown padding mode {mode!r}")


def pad_spatial_backward(g, width, mode):
    """Backward of pad_spatial: cotangent w.r.t. the unpadded input."""
    if width == 0:
        return g
    if mode == "zero":
        return np.ascontiguousarray(g[..., width:-width, width:-width])
    if mode == "reflect":
        # the reflection map is a per-axis product, so fold rows then columns;
        # pad row i mirrored source row (width - i) at the top and source row
        # (H - 2 - t) for trailing pad row t at the bottom
        h = g.shape[-2] - 2 * width
        w = g.shape[-1] - 2 * width
        rows = g[..., width:width + h, :].copy()
        for t in range(width):
            rows[..., width - t, :] += g[..., t, :]
            rows[..., h - 2 - t, :] += g[..., width + h + t, :]
        out = rows[..., :, width:width + w].copy()
        for t in range(width):
            out[..., :, width - t] += rows[..., :, t]
            out[..., :, w - 2 - t] += rows[..., :, width + w + t]
        return out
    raise ValueError(f"unknown padding mode {mode!r}")


# ---------------------------------------------------------------------------
# convolution (stride 1, valid)

def _im2col(x, kh, kw):
    """(C,H,W) -> (C*kh*kw, Ho*Wo) window matrix, row-major window order."""
    c, h, w = x.shape
    ho, wo = h - kh + 1, w - kw + 1
    s0, s1, s2 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (c, kh, kw, ho, wo), (s0, s1, s2, s1, s2), writeable=False)
    return win.reshape(c * kh * kw, ho * wo)


def _conv_single_cv2(x, w, b):
    c, h, w_ = x.shape
    o, _, kh, kw = w.shape
    ho, wo = h - kh + 1, w_ - kw + 1
    out = np.empty((o, ho, wo), x.dtype)
    tmp = np.empty((h, w_), x.dtype)
    half = kh // 2
    sl = (slice(half, half + ho), slice(half, half + wo))
    for i in range(o):
        # filter2D pads internally; the interior crop equals the valid conv
        # regardless of the border mode chosen here.
        cv2.filter2D(x[0], -1, w[i, 0].astype(x.dtype, copy=False), dst=tmp,
                     borderType=cv2.BORDER_REPLICATE)
        out[i] = tmp[sl]
        for j in range(1, c):
            cv2.filter2D(x[j], -1, w[i, j].astype(x.dtype, copy=False),
                         dst=tmp, borderType=cv2.BORDER_REPLICATE)
            out[i] += tmp[sl]
        if b is not None:
            out[i] += b[i]
    return out


def _conv_single_im2col(x, w, b):
    o, c, kh, kw = w.shape
    ho, wo = x.shape[1] - kh + 1, x.shape[2] - kw + 1
    col = np.ascontiguousarray(_im2col(x, kh, kw))
    out = (w.reshape(o, c * kh * kw) @ col).reshape(o, ho, wo)
    if b is not None:
        out += b[:, None, None]
    return out


def conv2d_forward(x, w, b=None):
    """Valid cross-correlation, stride 1. x (N,C,H,W), w (O,C,kh,kw), b (O,).

    Samples are processed one at a time so output is invariant to batch
    packing (a batched GEMM could block differently and drift in the last
    ulp).
    """
    _require(x.ndim == 4, f"input must be rank 4, got rank {x.ndim}")
    _require(w.ndim == 4, f"weights must be rank 4, got rank {w.ndim}")
    n, c, h, ww = x.shape
    o, ci, kh, kw = w.shape
    _require(c == ci, f"input channels {c} != weight in-channels {ci}")
    _require(h >= kh and ww >= kw,
             f"spatial dims ({h},{ww}) smaller than kernel ({kh},{kw})")
    if b is not None:
        _require(b.shape == (o,), f"bias shape {b.shape} != ({o},)")
    use_cv2 = (cv2 is not None and kh == kw == 3 and o * c <= _CV2_CHANNEL_BUDGET
               and x.dtype in (np.float32, np.float64))
    single = _conv_single_cv2 if use_cv2 else _conv_single_im2col
    out = np.empty((n, o, h - kh + 1, ww - kw + 1), x.dtype)
    for i in range(n):
        out[i] = single(x[i], w, b)
    return out


def conv2d_backward(g, x, w, need_gx=True, need_gw=True):
    """Gradients of conv2d_forward. Returns (gx, gw, gb); skipped ones None.

    gb is always computed (cheap). gx is the full correlation of g with the
    spatially flipped, channel-transposed kernel; gw correlates input windows
    with the cotangent.
    """
    n = x.shape[0]
    o, c, kh, kw = w.shape
    _require(g.shape[:2] == (n, o), "cotangent batch/channel mismatch")
    gb = g.sum(axis=(0, 2, 3))
    gx = gw = None
    if need_gw:
        gw2 = np.zeros((o, c * kh * kw), g.dtype)
        p = g.shape[2] * g.shape[3]
        for i in range(n):
            col = np.ascontiguousarray(_im2col(x[i], kh, kw))
            gw2 += g[i].reshape(o, p) @ col.T
        gw = gw2.reshape(o, c, kh, kw)
    if need_gx:
        wt = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        gpad = g if kh == kw == 1 else np.pad(
            g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gx = conv2d_forward(gpad, wt)
    return gx, gw, gb


# ---------------------------------------------------------------------------
# activations

def leaky_relu_forward(x, slope=0.2):
    return np.where(x > 0, x, x * np.asarray(slope, x.dtype))


def leaky_relu_backward(g, x, slope=0.2):
    return np.where(x > 0, g, g * np.asarray(slope, g.dtype))


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(g, x):
    return np.where(x > 0, g, np.asarray(0, g.dtype))


def sigmoid_forward(x):
    # stable both tails: exp of a non-positive argument only
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(g, y):
    """y is the forward output, not the input."""
    return g * y * (1.0 - y)


# ---------------------------------------------------------------------------
# pooling

def maxpool2_forward(x):
    """2x2 window, stride 2, first-in-scan-order tie break.

    Returns (out, idx); idx stores the winning position (0..3, row major
    inside the window) for the backward scatter.
    """
    n, c, h, w = x.shape
    _require(h % 2 == 0 and w % 2 == 0,
             f"maxpool2 needs even spatial dims, got ({h},{w})")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def maxpool2_backward(g, idx, in_shape):
    n, c, h, w = in_shape
    scat = np.zeros((n, c, h // 2, w // 2, 4), g.dtype)
    np.put_along_axis(scat, idx[..., None], g[..., None], axis=-1)
    return scat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(
        0, 1, 2, 4, 3, 5).reshape(n, c, h, w)


# ---------------------------------------------------------------------------
# fixed stencils and simple pointwise ops

# cross-correlation kernels, x: left-to-right intensity increase -> positive
SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], np.float32)
SOBEL_Y = SOBEL_X.T.copy()


def sobel_kernel_stack(dtype=np.float32):
    """(2,1,3,3) weight tensor producing [gx, gy] channels via conv2d."""
    return np.stack([SOBEL_X, SOBEL_Y]).reshape(2, 1, 3, 3).astype(dtype)


def elementwise_max(a, b):
    _require(a.shape == b.shape,
             f"elementwise_max shape mismatch {a.shape} vs {b.shape}")
    return np.maximum(a, b)


def sobel_gradient(x):
    """Per-axis 3x3 Sobel responses of a (N,1,H,W) tensor, reflect padded.

    Returns (gx, gy). Linear, so callers that need gradients route through
    the autodiff conv with sobel_kernel_stack instead.
    """
    xp = pad_spatial(x, 1, "reflect")
    out = conv2d_forward(xp, sobel_kernel_stack(x.dtype))
    return out[:, 0:1], out[:, 1:2]
