"""Training losses.

Distillation compares channel-summed, L2-normalized tap attention between
teacher and student. The comprehensive loss mixes an intensity L1 toward
the elementwise source maximum, a Sobel gradient L2 toward the gradient of
that maximum image, and a five-tap perceptual distance. The refresh losses
pull the current output toward the stored best-SSIM / best-gradient
historical outputs on disjoint tap subsets.

All functions accept autodiff Tensors for the differentiable argument and
plain arrays for constants; each returns a scalar Tensor. Per-sample values
are averaged over the batch dimension inside each loss.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import ops
from . import vgg as vggmod
from .autodiff import Tensor, astensor

NORM_EPS = 1e-12   # floor added to L2 norms before division
_SQ_EPS = 1e-24    # under the sqrt of a plain L2 distance, keeps d|x| finite at 0


@dataclass
class LossWeights:
    gamma: float   # intensity weight
    delta: float   # gradient weight
    theta: float   # distillation weight
    lam: float     # comprehensive weight

    def __post_init__(self):
        if min(self.gamma, self.delta, self.theta, self.lam) < 0:
            raise ValueError("loss weights must be non-negative")


TEACHER_WEIGHTS = LossWeights(gamma=2.0, delta=0.1, theta=0.0, lam=1.0)
STUDENT_WEIGHTS = LossWeights(gamma=0.5, delta=0.05, theta=5.0, lam=1.0)


def spatial_attention(x):
    """F(X) = sum over channels, one map per sample."""
    return ad.channel_sum(astensor(x))


def _unit_attention(tap, raw=False):
    t = astensor(tap)
    v = ad.reshape(t if raw else spatial_attention(t), (-1,))
    return v / (ad.l2_norm(v) + NORM_EPS)


def _l2_distance(a, b):
    return ad.tsqrt(ad.tsum(ad.square(a - b)) + _SQ_EPS)


def distill_loss(teacher_taps, student_taps, digestible=True):
    """Average over the two tap points of the unit-attention L2 distance.

    teacher_taps: NetTaps of constants (no gradient flows to the teacher).
    digestible=False drops the attention mapping and the normalization and
    compares raw vectorized taps instead (ablation switch).
    """
    pairs = ((teacher_taps.feat, student_taps.feat),
             (teacher_taps.out, student_taps.out))
    total = None
    for t_tap, s_tap in pairs:
        t = Tensor(np.asarray(t_tap.data if isinstance(t_tap, Tensor) else t_tap))
        s = astensor(s_tap)
        if digestible:
            term = _l2_distance(_unit_attention(t), _unit_attention(s))
        else:
            term = _l2_distance(ad.reshape(t, (-1,)), ad.reshape(s, (-1,)))
        total = term if total is None else total + term
    return total / float(len(pairs))


def intensity_loss(out, ir, vis):
    """(1/HW) L1 distance between the output and max(ir, vis)."""
    psi = ops.elementwise_max(np.asarray(ir), np.asarray(vis))
    return ad.mean_abs(astensor(out) - Tensor(psi.astype(np.result_type(psi, np.float32))))


_sobel_cache = {}


def _sobel_w(dtype):
    key = np.dtype(dtype).name
    if key not in _sobel_cache:
        _sobel_cache[key] = Tensor(ops.sobel_kernel_stack(dtype))
    return _sobel_cache[key]


def _sobel(x):
    t = astensor(x)
    return ad.conv2d(t, _sobel_w(t.data.dtype), pad="reflect")


def gradient_loss(out, ir, vis):
    """Per-axis squared Frobenius distance of Sobel responses, scaled 1/HW.

    The source term is the gradient of the max image (max taken before
    differentiation), and it carries no gradient.
    """
    o = astensor(out)
    psi = ops.elementwise_max(np.asarray(ir), np.asarray(vis))
    with ad.no_grad():
        gpsi = _sobel(psi.astype(o.data.dtype)).data
    d = _sobel(o) - Tensor(gpsi)
    # d holds both axis responses as channels; summing squares over both and
    # dividing by N*H*W equals the per-axis Frobenius sum over HW, batch-meaned
    n, _, h, w = d.data.shape
    return ad.tsum(ad.square(d)) / float(n * h * w)


def max_tap_constants(ir, vis, vgg):
    """Elementwise per-tap maximum of the two source tap sets, as arrays."""
    t_ir = vggmod.extract_taps_data(ir, vgg)
    t_vis = vggmod.extract_taps_data(vis, vgg)
    return [np.maximum(a, b) for a, b in zip(t_ir, t_vis)]


def perception_tap_loss(out_taps, target_taps, indices, divisor_taps):
    """Sum over the chosen taps of sum-squared tap distance, each divided by
    divisor_taps * H_i * W_i * D_i and batch-averaged."""
    total = None
    for i in indices:
        t = out_taps[i]
        n, d_i, h_i, w_i = t.data.shape
        term = ad.tsum(ad.square(t - Tensor(np.asarray(target_taps[i])))) \
            / float(divisor_taps * h_i * w_i * d_i * n)
        total = term if total is None else total + term
    return total


def perception_loss(out, ir, vis, vgg, out_taps=None, psi_taps=None):
    """Five-tap perceptual distance toward max(phi(ir), phi(vis))."""
    if psi_taps is None:
        psi_taps = max_tap_constants(ir, vis, vgg)
    if out_taps is None:
        out_taps = vggmod.extract_taps(astensor(out), vgg)
    return perception_tap_loss(out_taps, psi_taps, range(5), 5)


@dataclass
class LossBreakdown:
    intensity: float = 0.0
    gradient: float = 0.0
    perception: float = 0.0
    distill: float = 0.0
    refresh: float = 0.0
    total: float = 0.0


def comprehensive_loss(out, ir, vis, w: LossWeights, vgg, out_taps=None,
                       psi_taps=None, use_intensity=True, use_gradient=True,
                       use_perception=True):
    """gamma * L_int + delta * L_grad + L_percep.

    Returns (scalar Tensor, dict of component floats). Ablation switches
    remove a component entirely rather than zero-weighting it.
    """
    comp = {"intensity": 0.0, "gradient": 0.0, "perception": 0.0}
    total = None

    def add(term, weight):
        nonlocal total
        weighted = term * weight if weight != 1.0 else term
        total = weighted if total is None else total + weighted

    if use_intensity:
        term = intensity_loss(out, ir, vis)
        comp["intensity"] = term.item()
        add(term, w.gamma)
    if use_gradient:
        term = gradient_loss(out, ir, vis)
        comp["gradient"] = term.item()
        add(term, w.delta)
    if use_perception:
        term = perception_loss(out, ir, vis, vgg, out_taps=out_taps,
                               psi_taps=psi_taps)
        comp["perception"] = term.item()
        add(term, 1.0)
    if total is None:
        total = Tensor(np.zeros((), np.asarray(astensor(out).data).dtype))
    return total, comp


# ---------------------------------------------------------------------------
# refresh loss components (the per-branch distances; the engine weights them)

S_TAPS = (3, 4)     # deepest two taps, divisor 2 * Hi * Wi * Di
G_TAPS = (0, 1, 2)  # shallow three taps, divisor 3 * Hi * Wi * Di


def refresh_s_loss(o_cur, o_bs, out_taps, bs_taps):
    """Deep-tap distance to the best-SSIM historical output plus pixel L1."""
    tap_term = perception_tap_loss(out_taps, bs_taps, S_TAPS, 2)
    return tap_term + ad.mean_abs(astensor(o_cur) - Tensor(np.asarray(o_bs)))


def refresh_g_loss(o_cur, o_bg, out_taps, bg_taps):
    """Shallow-tap distance to the best-gradient historical output plus a
    Sobel-difference squared term."""
    tap_term = perception_tap_loss(out_taps, bg_taps, G_TAPS, 3)
    o = astensor(o_cur)
    with ad.no_grad():
        gref = _sobel(np.asarray(o_bg, o.data.dtype)).data
    d = _sobel(o) - Tensor(gref)
    n, _, h, w = d.data.shape
    return tap_term + ad.tsum(ad.square(d)) / float(n * h * w)


def total_loss(distill, comp, refresh, w: LossWeights):
    """theta * L_distill + lambda * L_comp + L_refresh."""
    total = comp * w.lam if w.lam != 1.0 else comp
    if distill is not None and w.theta != 0.0:
        total = total + distill * w.theta
    if refresh is not None:
        total = total + refresh
    return total
