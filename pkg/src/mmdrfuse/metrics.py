"""Fusion quality metrics: SSIM, GMSD, SD, SCD, VIF, Qabf, CC.

Each metric follows the defaults of its original reference implementation,
since the numbers are only comparable under those exact conventions:

- ssim: 11x11 Gaussian window (sigma 1.5), K1=0.01, K2=0.03, dynamic range
  1.0, valid-window filtering, no downsampling.
- gmsd: inputs rescaled to [0,255]; 2x2 mean prefilter with symmetric
  padding on the leading edge, stride-2 downsample, Prewitt/3 gradients
  with symmetric padding, c=170, score is the population std of the map.
- vif: pixel-domain multiscale variant, 4 scales, Gaussian windows of size
  17/9/5/3 (sigma N/5), noise variance 2, valid filtering; scales whose
  filtered support vanishes contribute nothing to either sum.
- qabf: Sobel strength/orientation transfer with the published sigmoid
  constants; inputs rescaled to [0,255] because the strength sigmoid is
  not scale-invariant.
- sd is a population std on the [0,255] scale; scd and cc are Pearson
  forms where a zero-variance argument makes that term 0.

ssim and gmsd here are the exact functions the refresh engine consumes
(one implementation, no drift). All math runs in float64.
"""

import csv
import io
import json

import numpy as np

try:
    import cv2
    cv2.setNumThreads(1)
except ImportError:  # pragma: no cover
    cv2 = None


def _as_gray64(x):
    x = np.asarray(x, np.float64)
    if x.ndim != 2:
        x = np.squeeze(x)
    if x.ndim != 2:
        raise ValueError(f"metric inputs must be single-channel, got {x.shape}")
    return x


def _correlate_valid(x, kernel):
    """2D cross-correlation, valid region only."""
    kh, kw = kernel.shape
    out = cv2.filter2D(x, -1, kernel, borderType=cv2.BORDER_REPLICATE)
    return out[kh // 2: x.shape[0] - (kh - 1 - kh // 2),
               kw // 2: x.shape[1] - (kw - 1 - kw // 2)]


def _correlate_same_symmetric(x, kernel):
    """Cross-correlation, same size, symmetric (edge-repeating) padding."""
    return cv2.filter2D(x, -1, kernel, borderType=cv2.BORDER_REFLECT)


def _correlate_same_zero(x, kernel):
    return cv2.filter2D(x, -1, kernel, borderType=cv2.BORDER_CONSTANT)


def _gaussian_window(n, sigma):
    half = (n - 1) / 2.0
    coords = np.arange(n, dtype=np.float64) - half
    g1 = np.exp(-(coords ** 2) / (2.0 * sigma * sigma))
    win = np.outer(g1, g1)
    return win / win.sum()


# ---------------------------------------------------------------------------
# SSIM

_SSIM_WIN = _gaussian_window(11, 1.5)
_SSIM_K1 = 0.01
_SSIM_K2 = 0.03
_SSIM_L = 1.0


def ssim(x, y):
    x = _as_gray64(x)
    y = _as_gray64(y)
    if x.shape != y.shape:
        raise ValueError(f"ssim shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < 11:
        raise ValueError(f"ssim needs dims >= 11, got {x.shape}")
    c1 = (_SSIM_K1 * _SSIM_L) ** 2
    c2 = (_SSIM_K2 * _SSIM_L) ** 2
    mu1 = _correlate_valid(x, _SSIM_WIN)
    mu2 = _correlate_valid(y, _SSIM_WIN)
    mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
    s1 = _correlate_valid(x * x, _SSIM_WIN) - mu1_sq
    s2 = _correlate_valid(y * y, _SSIM_WIN) - mu2_sq
    s12 = _correlate_valid(x * y, _SSIM_WIN) - mu12
    num = (2.0 * mu12 + c1) * (2.0 * s12 + c2)
    den = (mu1_sq + mu2_sq + c1) * (s1 + s2 + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# GMSD

_PREWITT_X = np.array([[1, 0, -1], [1, 0, -1], [1, 0, -1]], np.float64) / 3.0
_PREWITT_Y = _PREWITT_X.T.copy()
_GMSD_C = 170.0


def _gmsd_downsample(x):
    # 2x2 mean with one row/column of symmetric padding on top/left, then
    # keep every second pixel starting at 0 (matches a 'same' convolution
    # with an even kernel)
    xp = np.pad(x, ((1, 0), (1, 0)), mode="symmetric")
    avg = (xp[:-1, :-1] + xp[:-1, 1:] + xp[1:, :-1] + xp[1:, 1:]) / 4.0
    return avg[0::2, 0::2]


def gmsd(x, y):
    x = _as_gray64(x)
    y = _as_gray64(y)
    if x.shape != y.shape:
        raise ValueError(f"gmsd shape mismatch {x.shape} vs {y.shape}")
    if min(x.shape) < 4:
        raise ValueError(f"gmsd needs dims >= 4, got {x.shape}")
    x1 = _gmsd_downsample(x * 255.0)
    y1 = _gmsd_downsample(y * 255.0)
    # convolution with the Prewitt kernels == correlation with their flips
    gx1 = _correlate_same_symmetric(x1, _PREWITT_X[::-1, ::-1].copy())
    gy1 = _correlate_same_symmetric(x1, _PREWITT_Y[::-1, ::-1].copy())
    gx2 = _correlate_same_symmetric(y1, _PREWITT_X[::-1, ::-1].copy())
    gy2 = _correlate_same_symmetric(y1, _PREWITT_Y[::-1, ::-1].copy())
    m1 = np.sqrt(gx1 * gx1 + gy1 * gy1)
    m2 = np.sqrt(gx2 * gx2 + gy2 * gy2)
    qmap = (2.0 * m1 * m2 + _GMSD_C) / (m1 * m1 + m2 * m2 + _GMSD_C)
    return float(np.std(qmap))


# ---------------------------------------------------------------------------
# SD / correlation family

def sd(x):
    x = _as_gray64(x)
    return float(np.std(x * 255.0))


def _pearson(u, v):
    u = u.ravel()
    v = v.ravel()
    uc = u - u.mean()
    vc = v - v.mean()
    den = np.sqrt((uc * uc).sum() * (vc * vc).sum())
    if den == 0.0:
        return 0.0
    return float((uc * vc).sum() / den)


def scd(fused, a, b):
    """Sum of correlations of differences: r(F-B, A) + r(F-A, B)."""
    f = _as_gray64(fused)
    a = _as_gray64(a)
    b = _as_gray64(b)
    return _pearson(f - b, a) + _pearson(f - a, b)


def cc(fused, a, b):
    f = _as_gray64(fused)
    return (_pearson(f, _as_gray64(a)) + _pearson(f, _as_gray64(b))) / 2.0


# ---------------------------------------------------------------------------
# VIF (pixel domain, multiscale)

_VIF_SIGMA_NSQ = 2.0


def vif(fused, src):
    """Visual information fidelity of `fused` against the reference `src`."""
    dist = _as_gray64(fused)
    ref = _as_gray64(src)
    if ref.shape != dist.shape:
        raise ValueError(f"vif shape mismatch {ref.shape} vs {dist.shape}")
    if min(ref.shape) < 32:
        raise ValueError(f"vif needs dims >= 32, got {ref.shape}")
    ref = ref * 255.0
    dist = dist * 255.0
    num = den = 0.0
    for scale in range(1, 5):
        n = 2 ** (4 - scale + 1) + 1
        win = _gaussian_window(n, n / 5.0)
        if scale > 1:
            if min(ref.shape) < n:
                continue
            ref = _correlate_valid(ref, win)[0::2, 0::2]
            dist = _correlate_valid(dist, win)[0::2, 0::2]
        if min(ref.shape) < n:
            continue
        mu1 = _correlate_valid(ref, win)
        mu2 = _correlate_valid(dist, win)
        mu1_sq, mu2_sq, mu12 = mu1 * mu1, mu2 * mu2, mu1 * mu2
        s1 = _correlate_valid(ref * ref, win) - mu1_sq
        s2 = _correlate_valid(dist * dist, win) - mu2_sq
        s12 = _correlate_valid(ref * dist, win) - mu12
        s1 = np.maximum(s1, 0.0)
        s2 = np.maximum(s2, 0.0)
        g = s12 / (s1 + 1e-10)
        sv = s2 - g * s12
        g = np.where(s1 < 1e-10, 0.0, g)
        sv = np.where(s1 < 1e-10, s2, sv)
        s1 = np.where(s1 < 1e-10, 0.0, s1)
        g = np.where(s2 < 1e-10, 0.0, g)
        sv = np.where(s2 < 1e-10, 0.0, sv)
        sv = np.where(g < 0.0, s2, sv)
        g = np.maximum(g, 0.0)
        sv = np.maximum(sv, 1e-10)
        num += np.sum(np.log10(1.0 + g * g * s1 / (sv + _VIF_SIGMA_NSQ)))
        den += np.sum(np.log10(1.0 + s1 / _VIF_SIGMA_NSQ))
    if den == 0.0:
        return 0.0
    return float(num / den)


# ---------------------------------------------------------------------------
# Qabf (edge preservation)

_Q_SOBEL_X = np.array([[1, 0, -1], [2, 0, -2], [1, 0, -1]], np.float64)
_Q_SOBEL_Y = np.array([[1, 2, 1], [0, 0, 0], [-1, -2, -1]], np.float64)
_Q_TG, _Q_KG, _Q_DG = 0.9994, -15.0, 0.5
_Q_TA, _Q_KA, _Q_DA = 0.9879, -22.0, 0.8


def _edge_strength_angle(img):
    sx = _correlate_same_zero(img, _Q_SOBEL_X)
    sy = _correlate_same_zero(img, _Q_SOBEL_Y)
    g = np.sqrt(sx * sx + sy * sy)
    with np.errstate(divide="ignore", invalid="ignore"):
        a = np.arctan(sy / sx)
    a = np.where(sx == 0.0, np.pi / 2.0, a)
    return g, a


def _edge_preservation(g_s, a_s, g_f, a_f):
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(g_s > g_f, g_f / g_s, g_s / g_f)
    # the published code keeps the raw fused strength when both are equal,
    # which is what saturates the sigmoid on identical inputs
    gq = np.where(g_s == g_f, g_f, ratio)
    gq = np.where(np.isnan(gq), 0.0, gq)
    aq = np.abs(np.abs(a_s - a_f) - np.pi / 2.0) * 2.0 / np.pi
    qg = _Q_TG / (1.0 + np.exp(_Q_KG * (gq - _Q_DG)))
    qa = _Q_TA / (1.0 + np.exp(_Q_KA * (aq - _Q_DA)))
    return qg * qa


def qabf(fused, a, b):
    f = _as_gray64(fused) * 255.0
    a = _as_gray64(a) * 255.0
    b = _as_gray64(b) * 255.0
    g_f, a_f = _edge_strength_angle(f)
    g_a, a_a = _edge_strength_angle(a)
    g_b, a_b = _edge_strength_angle(b)
    q_af = _edge_preservation(g_a, a_a, g_f, a_f)
    q_bf = _edge_preservation(g_b, a_b, g_f, a_f)
    den = float((g_a + g_b).sum())
    if den == 0.0:
        return 0.0
    return float((q_af * g_a + q_bf * g_b).sum() / den)


# ---------------------------------------------------------------------------
# dataset evaluation

METRIC_COLUMNS = ("SD", "SCD", "VIF", "Qabf", "SSIM", "CC", "GMSD")


def evaluate_pair(fused, ir, vis):
    """All metrics for one image triple; two-source metrics are averaged."""
    return {
        "SD": sd(fused),
        "SCD": scd(fused, ir, vis),
        "VIF": (vif(fused, ir) + vif(fused, vis)) / 2.0,
        "Qabf": qabf(fused, ir, vis),
        "SSIM": (ssim(fused, ir) + ssim(fused, vis)) / 2.0,
        "CC": cc(fused, ir, vis),
        "GMSD": (gmsd(fused, ir) + gmsd(fused, vis)) / 2.0,
    }


class MetricReport:
    def __init__(self, rows):
        if not rows:
            raise ValueError("empty dataset: nothing to evaluate")
        self.rows = rows  # list of (id, {metric: value})
        self.means = {
            m: float(np.mean([vals[m] for _, vals in rows]))
            for m in METRIC_COLUMNS
        }
        self.count = len(rows)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(("id",) + METRIC_COLUMNS)
        for pid, vals in self.rows:
            writer.writerow([pid] + [format(vals[m], ".6f") for m in METRIC_COLUMNS])
        writer.writerow(["MEAN"] + [format(self.means[m], ".6f") for m in METRIC_COLUMNS])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({
            "count": self.count,
            "images": [{"id": pid, **{m: vals[m] for m in METRIC_COLUMNS}}
                       for pid, vals in self.rows],
            "means": self.means,
        }, indent=2, sort_keys=True) + "\n"


def evaluate_dataset(pairs, fused_images):
    """pairs: iterable of (id, ir, vis); fused_images: id -> fused array.

    Missing fused entries raise with the full list of absentees. Rows are
    ordered by id.
    """
    pairs = sorted(pairs, key=lambda p: str(p[0]))
    missing = [str(pid) for pid, _, _ in pairs if pid not in fused_images]
    if missing:
        raise FileNotFoundError(
            "missing fused outputs for: " + ", ".join(missing))
    rows = [(str(pid), evaluate_pair(fused_images[pid], ir, vis))
            for pid, ir, vis in pairs]
    return MetricReport(rows)
