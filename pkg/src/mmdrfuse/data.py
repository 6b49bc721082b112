"""Image I/O, BT.601 color handling, manifests, patch extraction, batching.

Fusion runs on luminance. A color visible image is split into Y plus CbCr;
the fused Y is recombined with the stored chroma for display output. All
pixel values are float32 in [0,1]; PNG output rounds half away from zero.
"""

import os
import zlib
from dataclasses import dataclass

import numpy as np
from PIL import Image

from . import formats

PATCH = 128
DEFAULT_CROPS = 80

# BT.601 luma coefficients
_KR, _KG, _KB = 0.299, 0.587, 0.114


def rgb_to_ycbcr(rgb):
    """(H,W,3) floats in [0,1] -> (y, cb, cr), chroma offset 0.5."""
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    y = _KR * r + _KG * g + _KB * b
    cb = (b - y) / (2.0 * (1.0 - _KB)) + 0.5
    cr = (r - y) / (2.0 * (1.0 - _KR)) + 0.5
    return y, cb, cr


def ycbcr_to_rgb(y, cb, cr):
    r = y + 2.0 * (1.0 - _KR) * (cr - 0.5)
    b = y + 2.0 * (1.0 - _KB) * (cb - 0.5)
    g = (y - _KR * r - _KB * b) / _KG
    return np.clip(np.stack([r, g, b], axis=-1), 0.0, 1.0)


def load_image(path):
    """8-bit PNG/JPEG as float32 in [0,1]: (H,W) gray or (H,W,3) RGB."""
    try:
        with Image.open(path) as im:
            if im.mode in ("L", "I;16"):
                im = im.convert("L")
                return np.asarray(im, np.float32) / 255.0
            im = im.convert("RGB")
            return np.asarray(im, np.float32) / 255.0
    except FileNotFoundError:
        raise
    except OSError as e:
        raise OSError(f"cannot read image {path}: {e}") from e


def save_png(path, img):
    """img in [0,1], (H,W) or (H,W,3). Round half away from zero."""
    arr = np.clip(np.asarray(img, np.float64), 0.0, 1.0)
    data = np.floor(arr * 255.0 + 0.5).astype(np.uint8)
    Image.fromarray(data).save(path)


@dataclass
class ImagePair:
    pair_id: str
    ir: np.ndarray                    # (H,W) luminance
    vis: np.ndarray                   # (H,W) luminance
    vis_cbcr: np.ndarray | None = None  # (H,W,2) chroma of a color visible


def load_pair(ir_path, vis_path, pair_id=None):
    ir = load_image(ir_path)
    if ir.ndim == 3:
        ir, _, _ = rgb_to_ycbcr(ir)
    vis = load_image(vis_path)
    cbcr = None
    if vis.ndim == 3:
        vis, cb, cr = rgb_to_ycbcr(vis)
        cbcr = np.stack([cb, cr], axis=-1)
    if ir.shape != vis.shape:
        raise ValueError(
            f"pair dimension mismatch: {ir_path} is {ir.shape}, "
            f"{vis_path} is {vis.shape}")
    if pair_id is None:
        pair_id = os.path.splitext(os.path.basename(ir_path))[0]
    return ImagePair(pair_id, np.ascontiguousarray(ir, np.float32),
                     np.ascontiguousarray(vis, np.float32), cbcr)


# ---------------------------------------------------------------------------
# manifests

@dataclass
class ManifestEntry:
    pair_id: str
    ir_path: str
    vis_path: str


def scan_pairs(root):
    """Match identical filenames under <root>/ir and <root>/vis."""
    ir_dir = os.path.join(root, "ir")
    vis_dir = os.path.join(root, "vis")
    if not os.path.isdir(ir_dir) or not os.path.isdir(vis_dir):
        raise FileNotFoundError(f"{root} must contain ir/ and vis/ directories")
    names = sorted(n for n in os.listdir(ir_dir)
                   if os.path.isfile(os.path.join(vis_dir, n)))
    if not names:
        raise FileNotFoundError(f"no filename-matched pairs under {root}")
    return [ManifestEntry(os.path.splitext(n)[0],
                          os.path.join(ir_dir, n), os.path.join(vis_dir, n))
            for n in names]


def read_manifest(path):
    """One `id<TAB>ir_path<TAB>vis_path` per line, relative to its dir."""
    base = os.path.dirname(os.path.abspath(path))
    entries = []
    seen = set()
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            pid, ir_p, vis_p = parts
            if pid in seen:
                raise ValueError(f"{path}:{lineno}: duplicate id {pid!r}")
            seen.add(pid)
            entries.append(ManifestEntry(
                pid,
                ir_p if os.path.isabs(ir_p) else os.path.join(base, ir_p),
                vis_p if os.path.isabs(vis_p) else os.path.join(base, vis_p)))
    if not entries:
        raise ValueError(f"{path}: empty manifest")
    return entries


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as f:
        for e in entries:
            f.write(f"{e.pair_id}\t{e.ir_path}\t{e.vis_path}\n")


# ---------------------------------------------------------------------------
# patches

@dataclass
class PatchSet:
    ir: np.ndarray        # (N, PATCH, PATCH) float32
    vis: np.ndarray       # (N, PATCH, PATCH) float32
    source_ids: list      # per-patch source pair id
    origins: np.ndarray   # (N, 2) uint32 crop origins (y, x)
    seed: int
    crops_per_pair: int

    def __len__(self):
        return self.ir.shape[0]


def make_patches(entries, crops_per_pair=DEFAULT_CROPS, seed=0):
    """crops_per_pair random origins per pair, the same origin applied to
    both modalities. Deterministic in (entries order, seed). Entries may be
    manifest rows (loaded from disk) or in-memory ImagePair objects."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(entries) * crops_per_pair
    ir = np.empty((n, PATCH, PATCH), np.float32)
    vis = np.empty((n, PATCH, PATCH), np.float32)
    origins = np.empty((n, 2), np.uint32)
    source_ids = []
    k = 0
    for e in entries:
        pair = e if isinstance(e, ImagePair) else load_pair(
            e.ir_path, e.vis_path, e.pair_id)
        h, w = pair.ir.shape
        if h < PATCH or w < PATCH:
            raise ValueError(
                f"pair {e.pair_id}: {h}x{w} is smaller than the {PATCH} patch")
        ys = rng.integers(0, h - PATCH + 1, size=crops_per_pair)
        xs = rng.integers(0, w - PATCH + 1, size=crops_per_pair)
        for y, x in zip(ys, xs):
            ir[k] = pair.ir[y:y + PATCH, x:x + PATCH]
            vis[k] = pair.vis[y:y + PATCH, x:x + PATCH]
            origins[k] = (y, x)
            source_ids.append(e.pair_id)
            k += 1
    return PatchSet(ir, vis, source_ids, origins, seed, crops_per_pair)


# patch archive: "MMPS" header, id table, then the two contiguous f32 patch
# blocks and a crc32. The blocks are contiguous so loads can memory-map.
_PS_MAGIC = b"MMPS"
_PS_VERSION = 1


def save_patchset(ps: PatchSet, path):
    names = sorted(set(ps.source_ids))
    index = {n: i for i, n in enumerate(names)}
    head = bytearray()
    head += _PS_MAGIC
    head += formats.pack_u32(_PS_VERSION, len(ps), PATCH, PATCH,
                             ps.crops_per_pair)
    head += formats.pack_u64(ps.seed)
    head += formats.pack_u32(len(names))
    for n in names:
        b = n.encode("utf-8")
        head += formats.pack_u32(len(b)) + b
    for i in range(len(ps)):
        head += formats.pack_u32(index[ps.source_ids[i]],
                                 int(ps.origins[i, 0]), int(ps.origins[i, 1]))
    crc = zlib.crc32(head)
    with open(path, "wb") as f:
        f.write(head)
        ir_bytes = formats.pack_f32_array(ps.ir)
        vis_bytes = formats.pack_f32_array(ps.vis)
        crc = zlib.crc32(ir_bytes, crc)
        crc = zlib.crc32(vis_bytes, crc)
        f.write(ir_bytes)
        f.write(vis_bytes)
        f.write(formats.pack_u32(crc))


def load_patchset(path, verify=True):
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 4 or blob[:4] != _PS_MAGIC:
        raise formats.FormatError(f"{path}: not a patch archive")
    if verify:
        crc = zlib.crc32(blob[:-4])
        stored = int.from_bytes(blob[-4:], "little")
        if crc != stored:
            raise formats.FormatError(f"{path}: crc mismatch")
    r = formats.Reader(blob[4:-4], str(path))
    version, count, ph, pw, crops = (r.u32() for _ in range(5))
    if version != _PS_VERSION:
        raise formats.FormatError(f"{path}: unsupported version {version}")
    seed = r.u64()
    n_names = r.u32()
    names = []
    for _ in range(n_names):
        ln = r.u32()
        names.append(r.take(ln).decode("utf-8"))
    origins = np.empty((count, 2), np.uint32)
    source_ids = []
    for i in range(count):
        idx = r.u32()
        origins[i] = (r.u32(), r.u32())
        source_ids.append(names[idx])
    ir = r.f32_array(count * ph * pw, (count, ph, pw))
    vis = r.f32_array(count * ph * pw, (count, ph, pw))
    r.done()
    return PatchSet(ir, vis, source_ids, origins, seed, crops)


def batches(count, batch_size, epoch_seed):
    """Deterministic epoch shuffle chopped into batches; the final partial
    batch is kept. Returns a list of index arrays."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = np.random.Generator(np.random.PCG64(epoch_seed)).permutation(count)
    return [order[i:i + batch_size] for i in range(0, count, batch_size)]
