"""Adam optimization and the two-phase training schedule.

Phase one trains the teacher on the comprehensive loss plus refresh. Phase
two freezes the teacher and trains the student on distillation plus the
same objectives. Losses are computed per sample inside each batch and
averaged; the refresh store is consulted before and updated after each
sample's loss, so a step never references its own output as history.

Everything is deterministic in (config, seed): batch order, initialization
and the loss log reproduce byte for byte.
"""

import os
from dataclasses import dataclass, replace

import numpy as np

from . import data as datamod
from . import autodiff as ad
from . import losses as lossmod
from . import nets as netsmod
from . import refresh as refreshmod
from . import vgg as vggmod
from .losses import LossWeights, TEACHER_WEIGHTS, STUDENT_WEIGHTS
from .nets import NetTaps


class TrainAbort(RuntimeError):
    """Raised when a loss or gradient turns non-finite."""


@dataclass
class TrainConfig:
    phase: str                         # "teacher" or "student"
    out_dir: str
    epochs: int = 0                    # 0 -> phase default
    batch_size: int = 0                # 0 -> phase default
    lr: float = 1e-4
    weights: LossWeights | None = None
    seed: int = 0
    use_intensity: bool = True
    use_gradient: bool = True
    use_perception: bool = True
    use_refresh: bool = True
    use_distill: bool = True
    digestible: bool = True
    tap_cache: int = 64                # bounded source/best tap cache entries
    teacher_cache: int = 512           # bounded frozen-teacher tap cache

    def resolved(self):
        cfg = replace(self)
        if cfg.phase == "teacher":
            cfg.epochs = cfg.epochs or 8
            cfg.batch_size = cfg.batch_size or 36
            cfg.weights = cfg.weights or TEACHER_WEIGHTS
            if cfg.weights.theta != 0.0:
                raise ValueError("teacher phase requires theta = 0")
        elif cfg.phase == "student":
            cfg.epochs = cfg.epochs or 10
            cfg.batch_size = cfg.batch_size or 26
            cfg.weights = cfg.weights or STUDENT_WEIGHTS
        else:
            raise ValueError(f"unknown phase {cfg.phase!r}")
        return cfg


class Adam:
    """Standard bias-corrected Adam over a list of parameter Tensors."""

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.isfinite(g).all():
                raise TrainAbort("non-finite parameter gradient in adam step")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def save_adam(adam: Adam, path=None):
    """Optimizer state in the weight container, arch-id 3. The leading
    record carries the step counter; every following record packs one
    parameter's first moment in the weight slot and, by shaping the dims as
    (count,1,1,1), its second moment in the bias slot."""
    records = [((1, 1, 1, 1), np.array([float(adam.t)], np.float32),
                np.array([0.0], np.float32))]
    for m, v in zip(adam.m, adam.v):
        records.append(((m.size, 1, 1, 1), m.ravel(), v.ravel()))
    blob = netsmod._encode_records(netsmod.ARCH_ADAM, records)
    if path is not None:
        with open(path, "wb") as f:
            f.write(blob)
    return blob


def load_adam(source, params) -> Adam:
    blob = source
    if not isinstance(source, (bytes, bytearray)):
        with open(source, "rb") as f:
            blob = f.read()
    arch_id, records = netsmod._decode_records(blob, "adam state")
    if arch_id != netsmod.ARCH_ADAM:
        raise netsmod.formats.FormatError(
            f"adam state: arch-id {arch_id}, expected {netsmod.ARCH_ADAM}")
    if len(records) != len(params) + 1:
        raise netsmod.formats.FormatError(
            f"adam state: {len(records) - 1} parameter records for "
            f"{len(params)} parameters")
    adam = Adam(params)
    adam.t = int(records[0][1].ravel()[0])
    for (dims, m, v), p, slot_m, slot_v in zip(records[1:], params,
                                               adam.m, adam.v):
        if dims[0] != p.data.size:
            raise netsmod.formats.FormatError(
                f"adam state: moment size {dims[0]} != parameter size {p.data.size}")
        slot_m[...] = m.reshape(p.data.shape)
        slot_v[...] = v.reshape(p.data.shape)
    return adam


class _Cache:
    """Tiny bounded insertion-order cache (dicts iterate in that order)."""

    def __init__(self, cap):
        self.cap = cap
        self.d = {}

    def get(self, key, make):
        if key in self.d:
            return self.d[key]
        val = make()
        if self.cap > 0:
            if len(self.d) >= self.cap:
                self.d.pop(next(iter(self.d)))
            self.d[key] = val
        return val


def _epoch_seed(seed, epoch):
    return seed * 1_000_003 + epoch


_LOG_COLS = ("L_int", "L_grad", "L_percep", "L_distill", "L_refresh", "L_total")


def _fmt(x):
    return format(x, ".9g")


def _check_finite(value, name, ctx):
    if not np.isfinite(value):
        raise TrainAbort(f"non-finite {name} loss at {ctx}")
    return value


def _run_phase(cfg: TrainConfig, net, patches, vgg, teacher=None,
               start_epoch=1, adam=None, log_rows=None):
    n = len(patches)
    if n == 0:
        raise ValueError("empty patch set")
    os.makedirs(cfg.out_dir, exist_ok=True)
    adam = adam if adam is not None else Adam(netsmod.params(net))
    store = refreshmod.RefreshStore(
        os.path.join(cfg.out_dir, f"refresh_{cfg.phase}"))
    psi_img_cache = _Cache(cfg.tap_cache)   # sid -> max(ir, vis)
    psi_tap_cache = _Cache(cfg.tap_cache)   # sid -> max source taps
    best_tap_cache = _Cache(cfg.tap_cache)  # (sid, slot, score) -> taps
    teach_cache = _Cache(cfg.teacher_cache)  # sid -> frozen teacher taps
    w = cfg.weights
    need_taps = cfg.use_perception or cfg.use_refresh
    rows = [] if log_rows is None else log_rows

    for epoch in range(start_epoch, cfg.epochs + 1):
        for bi, idx in enumerate(
                datamod.batches(n, cfg.batch_size, _epoch_seed(cfg.seed, epoch)), 1):
            ir_b = patches.ir[idx][:, None]
            vis_b = patches.vis[idx][:, None]
            taps = net.forward(ir_b, vis_b)
            out_taps_b = vggmod.extract_taps(taps.out, vgg) if need_taps else None

            batch_total = None
            sums = dict.fromkeys(_LOG_COLS, 0.0)
            for k, sid in enumerate(int(s) for s in idx):
                ctx = f"epoch {epoch} batch {bi} sample {sid}"
                ir_i = ir_b[k:k + 1]
                vis_i = vis_b[k:k + 1]
                o_i = taps.out[k:k + 1]
                o_taps_i = ([t[k:k + 1] for t in out_taps_b]
                            if out_taps_b is not None else None)

                psi_taps = (psi_tap_cache.get(
                    sid, lambda: lossmod.max_tap_constants(ir_i, vis_i, vgg))
                    if cfg.use_perception else None)
                comp_t, comp_vals = lossmod.comprehensive_loss(
                    o_i, ir_i, vis_i, w, vgg, out_taps=o_taps_i,
                    psi_taps=psi_taps, use_intensity=cfg.use_intensity,
                    use_gradient=cfg.use_gradient,
                    use_perception=cfg.use_perception)
                sums["L_int"] += _check_finite(comp_vals["intensity"], "intensity", ctx)
                sums["L_grad"] += _check_finite(comp_vals["gradient"], "gradient", ctx)
                sums["L_percep"] += _check_finite(comp_vals["perception"], "perception", ctx)

                dist_t = None
                if cfg.phase == "student" and cfg.use_distill and w.theta != 0.0:
                    t_taps = teach_cache.get(sid, lambda: _frozen_taps(
                        teacher, ir_i, vis_i))
                    dist_t = lossmod.distill_loss(
                        t_taps, NetTaps(feat=taps.feat[k:k + 1], out=o_i),
                        digestible=cfg.digestible)
                    sums["L_distill"] += _check_finite(dist_t.item(), "distillation", ctx)

                ref_t = None
                if cfg.use_refresh:
                    o_det = taps.out.data[k, 0]
                    ev = refreshmod.evaluate(sid, o_det, ir_i[0, 0], vis_i[0, 0], store)
                    bs_taps = bg_taps = None
                    if ev.gap_s > 0.0:
                        bs_taps = best_tap_cache.get(
                            (sid, "s", ev.record.s_bs),
                            lambda: vggmod.extract_taps_data(
                                ev.record.o_bs[None, None], vgg))
                    if ev.gap_g > 0.0:
                        bg_taps = best_tap_cache.get(
                            (sid, "g", ev.record.g_bg),
                            lambda: vggmod.extract_taps_data(
                                ev.record.o_bg[None, None], vgg))
                    ref_t = refreshmod.refresh_loss(
                        ev, o_i, o_taps_i, bs_taps=bs_taps, bg_taps=bg_taps)
                    sums["L_refresh"] += _check_finite(ref_t.item(), "refresh", ctx)
                    refreshmod.update(sid, o_det, ev.s_cur, ev.g_cur, store)

                total_i = lossmod.total_loss(dist_t, comp_t, ref_t, w)
                sums["L_total"] += _check_finite(total_i.item(), "total", ctx)
                batch_total = total_i if batch_total is None else batch_total + total_i

            batch_loss = batch_total / float(len(idx))
            adam.zero_grad()
            batch_loss.backward()
            adam.step(cfg.lr)

            rows.append([epoch, bi] + [sums[c] / len(idx) for c in _LOG_COLS])
        _save_checkpoint(cfg, net, adam, epoch)
    return rows, adam


def _frozen_taps(teacher, ir_i, vis_i):
    with ad.no_grad():
        t = teacher.forward(ir_i, vis_i)
    return NetTaps(feat=t.feat.data, out=t.out.data)


def _checkpoint_prefix(cfg, epoch):
    return os.path.join(cfg.out_dir, f"{cfg.phase}_epoch_{epoch:03d}")


def _save_checkpoint(cfg, net, adam, epoch):
    prefix = _checkpoint_prefix(cfg, epoch)
    netsmod.save_weights(net, prefix + ".mmdr")
    save_adam(adam, prefix + ".adam")


def load_checkpoint(prefix, arch_id):
    net = netsmod.load_weights(prefix + ".mmdr", expect_arch=arch_id)
    adam = load_adam(prefix + ".adam", netsmod.params(net))
    return net, adam


def _write_log(cfg, rows):
    path = os.path.join(cfg.out_dir, f"{cfg.phase}_loss.csv")
    w = cfg.weights
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# phase={cfg.phase} gamma={_fmt(w.gamma)} delta={_fmt(w.delta)}"
                f" theta={_fmt(w.theta)} lambda={_fmt(w.lam)}"
                f" lr={_fmt(cfg.lr)} seed={cfg.seed}\n")
        f.write("epoch,batch," + ",".join(_LOG_COLS) + "\n")
        for row in rows:
            f.write(",".join([str(row[0]), str(row[1])]
                             + [_fmt(v) for v in row[2:]]) + "\n")
    return path


def train_teacher(cfg: TrainConfig, patches, vgg, resume_epoch=0):
    """Returns (teacher net, loss log path)."""
    cfg = replace(cfg, phase="teacher").resolved()
    if resume_epoch:
        net, adam = load_checkpoint(
            _checkpoint_prefix(cfg, resume_epoch), netsmod.ARCH_TEACHER)
    else:
        net = netsmod.init_params(netsmod.TeacherNet(), cfg.seed)
        adam = None
    rows, _ = _run_phase(cfg, net, patches, vgg,
                         start_epoch=resume_epoch + 1, adam=adam)
    log = _write_log(cfg, rows)
    netsmod.save_weights(net, os.path.join(cfg.out_dir, "teacher.mmdr"))
    return net, log


def train_student(cfg: TrainConfig, teacher, patches, vgg, resume_epoch=0):
    """Teacher stays frozen and bitwise unchanged. Returns (student, log)."""
    cfg = replace(cfg, phase="student").resolved()
    if resume_epoch:
        net, adam = load_checkpoint(
            _checkpoint_prefix(cfg, resume_epoch), netsmod.ARCH_STUDENT)
    else:
        net = netsmod.init_params(netsmod.StudentNet(), cfg.seed)
        adam = None
    rows, _ = _run_phase(cfg, net, patches, vgg, teacher=teacher,
                         start_epoch=resume_epoch + 1, adam=adam)
    log = _write_log(cfg, rows)
    netsmod.save_weights(net, os.path.join(cfg.out_dir, "student.mmdr"))
    return net, log
