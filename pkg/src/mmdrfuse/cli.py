"""Command-line entry point.

Commands: prepare-data, train-teacher, train-student, fuse, evaluate,
inspect-model. Exit codes: 0 success, 2 usage, 3 I/O or malformed file,
4 numeric failure. With --json, errors additionally emit a JSON object on
stderr. A config file of `key = value` lines supplies defaults; explicit
flags win. The MMDRFUSE_VGG environment variable supplies the default VGG
blob path.
"""

import argparse
import json
import os
import sys

from . import autodiff as ad
from . import data as datamod
from . import metrics as metricsmod
from . import nets as netsmod
from . import train as trainmod
from . import vgg as vggmod
from .formats import FormatError
from .losses import LossWeights, STUDENT_WEIGHTS, TEACHER_WEIGHTS
from .ops import ShapeError
from .train import TrainAbort, TrainConfig

VGG_ENV = "MMDRFUSE_VGG"


class UsageError(Exception):
    pass


def _read_config(path):
    cfg = {}
    with open(path, encoding="utf-8") as f:
        for ln, raw in enumerate(f, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{ln}: expected 'key = value'")
            key, val = line.split("=", 1)
            cfg[key.strip().replace("-", "_")] = val.strip()
    return cfg


_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _cast(key, raw, like):
    if isinstance(like, bool):
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise UsageError(f"config key {key}: not a boolean: {raw!r}")
    if isinstance(like, int):
        return int(raw)
    if isinstance(like, float):
        return float(raw)
    return raw


def _settle(args, defaults):
    """Layer explicit flags over config-file values over hard defaults."""
    explicit = vars(args)
    config = {}
    if explicit.get("config") is not None:
        config = _read_config(explicit["config"])
    out = {}
    for key, default in defaults.items():
        if key in explicit and explicit[key] is not None:
            out[key] = explicit[key]
        elif key in config:
            out[key] = _cast(key, config[key], default if default is not None
                             else "")
        else:
            out[key] = default
    unknown = set(config) - set(defaults) - {"config", "json"}
    if unknown:
        raise UsageError(f"config keys not understood: {sorted(unknown)}")
    return out


def _vgg_path(value):
    path = value or os.environ.get(VGG_ENV)
    if not path:
        raise UsageError(
            f"no VGG blob: pass --vgg or set {VGG_ENV}")
    return path


def _entries(data_path):
    """A pair directory (ir/ + vis/) or a manifest file."""
    if os.path.isdir(data_path):
        return datamod.scan_pairs(data_path)
    return datamod.read_manifest(data_path)


# ---------------------------------------------------------------------------
# commands

def _cmd_prepare_data(ns):
    opt = _settle(ns, {"data": None, "out": None, "crops": datamod.DEFAULT_CROPS,
                       "seed": 0})
    if not opt["data"] or not opt["out"]:
        raise UsageError("prepare-data needs --data and --out")
    entries = _entries(opt["data"])
    if not entries:
        raise FileNotFoundError(f"no image pairs under {opt['data']}")
    ps = datamod.make_patches(entries, crops_per_pair=opt["crops"],
                              seed=opt["seed"])
    os.makedirs(opt["out"], exist_ok=True)
    archive = os.path.join(opt["out"], "patches.mmps")
    datamod.save_patchset(ps, archive)
    manifest = os.path.join(opt["out"], "manifest.tsv")
    datamod.write_manifest(manifest, entries)
    print(f"pairs: {len(entries)}")
    print(f"patches: {len(ps)}")
    print(f"archive: {archive}")
    return 0


_ABLATIONS = ("no_intensity", "no_gradient", "no_perception", "no_refresh",
              "no_distill", "no_digestible")


def _train_defaults(phase):
    w = TEACHER_WEIGHTS if phase == "teacher" else STUDENT_WEIGHTS
    d = {"data": None, "vgg": None, "out": None, "epochs": 0, "batch_size": 0,
         "lr": 1e-4, "seed": 0, "resume": 0, "gamma": w.gamma, "delta": w.delta,
         "lam": w.lam}
    if phase == "student":
        d["teacher"] = None
        d["theta"] = w.theta
    d.update({k: False for k in _ABLATIONS})
    return d


def _train_config(opt, phase, out_dir):
    theta = opt.get("theta", 0.0)
    return TrainConfig(
        phase=phase, out_dir=out_dir, epochs=opt["epochs"],
        batch_size=opt["batch_size"], lr=opt["lr"], seed=opt["seed"],
        weights=LossWeights(gamma=opt["gamma"], delta=opt["delta"],
                            theta=theta, lam=opt["lam"]),
        use_intensity=not opt["no_intensity"],
        use_gradient=not opt["no_gradient"],
        use_perception=not opt["no_perception"],
        use_refresh=not opt["no_refresh"],
        use_distill=not opt["no_distill"],
        digestible=not opt["no_digestible"])


def _cmd_train(ns, phase):
    opt = _settle(ns, _train_defaults(phase))
    if not opt["data"] or not opt["out"]:
        raise UsageError(f"train-{phase} needs --data and --out")
    patches = datamod.load_patchset(opt["data"])
    vgg = vggmod.load_vgg(_vgg_path(opt["vgg"]))
    cfg = _train_config(opt, phase, opt["out"])
    if phase == "teacher":
        net, log = trainmod.train_teacher(cfg, patches, vgg,
                                          resume_epoch=opt["resume"])
        final = os.path.join(opt["out"], "teacher.mmdr")
    else:
        if not opt["teacher"]:
            raise UsageError("train-student needs --teacher")
        teacher = netsmod.load_weights(opt["teacher"],
                                       expect_arch=netsmod.ARCH_TEACHER)
        net, log = trainmod.train_student(cfg, teacher, patches, vgg,
                                          resume_epoch=opt["resume"])
        final = os.path.join(opt["out"], "student.mmdr")
    print(f"weights: {final}")
    print(f"log: {log}")
    return 0


def _fuse_one(net, pair):
    with ad.no_grad():
        out = net.forward(pair.ir[None, None], pair.vis[None, None]).out
    fused = out.data[0, 0]
    if pair.vis_cbcr is not None:
        rgb = datamod.ycbcr_to_rgb(fused, pair.vis_cbcr[..., 0],
                                   pair.vis_cbcr[..., 1])
        return rgb
    return fused


def _cmd_fuse(ns):
    opt = _settle(ns, {"weights": None, "data": None, "out": None})
    if not opt["weights"] or not opt["data"] or not opt["out"]:
        raise UsageError("fuse needs --weights, --data and --out")
    net = netsmod.load_weights(opt["weights"])
    entries = _entries(opt["data"])
    if not entries:
        raise FileNotFoundError(f"no image pairs under {opt['data']}")
    os.makedirs(opt["out"], exist_ok=True)
    for e in entries:
        pair = datamod.load_pair(e.ir_path, e.vis_path, e.pair_id)
        fused = _fuse_one(net, pair)
        datamod.save_png(os.path.join(opt["out"], f"{pair.pair_id}.png"), fused)
    print(f"fused: {len(entries)}")
    return 0


def _cmd_evaluate(ns):
    opt = _settle(ns, {"data": None, "fused": None, "out": None})
    if not opt["data"] or not opt["fused"] or not opt["out"]:
        raise UsageError("evaluate needs --data, --fused and --out")
    entries = _entries(opt["data"])
    triples = []
    fused_images = {}
    for e in entries:
        pair = datamod.load_pair(e.ir_path, e.vis_path, e.pair_id)
        triples.append((pair.pair_id, pair.ir, pair.vis))
        path = os.path.join(opt["fused"], f"{pair.pair_id}.png")
        if os.path.exists(path):
            img = datamod.load_image(path)
            if img.ndim == 3:
                img, _, _ = datamod.rgb_to_ycbcr(img)
            fused_images[pair.pair_id] = img
    report = metricsmod.evaluate_dataset(triples, fused_images)
    os.makedirs(opt["out"], exist_ok=True)
    csv_path = os.path.join(opt["out"], "report.csv")
    json_path = os.path.join(opt["out"], "report.json")
    with open(csv_path, "w", encoding="utf-8") as f:
        f.write(report.to_csv())
    with open(json_path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
    print(report.to_csv(), end="")
    print(f"report: {csv_path}")
    return 0


def _parse_res(res):
    try:
        w, h = res.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise UsageError(f"--res expects WIDTHxHEIGHT, got {res!r}") from None


def _cmd_inspect(ns):
    opt = _settle(ns, {"weights": None, "res": None})
    if not opt["weights"]:
        raise UsageError("inspect-model needs --weights")
    net = netsmod.load_weights(opt["weights"])
    print(f"params: {netsmod.count_params(net)}")
    print(f"payload: {netsmod.payload_bytes(net)} bytes")
    if opt["res"]:
        w, h = _parse_res(opt["res"])
        macs = netsmod.count_macs(net, h, w)
        print(f"macs: {macs / 1e9:.3f} G")
    return 0


# ---------------------------------------------------------------------------
# wiring

def _add_common(p):
    p.add_argument("--config", help="key = value defaults file")
    p.add_argument("--json", action="store_true",
                   help="machine-readable errors on stderr")


def _add_train_flags(p, student):
    p.add_argument("--data", help="patch archive from prepare-data")
    p.add_argument("--vgg", help=f"VGG blob (default ${VGG_ENV})")
    p.add_argument("--out", help="output directory")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", type=int, metavar="EPOCH",
                   help="continue from this epoch's checkpoint")
    p.add_argument("--gamma", type=float)
    p.add_argument("--delta", type=float)
    p.add_argument("--lam", type=float)
    if student:
        p.add_argument("--teacher", help="trained teacher weights")
        p.add_argument("--theta", type=float)
    for name in _ABLATIONS:
        if not student and name in ("no_distill", "no_digestible"):
            continue
        p.add_argument(f"--{name.replace('_', '-')}", action="store_const",
                       const=True, dest=name)


def build_parser():
    parser = argparse.ArgumentParser(
        prog="mmdrfuse",
        description="Tiny infrared/visible fusion: train, distill, fuse, score.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare-data", help="crop training patches")
    _add_common(p)
    p.add_argument("--data", help="pair directory (ir/ + vis/) or manifest")
    p.add_argument("--out")
    p.add_argument("--crops", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(run=_cmd_prepare_data)

    p = sub.add_parser("train-teacher", help="phase one")
    _add_common(p)
    _add_train_flags(p, student=False)
    p.set_defaults(run=lambda ns: _cmd_train(ns, "teacher"))

    p = sub.add_parser("train-student", help="phase two (distillation)")
    _add_common(p)
    _add_train_flags(p, student=True)
    p.set_defaults(run=lambda ns: _cmd_train(ns, "student"))

    p = sub.add_parser("fuse", help="fuse image pairs with trained weights")
    _add_common(p)
    p.add_argument("--weights")
    p.add_argument("--data", help="pair directory or manifest")
    p.add_argument("--out", help="directory for fused PNGs")
    p.set_defaults(run=_cmd_fuse)

    p = sub.add_parser("evaluate", help="score fused results")
    _add_common(p)
    p.add_argument("--data", help="pair directory or manifest")
    p.add_argument("--fused", help="directory of fused PNGs")
    p.add_argument("--out", help="directory for report.csv / report.json")
    p.set_defaults(run=_cmd_evaluate)

    p = sub.add_parser("inspect-model", help="print size and cost figures")
    _add_common(p)
    p.add_argument("--weights")
    p.add_argument("--res", help="WIDTHxHEIGHT for the MAC count")
    p.set_defaults(run=_cmd_inspect)
    return parser


def _fail(ns, code, message):
    print(f"mmdrfuse: {message}", file=sys.stderr)
    if getattr(ns, "json", False):
        print(json.dumps({"error": message, "code": code}), file=sys.stderr)
    return code


def main(argv=None):
    ns = build_parser().parse_args(argv)
    try:
        return ns.run(ns)
    except UsageError as e:
        return _fail(ns, 2, str(e))
    except (FormatError, OSError) as e:
        return _fail(ns, 3, str(e))
    except (TrainAbort, ShapeError, ValueError, FloatingPointError,
            ZeroDivisionError) as e:
        return _fail(ns, 4, str(e))


if __name__ == "__main__":
    sys.exit(main())
