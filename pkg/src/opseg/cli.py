"""``opseg`` command-line entry point.

Every command exits 0 on success.  Failures print a single line
``opseg: error: <command>: <message>`` to stderr and exit 1 (argument
errors exit 2).  Directory outputs are built in a temporary sibling and
only moved into place when the command succeeds.
"""
from __future__ import annotations

import argparse
import csv
import io as _io
import logging
import sys
from pathlib import Path

import numpy as np

from . import io


def _add_phantom_gen(sub):
    p = sub.add_parser("phantom-gen", help="write a synthetic phantom dataset")
    p.add_argument("--count", type=int, required=True, help="number of subjects (volumes)")
    p.add_argument("--size", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slices", type=int, default=1, help="slices per volume")
    p.add_argument("--scanners", type=int, default=12)
    p.add_argument("--no-distractors", action="store_true")


def cmd_phantom_gen(a) -> int:
    from .phantoms import make_phantom
    from .preprocess import Volume

    if a.count < 1 or a.slices < 1 or a.scanners < 1:
        raise ValueError("--count, --slices and --scanners must be >= 1")
    if a.size < 64:
        raise ValueError(f"--size must be >= 64, got {a.size}")
    root = np.random.SeedSequence(a.seed)
    with io.atomic_dir(a.out) as tmp:
        for i, ss in enumerate(root.spawn(a.count)):
            rng = np.random.default_rng(ss)
            pairs = [make_phantom(a.size, rng, not a.no_distractors) for _ in range(a.slices)]
            vol = Volume(
                subject_id=f"subject_{i:03d}",
                scanner_id=f"scanner_{int(rng.integers(a.scanners)):02d}",
                modality="T2",
                slices=[io.quantize_image(img) for img, _ in pairs],
                masks=[m for _, m in pairs],
            )
            io.save_volume(vol, tmp / vol.subject_id)
    print(f"wrote {a.count} volumes to {a.out}")
    return 0


def _add_preprocess(sub):
    p = sub.add_parser("preprocess", help="slice removal, Gaussian blur and CLAHE")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--slice-frac", type=float, default=0.2)
    p.add_argument("--sigma", type=float, default=0.8)
    p.add_argument("--clahe-tiles", type=int, default=8)
    p.add_argument("--clahe-clip", type=float, default=2.0)


def cmd_preprocess(a) -> int:
    from .preprocess import preprocess_volume

    dirs = io.volume_dirs(a.inp)
    with io.atomic_dir(a.out) as tmp:
        for d in dirs:
            vol = preprocess_volume(io.load_volume(d), a.slice_frac, a.sigma, a.clahe_tiles, a.clahe_clip)
            io.save_volume(vol, tmp / d.name if d != Path(a.inp) else tmp)
    print(f"preprocessed {len(dirs)} volumes into {a.out}")
    return 0


def _add_fuse(sub):
    p = sub.add_parser("fuse", help="STAPLE-fuse rater masks")
    p.add_argument("--raters", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=100)


def cmd_fuse(a) -> int:
    from .preprocess import Volume
    from .staple import staple_multiclass

    if len(a.raters) < 2:
        raise ValueError("--raters needs at least 2 directories")
    per_rater = [{d.name: d for d in io.volume_dirs(r)} for r in a.raters]
    names = sorted(per_rater[0])
    for r, m in zip(a.raters, per_rater):
        if sorted(m) != names:
            raise ValueError(f"rater directory {r} holds different volumes than {a.raters[0]}")
    single = len(names) == 1 and (Path(a.raters[0]) / "meta.json").is_file()
    with io.atomic_dir(a.out) as tmp:
        for name in names:
            vols = [io.load_volume(m[name]) for m in per_rater]
            for r, v in zip(a.raters, vols):
                if v.masks is None or len(v.masks) != len(vols[0].slices):
                    raise ValueError(f"{r}/{name}: masks missing or misaligned")
            fused, conf = [], []
            for i in range(len(vols[0].slices)):
                labels, res = staple_multiclass([v.masks[i] for v in vols], tol=a.tol, max_iter=a.max_iter)
                fused.append(labels)
                conf.append(np.max([x.consensus for x in res.values()], axis=0))
            base = vols[0]
            dest = tmp if single else tmp / name
            io.save_volume(Volume(base.subject_id, base.scanner_id, base.modality, base.slices, fused), dest)
            for i, c in enumerate(conf):
                io.atomic_write_bytes(dest / f"consensus_{i:04d}.pgm", io.image_to_pgm(np.clip(c, 0.0, 1.0)))
    print(f"fused {len(a.raters)} raters over {len(names)} volumes into {a.out}")
    return 0


def _add_train(sub):
    p = sub.add_parser("train", help="train a segmentation network")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="per-epoch CSV log")


def _log_csv(rows) -> str:
    buf = _io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss", "val_dsc"])
    for r in rows:
        w.writerow([r["epoch"], repr(r["loss"]), repr(r["val_dsc"])])
    return buf.getvalue()


def cmd_train(a) -> int:
    from .config import load_config
    from .pipeline import fit

    cfg = load_config(a.config)
    vols = io.load_dataset(a.data)
    net, rows = fit(vols, cfg)
    io.save_checkpoint(a.out, net)
    if a.log:
        io.atomic_write_text(a.log, _log_csv(rows))
    final = rows[-1]["loss"] if rows else float("nan")
    print(f"trained {len(rows)} epochs, final loss {final:.6f}; checkpoint {a.out}")
    return 0


def _add_eval(sub):
    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--roi", required=True, help="gt | gt-jitter | heuristic | none | file:PATH")
    p.add_argument("--report", required=True, help="report path (.json, or .csv for the table row)")
    p.add_argument("--config", help="run config supplying preprocess and cascade settings")
    p.add_argument("--roi-out", help="write the proposed ROIs as CSV")
    p.add_argument("--seed", type=int, default=0)


def cmd_eval(a) -> int:
    from .cascade import format_roi_csv
    from .config import RunConfig, load_config
    from .pipeline import evaluate, prepare_volumes

    if a.roi not in ("gt", "gt-jitter", "heuristic", "none") and not a.roi.startswith("file:"):
        raise ValueError(f"--roi must be gt, gt-jitter, heuristic, none or file:PATH, got {a.roi!r}")
    cfg = load_config(a.config) if a.config else RunConfig()
    vols = prepare_volumes(io.load_dataset(a.data), cfg.preprocess)
    net = io.load_checkpoint(a.ckpt)
    rois: list = []
    rep = evaluate(vols, net, a.roi, cfg, seed=a.seed, rois_out=rois)
    if a.report.endswith(".csv"):
        io.atomic_write_text(a.report, rep.to_csv())
    else:
        io.write_json(a.report, rep.to_dict())
    if a.roi_out:
        io.atomic_write_text(a.roi_out, format_roi_csv(rois))
    print(f"mean DSC {rep.mean['dsc']:.4f} IoU {rep.mean['iou']:.4f}; report {a.report}")
    return 0


def _add_crossval(sub):
    p = sub.add_parser("crossval", help="subject-preserving K-fold cross-validation")
    p.add_argument("--data", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--folds", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)


def cmd_crossval(a) -> int:
    from .config import load_config
    from .folds import crossval, make_folds

    cfg = load_config(a.config)
    vols = io.load_dataset(a.data)
    spec = make_folds([v.subject_id for v in vols], a.folds, a.seed)
    with io.atomic_dir(a.out) as tmp:
        result = crossval(vols, cfg, spec, out_dir=tmp)
    dsc = result.summary["dsc"]
    print(f"{a.folds}-fold DSC {100 * dsc['mean']:.2f}±{100 * dsc['std']:.2f}; leakage checks {result.leakage_checks}")
    return 0


def _add_gradcheck(sub):
    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--q", type=int, default=3)
    p.add_argument("--size", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)


def gradient_suite(q: int = 3, size: int = 6, seed: int = 0) -> dict[str, float]:
    """Worst relative error per checked operation."""
    from .selfonn import SelfOnnBlock, SelfOnnLayer, block_forward, selfonn_forward
    from .tensor import Tensor, conv2d, elem_pow, grad_check, maxpool2d, tanh, upsample2x

    if q < 1 or size < 2:
        raise ValueError("--q must be >= 1 and --size >= 2")
    rng = np.random.default_rng(seed)
    x = Tensor(rng.uniform(-1, 1, (1, 2, size, size)), requires_grad=True)
    layer = SelfOnnLayer(2, 3, 3, q=q, dropout_rate=0.0, rng=rng)
    w = Tensor(rng.standard_normal((3, 2, 3, 3)), requires_grad=True)
    b = Tensor(rng.standard_normal(3), requires_grad=True)
    even = size - size % 2
    xe = Tensor(rng.uniform(-1, 1, (1, 2, even, even)), requires_grad=True)
    return {
        "selfonn": grad_check(lambda *_: selfonn_forward(layer, x).sum(), [x, layer.weights, layer.bias]),
        "selfonn_block": grad_check(lambda *_: block_forward(SelfOnnBlock(layer), x).sum(), [x, layer.weights]),
        "conv2d_tanh": grad_check(lambda *_: tanh(conv2d(x, w, b, 1, 1)).sum(), [x, w, b]),
        "elem_pow": grad_check(lambda *_: elem_pow(x, q).sum(), [x]),
        "maxpool2d": grad_check(lambda *_: (maxpool2d(xe, 2, 2) * maxpool2d(xe, 2, 2)).sum(), [xe]),
        "upsample2x": grad_check(lambda *_: tanh(upsample2x(x)).sum(), [x]),
    }


def cmd_gradcheck(a) -> int:
    errs = gradient_suite(a.q, a.size, a.seed)
    for name, e in errs.items():
        print(f"{name}: {e:.3e}")
    worst = max(errs.values())
    print(f"max relative error {worst:.3e}")
    if not worst < a.tol:
        raise RuntimeError(f"max relative error {worst:.3e} >= {a.tol:g}")
    return 0


COMMANDS = {
    "phantom-gen": (_add_phantom_gen, cmd_phantom_gen),
    "preprocess": (_add_preprocess, cmd_preprocess),
    "fuse": (_add_fuse, cmd_fuse),
    "train": (_add_train, cmd_train),
    "eval": (_add_eval, cmd_eval),
    "crossval": (_add_crossval, cmd_crossval),
    "gradcheck": (_add_gradcheck, cmd_gradcheck),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="opseg", description="Self-ONN spine segmentation toolkit")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    for add, _ in COMMANDS.values():
        add(sub)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command][1](args)
    except Exception as exc:  # noqa: BLE001 - report every failure as one line
        msg = " ".join(str(exc).split()) or type(exc).__name__
        print(f"opseg: error: {args.command}: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
