"""Command line entry point.

    wscn generate  --per-class 100 --out maps.npz
    wscn train     --data maps.npz --out model.wscn
    wscn eval      --model model.wscn --data maps.npz
    wscn quantize  --model model.wscn --data maps.npz --out model-int8.wscn
    wscn infer     --model model.wscn --class-id 7 --seed 3 --mask-out m.pgm
    wscn bench     --n 1000 --repeats 10

Every option can also come from a config file of ``key = value`` lines
(``--config run.cfg``); explicit command line flags win over the file,
the file wins over defaults. Commands that produce a file also write a
``<output>.manifest.json`` recording the resolved configuration,
dataset fingerprint, and result metrics.
"""

import argparse
import json
import platform
import sys
import time
from datetime import datetime, timezone

import numpy as np

from . import __version__
from . import model as M
from .archive import load_archive, save_archive
from .data import (CLASS_NAMES, NUM_CLASSES, WaferDataset, batch_arrays,
                   generate_wafer_map, make_dataset, preprocess, split_dataset)
from .errors import ConfigError, WscnError
from .kernels import BACKEND
from .metrics import (class_report, dice_coefficient, iou, report_csv_lines,
                      summary_text)
from .quant import export_quantized, load_quantized, quantize_model, quantized_forward
from .tensor import Tensor
from .train import TrainConfig, evaluate, fit, save_history


# --- config file / precedence ----------------------------------------------

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


def _parse_value(raw, typ, key):
    raw = raw.strip()
    if typ is bool:
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"config key {key!r}: expected a boolean, got {raw!r}")
    try:
        return typ(raw)
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def read_config_file(path):
    """Parse ``key = value`` lines; '#' starts a comment."""
    values = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = line.partition("=")
            values[key.strip().replace("-", "_")] = raw.strip()
    return values


def _resolve(args, spec):
    """flag > config file > default, per (key, type, default) spec rows."""
    file_values = read_config_file(args.config) if getattr(args, "config", None) else {}
    known = {key for key, _, _ in spec}
    unknown = set(file_values) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for key, typ, default in spec:
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in file_values:
            out[key] = _parse_value(file_values[key], typ, key)
        else:
            out[key] = default
    return out


_TRAIN_SPEC = [
    ("batch_size", int, 32),
    ("pretrain_batch_size", int, None),
    ("pretrain_epochs", int, 30),
    ("joint_epochs", int, 30),
    ("learning_rate", float, 1e-3),
    ("plateau_patience", int, 10),
    ("plateau_factor", float, 0.1),
    ("min_lr", float, 0.0),
    ("temperature", float, 0.1),
    ("freeze_encoder", bool, True),
    ("seed", int, 0),
    ("input_size", int, 224),
    ("val_fraction", float, 0.2),
]


def _add_train_options(p):
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--batch-size", type=int, dest="batch_size")
    p.add_argument("--pretrain-batch-size", type=int, dest="pretrain_batch_size")
    p.add_argument("--pretrain-epochs", type=int, dest="pretrain_epochs")
    p.add_argument("--joint-epochs", type=int, dest="joint_epochs")
    p.add_argument("--learning-rate", "--lr", type=float, dest="learning_rate")
    p.add_argument("--plateau-patience", type=int, dest="plateau_patience")
    p.add_argument("--plateau-factor", type=float, dest="plateau_factor")
    p.add_argument("--min-lr", type=float, dest="min_lr")
    p.add_argument("--temperature", type=float, dest="temperature")
    p.add_argument("--no-freeze", action="store_false", dest="freeze_encoder",
                   default=None, help="keep the encoder trainable in phase 2")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--input-size", type=int, dest="input_size")
    p.add_argument("--val-fraction", type=float, dest="val_fraction")


def _manifest(path, command, config, **sections):
    doc = {
        "command": command,
        "created": datetime.now(timezone.utc).isoformat(timespec="seconds"),
        "argv": sys.argv[1:],
        "version": __version__,
        "backend": BACKEND,
        "config": config,
    }
    doc.update(sections)
    manifest_path = f"{path}.manifest.json"
    with open(manifest_path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return manifest_path


def write_pgm(path, mask):
    """Write a (H,W) mask in [0,1] as a binary 8-bit PGM image."""
    m = np.asarray(mask, dtype=np.float64)
    if m.ndim != 2:
        raise ConfigError(f"PGM mask must be 2-D, got shape {m.shape}")
    data = np.clip(np.rint(m * 255), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def _load_dataset(path):
    grids, labels = load_archive(path)
    return WaferDataset(grids, labels)


def _load_any_model(path):
    """Load either a float or an int8 model file; returns (kind, object)."""
    from .checkpoint import load_checkpoint

    _, meta, _ = load_checkpoint(path)
    kind = meta.get("kind")
    if kind == "wscn-fp32":
        return kind, M.load_model(path)
    if kind == "wscn-int8":
        return kind, load_quantized(path)
    raise ConfigError(f"unrecognized model file kind {kind!r} in {path}")


def _forward_any(kind, mdl, images):
    x = Tensor(images)
    if kind == "wscn-int8":
        return quantized_forward(mdl, x)
    return M.forward(mdl, x, training=False)


def _predict_dataset(kind, mdl, ds, batch_size=32):
    cfg = mdl.config
    n = len(ds)
    probs = np.zeros((n, NUM_CLASSES), dtype=np.float64)
    dices, ious = [], []
    for start in range(0, n, batch_size):
        idx = np.arange(start, min(start + batch_size, n))
        images, masks, _ = batch_arrays(ds, idx, cfg.input_size)
        out = _forward_any(kind, mdl, images)
        probs[idx] = out.class_probs.data.reshape(len(idx), -1)
        for j in range(len(idx)):
            dices.append(dice_coefficient(out.mask.data[j], masks[j]))
            ious.append(iou(out.mask.data[j], masks[j]))
    return probs, np.asarray(dices), np.asarray(ious)


# --- subcommands ------------------------------------------------------------

def cmd_generate(args):
    spec = [("per_class", int, 100), ("seed", int, 0)]
    cfg = _resolve(args, spec)
    ds = make_dataset(cfg["per_class"], seed=cfg["seed"])
    save_archive(args.out, ds.grids, ds.labels)
    _manifest(args.out, "generate", cfg,
              dataset={"samples": len(ds), "classes": NUM_CLASSES,
                       "per_class": cfg["per_class"]})
    print(f"wrote {len(ds)} wafer maps ({NUM_CLASSES} classes x "
          f"{cfg['per_class']}) to {args.out}")
    return 0


def cmd_train(args):
    cfg = _resolve(args, _TRAIN_SPEC)
    if args.data:
        ds = _load_dataset(args.data)
        source = {"path": args.data, "samples": len(ds)}
    elif args.per_class:
        ds = make_dataset(args.per_class, seed=cfg["seed"])
        source = {"synthetic_per_class": args.per_class, "samples": len(ds)}
    else:
        raise ConfigError("train needs --data ARCHIVE or --per-class N")
    train_ds, val_ds = split_dataset(ds, fraction=1.0 - cfg["val_fraction"],
                                     seed=cfg["seed"])
    mdl = M.build_model(M.WscnConfig(input_size=cfg["input_size"], seed=cfg["seed"]))
    tc = TrainConfig(
        batch_size=cfg["batch_size"],
        pretrain_batch_size=cfg["pretrain_batch_size"],
        pretrain_epochs=cfg["pretrain_epochs"],
        joint_epochs=cfg["joint_epochs"],
        learning_rate=cfg["learning_rate"],
        plateau_patience=cfg["plateau_patience"],
        plateau_factor=cfg["plateau_factor"],
        min_lr=cfg["min_lr"],
        temperature=cfg["temperature"],
        freeze_encoder=cfg["freeze_encoder"],
        seed=cfg["seed"],
    )
    log = None if args.quiet else print
    t0 = time.perf_counter()
    result = fit(mdl, train_ds, val_ds, tc, log=log)
    wall = time.perf_counter() - t0
    M.save_model(args.out, mdl, extra_meta={"best_epoch": result.best_epoch})
    history_path = args.history or f"{args.out}.history.csv"
    save_history(history_path, result.history)
    _manifest(args.out, "train", cfg,
              dataset={**source, "train": len(train_ds), "val": len(val_ds)},
              outputs={"model": args.out, "history": history_path},
              metrics={**(result.final_val or {}),
                       "best_epoch": result.best_epoch,
                       "wall_seconds": round(wall, 3)})
    if result.final_val:
        print(f"val loss {result.final_val['loss']:.4f}  "
              f"acc {result.final_val['accuracy']:.4f}  "
              f"dice {result.final_val['dice']:.4f}")
    print(f"saved model to {args.out} ({wall:.1f}s)")
    return 0


def cmd_eval(args):
    kind, mdl = _load_any_model(args.model)
    ds = _load_dataset(args.data)
    probs, dices, ious = _predict_dataset(kind, mdl, ds, args.batch_size)
    report = class_report(probs.argmax(axis=1), ds.labels,
                          n_classes=NUM_CLASSES, class_names=CLASS_NAMES)
    extras = {
        "mask dice (mean)": float(dices.mean()),
        "mask iou (mean)": float(ious.mean()),
    }
    print(summary_text(report, extras=extras))
    if args.report:
        with open(args.report, "w") as fh:
            fh.write("\n".join(report_csv_lines(report)) + "\n")
        print(f"per-class report written to {args.report}")
    return 0


def cmd_quantize(args):
    kind, mdl = _load_any_model(args.model)
    if kind != "wscn-fp32":
        raise ConfigError("quantize expects a float model file")
    ds = _load_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    take = min(args.calib_count, len(ds))
    idx = rng.choice(len(ds), size=take, replace=False)
    images, _, _ = batch_arrays(ds, idx, mdl.config.input_size)
    qm = quantize_model(mdl, images, batch_size=args.batch_size)
    size = export_quantized(args.out, qm)
    fp32_size = M.count_params(mdl) * 4
    print(f"int8 model: {size} bytes on disk (fp32 weights alone: {fp32_size})")
    metrics = {"int8_bytes": size, "fp32_weight_bytes": fp32_size}
    if args.eval:
        _, fd, _ = _predict_dataset(kind, mdl, ds, args.batch_size)
        _, qd, _ = _predict_dataset("wscn-int8", qm, ds, args.batch_size)
        metrics["fp32_dice"] = float(fd.mean())
        metrics["int8_dice"] = float(qd.mean())
        print(f"mean dice: fp32 {metrics['fp32_dice']:.4f}  "
              f"int8 {metrics['int8_dice']:.4f}")
    _manifest(args.out, "quantize",
              {"calib_count": take, "seed": args.seed},
              outputs={"model": args.out}, metrics=metrics)
    return 0


def cmd_infer(args):
    kind, mdl = _load_any_model(args.model)
    size = mdl.config.input_size
    if args.data is not None:
        if args.index is None:
            raise ConfigError("--data needs --index to pick a wafer")
        ds = _load_dataset(args.data)
        if not 0 <= args.index < len(ds):
            raise ConfigError(f"--index out of range [0, {len(ds)})")
        images, _, _ = batch_arrays(ds, [args.index], size)
        true_label = int(ds.labels[args.index])
    elif args.class_id is not None:
        wafer = generate_wafer_map(args.class_id, args.seed)
        sample = preprocess(wafer, size)
        images = sample.image.data[None]
        true_label = args.class_id
    else:
        raise ConfigError("infer needs --data/--index or --class-id")
    out = _forward_any(kind, mdl, images)
    probs = out.class_probs.data.reshape(-1)
    top = np.argsort(probs)[::-1][: args.top]
    print(f"true class: {CLASS_NAMES[true_label]}")
    for rank, c in enumerate(top, 1):
        print(f"  {rank}. {CLASS_NAMES[c]:<12} {probs[c]:.4f}")
    if args.mask_out:
        write_pgm(args.mask_out, out.mask.data[0, 0])
        print(f"mask written to {args.mask_out}")
    return 0


def cmd_bench(args):
    if args.model:
        kind, mdl = _load_any_model(args.model)
    else:
        kind, mdl = "wscn-fp32", M.build_model(M.WscnConfig(seed=args.seed))
    size = mdl.config.input_size
    rng = np.random.default_rng(args.seed)
    grids = np.stack([
        generate_wafer_map(int(rng.integers(NUM_CLASSES)), int(rng.integers(2**31))).grid
        for _ in range(args.images)
    ])
    labels = np.zeros(len(grids), dtype=np.int64)
    ds = WaferDataset(grids, labels)
    # one warmup pass outside the timed region
    imgs, _, _ = batch_arrays(ds, [0], size)
    _forward_any(kind, mdl, imgs)
    repeat_seconds = []
    for _ in range(args.repeats):
        t0 = time.perf_counter()
        for i in range(args.images):
            imgs, _, _ = batch_arrays(ds, [i], size)  # resize inside the clock
            _forward_any(kind, mdl, imgs)
        repeat_seconds.append(time.perf_counter() - t0)
    per_image_ms = np.asarray(repeat_seconds) / args.images * 1e3
    fps = args.images / np.asarray(repeat_seconds)
    stats = {
        "backend": BACKEND,
        "hardware": platform.platform(),
        "images": args.images,
        "repeats": args.repeats,
        "repeat_seconds": [float(s) for s in repeat_seconds],
        "fps_per_repeat": [float(f) for f in fps],
        "fps_mean": float(fps.mean()),
        "ms_per_image_mean": float(per_image_ms.mean()),
        "ms_per_image_std": float(per_image_ms.std()),
        "ms_per_image_best": float(per_image_ms.min()),
        "params": M.count_params(mdl if kind == "wscn-fp32" else mdl.runtime_model()),
        "macs_per_image": M.count_flops(mdl if kind == "wscn-fp32"
                                        else mdl.runtime_model()),
    }
    print(f"backend {stats['backend']}: "
          f"{stats['ms_per_image_mean']:.2f} ms/image "
          f"(std {stats['ms_per_image_std']:.2f}, best {stats['ms_per_image_best']:.2f}) "
          f"over {args.repeats} x {args.images} single-image passes")
    print(f"mean {stats['fps_mean']:.2f} frames/s on {stats['hardware']}")
    print(f"{stats['params']} params, {stats['macs_per_image'] / 1e6:.1f}M MACs/image")
    if args.out:
        with open(args.out, "w") as fh:
            json.dump(stats, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"stats written to {args.out}")
    return 0


# --- parser -----------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="wscn",
        description="Wafer map defect classification + segmentation toolkit",
    )
    parser.add_argument("--version", action="version", version=f"wscn {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic wafer map archive")
    p.add_argument("--per-class", type=int, dest="per_class")
    p.add_argument("--seed", type=int, dest="seed")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--data", help="wafer archive from 'generate'")
    p.add_argument("--per-class", type=int, dest="per_class",
                   help="generate this many wafers per class instead of --data")
    p.add_argument("--out", required=True, help="model output path")
    p.add_argument("--history", help="history CSV path (default <out>.history.csv)")
    p.add_argument("--quiet", action="store_true")
    _add_train_options(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-class report on an archive")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=32)
    p.add_argument("--report", help="write the per-class CSV here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("quantize", help="post-training int8 quantization")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="calibration archive")
    p.add_argument("--out", required=True)
    p.add_argument("--calib-count", type=int, dest="calib_count", default=128)
    p.add_argument("--batch-size", type=int, dest="batch_size", default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval", action="store_true",
                   help="compare fp32 vs int8 mask dice on the archive")
    p.set_defaults(func=cmd_quantize)

    p = sub.add_parser("infer", help="classify one wafer and write its mask")
    p.add_argument("--model", required=True)
    p.add_argument("--data", help="archive to pick a wafer from")
    p.add_argument("--index", type=int, help="wafer index within --data")
    p.add_argument("--class-id", type=int, dest="class_id",
                   help="synthesize a wafer of this class instead")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--top", type=int, default=3)
    p.add_argument("--mask-out", dest="mask_out", help="PGM output path")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("bench", help="single-image latency benchmark")
    p.add_argument("--model", help="model file (default: fresh weights)")
    p.add_argument("--n", "--images", dest="images", type=int, default=1000)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="write stats JSON here")
    p.set_defaults(func=cmd_bench)

    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except WscnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
