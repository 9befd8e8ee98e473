"""Command-line entry point: prepare, pretrain, train, predict, evaluate, cam, export-embeddings, synth."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import os
import sys

import numpy as np

from dceac import checkpoint, config as cfgmod, datapipe, evaluation, explain, plotting, synth, training
from dceac.utils import atomic_write

log = logging.getLogger("dceac")

VARIANT_FLAGS = {"dceac": "dceac", "rdec": "rdec", "rdcec": "rdcec", "ae-kmeans": "ae_kmeans"}
IMAGE_EXT = (".png", ".tif", ".tiff")

# flag name -> (config key, type, help)
TRAIN_FLAGS = {
    "--epochs": ("epochs", int, "training epochs per stage"),
    "--batch-size": ("batch_size", int, "samples per batch"),
    "--lr": ("lr", float, "Adadelta step multiplier"),
    "--gamma": ("gamma", float, "clustering loss weight"),
    "--seed": ("seed", int, "random seed (env DCL_SEED sets the default)"),
    "--n-clusters": ("n_clusters", int, "number of clusters K"),
    "--input-size": ("input_size", int, "network input size M"),
    "--p-scope": ("p_scope", str, "target distribution scope: batch or dataset"),
    "--bn-mode": ("bn_mode", str, "decoder batch norm mode in joint training: train or infer"),
    "--kmeans-restarts": ("kmeans_restarts", int, "k-means restarts"),
}


def _add_train_flags(p):
    d = cfgmod.defaults()
    p.add_argument("--config", help="key=value configuration file")
    for flag, (key, typ, text) in TRAIN_FLAGS.items():
        p.add_argument(flag, dest=key, type=typ, default=None, help=f"{text} (default: {d[key]})")
    p.add_argument("--attention", dest="attention", action=argparse.BooleanOptionalAction, default=None,
                   help=f"attention gate in the bottleneck (default: {d['attention']})")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override any configuration key")


def _overrides(args):
    out = {key: getattr(args, key, None) for _, (key, _, _) in TRAIN_FLAGS.items()}
    out["attention"] = getattr(args, "attention", None)
    for item in getattr(args, "set", []):
        if "=" not in item:
            raise ValueError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        k = k.strip().replace("-", "_")
        if k not in cfgmod.defaults():
            raise ValueError(f"unknown key {k!r}")
        out[k] = cfgmod._coerce(k, v)
    return out


def _values(args):
    return cfgmod.resolve(getattr(args, "config", None), _overrides(args))


def _load_data(manifest, size):
    records = datapipe.load_manifest(manifest)
    if not records:
        raise ValueError(f"manifest {manifest} has no records")
    return records, datapipe.load_patches(records, size)


def _write_log(train_log, path, title):
    train_log.to_csv(path)
    if len(train_log):
        plotting.plot_train_log(train_log, plotting.figure_path(path), title)


def cmd_prepare(args):
    masks = {}
    for m in sorted(os.listdir(args.masks)):
        stem, ext = os.path.splitext(m)
        if ext.lower() in IMAGE_EXT:
            masks[stem] = os.path.join(args.masks, m)
    patch_dir = args.patch_dir or os.path.join(os.path.dirname(os.path.abspath(args.out)), "patches")
    records = []
    for name in sorted(os.listdir(args.images)):
        stem, ext = os.path.splitext(name)
        if ext.lower() not in IMAGE_EXT:
            continue
        if stem not in masks:
            raise ValueError(f"no mask for image {name}")
        image = datapipe.load_image(os.path.join(args.images, name))
        mask = datapipe.load_mask(masks[stem])
        recs = datapipe.extract_patches(image, mask, args.tile, args.threshold, patch_dir, stem)
        log.info("%s: kept %d tiles", name, len(recs))
        records.extend(recs)
    datapipe.write_manifest(args.out, records)
    print(f"{len(records)} patches -> {args.out}")


def cmd_pretrain(args):
    v = _values(args)
    arch, tc = cfgmod.arch_config(v), cfgmod.train_config(v)
    _, data = _load_data(args.manifest, arch.input_size)
    params = training.build_model(arch, seed=tc.seed)
    params, train_log, opt = training.pretrain_cae(data, tc, params)
    checkpoint.save(args.out, params, meta={"stage": "pretrain", "seed": tc.seed, "epochs": tc.epochs}, optimizer=opt)
    if args.log:
        _write_log(train_log, args.log, "Autoencoder pretraining")
    print(f"pretrained {tc.epochs} epochs -> {args.out}")


def cmd_train(args):
    v = _values(args)
    v["variant"] = VARIANT_FLAGS[args.variant]
    tc = cfgmod.train_config(v)
    params, _, opt = checkpoint.load(args.ckpt)
    records, data = _load_data(args.manifest, params.config.input_size)
    if params.config.n_clusters != v["n_clusters"]:
        params = params.replace(config=dataclasses.replace(params.config, n_clusters=v["n_clusters"]))
    result = training.cluster_pretrained(data, tc, params, opt)
    meta = {"stage": "cluster", "variant": tc.variant, "seed": tc.seed, "epochs": tc.epochs, "gamma": tc.gamma}
    checkpoint.save(args.out, result.params, meta=meta)
    if args.log and result.log is not None:
        _write_log(result.log, args.log, f"{args.variant} training")
    if args.labels:
        _write_labels(args.labels, records, result.labels)
    print(f"{args.variant}: cluster sizes {np.bincount(result.labels, minlength=params.config.n_clusters).tolist()} -> {args.out}")


def _write_labels(path, records, labels):
    with atomic_write(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "cluster"])
        for rec, lab in zip(records, labels):
            w.writerow([rec.path, int(lab)])


def cmd_predict(args):
    params, _, _ = checkpoint.load(args.ckpt)
    records, data = _load_data(args.manifest, params.config.input_size)
    _write_labels(args.out, records, training.predict(params, data))
    print(f"{len(records)} predictions -> {args.out}")


def _read_predictions(path):
    base = os.path.dirname(os.path.abspath(path))
    out = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["path", "cluster"]:
            raise ValueError(f"{path}: expected header path,cluster")
        for lineno, row in enumerate(reader, 2):
            if not row:
                continue
            if len(row) != 2:
                raise ValueError(f"{path}: line {lineno}: expected 2 fields")
            token = row[1].strip()
            if token in datapipe.LABEL_INDEX:
                value = datapipe.LABEL_INDEX[token]
            else:
                try:
                    value = int(token)
                except ValueError:
                    raise ValueError(f"{path}: line {lineno}: bad cluster {token!r}") from None
            out[os.path.abspath(datapipe.resolve(row[0], base))] = value
    return out


def cmd_evaluate(args):
    records = datapipe.load_manifest(args.manifest, check_files=False)
    truth = datapipe.label_indices(records)
    preds = _read_predictions(args.pred)
    try:
        pred = np.array([preds[os.path.abspath(r.path)] for r in records], dtype=np.int64)
    except KeyError as exc:
        raise ValueError(f"no prediction for {exc.args[0]}") from None
    k = len(datapipe.LABELS)
    report = evaluation.evaluate(pred, truth, k, list(datapipe.LABELS))
    report.to_json(args.out)
    evaluation.write_confusion_csv(plotting.figure_path(args.out, "_confusion.csv"), report.confusion, report.classes)
    plotting.plot_confusion(report.confusion, report.classes, plotting.figure_path(args.out, "_confusion.png"))
    print(f"micro SN {report.micro['SN']:.4f}  ACC {report.macro['ACC']:.4f} -> {args.out}")


def cmd_cam(args):
    params, _, _ = checkpoint.load(args.ckpt)
    m = params.config.input_size
    raw = datapipe.load_image(args.patch)
    x = datapipe.resize_patch(raw, m).transpose(2, 0, 1)
    frame = raw.shape[0]
    amap = explain.compute_cam(params, x, args.cluster, frame=frame, source=args.patch)
    explain.render_overlay(raw, amap, args.alpha, args.out)
    if args.raw:
        explain.write_heatmap_csv(args.raw, amap.heatmap)
    print(f"CAM for cluster {args.cluster} -> {args.out}")


def cmd_export(args):
    params, _, _ = checkpoint.load(args.ckpt)
    records, data = _load_data(args.manifest, params.config.input_size)
    z, pred, labels = evaluation.export_embeddings(params, data, [r.label for r in records])
    evaluation.write_embeddings_csv(args.out, z, pred, labels)
    print(f"{len(z)} embeddings -> {args.out}")


def cmd_synth(args):
    os.makedirs(args.out_dir, exist_ok=True)
    if args.slides:
        from PIL import Image
        rng = np.random.default_rng(args.seed)
        img_dir = os.path.join(args.out_dir, "images")
        mask_dir = os.path.join(args.out_dir, "masks")
        os.makedirs(img_dir, exist_ok=True)
        os.makedirs(mask_dir, exist_ok=True)
        for i in range(args.slides):
            image, mask = synth.make_slide(rng)
            Image.fromarray(image).save(os.path.join(img_dir, f"slide{i:02d}.png"))
            Image.fromarray(mask).save(os.path.join(mask_dir, f"slide{i:02d}.png"))
        print(f"{args.slides} slides -> {img_dir}, {mask_dir}")
        return
    manifest = args.manifest or os.path.join(args.out_dir, "manifest.csv")
    recs = synth.write_dataset(args.out_dir, manifest, args.per_class, args.size, args.seed,
                               with_labels=not args.no_labels)
    print(f"{len(recs)} synthetic patches -> {manifest}")


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    """Show defaults, except for flags that have none."""

    def _get_help_string(self, action):
        if action.default is None or action.default is False or "default:" in (action.help or ""):
            return action.help
        return super()._get_help_string(action)


def build_parser():
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="dceac", description=__doc__, formatter_class=fmt)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("prepare", help="tile images into patches", formatter_class=fmt)
    p.add_argument("--images", required=True, help="directory of RGB images")
    p.add_argument("--masks", required=True, help="directory of tissue masks (same file stems)")
    p.add_argument("--out", required=True, help="manifest CSV to write")
    p.add_argument("--tile", type=int, default=512, help="tile size in pixels")
    p.add_argument("--threshold", type=float, default=0.75, help="keep tiles with tissue fraction above this")
    p.add_argument("--patch-dir", help="where patch PNGs go (default: patches/ next to the manifest)")
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("pretrain", help="train the convolutional autoencoder", formatter_class=fmt)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--log", help="training log CSV (a loss plot is written next to it)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train", help="cluster from a pretrained checkpoint", formatter_class=fmt)
    p.add_argument("--variant", choices=list(VARIANT_FLAGS), default="dceac")
    p.add_argument("--manifest", required=True)
    p.add_argument("--ckpt", required=True, help="pretrained checkpoint")
    p.add_argument("--out", required=True, help="checkpoint to write")
    p.add_argument("--log", help="training log CSV (a loss plot is written next to it)")
    p.add_argument("--labels", help="also write the final training labels to this CSV")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="assign clusters to manifest patches", formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="labels CSV (path,cluster)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions against manifest labels", formatter_class=fmt)
    p.add_argument("--pred", required=True, help="labels CSV from predict")
    p.add_argument("--manifest", required=True, help="manifest with NT/M/I labels")
    p.add_argument("--out", required=True, help="report JSON (confusion CSV/PNG written alongside)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("cam", help="activation map overlay for one patch", formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--patch", required=True, help="patch image (size a multiple of the input size)")
    p.add_argument("--cluster", type=int, required=True)
    p.add_argument("--out", required=True, help="overlay PNG")
    p.add_argument("--alpha", type=float, default=0.5, help="heatmap opacity")
    p.add_argument("--raw", help="also dump the heatmap as CSV")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("export-embeddings", help="pooled embeddings with labels as CSV", formatter_class=fmt)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("synth", help="write a synthetic three-texture patch set", formatter_class=fmt)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", help="manifest path (default: OUT_DIR/manifest.csv)")
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=cfgmod.default_seed())
    p.add_argument("--no-labels", action="store_true", help="omit the validation label column values")
    p.add_argument("--slides", type=int, default=0, help="instead write this many large slides with masks")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except (ValueError, KeyError, OSError, FloatingPointError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"dceac {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
