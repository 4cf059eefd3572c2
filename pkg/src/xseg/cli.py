"""Command-line entry point: synth, segment, train, eval.

Every command is deterministic given (args, config file, seed). The seed
resolution order is: --seed flag, then XSEG_SEED env var, then
DEFAULT_SEED. Exit codes: 0 success, 1 runtime failure, 2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from PIL import Image

from .classifier import (
    label_superpixels_from_mask,
    load_classifier,
    pool_superpixel_features,
    save_classifier,
    train_classifier,
    write_predictions_csv,
)
from .imaging import ChannelMode, load_sample, select_channels, apply_object_mask, crop_mask
from .losses import LossConfig
from .metrics import report_table, report_to_json
from .net import ConvFeatureNet, NetConfig
from .overlay import render_overlay
from .pipeline import (
    PipelineConfig,
    evaluate_dataset,
    load_index,
    segment_image,
    split_dataset,
)
from .synth import PhantomSpec, generate_dataset
from .train import OptimizerState, load_net, save_net, train_feature_net

DEFAULT_SEED = 20257
SPLIT_RATIO = 0.7


def resolve_jobs(flag_value: int | None) -> int:
    if flag_value is not None:
        return max(1, flag_value)
    return os.cpu_count() or 1


def resolve_seed(flag_value: int | None) -> int:
    if flag_value is not None:
        return flag_value
    env = os.environ.get("XSEG_SEED")
    if env is not None:
        return int(env)
    return DEFAULT_SEED


def _load_config(args, seed: int) -> PipelineConfig:
    """Config file first, then explicit CLI flags override."""
    data = {}
    if getattr(args, "config", None):
        data = json.loads(Path(args.config).read_text())
    base = PipelineConfig.from_dict(data) if data else PipelineConfig()
    overrides = {}
    for name in ("mode", "backend", "k", "m", "iterations", "v", "beta", "tau"):
        value = getattr(args, name, None)
        if value is not None:
            overrides[name] = value
    overrides["seed"] = seed
    return replace(base, **overrides)


def _write_label_map(labeling, out_dir: Path):
    if labeling.k_actual > 65536:
        raise ValueError("label map export requires k_actual <= 65536")
    out_dir.mkdir(parents=True, exist_ok=True)
    Image.fromarray(labeling.labels.astype(np.uint16)).save(out_dir / "labels.png")
    sidecar = {
        "k_actual": labeling.k_actual,
        "centers": [
            {"x": c.x, "y": c.y, "intensity": [float(v) for v in c.intensity]}
            for c in labeling.centers
        ],
    }
    (out_dir / "labels.json").write_text(json.dumps(sidecar, indent=1))


def cmd_synth(args) -> int:
    seed = resolve_seed(args.seed)
    spec = PhantomSpec(width=args.width, height=args.height, noise_sigma=args.noise_sigma)
    index = generate_dataset(
        n=args.n, spec=spec, anomaly_fraction=args.anomaly_fraction,
        seed=seed, out_dir=args.out, jobs=resolve_jobs(args.jobs),
    )
    print(index)
    return 0


def cmd_segment(args) -> int:
    seed = resolve_seed(args.seed)
    config = _load_config(args, seed)
    sample = load_sample(args.manifest)
    image = select_channels(sample.image, ChannelMode(config.mode))
    if args.use_object_mask and sample.object_mask is not None:
        image, _ = apply_object_mask(image, sample.object_mask)
    net = load_net(args.features) if args.features else None
    if net is not None:
        config = replace(config, feature_source="learned")
    labeling = segment_image(image, config, net)
    _write_label_map(labeling, Path(args.out))
    print(f"{args.out}/labels.png k_actual={labeling.k_actual}")
    return 0


def _one_hot_targets(image, sample, offset):
    """3-class per-pixel targets: background / benign object / anomaly."""
    h, w = image.height, image.width
    classes = np.zeros((h, w), dtype=np.int64)
    if sample.object_mask is not None:
        obj = crop_mask(sample.object_mask, offset, w, h).bits
        classes[obj] = 1
    if sample.anomaly_mask is not None:
        anom = crop_mask(sample.anomaly_mask, offset, w, h).bits
        classes[anom] = 2
    return np.eye(3)[classes.ravel()]


def _center_crop(image, size: int):
    from .imaging import MultiChannelImage

    if image.width <= size and image.height <= size:
        return image, (0, 0)
    x0 = max((image.width - size) // 2, 0)
    y0 = max((image.height - size) // 2, 0)
    w = min(size, image.width)
    h = min(size, image.height)
    planes = tuple((role, p[y0 : y0 + h, x0 : x0 + w].copy()) for role, p in image.planes)
    return MultiChannelImage(width=w, height=h, planes=planes), (x0, y0)


def _pooled_dataset(entries, config, net):
    """Pool features + ground truth over manifest entries (fixed order)."""
    feats = []
    labels = []
    for entry in entries:
        sample = load_sample(entry["path"])
        image = select_channels(sample.image, ChannelMode(config.mode))
        offset = (0, 0)
        anomaly = sample.anomaly_mask
        if sample.object_mask is not None:
            image, offset = apply_object_mask(image, sample.object_mask)
            if anomaly is not None:
                anomaly = crop_mask(anomaly, offset, image.width, image.height)
        labeling = segment_image(image, config, net)
        lmap = None
        if net is not None and config.feature_source == "learned":
            out, _ = net.forward(image.stack().astype(np.float64), training=False)
            lmap = out.reshape(out.shape[0], -1).T
        feats.append(pool_superpixel_features(image, labeling, lmap))
        if anomaly is None:
            raise ValueError(f"{entry['path']} has no anomaly mask for training")
        labels.append(label_superpixels_from_mask(labeling, anomaly, config.tau))
    return np.concatenate(feats), np.concatenate(labels)


def cmd_train(args) -> int:
    seed = resolve_seed(args.seed)
    if args.epochs < 1:
        raise ValueError("epochs must be >= 1")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    index = load_index(args.data)
    train_entries, _ = split_dataset(index, SPLIT_RATIO, seed)
    opt = OptimizerState(
        learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size
    )
    modes = args.modes.split(",")
    for mode in modes:
        config = replace(_load_config(args, seed), mode=mode)
        net = None
        if args.train_features:
            config = replace(config, feature_source="learned")
            net = _train_features(args, train_entries, config, out, mode, seed)
        feats, labels = _pooled_dataset(train_entries, config, net)
        model, curve = train_classifier(
            feats, labels, opt=opt, epochs=args.epochs, seed=seed, kind=args.kind,
        )
        save_classifier(model, out / f"classifier_{mode}.xseg")
        with open(out / f"training_curve_{mode}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["epoch", "loss"])
            for i, loss in enumerate(curve):
                writer.writerow([i, f"{loss:.8f}"])
        (out / "config.json").write_text(json.dumps(config.to_dict(), indent=1, sort_keys=True))
        print(f"trained {mode}: {out / f'classifier_{mode}.xseg'}")
    return 0


def _train_features(args, train_entries, config, out, mode, seed):
    """Optional unrolled feature-net training on center crops."""
    samples = []
    for entry in train_entries[: args.feature_images]:
        sample = load_sample(entry["path"])
        image = select_channels(sample.image, ChannelMode(config.mode))
        offset = (0, 0)
        if sample.object_mask is not None:
            image, offset = apply_object_mask(image, sample.object_mask)
        image2, (cx, cy) = _center_crop(image, args.feature_crop)
        offset = (offset[0] + cx, offset[1] + cy)
        targets = _one_hot_targets(image2, sample, offset)
        samples.append((image2, targets))
    net = ConvFeatureNet(
        NetConfig(
            in_channels=len(samples[0][0].planes),
            learned_dim=args.learned_dim,
            channels=args.net_channels,
            seed=seed,
        )
    )
    softcfg = replace(config.soft_config(), k=max(args.feature_crop ** 2 // 256, 4))
    opt = OptimizerState(learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size)
    curve = train_feature_net(
        net, samples, softcfg, LossConfig(), opt, steps=args.feature_steps, seed=seed
    )
    save_net(net, out / f"features_{mode}.xseg", opt)
    with open(out / f"feature_curve_{mode}.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "l_rcon", "l_comp", "total"])
        for step, l_r, l_c, total in curve:
            writer.writerow([step, f"{l_r:.8f}", f"{l_c:.8f}", f"{total:.8f}"])
    return net


def cmd_eval(args) -> int:
    seed = resolve_seed(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_dir = Path(args.model)
    index = load_index(args.data)
    _, test_entries = split_dataset(index, SPLIT_RATIO, seed)
    # precedence: explicit --config, then the config the model was trained
    # with, then defaults; individual flags override either
    if args.config:
        base = PipelineConfig.from_dict(json.loads(Path(args.config).read_text()))
    elif (model_dir / "config.json").exists():
        base = PipelineConfig.from_dict(json.loads((model_dir / "config.json").read_text()))
    else:
        base = PipelineConfig()
    base = replace(base, seed=seed)
    for name in ("backend", "k", "m", "iterations", "v", "beta", "tau"):
        flag = getattr(args, name, None)
        if flag is not None:
            base = replace(base, **{name: flag})
    reports = []
    image_reports = []
    for mode in args.modes.split(","):
        config = replace(base, mode=mode)
        clf_path = model_dir / f"classifier_{mode}.xseg"
        if not clf_path.exists():
            raise FileNotFoundError(f"missing checkpoint: {clf_path}")
        classifier = load_classifier(clf_path)
        net_path = model_dir / f"features_{mode}.xseg"
        net = load_net(net_path) if net_path.exists() else None
        if net is not None:
            config = replace(config, feature_source="learned")
        paths = [e["path"] for e in test_entries]
        result, overlays = evaluate_dataset(
            paths, config, classifier, net,
            jobs=resolve_jobs(args.jobs), overlay_limit=args.overlays,
        )
        payload = report_to_json(result.superpixel)
        payload["image_level"] = report_to_json(result.image_level)
        (out / f"report_{mode}.json").write_text(json.dumps(payload, indent=1, sort_keys=True))
        reports.append(result.superpixel)
        image_reports.append(result.image_level)
        overlay_dir = out / "overlays" / mode
        overlay_dir.mkdir(parents=True, exist_ok=True)
        for i, (image, labeling, sp_labels) in enumerate(overlays):
            rgb = render_overlay(image, labeling, sp_labels)
            Image.fromarray(rgb).save(overlay_dir / f"{Path(paths[i]).name}.png")
            write_predictions_csv(overlay_dir / f"{Path(paths[i]).name}.csv", sp_labels)
    table = report_table(reports)
    table += "\n\nper-image roll-up\n" + report_table(image_reports)
    (out / "report_table.txt").write_text(table + "\n")
    print(table)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic phantom dataset")
    p.add_argument("--n", type=int, required=True, help="number of phantoms (>= 2)")
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=256)
    p.add_argument("--height", type=int, default=256)
    p.add_argument("--anomaly-fraction", type=float, default=0.5, dest="anomaly_fraction")
    p.add_argument("--noise-sigma", type=float, default=0.01, dest="noise_sigma")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None, help="default: available cores")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("segment", help="segment one manifest image")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--backend", choices=["hard_slic", "soft_slic"], default=None)
    p.add_argument("--mode", default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--m", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--v", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--features", default=None, help="feature-net checkpoint")
    p.add_argument("--use-object-mask", action="store_true", dest="use_object_mask")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_segment)

    p = sub.add_parser("train", help="train classifier (and optional feature net)")
    p.add_argument("--data", required=True, help="dataset dir or index.json")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--modes", default="hlz")
    p.add_argument("--backend", choices=["hard_slic", "soft_slic"], default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--m", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--v", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--kind", choices=["logistic", "mlp"], default="logistic")
    p.add_argument("--epochs", type=int, default=150)
    p.add_argument("--lr", type=float, default=0.0002)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--batch-size", type=int, default=64, dest="batch_size")
    p.add_argument("--train-features", action="store_true", dest="train_features")
    p.add_argument("--feature-steps", type=int, default=30, dest="feature_steps")
    p.add_argument("--feature-images", type=int, default=4, dest="feature_images")
    p.add_argument("--feature-crop", type=int, default=64, dest="feature_crop")
    p.add_argument("--learned-dim", type=int, default=3, dest="learned_dim")
    p.add_argument("--net-channels", type=int, default=16, dest="net_channels")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate the pipeline over the test split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True, help="directory with checkpoints")
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--modes", default="hlz")
    p.add_argument("--backend", choices=["hard_slic", "soft_slic"], default=None)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--m", type=float, default=None)
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--v", type=int, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--overlays", type=int, default=4)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--jobs", type=int, default=None, help="default: available cores")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and args.n < 2:
        parser.error("--n must be >= 2")
    if args.command == "train" and args.epochs < 1:
        parser.error("--epochs must be >= 1")
    try:
        return args.fn(args)
    except Exception as exc:  # runtime failure -> exit 1
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
