"""End-to-end orchestration: channels -> crop -> segment -> classify -> report.

run_pipeline composes the stage operations deterministically; dataset
evaluation aggregates per-superpixel confusion counts (the primary unit)
plus a per-image roll-up (an image counts as anomalous iff at least one
of its superpixels is classified anomalous).
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .classifier import (
    BinaryClassifier,
    SuperpixelLabel,
    classify_superpixels,
    label_superpixels_from_mask,
    pool_superpixel_features,
)
from .features import features_raw
from .imaging import (
    ChannelMode,
    MultiChannelImage,
    Sample,
    apply_object_mask,
    crop_mask,
    select_channels,
)
from .metrics import ConfusionCounts, EvalReport, compute_metrics
from .slic import Labeling, SlicConfig, grid_interval, segment_slic
from .softslic import SoftSlicConfig, harden, soft_slic_iterate


class PipelineStageError(RuntimeError):
    """A stage failure, tagged with the stage that raised it."""

    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage {stage}: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass(frozen=True)
class PipelineConfig:
    """Everything a segmentation + classification run depends on."""

    mode: str = "hlz"
    backend: str = "soft_slic"  # or "hard_slic"
    k: int = 200
    m: float = 2.0
    iterations: int = 10  # hard backend
    v: int = 10  # soft backend
    beta: float = 2.0
    min_region_fraction: float = 0.25
    feature_source: str = "raw"  # or "learned"
    tau: float = 0.5
    seed: int = 20257  # default experiment seed, see cli DEFAULT_SEED

    def __post_init__(self):
        ChannelMode(self.mode)
        if self.backend not in ("hard_slic", "soft_slic"):
            raise ValueError(f"unknown backend: {self.backend}")
        if self.feature_source not in ("raw", "learned"):
            raise ValueError(f"unknown feature source: {self.feature_source}")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must be in (0, 1]")

    def slic_config(self) -> SlicConfig:
        return SlicConfig(
            k=self.k, m=self.m, iterations=self.iterations,
            min_region_fraction=self.min_region_fraction,
        )

    def soft_config(self) -> SoftSlicConfig:
        return SoftSlicConfig(
            k=self.k, v=self.v, beta=self.beta, m=self.m,
            min_region_fraction=self.min_region_fraction,
        )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**data)


@dataclass(frozen=True)
class PipelineResult:
    labeling: Labeling
    sp_labels: list[SuperpixelLabel]
    report: EvalReport | None
    ground_truth: np.ndarray | None  # per-superpixel anomaly flags
    image: MultiChannelImage  # the selected/cropped image the stages ran on
    offset: tuple[int, int]


def segment_image(image, config: PipelineConfig, net=None) -> Labeling:
    """Run the configured segmentation backend on an already-selected image."""
    if config.backend == "hard_slic":
        return segment_slic(image, config.slic_config())
    s = grid_interval(image.width * image.height, config.k)
    if config.feature_source == "learned":
        if net is None:
            raise ValueError("learned feature source requires a feature net")
        from .features import features_learned

        fmap = features_learned(image, config.m, s, net, training=False)
    else:
        fmap = features_raw(image, config.m, s)
    assoc, _, _ = soft_slic_iterate(
        fmap.data, config.soft_config(), image.width, image.height
    )
    return harden(assoc, image, s, config.min_region_fraction)


def learned_map(image, config: PipelineConfig, net):
    """(N, learned_dim) inference-mode feature rows for pooling, or None."""
    if net is None or config.feature_source != "learned":
        return None
    out, _ = net.forward(image.stack().astype(np.float64), training=False)
    return out.reshape(out.shape[0], -1).T


def run_pipeline(
    sample: Sample,
    config: PipelineConfig,
    classifier: BinaryClassifier,
    net=None,
) -> PipelineResult:
    """Full deterministic pass over one sample.

    Metrics appear in the result only when the sample carries an anomaly
    mask. Stage failures surface as PipelineStageError tagged with the
    stage name.
    """

    def stage(name, fn, *args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except PipelineStageError:
            raise
        except Exception as exc:
            raise PipelineStageError(name, exc) from exc

    image = stage("select_channels", select_channels, sample.image, ChannelMode(config.mode))
    offset = (0, 0)
    anomaly_mask = sample.anomaly_mask
    if sample.object_mask is not None:
        image, offset = stage("mask_crop", apply_object_mask, image, sample.object_mask)
        if anomaly_mask is not None:
            anomaly_mask = crop_mask(anomaly_mask, offset, image.width, image.height)
    labeling = stage("segment", segment_image, image, config, net)
    lmap = stage("features", learned_map, image, config, net)
    feats = stage("pool", pool_superpixel_features, image, labeling, lmap)
    sp_labels = stage("classify", classify_superpixels, classifier, feats)
    report = None
    gt = None
    if anomaly_mask is not None:
        gt = stage("metrics", label_superpixels_from_mask, labeling, anomaly_mask, config.tau)
        pred = np.array([lab.value == "anomaly" for lab in sp_labels], dtype=bool)
        counts = ConfusionCounts(
            tp=int((gt & pred).sum()),
            fn=int((gt & ~pred).sum()),
            fp=int((~gt & pred).sum()),
            tn=int((~gt & ~pred).sum()),
        )
        report = stage("metrics", compute_metrics, counts, config.mode, classifier.kind)
    return PipelineResult(
        labeling=labeling, sp_labels=sp_labels, report=report,
        ground_truth=gt, image=image, offset=offset,
    )


def split_dataset(items: list, ratio: float, seed: int) -> tuple[list, list]:
    """Seeded shuffle, then split at floor(ratio * n), clamped so both
    halves are non-empty for n >= 2."""
    if not 0.0 < ratio < 1.0:
        raise ValueError("ratio must be in (0, 1)")
    n = len(items)
    if n < 2:
        raise ValueError("need at least 2 items to split")
    order = np.random.default_rng(seed).permutation(n)
    cut = min(max(int(ratio * n), 1), n - 1)
    train = [items[i] for i in order[:cut]]
    test = [items[i] for i in order[cut:]]
    return train, test


@dataclass
class DatasetEval:
    """Accumulated evaluation of one channel-mode variant over a dataset."""

    superpixel: EvalReport
    image_level: EvalReport
    per_image: list[ConfusionCounts] = field(default_factory=list)


def _eval_one(args) -> tuple:
    from .imaging import load_sample

    path, config, classifier, net, keep_overlay = args
    sample = load_sample(path)
    result = run_pipeline(sample, config, classifier, net)
    gt_any = bool(result.ground_truth.any()) if result.ground_truth is not None else False
    pred_any = any(lab.value == "anomaly" for lab in result.sp_labels)
    counts = result.report.counts if result.report else None
    overlay_payload = (result.image, result.labeling, result.sp_labels) if keep_overlay else None
    return counts, gt_any, pred_any, overlay_payload


def evaluate_dataset(
    paths: list[str | Path],
    config: PipelineConfig,
    classifier: BinaryClassifier,
    net=None,
    jobs: int = 1,
    overlay_limit: int = 0,
) -> tuple[DatasetEval, list]:
    """Aggregate superpixel- and image-level metrics over manifest paths.

    Results are a fixed-order reduction over the input order, so they do
    not depend on ``jobs``. Returns the evaluation plus overlay payloads
    for the first ``overlay_limit`` images.
    """
    tasks = [
        (str(p), config, classifier, net, i < overlay_limit) for i, p in enumerate(paths)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_eval_one, tasks))
    else:
        rows = [_eval_one(t) for t in tasks]
    total = ConfusionCounts(0, 0, 0, 0)
    img = {"tp": 0, "fn": 0, "fp": 0, "tn": 0}
    per_image = []
    overlays = []
    for counts, gt_any, pred_any, overlay_payload in rows:
        if counts is None:
            raise ValueError("evaluation requires ground-truth anomaly masks")
        per_image.append(counts)
        total = total + counts
        key = ("tp" if pred_any else "fn") if gt_any else ("fp" if pred_any else "tn")
        img[key] += 1
        if overlay_payload is not None:
            overlays.append(overlay_payload)
    sp_report = compute_metrics(total, config.mode, classifier.kind)
    img_report = compute_metrics(ConfusionCounts(**img), config.mode, classifier.kind)
    return DatasetEval(superpixel=sp_report, image_level=img_report, per_image=per_image), overlays


def load_index(path: str | Path) -> list[dict]:
    index_path = Path(path)
    if index_path.is_dir():
        index_path = index_path / "index.json"
    entries = json.loads(index_path.read_text())
    root = index_path.parent
    return [
        {"path": str(root / e["path"]), "anomalous": bool(e["anomalous"])} for e in entries
    ]
