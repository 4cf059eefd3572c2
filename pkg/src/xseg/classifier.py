"""Per-superpixel feature pooling and the binary anomaly classifier.

Each superpixel is summarized by channel statistics (mean/std/min/max),
its relative size, its normalized centroid and optionally the mean of a
learned feature map. A lightweight classifier (logistic regression or a
one-hidden-layer MLP) maps those vectors to {anomaly, benign}, trained
with momentum SGD on class-weighted cross-entropy.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .checkpoint import load_manifest_json, load_tensors, save_manifest_json, save_tensors
from .imaging import MultiChannelImage, ObjectMask
from .slic import Labeling
from .train import OptimizerState


class TrainingError(RuntimeError):
    """Raised when classifier training diverges (NaN loss)."""


@dataclass(frozen=True)
class SuperpixelLabel:
    value: str  # "anomaly" | "benign"
    probability: float  # anomaly probability

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0 or not np.isfinite(self.probability):
            raise ValueError("probability must be finite in [0, 1]")


@dataclass
class BinaryClassifier:
    """Trained model plus the normalization frozen at fit time."""

    kind: str  # "logistic" | "mlp"
    hidden: int
    weights: dict[str, np.ndarray]
    norm_mean: np.ndarray
    norm_std: np.ndarray

    @property
    def input_dim(self) -> int:
        return self.norm_mean.shape[0]


def pool_superpixel_features(
    image: MultiChannelImage,
    labeling: Labeling,
    learned: np.ndarray | None = None,
) -> np.ndarray:
    """One feature vector per superpixel id, ordered by id.

    Layout: per channel [mean, std, min, max] (population std), then
    pixel_count / S^2 with S^2 = N / k_actual, then centroid (x, y)
    normalized to [0, 1], then the mean learned-feature vector when a
    (N, D) learned map is supplied.
    """
    h, w = labeling.labels.shape
    if (w, h) != (image.width, image.height):
        raise ValueError("labeling dimensions do not match image")
    k = labeling.k_actual
    flat = labeling.labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    cols = []
    for _, plane in image.planes:
        vals = plane.ravel().astype(np.float64)
        mean = np.bincount(flat, weights=vals, minlength=k) / counts
        sq = np.bincount(flat, weights=vals * vals, minlength=k) / counts
        std = np.sqrt(np.maximum(sq - mean * mean, 0.0))
        mn = np.full(k, np.inf)
        mx = np.full(k, -np.inf)
        np.minimum.at(mn, flat, vals)
        np.maximum.at(mx, flat, vals)
        cols.extend([mean, std, mn, mx])
    s_sq = (w * h) / k
    cols.append(counts / s_sq)
    xs = np.tile(np.arange(w, dtype=np.float64), h)
    ys = np.repeat(np.arange(h, dtype=np.float64), w)
    cols.append(np.bincount(flat, weights=xs, minlength=k) / counts / max(w - 1, 1))
    cols.append(np.bincount(flat, weights=ys, minlength=k) / counts / max(h - 1, 1))
    if learned is not None:
        if learned.shape[0] != w * h:
            raise ValueError("learned feature rows must match pixel count")
        for d in range(learned.shape[1]):
            cols.append(np.bincount(flat, weights=learned[:, d].astype(np.float64), minlength=k) / counts)
    return np.stack(cols, axis=1)


def label_superpixels_from_mask(
    labeling: Labeling, anomaly_mask: ObjectMask, tau: float = 0.5
) -> np.ndarray:
    """Ground truth per superpixel: anomaly iff overlap fraction >= tau."""
    if (anomaly_mask.width, anomaly_mask.height) != (
        labeling.labels.shape[1],
        labeling.labels.shape[0],
    ):
        raise ValueError("mask dimensions do not match labeling")
    k = labeling.k_actual
    flat = labeling.labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    inside = np.bincount(flat, weights=anomaly_mask.bits.ravel().astype(np.float64), minlength=k)
    return inside / counts >= tau


def _init_weights(kind: str, dim: int, hidden: int, seed: int) -> dict[str, np.ndarray]:
    if kind == "logistic":
        return {"w": np.zeros(dim), "b": np.zeros(1)}
    if kind == "mlp":
        rng = np.random.default_rng(seed)
        bound1 = np.sqrt(6.0 / (dim + hidden))
        bound2 = np.sqrt(6.0 / (hidden + 1))
        return {
            "w1": rng.uniform(-bound1, bound1, (dim, hidden)),
            "b1": np.zeros(hidden),
            "w2": rng.uniform(-bound2, bound2, hidden),
            "b2": np.zeros(1),
        }
    raise ValueError(f"unknown classifier kind: {kind}")


def _scores(weights: dict[str, np.ndarray], kind: str, x: np.ndarray):
    if kind == "logistic":
        return x @ weights["w"] + weights["b"][0], None
    hidden_pre = x @ weights["w1"] + weights["b1"]
    hidden_act = np.maximum(hidden_pre, 0.0)
    return hidden_act @ weights["w2"] + weights["b2"][0], (hidden_pre, hidden_act)


def _score_gradients(weights, kind, x, dscore, cache):
    if kind == "logistic":
        return {"w": x.T @ dscore, "b": np.array([dscore.sum()])}
    hidden_pre, hidden_act = cache
    dh = np.outer(dscore, weights["w2"]) * (hidden_pre > 0)
    return {
        "w1": x.T @ dh,
        "b1": dh.sum(axis=0),
        "w2": hidden_act.T @ dscore,
        "b2": np.array([dscore.sum()]),
    }


def train_classifier(
    features: np.ndarray,
    labels: np.ndarray,
    opt: OptimizerState | None = None,
    epochs: int = 200,
    seed: int = 0,
    kind: str = "logistic",
    hidden: int = 32,
    class_weighted: bool = True,
) -> tuple[BinaryClassifier, list[float]]:
    """Fit the classifier with momentum SGD on weighted cross-entropy.

    Inputs are standardized with training-set statistics which are frozen
    into the model. Minibatches are reshuffled per epoch from a seeded
    generator, so training is bit-reproducible for a fixed seed. Returns
    the model and the per-epoch mean loss curve.

    Raises ValueError on single-class data and TrainingError (with the
    offending batch index) if the loss goes non-finite.
    """
    opt = opt or OptimizerState()
    if epochs < 1:
        raise ValueError("epochs must be >= 1")
    x = np.asarray(features, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    n = x.shape[0]
    n_pos = int(y.sum())
    if n_pos == 0 or n_pos == n:
        raise ValueError("training data must contain both classes")
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std = np.where(std < 1e-12, 1.0, std)
    xn = (x - mean) / std
    if class_weighted:
        w_pos = n / (2.0 * n_pos)
        w_neg = n / (2.0 * (n - n_pos))
    else:
        w_pos = w_neg = 1.0
    sample_w = np.where(y > 0.5, w_pos, w_neg)
    weights = _init_weights(kind, x.shape[1], hidden, seed)
    state = OptimizerState(
        learning_rate=opt.learning_rate, momentum=opt.momentum, batch_size=opt.batch_size
    )
    rng = np.random.default_rng(seed)
    curve = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for bi, start in enumerate(range(0, n, opt.batch_size)):
            idx = order[start : start + opt.batch_size]
            xb, yb, wb = xn[idx], y[idx], sample_w[idx]
            score, cache = _scores(weights, kind, xb)
            p = expit(score)
            # weighted BCE, mean over the batch
            ce = -(yb * np.log(p + 1e-12) + (1 - yb) * np.log(1 - p + 1e-12))
            loss = float((wb * ce).mean())
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {bi}")
            epoch_loss += loss * len(idx)
            dscore = wb * (p - yb) / len(idx)
            grads = _score_gradients(weights, kind, xb, dscore, cache)
            for name in sorted(weights):
                vel = state.velocity.get(name)
                if vel is None:
                    vel = np.zeros_like(weights[name])
                vel = state.momentum * vel + grads[name]
                state.velocity[name] = vel
                weights[name] = weights[name] - state.learning_rate * vel
        curve.append(epoch_loss / n)
    model = BinaryClassifier(
        kind=kind, hidden=hidden if kind == "mlp" else 0,
        weights=weights, norm_mean=mean, norm_std=std,
    )
    return model, curve


def classify_superpixels(model: BinaryClassifier, features: np.ndarray) -> list[SuperpixelLabel]:
    """Anomaly probability per superpixel; anomaly iff probability >= 0.5."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"expected (n, {model.input_dim}) features, got {x.shape}")
    xn = (x - model.norm_mean) / model.norm_std
    score, _ = _scores(model.weights, model.kind, xn)
    probs = expit(score)
    return [
        SuperpixelLabel(value="anomaly" if p >= 0.5 else "benign", probability=float(p))
        for p in probs
    ]


def save_classifier(model: BinaryClassifier, path: str | Path):
    tensors = {f"w.{k}": v for k, v in model.weights.items()}
    tensors["norm.mean"] = model.norm_mean
    tensors["norm.std"] = model.norm_std
    save_manifest_json(
        Path(path).with_suffix(".json"),
        {"kind": "classifier", "model": model.kind, "hidden": model.hidden,
         "input_dim": model.input_dim},
    )
    save_tensors(path, tensors)


def load_classifier(path: str | Path) -> BinaryClassifier:
    manifest = load_manifest_json(Path(path).with_suffix(".json"))
    if manifest.get("kind") != "classifier":
        raise ValueError(f"{path} is not a classifier checkpoint")
    tensors = load_tensors(path)
    weights = {
        name[2:]: arr.astype(np.float64)
        for name, arr in tensors.items()
        if name.startswith("w.")
    }
    return BinaryClassifier(
        kind=manifest["model"],
        hidden=int(manifest["hidden"]),
        weights=weights,
        norm_mean=tensors["norm.mean"].astype(np.float64),
        norm_std=tensors["norm.std"].astype(np.float64),
    )


def write_predictions_csv(path: str | Path, labels: list[SuperpixelLabel]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["superpixel_id", "probability", "label"])
        for i, lab in enumerate(labels):
            writer.writerow([i, f"{lab.probability:.6f}", lab.value])
