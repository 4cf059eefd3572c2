"""Unrolled training of the feature network through the soft clustering.

One training step clusters an image's features, evaluates the
reconstruction + compactness losses on the final association, and
backpropagates through every soft iteration into the network parameters.
SGD with momentum (velocity = mu*velocity + grad; param -= lr*velocity)
applies the updates. grad_check verifies the whole chain against central
finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import load_manifest_json, load_tensors, save_manifest_json, save_tensors
from .features import features_raw, pixel_positions
from .imaging import MultiChannelImage
from .losses import (
    LossConfig,
    compactness_loss,
    compactness_loss_with_grad,
    reconstruction_loss,
    reconstruction_loss_with_grad,
    total_loss,
)
from .net import ConvFeatureNet, NetConfig
from .slic import grid_interval
from .softslic import SoftSlicConfig, build_candidate_map, soft_slic_backward, soft_slic_iterate


@dataclass
class OptimizerState:
    learning_rate: float = 0.0002
    momentum: float = 0.9
    batch_size: int = 64
    velocity: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def sgd_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState):
    """In-place momentum SGD update over every parameter tensor."""
    for name in sorted(params):
        grad = grads[name]
        if grad.shape != params[name].shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        vel = state.velocity.get(name)
        if vel is None:
            vel = np.zeros(params[name].shape, dtype=np.float64)
        vel = state.momentum * vel + grad.astype(np.float64, copy=False)
        state.velocity[name] = vel
        params[name] = (params[name].astype(np.float64) - state.learning_rate * vel).astype(
            params[name].dtype
        )


def _clustered_features(net, image, softcfg, training, update_stats, record):
    s = grid_interval(image.width * image.height, softcfg.k)
    raw = features_raw(image, softcfg.m, s)
    learned, net_cache = net.forward(
        image.stack().astype(np.float64), training=training, update_stats=update_stats
    )
    flat = learned.reshape(learned.shape[0], -1).T
    f = np.concatenate([raw.data, flat], axis=1)
    cand = build_candidate_map(image.width, image.height, softcfg.k)
    assoc, centers, tape = soft_slic_iterate(
        f, softcfg, image.width, image.height, cand, record=record, dtype=np.float64
    )
    return raw, net_cache, assoc, tape


def net_loss_parts(
    net: ConvFeatureNet,
    image: MultiChannelImage,
    softcfg: SoftSlicConfig,
    losscfg: LossConfig,
    targets: np.ndarray,
    training: bool = True,
) -> tuple[float, float, float]:
    """Forward-only (l_rcon, l_comp, total) without touching any state."""
    _, _, assoc, _ = _clustered_features(net, image, softcfg, training, False, record=False)
    pos = pixel_positions(image.width, image.height)
    l_r = reconstruction_loss(targets, assoc)
    l_c = compactness_loss(assoc, pos)
    return l_r, l_c, total_loss(l_r, l_c, losscfg)


def net_total_loss(
    net: ConvFeatureNet,
    image: MultiChannelImage,
    softcfg: SoftSlicConfig,
    losscfg: LossConfig,
    targets: np.ndarray,
    training: bool = True,
) -> float:
    """Forward-only total loss; the quantity finite differencing probes."""
    return net_loss_parts(net, image, softcfg, losscfg, targets, training)[2]


def loss_and_grads(
    net: ConvFeatureNet,
    image: MultiChannelImage,
    softcfg: SoftSlicConfig,
    losscfg: LossConfig,
    targets: np.ndarray,
    training: bool = True,
    update_stats: bool = False,
) -> tuple[float, tuple[float, float], dict[str, np.ndarray]]:
    """Total loss, its (l_rcon, l_comp) parts, and exact parameter gradients."""
    raw, net_cache, assoc, tape = _clustered_features(
        net, image, softcfg, training, update_stats, record=True
    )
    pos = pixel_positions(image.width, image.height)
    l_r, dq_r = reconstruction_loss_with_grad(targets, assoc)
    l_c, dq_c = compactness_loss_with_grad(assoc, pos)
    value = total_loss(l_r, l_c, losscfg)
    dq = dq_r + losscfg.lam * dq_c
    dfeat = soft_slic_backward(tape, dq)
    dlearned = dfeat[:, 2 + raw.n_intensity :]
    dlearned = np.ascontiguousarray(dlearned.T).reshape(-1, image.height, image.width)
    grads = net.backward(dlearned, net_cache)
    return value, (l_r, l_c), grads


def grad_check(
    net: ConvFeatureNet,
    image: MultiChannelImage,
    softcfg: SoftSlicConfig,
    losscfg: LossConfig,
    targets: np.ndarray,
    eps: float = 1e-3,
    samples_per_tensor: int = 3,
    seed: int = 0,
) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Probes a seeded sample of entries from every parameter tensor; the
    finite-difference step uses the actually-realized float32 parameter
    values so quantization does not bias the quotient.
    """
    if image.width > 16 or image.height > 16:
        raise ValueError("grad_check is desk-scale only (images up to 16x16)")
    _, _, grads = loss_and_grads(net, image, softcfg, losscfg, targets, training=True)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name in sorted(net.params):
        param = net.params[name]
        n = param.size
        idxs = rng.choice(n, size=min(samples_per_tensor, n), replace=False)
        for idx in idxs:
            orig = param.flat[idx]
            param.flat[idx] = orig + eps
            hi = float(param.flat[idx])
            loss_hi = net_total_loss(net, image, softcfg, losscfg, targets)
            param.flat[idx] = orig - eps
            lo = float(param.flat[idx])
            loss_lo = net_total_loss(net, image, softcfg, losscfg, targets)
            param.flat[idx] = orig
            fd = (loss_hi - loss_lo) / (hi - lo)
            analytic = float(grads[name].flat[idx])
            rel = abs(analytic - fd) / max(abs(analytic), abs(fd), 1e-8)
            worst = max(worst, rel)
    return worst


def train_feature_net(
    net: ConvFeatureNet,
    samples: list[tuple[MultiChannelImage, np.ndarray]],
    softcfg: SoftSlicConfig,
    losscfg: LossConfig,
    opt: OptimizerState,
    steps: int,
    seed: int = 0,
) -> list[tuple[int, float, float, float]]:
    """Run SGD steps over (image, targets) samples in seeded shuffled order.

    Returns the training curve as (step, l_rcon, l_comp, total) rows,
    including a step-0 evaluation before any update.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(samples))
    curve = []
    for step in range(steps):
        image, targets = samples[order[step % len(samples)]]
        value, (l_r, l_c), grads = loss_and_grads(
            net, image, softcfg, losscfg, targets, training=True, update_stats=True
        )
        curve.append((step, l_r, l_c, value))
        sgd_step(net.params, grads, opt)
    image, targets = samples[order[0]]
    l_r, l_c, value = net_loss_parts(net, image, softcfg, losscfg, targets)
    curve.append((steps, l_r, l_c, value))
    return curve


def reference_instance():
    """Frozen desk-scale instance for gradient verification.

    8x8 three-channel image, K=4, v=2, feature dim 8 (3 learned channels).
    The image/net seeds are pinned so the loss stays smooth within the
    +-1e-3 finite-difference probes (ReLU kinks and pool ties stay clear
    of the sampled parameters); the net uses 8 channels per block to keep
    full finite differencing affordable.
    """
    from .imaging import ChannelRole

    rng = np.random.default_rng(1)
    h = w = 8
    planes = tuple(
        (role, rng.random((h, w)).astype(np.float32))
        for role in (ChannelRole.HIGH, ChannelRole.LOW, ChannelRole.EFFECTIVE_Z)
    )
    image = MultiChannelImage(width=w, height=h, planes=planes)
    net = ConvFeatureNet(NetConfig(in_channels=3, learned_dim=3, channels=8, seed=200))
    softcfg = SoftSlicConfig(k=4, v=2, beta=1.0, m=10.0)
    losscfg = LossConfig(lam=1e-4)
    targets = np.eye(3)[rng.integers(0, 3, size=h * w)]
    return net, image, softcfg, losscfg, targets


# --- checkpointing ----------------------------------------------------------


def save_net(net: ConvFeatureNet, path: str | Path, opt: OptimizerState | None = None):
    tensors = dict(net.params)
    for name, arr in net.stats.items():
        tensors[f"stats.{name}"] = arr
    manifest = {
        "kind": "feature_net",
        "in_channels": net.config.in_channels,
        "learned_dim": net.config.learned_dim,
        "channels": net.config.channels,
        "bn_eps": net.config.bn_eps,
        "bn_momentum": net.config.bn_momentum,
        "seed": net.config.seed,
    }
    if opt is not None:
        for name, arr in opt.velocity.items():
            tensors[f"opt.v.{name}"] = arr
        manifest["optimizer"] = {
            "learning_rate": opt.learning_rate,
            "momentum": opt.momentum,
            "batch_size": opt.batch_size,
        }
    save_tensors(path, tensors)
    save_manifest_json(Path(path).with_suffix(".json"), manifest)


def load_net(path: str | Path) -> ConvFeatureNet:
    manifest = load_manifest_json(Path(path).with_suffix(".json"))
    if manifest.get("kind") != "feature_net":
        raise ValueError(f"{path} is not a feature-net checkpoint")
    config = NetConfig(
        in_channels=int(manifest["in_channels"]),
        learned_dim=int(manifest["learned_dim"]),
        channels=int(manifest["channels"]),
        bn_eps=float(manifest["bn_eps"]),
        bn_momentum=float(manifest["bn_momentum"]),
        seed=int(manifest["seed"]),
    )
    net = ConvFeatureNet(config)
    tensors = load_tensors(path)
    for name in net.params:
        net.params[name] = tensors[name].copy()
    for name in net.stats:
        net.stats[name] = tensors[f"stats.{name}"].astype(np.float64)
    return net
