"""Clustering losses over a soft association.

The reconstruction loss is the cross-entropy between per-pixel target
distributions and their pixel -> superpixel -> pixel reconstruction
through Q; the compactness loss is the mean squared positional error of
the same round trip applied to pixel coordinates. Total loss is
l_rcon + lambda * l_comp with lambda defaulting to 1e-4.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .softslic import (
    SoftAssociation,
    p2s_backward,
    pixel_to_superpixel,
    s2p_backward,
    soft_masses,
    superpixel_to_pixel,
)

LOG_EPS = 1e-10


@dataclass(frozen=True)
class LossConfig:
    lam: float = 1e-4  # compactness weight

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")


def _check_targets(targets: np.ndarray):
    if targets.ndim != 2:
        raise ValueError("targets must be (N, C)")
    if float(targets.min()) < 0.0 or np.abs(targets.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("invalid target distribution")


def _reconstruct(values: np.ndarray, assoc: SoftAssociation):
    sp = pixel_to_superpixel(values, assoc)
    return superpixel_to_pixel(sp, assoc), sp


def reconstruction_loss(targets: np.ndarray, assoc: SoftAssociation) -> float:
    """Cross-entropy of targets against their round trip through Q."""
    _check_targets(targets)
    recon, _ = _reconstruct(targets, assoc)
    n = targets.shape[0]
    return float(-(targets * np.log(recon + LOG_EPS)).sum() / n)


def reconstruction_loss_with_grad(
    targets: np.ndarray, assoc: SoftAssociation
) -> tuple[float, np.ndarray]:
    """Loss value plus its gradient w.r.t. the association matrix."""
    _check_targets(targets)
    t = targets.astype(np.float64, copy=False)
    recon, sp = _reconstruct(t, assoc)
    n = t.shape[0]
    value = float(-(t * np.log(recon + LOG_EPS)).sum() / n)
    drecon = -t / (recon + LOG_EPS) / n
    dsp, dq_s2p = s2p_backward(drecon, sp, assoc)
    _, dq_p2s = p2s_backward(dsp, t, assoc, sp, soft_masses(assoc))
    return value, dq_s2p + dq_p2s


def compactness_loss(assoc: SoftAssociation, positions: np.ndarray) -> float:
    """Mean squared error of pixel positions against their Q round trip."""
    recon, _ = _reconstruct(positions, assoc)
    diff = positions.astype(np.float64, copy=False) - recon
    return float((diff * diff).sum() / positions.shape[0])


def compactness_loss_with_grad(
    assoc: SoftAssociation, positions: np.ndarray
) -> tuple[float, np.ndarray]:
    pos = positions.astype(np.float64, copy=False)
    recon, sp = _reconstruct(pos, assoc)
    diff = pos - recon
    n = pos.shape[0]
    value = float((diff * diff).sum() / n)
    drecon = -2.0 * diff / n
    dsp, dq_s2p = s2p_backward(drecon, sp, assoc)
    _, dq_p2s = p2s_backward(dsp, pos, assoc, sp, soft_masses(assoc))
    return value, dq_s2p + dq_p2s


def total_loss(l_rcon: float, l_comp: float, config: LossConfig) -> float:
    if not (np.isfinite(l_rcon) and np.isfinite(l_comp)):
        raise ValueError("loss terms must be finite")
    return l_rcon + config.lam * l_comp
