"""Superpixel contour overlays: green = benign, red = anomaly."""

from __future__ import annotations

import numpy as np

from .classifier import SuperpixelLabel
from .imaging import MultiChannelImage
from .slic import Labeling

GREEN = np.array([0, 255, 0], dtype=np.uint8)
RED = np.array([255, 0, 0], dtype=np.uint8)


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbor of a different label, plus the image border."""
    h, w = labels.shape
    mask = np.zeros((h, w), dtype=bool)
    mask[0, :] = mask[-1, :] = True
    mask[:, 0] = mask[:, -1] = True
    horiz = labels[:, :-1] != labels[:, 1:]
    mask[:, :-1] |= horiz
    mask[:, 1:] |= horiz
    vert = labels[:-1, :] != labels[1:, :]
    mask[:-1, :] |= vert
    mask[1:, :] |= vert
    return mask


def render_overlay(
    image: MultiChannelImage,
    labeling: Labeling,
    labels: list[SuperpixelLabel],
) -> np.ndarray:
    """RGB overlay: first channel as grayscale base, colored contours on top."""
    h, w = labeling.labels.shape
    if (w, h) != (image.width, image.height):
        raise ValueError("labeling dimensions do not match image")
    if len(labels) != labeling.k_actual:
        raise ValueError("need one classification per superpixel")
    base = np.rint(image.planes[0][1].astype(np.float64) * 255.0).astype(np.uint8)
    rgb = np.repeat(base[:, :, None], 3, axis=2)
    contour = boundary_mask(labeling.labels)
    anomalous = np.array([lab.value == "anomaly" for lab in labels], dtype=bool)
    anomaly_px = anomalous[labeling.labels] & contour
    benign_px = contour & ~anomaly_px
    rgb[benign_px] = GREEN
    rgb[anomaly_px] = RED
    return rgb
