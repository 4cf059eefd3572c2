"""Per-pixel feature maps feeding the soft clustering.

The raw feature space reproduces the hard SLIC distance: the vector
[(m/S)*x, (m/S)*y, I_1..I_C] has squared Euclidean distance
d_c^2 + (d_s/S)^2 * m^2. A trained ConvFeatureNet appends learned
channels after the positional and intensity ones.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import MultiChannelImage


@dataclass(frozen=True)
class FeatureMap:
    """Flat raster-order (N, dim) float feature matrix.

    Layout: columns [0:2] scaled position, [2:2+n_intensity] raw channel
    intensities, the rest learned features (possibly none).
    """

    width: int
    height: int
    n_intensity: int
    data: np.ndarray

    def __post_init__(self):
        if self.data.shape[0] != self.width * self.height:
            raise ValueError("feature rows must match pixel count")
        if self.dim < 3:
            raise ValueError("need at least two positional and one intensity column")
        if not np.isfinite(self.data).all():
            raise ValueError("non-finite feature values")

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    @property
    def learned(self) -> np.ndarray:
        return self.data[:, 2 + self.n_intensity :]


def pixel_positions(width: int, height: int) -> np.ndarray:
    """(N, 2) array of raw integer (x, y) pixel coordinates, raster order."""
    xs = np.tile(np.arange(width, dtype=np.float64), height)
    ys = np.repeat(np.arange(height, dtype=np.float64), width)
    return np.stack([xs, ys], axis=1)


def scaled_positions(width: int, height: int, m: float, s: float) -> np.ndarray:
    return pixel_positions(width, height) * (m / s)


def features_raw(image: MultiChannelImage, m: float, s: float) -> FeatureMap:
    """SLIC-equivalent feature space: scaled position plus raw intensities."""
    if s <= 0 or m <= 0:
        raise ValueError("m and s must be > 0")
    pos = scaled_positions(image.width, image.height, m, s)
    intensities = image.stack().reshape(len(image.planes), -1).T.astype(np.float64)
    data = np.concatenate([pos, intensities], axis=1)
    return FeatureMap(width=image.width, height=image.height, n_intensity=len(image.planes), data=data)


def features_learned(
    image: MultiChannelImage,
    m: float,
    s: float,
    net,
    training: bool = False,
) -> FeatureMap:
    """Raw features extended with ConvFeatureNet output channels."""
    raw = features_raw(image, m, s)
    learned, _ = net.forward(image.stack().astype(np.float64), training=training)
    flat = learned.reshape(learned.shape[0], -1).T  # (N, learned_dim)
    data = np.concatenate([raw.data, flat], axis=1)
    return FeatureMap(width=image.width, height=image.height, n_intensity=len(image.planes), data=data)
