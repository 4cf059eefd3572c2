"""Synthetic dual-energy phantom generator with exact ground truth.

A phantom is a rounded-rectangle "electronics item" over a bright (air)
background, textured with a grid of sub-component blocks whose high/low
attenuation pairs come from a material palette. Anomaly blobs are discs
inserted fully inside the object with per-channel contrast offsets.

Channel construction (all deterministic in (spec, seed)):
  high/low  per-region attenuation + optional Gaussian noise, clamped to
            [0, 1] and quantized to the 16-bit grid
  z         quantize16(clamp(0.5 + (low - high), 0, 1)) of the quantized
            high/low planes, so z is bit-exactly recomputable after I/O
  pseudo    fixed colormap of (high, low - high): high drives luminance,
            the dual-energy contrast drives the hue blend; 8-bit

The object mask, anomaly mask and per-image manifest round-trip
bit-exactly through the imaging module.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy.ndimage import distance_transform_edt

from .imaging import (
    ChannelRole,
    MultiChannelImage,
    ObjectMask,
    normalize_plane,
    quantize_plane,
    save_manifest,
)

@dataclass(frozen=True)
class MaterialModel:
    """Per-region (mu_high, mu_low) attenuation pairs, all in [0, 1]."""

    background: tuple[float, float] = (0.95, 0.97)
    shell: tuple[float, float] = (0.20, 0.24)
    blocks: tuple[tuple[float, float], ...] = (
        (0.72, 0.74),
        (0.55, 0.53),
        (0.40, 0.45),
        (0.62, 0.60),
        (0.30, 0.34),
        (0.48, 0.54),
    )

    def __post_init__(self):
        for mu in (self.background, self.shell, *self.blocks):
            if not (0.0 <= mu[0] <= 1.0 and 0.0 <= mu[1] <= 1.0):
                raise ValueError("attenuation pairs must lie in [0, 1]")


@dataclass(frozen=True)
class PhantomSpec:
    width: int = 256
    height: int = 256
    margin_frac: float = 0.12  # object inset from the border, per axis
    corner_radius_frac: float = 0.08  # of min(object width, height)
    block_grid: tuple[int, int] = (4, 5)  # rows, cols of sub-component blocks
    anomaly_count: tuple[int, int] = (1, 2)
    anomaly_radius: tuple[int, int] = (9, 16)
    anomaly_offset: tuple[float, float] = (-0.28, 0.06)  # added to (high, low)
    noise_sigma: float = 0.01
    materials: MaterialModel = MaterialModel()
    shell_px: int | None = None  # case thickness; None = width/24, min 3

    def __post_init__(self):
        if self.width < 16 or self.height < 16:
            raise ValueError("phantom must be at least 16x16")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.anomaly_count[0] > self.anomaly_count[1] or self.anomaly_count[0] < 0:
            raise ValueError("invalid anomaly count range")
        if self.anomaly_radius[0] > self.anomaly_radius[1] or self.anomaly_radius[0] < 1:
            raise ValueError("invalid anomaly radius range")


@dataclass(frozen=True)
class Phantom:
    image: MultiChannelImage
    object_mask: ObjectMask
    anomaly_mask: ObjectMask


def effective_z_plane(high: np.ndarray, low: np.ndarray) -> np.ndarray:
    """The z channel as stored: quantized monotone dual-energy contrast."""
    z = np.clip(0.5 + (low.astype(np.float64) - high.astype(np.float64)), 0.0, 1.0)
    return normalize_plane(quantize_plane(z, 16), 16)


def pseudo_planes(high: np.ndarray, low: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Fixed pseudo-colour lookup: luminance from high, hue from low-high."""
    h = high.astype(np.float64)
    c = np.clip(0.5 + (low.astype(np.float64) - h), 0.0, 1.0)
    r = h * (1.0 - 0.6 * c)
    g = h * (0.7 + 0.3 * (1.0 - np.abs(2.0 * c - 1.0)))
    b = h * (0.4 + 0.6 * c)
    return tuple(normalize_plane(quantize_plane(p, 8), 8) for p in (r, g, b))


def _rounded_rect_mask(width, height, x0, y0, x1, y1, radius) -> np.ndarray:
    xs = np.arange(width)[None, :]
    ys = np.arange(height)[:, None]
    inner_x = np.clip(xs, x0 + radius, x1 - radius)
    inner_y = np.clip(ys, y0 + radius, y1 - radius)
    d2 = (xs - inner_x) ** 2 + (ys - inner_y) ** 2
    box = (xs >= x0) & (xs <= x1) & (ys >= y0) & (ys <= y1)
    return box & (d2 <= radius * radius)


def generate_phantom(spec: PhantomSpec, seed: int) -> Phantom:
    """Deterministic phantom for (spec, seed)."""
    rng = np.random.default_rng(seed)
    w, h = spec.width, spec.height
    mx = int(spec.margin_frac * w)
    my = int(spec.margin_frac * h)
    # jitter the object extent a little so items differ across the dataset
    x0 = mx + int(rng.integers(0, max(mx // 2, 1)))
    y0 = my + int(rng.integers(0, max(my // 2, 1)))
    x1 = w - 1 - mx - int(rng.integers(0, max(mx // 2, 1)))
    y1 = h - 1 - my - int(rng.integers(0, max(my // 2, 1)))
    radius = int(spec.corner_radius_frac * min(x1 - x0, y1 - y0))
    obj = _rounded_rect_mask(w, h, x0, y0, x1, y1, radius)

    shell_px = spec.shell_px if spec.shell_px is not None else max(3, (x1 - x0) // 24)
    interior = _rounded_rect_mask(
        w, h, x0 + shell_px, y0 + shell_px, x1 - shell_px, y1 - shell_px, max(radius - shell_px, 0)
    )

    mats = spec.materials
    high = np.full((h, w), mats.background[0])
    low = np.full((h, w), mats.background[1])
    high[obj] = mats.shell[0]
    low[obj] = mats.shell[1]

    rows, cols = spec.block_grid
    ys_edges = np.linspace(y0 + shell_px, y1 - shell_px + 1, rows + 1).astype(int)
    xs_edges = np.linspace(x0 + shell_px, x1 - shell_px + 1, cols + 1).astype(int)
    for r in range(rows):
        for c in range(cols):
            mu = mats.blocks[int(rng.integers(0, len(mats.blocks)))]
            block = np.zeros((h, w), dtype=bool)
            block[ys_edges[r] : ys_edges[r + 1], xs_edges[c] : xs_edges[c + 1]] = True
            block &= interior
            high[block] = mu[0]
            low[block] = mu[1]

    anomaly = np.zeros((h, w), dtype=bool)
    count = int(rng.integers(spec.anomaly_count[0], spec.anomaly_count[1] + 1))
    if count > 0:
        # place discs fully inside the case interior: centers where the
        # distance to anything non-interior exceeds the radius
        dist = distance_transform_edt(interior)
        for _ in range(count):
            r_blob = int(rng.integers(spec.anomaly_radius[0], spec.anomaly_radius[1] + 1))
            eligible = np.flatnonzero(dist.ravel() > r_blob + 1)
            if eligible.size == 0:
                raise ValueError("anomaly blob does not fit inside the object interior")
            pick = int(eligible[int(rng.integers(0, eligible.size))])
            cy, cx = divmod(pick, w)
            xs = np.arange(w)[None, :]
            ys = np.arange(h)[:, None]
            disc = (xs - cx) ** 2 + (ys - cy) ** 2 <= r_blob * r_blob
            anomaly |= disc
        high = np.where(anomaly, high + spec.anomaly_offset[0], high)
        low = np.where(anomaly, low + spec.anomaly_offset[1], low)

    if spec.noise_sigma > 0:
        high = high + rng.normal(0.0, spec.noise_sigma, size=(h, w))
        low = low + rng.normal(0.0, spec.noise_sigma, size=(h, w))

    high = normalize_plane(quantize_plane(np.clip(high, 0.0, 1.0), 16), 16)
    low = normalize_plane(quantize_plane(np.clip(low, 0.0, 1.0), 16), 16)
    z = effective_z_plane(high, low)
    pr, pg, pb = pseudo_planes(high, low)
    image = MultiChannelImage(
        width=w,
        height=h,
        planes=(
            (ChannelRole.HIGH, high),
            (ChannelRole.LOW, low),
            (ChannelRole.EFFECTIVE_Z, z),
            (ChannelRole.PSEUDO_R, pr),
            (ChannelRole.PSEUDO_G, pg),
            (ChannelRole.PSEUDO_B, pb),
        ),
    )
    return Phantom(
        image=image,
        object_mask=ObjectMask(width=w, height=h, bits=obj),
        anomaly_mask=ObjectMask(width=w, height=h, bits=anomaly),
    )


PHANTOM_BIT_DEPTHS = {
    ChannelRole.HIGH: 16,
    ChannelRole.LOW: 16,
    ChannelRole.EFFECTIVE_Z: 16,
    ChannelRole.PSEUDO_R: 8,
    ChannelRole.PSEUDO_G: 8,
    ChannelRole.PSEUDO_B: 8,
}


def _spec_for(spec: PhantomSpec, anomalous: bool) -> PhantomSpec:
    if anomalous:
        lo, hi = spec.anomaly_count
        return replace(spec, anomaly_count=(max(lo, 1), max(hi, 1)))
    return replace(spec, anomaly_count=(0, 0))


def _write_one(args) -> dict:
    spec, seed, anomalous, out_dir, name = args
    phantom = generate_phantom(_spec_for(spec, anomalous), seed)
    save_manifest(
        phantom.image,
        Path(out_dir) / name,
        bit_depths=PHANTOM_BIT_DEPTHS,
        object_mask=phantom.object_mask,
        anomaly_mask=phantom.anomaly_mask,
    )
    return {"path": name, "anomalous": bool(anomalous)}


def generate_dataset(
    n: int,
    spec: PhantomSpec,
    anomaly_fraction: float,
    seed: int,
    out_dir: str | Path,
    jobs: int = 1,
) -> Path:
    """Write n phantom manifest directories plus an index.json.

    round(n * anomaly_fraction) phantoms contain anomalies. Per-image
    seeds are seed + index, so output bytes are independent of ``jobs``.
    """
    if n < 2:
        raise ValueError("n must be >= 2")
    if not 0.0 <= anomaly_fraction <= 1.0:
        raise ValueError("anomaly_fraction must be in [0, 1]")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_anom = int(round(n * anomaly_fraction))
    tasks = [
        (spec, seed + i, i < n_anom, str(out), f"phantom_{i:04d}")
        for i in range(n)
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(_write_one, tasks))
    else:
        entries = [_write_one(t) for t in tasks]
    index_path = out / "index.json"
    index_path.write_text(json.dumps(entries, indent=1))
    return index_path
