"""Hard SLIC over-segmentation.

Grid seeding, gradient-based seed perturbation, size-aware distance,
windowed k-means-style iteration and connectivity enforcement. All
kernels are deterministic: ties break toward the lowest center index or
raster order, and reductions run in a fixed order.

Position convention: a pixel's coordinates are its integer (x, y) index;
a fractional position maps to the pixel containing it via floor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

from .imaging import MultiChannelImage


@dataclass(frozen=True)
class SlicConfig:
    k: int
    m: float = 10.0
    iterations: int = 10
    min_region_fraction: float = 0.25

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.m <= 0:
            raise ValueError("m must be > 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.min_region_fraction <= 1:
            raise ValueError("min_region_fraction must be in (0, 1]")


@dataclass(frozen=True)
class Center:
    x: float
    y: float
    intensity: np.ndarray  # per-channel mean, shape (C,)


@dataclass(frozen=True)
class Labeling:
    """Hard segmentation: dense per-pixel superpixel ids plus centers."""

    labels: np.ndarray  # (H, W) int32, values in [0, k_actual)
    k_actual: int
    centers: tuple[Center, ...]

    def __post_init__(self):
        counts = np.bincount(self.labels.ravel(), minlength=self.k_actual)
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.k_actual):
            raise ValueError("label id out of range")
        if counts.size != self.k_actual or (counts == 0).any():
            raise ValueError("label ids must be dense (every id occurs)")
        if len(self.centers) != self.k_actual:
            raise ValueError("one center required per superpixel")
        self.labels.setflags(write=False)


def grid_interval(n_pixels: int, k: int) -> float:
    """Grid spacing S = sqrt(N/K), the expected superpixel side length."""
    if k < 1 or n_pixels < k:
        raise ValueError("need 1 <= k <= pixel count")
    return math.sqrt(n_pixels / k)


def grid_shape(width: int, height: int, k: int) -> tuple[int, int]:
    """Seed grid dimensions (nx, ny) for a requested superpixel count."""
    s = grid_interval(width * height, k)
    return max(1, round(width / s)), max(1, round(height / s))


def _sample_pixel(x: float, y: float, width: int, height: int) -> tuple[int, int]:
    return min(int(x), width - 1), min(int(y), height - 1)


def init_centers_grid(image: MultiChannelImage, k: int) -> list[Center]:
    """Seed centers on a regular grid, offset by half a cell.

    Intensity is sampled at the pixel containing each seed. The returned
    count nx*ny becomes the working superpixel count.
    """
    nx, ny = grid_shape(image.width, image.height, k)
    cell_w = image.width / nx
    cell_h = image.height / ny
    stack = image.stack()
    centers = []
    for iy in range(ny):
        for ix in range(nx):
            cx = (ix + 0.5) * cell_w
            cy = (iy + 0.5) * cell_h
            px, py = _sample_pixel(cx, cy, image.width, image.height)
            centers.append(Center(x=cx, y=cy, intensity=stack[:, py, px].astype(np.float64)))
    return centers


def _gradient_map(image: MultiChannelImage) -> np.ndarray:
    """G(x,y) = sum over channels of squared central differences (edge-replicated)."""
    stack = image.stack().astype(np.float64)
    padded = np.pad(stack, ((0, 0), (1, 1), (1, 1)), mode="edge")
    dx = padded[:, 1:-1, 2:] - padded[:, 1:-1, :-2]
    dy = padded[:, 2:, 1:-1] - padded[:, :-2, 1:-1]
    return (dx * dx).sum(axis=0) + (dy * dy).sum(axis=0)


def perturb_to_min_gradient(centers: list[Center], image: MultiChannelImage) -> list[Center]:
    """Move each seed to the lowest-gradient pixel in its 3x3 neighborhood.

    Ties keep the original position; among other tied candidates the
    smallest (y, x) wins. A moved seed resamples its intensity.
    """
    grad = _gradient_map(image)
    stack = image.stack()
    out = []
    for c in centers:
        px, py = _sample_pixel(c.x, c.y, image.width, image.height)
        best = grad[py, px]
        best_xy = None  # None = keep original
        for ny in range(max(0, py - 1), min(image.height, py + 2)):
            for nx in range(max(0, px - 1), min(image.width, px + 2)):
                g = grad[ny, nx]
                if g < best:
                    best = g
                    best_xy = (nx, ny)
        if best_xy is None:
            out.append(c)
        else:
            nx, ny = best_xy
            out.append(Center(x=float(nx), y=float(ny), intensity=stack[:, ny, nx].astype(np.float64)))
    return out


def slic_distance(
    position: tuple[float, float],
    intensity: np.ndarray,
    center: Center,
    s: float,
    m: float,
) -> float:
    """Size-aware distance D = sqrt(d_c^2 + (d_s/S)^2 * m^2)."""
    d_c2 = float(np.sum((np.asarray(intensity, dtype=np.float64) - center.intensity) ** 2))
    d_s2 = (position[0] - center.x) ** 2 + (position[1] - center.y) ** 2
    return math.sqrt(d_c2 + d_s2 / (s * s) * m * m)


def assign_pixels(
    image: MultiChannelImage, centers: list[Center], s: float, m: float
) -> np.ndarray:
    """Label each pixel with its minimum-D center, searching 2Sx2S windows.

    A center is a candidate for pixel p iff |c.x - p.x| <= S and
    |c.y - p.y| <= S. Pixels covered by no window fall back to a global
    nearest-center search. Ties go to the lowest center index.
    """
    if not centers:
        raise ValueError("centers must be non-empty")
    h, w = image.height, image.width
    stack = image.stack().astype(np.float64)
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    weight = (m / s) ** 2
    best = np.full((h, w), np.inf)
    labels = np.full((h, w), -1, dtype=np.int32)
    for k, c in enumerate(centers):
        x0 = max(0, math.ceil(c.x - s))
        x1 = min(w - 1, math.floor(c.x + s))
        y0 = max(0, math.ceil(c.y - s))
        y1 = min(h - 1, math.floor(c.y + s))
        if x0 > x1 or y0 > y1:
            continue
        win = stack[:, y0 : y1 + 1, x0 : x1 + 1]
        diff = win - c.intensity[:, None, None]
        d2 = np.einsum("cij,cij->ij", diff, diff)
        d2 += weight * ((xs[x0 : x1 + 1][None, :] - c.x) ** 2 + (ys[y0 : y1 + 1][:, None] - c.y) ** 2)
        view_best = best[y0 : y1 + 1, x0 : x1 + 1]
        view_lab = labels[y0 : y1 + 1, x0 : x1 + 1]
        improved = d2 < view_best
        view_best[improved] = d2[improved]
        view_lab[improved] = k
    uncovered = labels < 0
    if uncovered.any():
        py, px = np.nonzero(uncovered)
        feats = stack[:, py, px].T  # (P, C)
        cint = np.stack([c.intensity for c in centers])  # (K, C)
        cpos = np.array([[c.x, c.y] for c in centers])  # (K, 2)
        d2 = ((feats[:, None, :] - cint[None, :, :]) ** 2).sum(axis=2)
        d2 += weight * (
            (px[:, None] - cpos[None, :, 0]) ** 2 + (py[:, None] - cpos[None, :, 1]) ** 2
        )
        labels[py, px] = np.argmin(d2, axis=1).astype(np.int32)
    return labels


def update_centers(
    image: MultiChannelImage,
    labels: np.ndarray,
    k: int,
    previous: list[Center] | None = None,
) -> list[Center]:
    """Recompute each center as the mean position/intensity of its pixels.

    A cluster with zero pixels keeps its previous center (required when
    iterating; recomputation from a dense labeling never hits it).
    """
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    h, w = image.height, image.width
    xs = np.tile(np.arange(w, dtype=np.float64), h)
    ys = np.repeat(np.arange(h, dtype=np.float64), w)
    sum_x = np.bincount(flat, weights=xs, minlength=k)
    sum_y = np.bincount(flat, weights=ys, minlength=k)
    sums_int = [
        np.bincount(flat, weights=plane.ravel().astype(np.float64), minlength=k)
        for _, plane in image.planes
    ]
    centers = []
    for j in range(k):
        if counts[j] == 0:
            if previous is None:
                raise ValueError(f"cluster {j} is empty and no previous center given")
            centers.append(previous[j])
            continue
        intensity = np.array([si[j] / counts[j] for si in sums_int])
        centers.append(Center(x=sum_x[j] / counts[j], y=sum_y[j] / counts[j], intensity=intensity))
    return centers


def slic_objective(
    image: MultiChannelImage, labels: np.ndarray, centers: list[Center], s: float, m: float
) -> float:
    """Sum over pixels of D(pixel, assigned center)^2; k-means diagnostic."""
    stack = image.stack().astype(np.float64)
    h, w = image.height, image.width
    xs = np.tile(np.arange(w, dtype=np.float64), h)
    ys = np.repeat(np.arange(h, dtype=np.float64), w)
    cint = np.stack([c.intensity for c in centers])
    cpos = np.array([[c.x, c.y] for c in centers])
    flat = labels.ravel()
    feats = stack.reshape(len(image.planes), -1).T
    diff = feats - cint[flat]
    d2 = (diff * diff).sum(axis=1)
    d2 += (m / s) ** 2 * ((xs - cpos[flat, 0]) ** 2 + (ys - cpos[flat, 1]) ** 2)
    return float(d2.sum())


def _connected_components_raster(labels: np.ndarray) -> tuple[int, np.ndarray]:
    """4-connected same-label components, numbered by first pixel in raster order."""
    h, w = labels.shape
    n = h * w
    flat = labels.ravel()
    idx = np.arange(n).reshape(h, w)
    edges_src = []
    edges_dst = []
    horiz = labels[:, :-1] == labels[:, 1:]
    edges_src.append(idx[:, :-1][horiz])
    edges_dst.append(idx[:, 1:][horiz])
    vert = labels[:-1, :] == labels[1:, :]
    edges_src.append(idx[:-1, :][vert])
    edges_dst.append(idx[1:, :][vert])
    src = np.concatenate(edges_src)
    dst = np.concatenate(edges_dst)
    graph = coo_matrix((np.ones(len(src), dtype=np.int8), (src, dst)), shape=(n, n))
    n_comp, comp = connected_components(graph, directed=False)
    # renumber so component id increases with the raster index of its first pixel
    first = np.full(n_comp, n, dtype=np.int64)
    np.minimum.at(first, comp, np.arange(n))
    rank = np.empty(n_comp, dtype=np.int64)
    rank[np.argsort(first, kind="stable")] = np.arange(n_comp)
    return n_comp, rank[comp]


def enforce_connectivity(
    labels: np.ndarray,
    image: MultiChannelImage,
    s: float,
    min_region_fraction: float,
) -> Labeling:
    """Absorb undersized 4-connected fragments into adjacent regions.

    Components with area < min_region_fraction * S^2 are merged into the
    largest adjacent component (current area; ties to the raster-earliest
    one), processing components in raster order of their first pixel.
    Surviving regions are renumbered 0..k_actual-1 by raster order of
    first occurrence and centers are recomputed from the result.
    """
    h, w = labels.shape
    n_comp, comp = _connected_components_raster(labels)
    comp2d = comp.reshape(h, w)
    area = np.bincount(comp, minlength=n_comp).astype(np.int64)
    first = np.full(n_comp, h * w, dtype=np.int64)
    np.minimum.at(first, comp, np.arange(h * w))

    # component adjacency from 4-neighbor pixel pairs with differing components
    pairs = []
    hdiff = comp2d[:, :-1] != comp2d[:, 1:]
    pairs.append(np.stack([comp2d[:, :-1][hdiff], comp2d[:, 1:][hdiff]], axis=1))
    vdiff = comp2d[:-1, :] != comp2d[1:, :]
    pairs.append(np.stack([comp2d[:-1, :][vdiff], comp2d[1:, :][vdiff]], axis=1))
    pairs = np.concatenate(pairs) if pairs else np.empty((0, 2), dtype=np.int64)
    adj: list[set[int]] = [set() for _ in range(n_comp)]
    for a, b in np.unique(pairs, axis=0):
        adj[int(a)].add(int(b))
        adj[int(b)].add(int(a))

    parent = list(range(n_comp))

    def find(c: int) -> int:
        while parent[c] != c:
            parent[c] = parent[parent[c]]
            c = parent[c]
        return c

    threshold = min_region_fraction * s * s
    cur_area = area.copy()
    cur_first = first.copy()
    for c in range(n_comp):
        if find(c) != c or cur_area[c] >= threshold:
            continue
        neighbor_roots = sorted({find(x) for x in adj[c]} - {c})
        if not neighbor_roots:
            continue  # nothing adjacent to absorb into
        target = max(neighbor_roots, key=lambda r: (cur_area[r], -cur_first[r]))
        parent[c] = target
        cur_area[target] += cur_area[c]
        cur_first[target] = min(cur_first[target], cur_first[c])
        adj[target].update(adj[c])

    roots = np.array([find(c) for c in range(n_comp)], dtype=np.int64)
    merged = roots[comp]
    uniq = np.unique(merged)
    first_of_root = np.full(uniq.max() + 1, h * w, dtype=np.int64)
    np.minimum.at(first_of_root, merged, np.arange(h * w))
    order = uniq[np.argsort(first_of_root[uniq], kind="stable")]
    remap = np.empty(uniq.max() + 1, dtype=np.int32)
    remap[order] = np.arange(len(order), dtype=np.int32)
    final = remap[merged].reshape(h, w)
    k_actual = len(order)
    centers = update_centers(image, final, k_actual)
    return Labeling(labels=final, k_actual=k_actual, centers=tuple(centers))


def segment_slic(image: MultiChannelImage, config: SlicConfig) -> Labeling:
    """Full hard-SLIC pipeline: seed, perturb, iterate, enforce connectivity."""
    n = image.width * image.height
    if config.k > n:
        raise ValueError("k exceeds pixel count")
    s = grid_interval(n, config.k)
    centers = perturb_to_min_gradient(init_centers_grid(image, config.k), image)
    labels = None
    for _ in range(config.iterations):
        labels = assign_pixels(image, centers, s, config.m)
        centers = update_centers(image, labels, len(centers), previous=centers)
    return enforce_connectivity(labels, image, s, config.min_region_fraction)
