"""Differentiable soft pixel-superpixel clustering.

Each pixel is softly associated with the 9 superpixels of its initial
grid cell's 3x3 neighborhood. Iterating soft assignment against soft
center updates gives a differentiable analogue of the hard windowed
k-means loop; hardening the final association recovers a Labeling.

All forward kernels are pure numpy over flat raster-order pixel arrays
(p = y*width + x). The module also provides exact reverse-mode gradients
of the whole unrolled iteration, recorded on a SoftSlicTape; the
training path runs these in float64.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .imaging import MultiChannelImage
from .slic import Labeling, enforce_connectivity, grid_shape

N_CANDIDATES = 9


@dataclass(frozen=True)
class SoftSlicConfig:
    k: int
    v: int = 10
    beta: float = 1.0
    m: float = 10.0
    min_region_fraction: float = 0.25

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.v < 1:
            raise ValueError("v must be >= 1")
        if self.beta <= 0:
            raise ValueError("beta must be > 0")
        if self.m <= 0:
            raise ValueError("m must be > 0")
        if not 0 < self.min_region_fraction <= 1:
            raise ValueError("min_region_fraction must be in (0, 1]")


@dataclass(frozen=True)
class CandidateMap:
    """Per-pixel candidate superpixel ids: own grid cell plus 8 neighbors.

    ids[p, 4] is always the pixel's own cell. Out-of-range neighbors are
    masked via valid[p, i] = False and carry a clamped id of 0.
    """

    width: int
    height: int
    nx: int
    ny: int
    ids: np.ndarray  # (N, 9) int32
    valid: np.ndarray  # (N, 9) bool

    @property
    def k(self) -> int:
        return self.nx * self.ny

    @property
    def n_pixels(self) -> int:
        return self.width * self.height


@dataclass(frozen=True)
class SoftAssociation:
    """Row-stochastic (N, 9) association matrix over candidate superpixels."""

    q: np.ndarray
    candidates: CandidateMap

    def __post_init__(self):
        if self.q.shape != (self.candidates.n_pixels, N_CANDIDATES):
            raise ValueError("association shape does not match candidate map")
        if float(self.q.min()) < 0.0:
            raise ValueError("association entries must be non-negative")
        sums = self.q.sum(axis=1, dtype=np.float64)
        if np.abs(sums - 1.0).max() > 1e-6:
            raise ValueError("association rows must sum to 1")


def build_candidate_map(width: int, height: int, k: int) -> CandidateMap:
    """Map every pixel to the 3x3 grid-cell neighborhood of its own cell."""
    nx, ny = grid_shape(width, height, k)
    cell_w = width / nx
    cell_h = height / ny
    cx = np.minimum((np.arange(width) / cell_w).astype(np.int64), nx - 1)
    cy = np.minimum((np.arange(height) / cell_h).astype(np.int64), ny - 1)
    cell_x = np.broadcast_to(cx[None, :], (height, width)).reshape(-1)
    cell_y = np.broadcast_to(cy[:, None], (height, width)).reshape(-1)
    offsets = [(dy, dx) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    ids = np.empty((width * height, N_CANDIDATES), dtype=np.int32)
    valid = np.empty((width * height, N_CANDIDATES), dtype=bool)
    for i, (dy, dx) in enumerate(offsets):
        gx = cell_x + dx
        gy = cell_y + dy
        ok = (gx >= 0) & (gx < nx) & (gy >= 0) & (gy < ny)
        ids[:, i] = np.where(ok, gy * nx + gx, 0).astype(np.int32)
        valid[:, i] = ok
    ids.setflags(write=False)
    valid.setflags(write=False)
    return CandidateMap(width=width, height=height, nx=nx, ny=ny, ids=ids, valid=valid)


def grid_seed_indices(width: int, height: int, k: int) -> np.ndarray:
    """Flat raster indices of the pixels containing each grid seed."""
    nx, ny = grid_shape(width, height, k)
    cell_w = width / nx
    cell_h = height / ny
    px = np.minimum(((np.arange(nx) + 0.5) * cell_w).astype(np.int64), width - 1)
    py = np.minimum(((np.arange(ny) + 0.5) * cell_h).astype(np.int64), height - 1)
    return (py[:, None] * width + px[None, :]).reshape(-1)


def _candidate_sqdist(features: np.ndarray, centers: np.ndarray, cand: CandidateMap) -> np.ndarray:
    diff = features[:, None, :] - centers[cand.ids]
    return np.einsum("pid,pid->pi", diff, diff)


def _masked_softmax(logits: np.ndarray, valid: np.ndarray) -> np.ndarray:
    shifted = np.where(valid, logits, -np.inf)
    shifted = shifted - shifted.max(axis=1, keepdims=True)
    e = np.where(valid, np.exp(shifted), 0.0)
    return e / e.sum(axis=1, keepdims=True)


def soft_assign(
    features: np.ndarray,
    centers: np.ndarray,
    candidates: CandidateMap,
    beta: float,
    dtype=np.float32,
) -> SoftAssociation:
    """Q[p,i] = softmax_i(-beta * ||f_p - c_cand(p,i)||^2) over valid slots.

    Computed in float64 with per-row max subtraction; stored as ``dtype``.
    """
    if not np.isfinite(features).all():
        raise ValueError("non-finite feature input")
    f64 = features.astype(np.float64, copy=False)
    c64 = centers.astype(np.float64, copy=False)
    q = _masked_softmax(-beta * _candidate_sqdist(f64, c64, candidates), candidates.valid)
    return SoftAssociation(q=q.astype(dtype), candidates=candidates)


def _scatter(values: np.ndarray, cand: CandidateMap) -> np.ndarray:
    """Sum (N, 9[, D]) slot values onto their candidate superpixels -> (K[, D])."""
    k = cand.k
    flat_ids = cand.ids.ravel()
    if values.ndim == 2:
        return np.bincount(flat_ids, weights=values.ravel(), minlength=k)
    out = np.empty((k, values.shape[2]), dtype=np.float64)
    for d in range(values.shape[2]):
        out[:, d] = np.bincount(flat_ids, weights=values[:, :, d].ravel(), minlength=k)
    return out


def soft_masses(assoc: SoftAssociation) -> np.ndarray:
    """Total association mass received by each superpixel."""
    return _scatter(assoc.q.astype(np.float64, copy=False), assoc.candidates)


def soft_update_centers(
    features: np.ndarray,
    assoc: SoftAssociation,
    previous: np.ndarray,
) -> np.ndarray:
    """Mass-weighted feature mean per superpixel; zero-mass keeps previous."""
    q = assoc.q.astype(np.float64, copy=False)
    f = features.astype(np.float64, copy=False)
    num = _scatter(q[:, :, None] * f[:, None, :], assoc.candidates)
    mass = _scatter(q, assoc.candidates)
    keep = mass == 0.0
    safe = np.where(keep, 1.0, mass)
    centers = num / safe[:, None]
    if keep.any():
        centers[keep] = previous[keep]
    return centers


def pixel_to_superpixel(values: np.ndarray, assoc: SoftAssociation) -> np.ndarray:
    """Column-normalized weighted average of per-pixel values -> (K, D).

    Superpixels receiving zero mass get the zero vector.
    """
    q = assoc.q.astype(np.float64, copy=False)
    x = values.astype(np.float64, copy=False)
    if x.ndim == 1:
        x = x[:, None]
    num = _scatter(q[:, :, None] * x[:, None, :], assoc.candidates)
    mass = _scatter(q, assoc.candidates)
    return num / np.where(mass == 0.0, 1.0, mass)[:, None]


def superpixel_to_pixel(sp_values: np.ndarray, assoc: SoftAssociation) -> np.ndarray:
    """Row-weighted scatter back to pixels: out_p = sum_i Q[p,i] * v[cand(p,i)]."""
    q = assoc.q.astype(np.float64, copy=False)
    v = sp_values.astype(np.float64, copy=False)
    if v.ndim == 1:
        v = v[:, None]
    gathered = np.where(assoc.candidates.valid[:, :, None], v[assoc.candidates.ids], 0.0)
    return np.einsum("pi,pid->pd", q, gathered)


@dataclass
class SoftSlicTape:
    """Recorded forward state of one unrolled soft clustering run."""

    features: np.ndarray  # (N, D) float64
    candidates: CandidateMap
    beta: float
    seed_idx: np.ndarray  # (K,) flat pixel index of each initial center
    centers: list[np.ndarray]  # c_0 .. c_v, each (K, D)
    qs: list[np.ndarray]  # q_1 .. q_v, each (N, 9)
    masses: list[np.ndarray]  # mass at update t=1..v, each (K,)


def soft_slic_iterate(
    features: np.ndarray,
    config: SoftSlicConfig,
    width: int,
    height: int,
    candidates: CandidateMap | None = None,
    record: bool = False,
    dtype=np.float32,
) -> tuple[SoftAssociation, np.ndarray, SoftSlicTape | None]:
    """Run v rounds of {soft_assign, soft_update_centers}.

    Centers are seeded with the feature vectors at the grid seed pixels.
    Returns the last round's association, the post-update centers, and,
    when ``record`` is set, the tape needed for unrolled backprop (in
    which case everything is kept in float64).
    """
    cand = candidates or build_candidate_map(width, height, config.k)
    if features.shape[0] != cand.n_pixels:
        raise ValueError("feature count does not match candidate map")
    work = np.float64 if record else dtype
    f = features.astype(np.float64, copy=False)
    seed_idx = grid_seed_indices(width, height, config.k)
    centers = f[seed_idx].copy()
    tape = SoftSlicTape(
        features=f, candidates=cand, beta=config.beta, seed_idx=seed_idx,
        centers=[centers], qs=[], masses=[],
    ) if record else None
    assoc = None
    for _ in range(config.v):
        assoc = soft_assign(f, centers, cand, config.beta, dtype=np.float64)
        q = assoc.q
        mass = _scatter(q, cand)
        centers = soft_update_centers(f, assoc, previous=centers)
        if tape is not None:
            tape.qs.append(q)
            tape.masses.append(mass)
            tape.centers.append(centers)
    if work != np.float64:
        assoc = SoftAssociation(q=assoc.q.astype(work), candidates=cand)
    return assoc, centers, tape


def harden(
    assoc: SoftAssociation,
    image: MultiChannelImage,
    s: float,
    min_region_fraction: float,
) -> Labeling:
    """Argmax readout of the association followed by connectivity cleanup.

    Ties resolve to the lowest superpixel id (candidate slots are stored
    in increasing-id order, so the first maximal slot wins).
    """
    cand = assoc.candidates
    slot = np.argmax(assoc.q, axis=1)
    labels = cand.ids[np.arange(cand.n_pixels), slot].astype(np.int32)
    labels = labels.reshape(cand.height, cand.width)
    return enforce_connectivity(labels, image, s, min_region_fraction)


# ---------------------------------------------------------------------------
# Reverse-mode gradients through the unrolled iteration.
# ---------------------------------------------------------------------------


def _assign_backward(
    dq: np.ndarray,
    q: np.ndarray,
    features: np.ndarray,
    centers: np.ndarray,
    cand: CandidateMap,
    beta: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop dL/dQ through one soft_assign -> (dL/df, dL/dc)."""
    # softmax backward: dlogit = q * (dq - sum_j dq_j q_j); masked slots have q = 0
    dl = q * (dq - np.einsum("pi,pi->p", dq, q)[:, None])
    dd2 = -beta * dl
    diff = features[:, None, :] - centers[cand.ids]
    diff[~cand.valid] = 0.0
    df = 2.0 * np.einsum("pi,pid->pd", dd2, diff)
    dc = -2.0 * _scatter(dd2[:, :, None] * diff, cand)
    return df, dc


def _update_backward(
    dc: np.ndarray,
    q: np.ndarray,
    features: np.ndarray,
    centers_out: np.ndarray,
    mass: np.ndarray,
    cand: CandidateMap,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backprop dL/dc through one soft_update_centers.

    Returns (dL/df, dL/dq, dL/dc_prev); the last term carries the
    pass-through gradient of zero-mass superpixels.
    """
    keep = mass == 0.0
    safe = np.where(keep, 1.0, mass)
    dc_eff = np.where(keep[:, None], 0.0, dc)
    scaled = dc_eff / safe[:, None]  # (K, D)
    gathered = scaled[cand.ids]  # (N, 9, D)
    gathered[~cand.valid] = 0.0
    # dq[p,i] = (f_p - c_k) . dc_k / m_k
    dq = np.einsum("pd,pid->pi", features, gathered) - np.einsum(
        "pid,pid->pi", centers_out[cand.ids], gathered
    )
    dq[~cand.valid] = 0.0
    df = np.einsum("pi,pid->pd", q, gathered)
    dc_prev = np.where(keep[:, None], dc, 0.0)
    return df, dq, dc_prev


def p2s_backward(
    dsp: np.ndarray,
    values: np.ndarray,
    assoc: SoftAssociation,
    sp_out: np.ndarray,
    mass: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through pixel_to_superpixel -> (dL/dvalues, dL/dQ)."""
    cand = assoc.candidates
    q = assoc.q.astype(np.float64, copy=False)
    keep = mass == 0.0
    safe = np.where(keep, 1.0, mass)
    scaled = np.where(keep[:, None], 0.0, dsp) / safe[:, None]
    gathered = scaled[cand.ids]
    gathered[~cand.valid] = 0.0
    dq = np.einsum("pd,pid->pi", values, gathered) - np.einsum(
        "pid,pid->pi", sp_out[cand.ids], gathered
    )
    dq[~cand.valid] = 0.0
    dvalues = np.einsum("pi,pid->pd", q, gathered)
    return dvalues, dq


def s2p_backward(
    dout: np.ndarray,
    sp_values: np.ndarray,
    assoc: SoftAssociation,
) -> tuple[np.ndarray, np.ndarray]:
    """Backprop through superpixel_to_pixel -> (dL/dsp_values, dL/dQ)."""
    cand = assoc.candidates
    q = assoc.q.astype(np.float64, copy=False)
    dsp = _scatter(q[:, :, None] * dout[:, None, :], cand)
    gathered = np.where(cand.valid[:, :, None], sp_values[cand.ids], 0.0)
    dq = np.einsum("pd,pid->pi", dout, gathered)
    return dsp, dq


def soft_slic_backward(tape: SoftSlicTape, dq_final: np.ndarray) -> np.ndarray:
    """Gradient of a loss w.r.t. the input features, unrolled through all rounds."""
    cand = tape.candidates
    f = tape.features
    v = len(tape.qs)
    df = np.zeros_like(f)
    dq = dq_final.astype(np.float64, copy=False).copy()
    dc = np.zeros_like(tape.centers[0])
    for t in range(v - 1, -1, -1):
        q_t = tape.qs[t]
        # c_{t+1} = update(f, q_{t+1's assign output}, prev=c_t); dc holds grad w.r.t. c_{t+1}
        df_u, dq_u, dc_prev = _update_backward(
            dc, q_t, f, tape.centers[t + 1], tape.masses[t], cand
        )
        df += df_u
        dq += dq_u
        df_a, dc_a = _assign_backward(dq, q_t, f, tape.centers[t], cand, tape.beta)
        df += df_a
        dc = dc_a + dc_prev
        if t > 0:
            dq = np.zeros_like(dq)
    # c_0 gathers feature rows at the seed pixels
    np.add.at(df, tape.seed_idx, dc)
    return df
