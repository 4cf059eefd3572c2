"""Multi-channel image containers, manifest I/O and channel selection.

Images are stacks of single-channel float32 planes in [0, 1], each tagged
with the detector channel it came from (pseudo-colour R/G/B, high energy,
low energy, effective-Z). On disk a sample is a directory with a
``manifest.json`` naming one grayscale PNG per channel plus optional
binary object/anomaly masks.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image


class ManifestError(ValueError):
    """Raised when a sample directory or its manifest is malformed."""


class ChannelRole(str, Enum):
    PSEUDO_R = "pseudo_r"
    PSEUDO_G = "pseudo_g"
    PSEUDO_B = "pseudo_b"
    HIGH = "high"
    LOW = "low"
    EFFECTIVE_Z = "effective_z"


class ChannelMode(str, Enum):
    """Which channel subset a pipeline run operates on."""

    PSEUDO = "pseudo"
    H = "h"
    L = "l"
    Z = "z"
    HLZ = "hlz"


# Output plane order per mode; also the set of required roles.
MODE_ROLES: dict[ChannelMode, tuple[ChannelRole, ...]] = {
    ChannelMode.PSEUDO: (ChannelRole.PSEUDO_R, ChannelRole.PSEUDO_G, ChannelRole.PSEUDO_B),
    ChannelMode.H: (ChannelRole.HIGH,),
    ChannelMode.L: (ChannelRole.LOW,),
    ChannelMode.Z: (ChannelRole.EFFECTIVE_Z,),
    ChannelMode.HLZ: (ChannelRole.HIGH, ChannelRole.LOW, ChannelRole.EFFECTIVE_Z),
}


@dataclass(frozen=True)
class MultiChannelImage:
    """Ordered stack of (role, plane) pairs; planes are float32 in [0, 1]."""

    width: int
    height: int
    planes: tuple[tuple[ChannelRole, np.ndarray], ...]

    def __post_init__(self):
        if not self.planes:
            raise ValueError("image must contain at least one plane")
        seen = set()
        for role, plane in self.planes:
            if role in seen:
                raise ValueError(f"duplicate channel role: {role.value}")
            seen.add(role)
            if plane.shape != (self.height, self.width):
                raise ValueError(
                    f"plane {role.value} has shape {plane.shape}, "
                    f"expected {(self.height, self.width)}"
                )
            if plane.dtype != np.float32:
                raise ValueError(f"plane {role.value} must be float32")
            if plane.size and (float(plane.min()) < 0.0 or float(plane.max()) > 1.0):
                raise ValueError(f"plane {role.value} has intensities outside [0, 1]")
            plane.setflags(write=False)

    @property
    def roles(self) -> tuple[ChannelRole, ...]:
        return tuple(role for role, _ in self.planes)

    def plane(self, role: ChannelRole) -> np.ndarray:
        for r, p in self.planes:
            if r == role:
                return p
        raise KeyError(f"required plane absent: {role.value}")

    def stack(self) -> np.ndarray:
        """All planes as one (C, H, W) float32 array."""
        return np.stack([p for _, p in self.planes], axis=0)


@dataclass(frozen=True)
class ObjectMask:
    """Binary pixel mask; 1 = inside the object/region of interest."""

    width: int
    height: int
    bits: np.ndarray

    def __post_init__(self):
        if self.bits.shape != (self.height, self.width):
            raise ValueError(
                f"mask has shape {self.bits.shape}, expected {(self.height, self.width)}"
            )
        if self.bits.dtype != np.bool_:
            raise ValueError("mask bits must be boolean")
        self.bits.setflags(write=False)

    @property
    def count(self) -> int:
        return int(self.bits.sum())


@dataclass(frozen=True)
class Sample:
    """One loaded manifest directory: image plus optional ground-truth masks."""

    image: MultiChannelImage
    object_mask: ObjectMask | None = None
    anomaly_mask: ObjectMask | None = None


def normalize_plane(raw: np.ndarray, bit_depth: int) -> np.ndarray:
    """Map an integer plane onto [0, 1] floats, exact at both endpoints.

    out = raw / (2**bit_depth - 1), computed in float64 and stored float32.
    """
    if bit_depth not in (8, 16):
        raise ValueError(f"unsupported bit depth: {bit_depth}")
    raw = np.asarray(raw)
    full = (1 << bit_depth) - 1
    if raw.size and int(raw.max()) > full:
        raise ValueError(f"sample {int(raw.max())} exceeds bit depth {bit_depth}")
    if raw.size and int(raw.min()) < 0:
        raise ValueError("negative sample in raw plane")
    return (raw.astype(np.float64) / full).astype(np.float32)


def quantize_plane(plane: np.ndarray, bit_depth: int) -> np.ndarray:
    """Inverse of normalize_plane: round [0, 1] floats to the integer grid."""
    if bit_depth not in (8, 16):
        raise ValueError(f"unsupported bit depth: {bit_depth}")
    full = (1 << bit_depth) - 1
    ints = np.rint(np.asarray(plane, dtype=np.float64) * full)
    if ints.size and (ints.min() < 0 or ints.max() > full):
        raise ValueError("plane values outside [0, 1]")
    return ints.astype(np.uint8 if bit_depth == 8 else np.uint16)


def _read_png(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            arr = np.asarray(img)
    except FileNotFoundError:
        raise ManifestError(f"unreadable channel file: {path}") from None
    if arr.ndim != 2:
        raise ManifestError(f"{path} is not a single-plane grayscale image")
    return arr


def _read_mask(path: Path, width: int, height: int) -> ObjectMask:
    arr = _read_png(path)
    if arr.shape != (height, width):
        raise ManifestError(f"mask {path} dimensions do not match image")
    return ObjectMask(width=width, height=height, bits=arr > 0)


def load_manifest(path: str | Path) -> MultiChannelImage:
    """Load the image described by ``<path>/manifest.json``.

    Planes come back in manifest order, normalized to [0, 1] per their
    declared bit depth.
    """
    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.is_file():
        raise ManifestError(f"missing manifest.json under {root}")
    spec = json.loads(manifest_path.read_text())
    width, height = int(spec["width"]), int(spec["height"])
    planes = []
    seen: set[str] = set()
    for entry in spec["channels"]:
        role_name = entry["role"]
        if role_name in seen:
            raise ManifestError(f"duplicate channel role: {role_name}")
        seen.add(role_name)
        try:
            role = ChannelRole(role_name)
        except ValueError:
            raise ManifestError(f"unknown channel role: {role_name}") from None
        raw = _read_png(root / entry["file"])
        if raw.shape != (height, width):
            raise ManifestError(
                f"plane {role_name} has shape {raw.shape}, expected {(height, width)}"
            )
        planes.append((role, normalize_plane(raw, int(entry["bit_depth"]))))
    return MultiChannelImage(width=width, height=height, planes=tuple(planes))


def load_sample(path: str | Path) -> Sample:
    """Load a manifest directory together with its optional masks."""
    root = Path(path)
    image = load_manifest(root)
    spec = json.loads((root / "manifest.json").read_text())
    masks = spec.get("masks", {}) or {}
    obj = masks.get("object")
    anom = masks.get("anomaly")
    return Sample(
        image=image,
        object_mask=_read_mask(root / obj, image.width, image.height) if obj else None,
        anomaly_mask=_read_mask(root / anom, image.width, image.height) if anom else None,
    )


def save_manifest(
    image: MultiChannelImage,
    path: str | Path,
    bit_depths: dict[ChannelRole, int] | None = None,
    object_mask: ObjectMask | None = None,
    anomaly_mask: ObjectMask | None = None,
) -> Path:
    """Write a manifest directory; inverse of load_manifest.

    Round trip is bit-exact for planes whose samples already sit on the
    target integer grid (which everything loaded or synthesized does).
    """
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    depths = bit_depths or {}
    channels = []
    for role, plane in image.planes:
        depth = int(depths.get(role, 16))
        fname = f"{role.value}.png"
        Image.fromarray(quantize_plane(plane, depth)).save(root / fname)
        channels.append({"role": role.value, "file": fname, "bit_depth": depth})
    masks: dict[str, str] = {}
    for name, mask in (("object", object_mask), ("anomaly", anomaly_mask)):
        if mask is not None:
            if (mask.width, mask.height) != (image.width, image.height):
                raise ValueError(f"{name} mask dimensions do not match image")
            fname = f"mask_{name}.png"
            Image.fromarray(np.where(mask.bits, 255, 0).astype(np.uint8)).save(root / fname)
            masks[name] = fname
    manifest = {
        "width": image.width,
        "height": image.height,
        "channels": channels,
        "masks": masks,
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return root / "manifest.json"


def select_channels(image: MultiChannelImage, mode: ChannelMode) -> MultiChannelImage:
    """Keep only the planes the mode requires, in the mode's fixed order."""
    available = dict(image.planes)
    ordered = []
    for role in MODE_ROLES[mode]:
        if role not in available:
            raise ValueError(f"required plane absent: {role.value}")
        ordered.append((role, available[role]))
    return MultiChannelImage(width=image.width, height=image.height, planes=tuple(ordered))


def apply_object_mask(
    image: MultiChannelImage, mask: ObjectMask
) -> tuple[MultiChannelImage, tuple[int, int]]:
    """Crop to the mask's bounding box, zeroing outside-mask pixels.

    Returns the crop and its top-left (x, y) offset in the original frame.
    """
    if (mask.width, mask.height) != (image.width, image.height):
        raise ValueError("mask dimensions do not match image")
    if mask.count == 0:
        raise ValueError("empty mask")
    rows = np.flatnonzero(mask.bits.any(axis=1))
    cols = np.flatnonzero(mask.bits.any(axis=0))
    y0, y1 = int(rows[0]), int(rows[-1]) + 1
    x0, x1 = int(cols[0]), int(cols[-1]) + 1
    window = mask.bits[y0:y1, x0:x1]
    planes = tuple(
        (role, np.where(window, plane[y0:y1, x0:x1], np.float32(0.0)).astype(np.float32))
        for role, plane in image.planes
    )
    cropped = MultiChannelImage(width=x1 - x0, height=y1 - y0, planes=planes)
    return cropped, (x0, y0)


def crop_mask(mask: ObjectMask, offset: tuple[int, int], width: int, height: int) -> ObjectMask:
    """Extract the (offset, width, height) window of a mask."""
    x0, y0 = offset
    return ObjectMask(width=width, height=height, bits=mask.bits[y0 : y0 + height, x0 : x0 + width].copy())
