"""Shared builders and session fixtures (tiny trained model for pipeline tests)."""

import numpy as np
import pytest

from xseg.cli import main as cli_main
from xseg.imaging import ChannelRole, MultiChannelImage


def make_image(width, height, seed=0, channels=3):
    """Random multi-channel image with values on the 16-bit grid."""
    rng = np.random.default_rng(seed)
    roles = [ChannelRole.HIGH, ChannelRole.LOW, ChannelRole.EFFECTIVE_Z,
             ChannelRole.PSEUDO_R, ChannelRole.PSEUDO_G, ChannelRole.PSEUDO_B][:channels]
    planes = tuple(
        (role, (rng.integers(0, 65536, size=(height, width)) / 65535.0).astype(np.float32))
        for role in roles
    )
    return MultiChannelImage(width=width, height=height, planes=planes)


def make_piecewise_image(width, height, seed=0, channels=3, n_regions=4):
    """Axis-aligned piecewise-constant image with well-separated levels."""
    rng = np.random.default_rng(seed)
    roles = [ChannelRole.HIGH, ChannelRole.LOW, ChannelRole.EFFECTIVE_Z][:channels]
    cuts_x = sorted(rng.integers(1, width, size=1).tolist())
    cuts_y = sorted(rng.integers(1, height, size=1).tolist())
    region = np.zeros((height, width), dtype=np.int64)
    region += (np.arange(width)[None, :] >= cuts_x[0]).astype(np.int64)
    region += 2 * (np.arange(height)[:, None] >= cuts_y[0]).astype(np.int64)
    levels = rng.permutation(n_regions) / max(n_regions - 1, 1)
    planes = []
    for i, role in enumerate(roles):
        shifted = np.roll(levels, i)
        planes.append((role, shifted[region].astype(np.float32)))
    return MultiChannelImage(width=width, height=height, planes=tuple(planes))


def brute_force_assign(image, centers, s, m):
    """Independent assignment oracle: exhaustive search with slic_distance."""
    from xseg.slic import slic_distance

    stack = image.stack()
    labels = np.empty((image.height, image.width), dtype=np.int32)
    for y in range(image.height):
        for x in range(image.width):
            best = np.inf
            best_k = -1
            for k, c in enumerate(centers):
                d = slic_distance((x, y), stack[:, y, x], c, s, m)
                if d < best:
                    best, best_k = d, k
            labels[y, x] = best_k
    return labels


MINI_SEED = 914


@pytest.fixture(scope="session")
def mini_run(tmp_path_factory):
    """A small synth -> train run shared by pipeline/CLI/eval tests."""
    root = tmp_path_factory.mktemp("mini")
    data = root / "data"
    model = root / "model"
    assert cli_main([
        "synth", "--n", "12", "--out", str(data),
        "--width", "96", "--height", "96", "--seed", str(MINI_SEED),
    ]) == 0
    assert cli_main([
        "train", "--data", str(data), "--out", str(model),
        "--k", "48", "--epochs", "200", "--seed", str(MINI_SEED),
    ]) == 0
    return {"data": data, "model": model, "seed": MINI_SEED}
