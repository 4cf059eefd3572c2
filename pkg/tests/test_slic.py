import numpy as np
import pytest

from xseg.imaging import ChannelRole, MultiChannelImage
from xseg.slic import (
    Center,
    SlicConfig,
    assign_pixels,
    enforce_connectivity,
    grid_interval,
    init_centers_grid,
    perturb_to_min_gradient,
    segment_slic,
    slic_distance,
    slic_objective,
    update_centers,
)

from conftest import brute_force_assign, make_image


def uniform_image(width, height, value=0.5, channels=1):
    roles = [ChannelRole.HIGH, ChannelRole.LOW, ChannelRole.EFFECTIVE_Z][:channels]
    planes = tuple((r, np.full((height, width), value, dtype=np.float32)) for r in roles)
    return MultiChannelImage(width=width, height=height, planes=planes)


def test_grid_interval_values():
    assert grid_interval(10000, 25) == 20.0
    assert grid_interval(49, 49) == 1.0
    assert grid_interval(64, 4) == 4.0
    with pytest.raises(ValueError):
        grid_interval(4, 5)


def test_init_centers_100x100():
    centers = init_centers_grid(uniform_image(100, 100), 25)
    assert len(centers) == 25
    xs = sorted({c.x for c in centers})
    ys = sorted({c.y for c in centers})
    assert xs == [10.0, 30.0, 50.0, 70.0, 90.0]
    assert ys == [10.0, 30.0, 50.0, 70.0, 90.0]


def test_init_centers_4x4():
    centers = init_centers_grid(uniform_image(4, 4), 4)
    assert [(c.x, c.y) for c in centers] == [(1.0, 1.0), (3.0, 1.0), (1.0, 3.0), (3.0, 3.0)]


def test_init_centers_degenerate_1x1():
    image = MultiChannelImage(
        width=1, height=1, planes=((ChannelRole.HIGH, np.array([[0.25]], dtype=np.float32)),)
    )
    (center,) = init_centers_grid(image, 1)
    assert (center.x, center.y) == (0.5, 0.5)
    assert center.intensity[0] == pytest.approx(0.25)


def test_perturb_uniform_keeps_centers():
    image = uniform_image(16, 16)
    centers = init_centers_grid(image, 4)
    moved = perturb_to_min_gradient(centers, image)
    assert [(c.x, c.y) for c in moved] == [(c.x, c.y) for c in centers]


def test_perturb_moves_off_step_edge():
    # flat image with one vertical step; a center sitting on the edge column
    # has nonzero gradient there and zero gradient one pixel away
    plane = np.zeros((8, 8), dtype=np.float32)
    plane[:, 4:] = 1.0
    image = MultiChannelImage(width=8, height=8, planes=((ChannelRole.HIGH, plane),))
    center = Center(x=4.0, y=4.0, intensity=np.array([1.0]))
    (moved,) = perturb_to_min_gradient([center], image)
    # central differences: G=1 at columns 3 and 4, G=0 at column 5; the
    # first zero-gradient candidate in (y, x) order is (x=5, y=3)
    assert (moved.x, moved.y) == (5.0, 3.0)


def test_perturb_corner_center_stays_in_bounds():
    image = make_image(5, 5, seed=8, channels=1)
    center = Center(x=0.0, y=0.0, intensity=image.stack()[:, 0, 0].astype(np.float64))
    (moved,) = perturb_to_min_gradient([center], image)
    assert 0 <= moved.x < 5 and 0 <= moved.y < 5


def test_slic_distance_examples():
    center = Center(x=3.0, y=4.0, intensity=np.array([0.5, 0.5]))
    assert slic_distance((3.0, 4.0), np.array([0.5, 0.5]), center, s=5.0, m=10.0) == 0.0
    # d_c = 0, d_s = S, m = 10 -> exactly 10
    assert slic_distance((8.0, 4.0), np.array([0.5, 0.5]), center, s=5.0, m=10.0) == pytest.approx(10.0)
    # pure color term
    assert slic_distance((3.0, 4.0), np.array([0.5, 1.0]), center, s=5.0, m=10.0) == pytest.approx(0.5)


def test_assign_matches_brute_force_on_small_images():
    for seed in range(20):
        image = make_image(8, 8, seed=seed)
        centers = init_centers_grid(image, 4)
        s = grid_interval(64, 4)
        fast = assign_pixels(image, centers, s, 10.0)
        oracle = brute_force_assign(image, centers, s, 10.0)
        assert np.array_equal(fast, oracle), f"seed {seed}"


def test_assign_tie_goes_to_lower_index():
    image = uniform_image(4, 4)
    c = Center(x=1.5, y=1.5, intensity=np.array([0.5]))
    labels = assign_pixels(image, [c, Center(x=1.5, y=1.5, intensity=np.array([0.5]))], 2.0, 10.0)
    assert (labels == 0).all()


def test_assign_uniform_grid_is_voronoi():
    image = uniform_image(16, 16)
    centers = init_centers_grid(image, 4)
    labels = assign_pixels(image, centers, grid_interval(256, 4), 10.0)
    # spatial Voronoi of centers at {4, 12}^2; the equidistant row/column
    # at coordinate 8 ties to the lower center index (left/top)
    expected = 2 * (np.arange(16)[:, None] > 8) + (np.arange(16)[None, :] > 8)
    assert np.array_equal(labels, expected)


def test_update_centers_single_cluster():
    image = make_image(6, 4, seed=2, channels=2)
    labels = np.zeros((4, 6), dtype=np.int32)
    (center,) = update_centers(image, labels, 1)
    assert center.x == pytest.approx(2.5)
    assert center.y == pytest.approx(1.5)
    for ch, (_, plane) in enumerate(image.planes):
        assert center.intensity[ch] == pytest.approx(float(plane.astype(np.float64).mean()), rel=1e-12)


def test_update_centers_mean_position():
    image = uniform_image(3, 1)
    labels = np.array([[0, 1, 0]], dtype=np.int32)
    centers = update_centers(image, labels, 2)
    assert centers[0].x == pytest.approx(1.0)  # pixels x=0 and x=2


def test_update_centers_empty_keeps_previous():
    image = uniform_image(2, 2)
    labels = np.zeros((2, 2), dtype=np.int32)
    previous = [Center(0.0, 0.0, np.array([0.5])), Center(9.0, 9.0, np.array([0.125]))]
    centers = update_centers(image, labels, 2, previous=previous)
    assert centers[1] is previous[1]
    with pytest.raises(ValueError, match="empty"):
        update_centers(image, labels, 2)


def test_enforce_connectivity_noop_up_to_compaction():
    image = uniform_image(6, 6)
    labels = np.repeat(np.repeat(np.arange(4, dtype=np.int32).reshape(2, 2), 3, 0), 3, 1)
    out = enforce_connectivity(labels, image, s=3.0, min_region_fraction=0.25)
    assert out.k_actual == 4
    assert np.array_equal(out.labels, labels)


def test_enforce_connectivity_absorbs_stray_pixel():
    image = uniform_image(5, 5)
    labels = np.zeros((5, 5), dtype=np.int32)
    labels[2, 2] = 1  # lone pixel of label 1 inside label 0
    out = enforce_connectivity(labels, image, s=5.0, min_region_fraction=0.25)
    assert out.k_actual == 1
    assert (out.labels == 0).all()


def test_enforce_connectivity_checkerboard_collapses():
    image = uniform_image(4, 4)
    labels = ((np.arange(4)[:, None] + np.arange(4)[None, :]) % 2).astype(np.int32)
    # threshold = fraction * s^2 = 0.5 * 4 = 2 > every 1-pixel component
    out = enforce_connectivity(labels, image, s=2.0, min_region_fraction=0.5)
    assert out.k_actual == 1


def test_segment_uniform_grid():
    labeling = segment_slic(uniform_image(40, 40), SlicConfig(k=16, m=10.0, iterations=10))
    assert labeling.k_actual == 16
    counts = np.bincount(labeling.labels.ravel())
    # boundaries tie to the lower index, so sizes range (10 +- 1)^2
    assert counts.min() >= 81 and counts.max() <= 121
    assert counts.sum() == 1600


def test_segment_respects_step_edge():
    plane = np.zeros((40, 40), dtype=np.float32)
    plane[:, 20:] = 1.0
    image = MultiChannelImage(width=40, height=40, planes=((ChannelRole.HIGH, plane),))
    labeling = segment_slic(image, SlicConfig(k=4, m=10.0, iterations=10))
    flat = labeling.labels.ravel()
    vals = plane.ravel().astype(np.float64)
    for k in range(labeling.k_actual):
        region = vals[flat == k]
        assert region.max() == region.min(), "superpixel spans the step edge"


def test_segment_k1_single_label():
    labeling = segment_slic(make_image(9, 9, seed=1), SlicConfig(k=1))
    assert labeling.k_actual == 1
    assert (labeling.labels == 0).all()


def test_segment_deterministic():
    image = make_image(24, 24, seed=11)
    cfg = SlicConfig(k=9, m=10.0, iterations=5)
    a = segment_slic(image, cfg)
    b = segment_slic(image, cfg)
    assert np.array_equal(a.labels, b.labels)
    assert a.k_actual == b.k_actual


def test_monotone_objective_on_small_images():
    for seed in range(5):
        image = make_image(8, 8, seed=seed)
        s = grid_interval(64, 4)
        centers = perturb_to_min_gradient(init_centers_grid(image, 4), image)
        values = []
        for _ in range(10):
            labels = assign_pixels(image, centers, s, 10.0)
            centers = update_centers(image, labels, len(centers), previous=centers)
            values.append(slic_objective(image, labels, centers, s, 10.0))
        diffs = np.diff(values)
        assert (diffs <= 1e-9).all(), f"seed {seed}: objective increased {diffs}"


def test_distance_scale_property():
    rng = np.random.default_rng(0)
    center = Center(x=2.0, y=7.0, intensity=rng.random(3))
    pos = (5.0, 1.0)
    intensity = rng.random(3)
    for c in (2.0, 5.0):
        d1 = slic_distance(pos, intensity, center, s=4.0, m=1.0)
        dc = slic_distance(pos, intensity, center, s=4.0, m=c)
        d_c2 = float(np.sum((intensity - center.intensity) ** 2))
        d_s2 = (pos[0] - center.x) ** 2 + (pos[1] - center.y) ** 2
        assert dc**2 - d_c2 == pytest.approx(c * c * (d1**2 - d_c2), rel=1e-12)
        assert dc**2 == pytest.approx(d_c2 + c * c * d_s2 / 16.0, rel=1e-12)


def test_argmin_invariant_under_m_when_dc_zero():
    image = uniform_image(18, 12)
    centers = init_centers_grid(image, 6)
    s = grid_interval(18 * 12, 6)
    l1 = assign_pixels(image, centers, s, 1.0)
    l2 = assign_pixels(image, centers, s, 20.0)
    assert np.array_equal(l1, l2)


def test_labeling_density_validation():
    from xseg.slic import Labeling

    with pytest.raises(ValueError, match="dense"):
        Labeling(labels=np.array([[0, 2]], dtype=np.int32), k_actual=3,
                 centers=(Center(0, 0, np.zeros(1)),) * 3)
