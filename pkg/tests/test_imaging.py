import json

import numpy as np
import pytest

from xseg.imaging import (
    ChannelMode,
    ChannelRole,
    ManifestError,
    MultiChannelImage,
    ObjectMask,
    apply_object_mask,
    load_manifest,
    load_sample,
    normalize_plane,
    quantize_plane,
    save_manifest,
    select_channels,
)

from conftest import make_image


def test_normalize_endpoints_exact():
    assert normalize_plane(np.array([0]), 8)[0] == 0.0
    assert normalize_plane(np.array([255]), 8)[0] == 1.0
    assert normalize_plane(np.array([65535]), 16)[0] == 1.0


def test_normalize_midpoint_16bit():
    out = normalize_plane(np.array([32768]), 16)
    assert out.dtype == np.float32
    assert out[0] == pytest.approx(32768 / 65535, rel=1e-6)


def test_normalize_monotone():
    raw = np.arange(0, 65536, 257)
    out = normalize_plane(raw, 16)
    assert (np.diff(out) >= 0).all()


def test_normalize_rejects_overflow_and_bad_depth():
    with pytest.raises(ValueError, match="exceeds bit depth"):
        normalize_plane(np.array([256]), 8)
    with pytest.raises(ValueError, match="bit depth"):
        normalize_plane(np.array([1]), 12)


def test_quantize_inverts_normalize():
    raw = np.arange(0, 65536, 131).astype(np.uint16)
    assert np.array_equal(quantize_plane(normalize_plane(raw, 16), 16), raw)


def test_manifest_round_trip_bit_exact(tmp_path):
    image = make_image(9, 7, seed=3, channels=6)
    mask = ObjectMask(width=9, height=7, bits=np.arange(63).reshape(7, 9) % 2 == 0)
    save_manifest(image, tmp_path / "s", object_mask=mask, anomaly_mask=mask)
    sample = load_sample(tmp_path / "s")
    assert sample.image.roles == image.roles
    for (r1, p1), (_, p2) in zip(image.planes, sample.image.planes):
        assert np.array_equal(p1, p2), r1
    assert np.array_equal(sample.object_mask.bits, mask.bits)
    assert np.array_equal(sample.anomaly_mask.bits, mask.bits)


def test_full_scale_16bit_plane_loads_as_ones(tmp_path):
    ones = np.ones((4, 4), dtype=np.float32)
    image = MultiChannelImage(width=4, height=4, planes=((ChannelRole.HIGH, ones),))
    save_manifest(image, tmp_path / "s")
    loaded = load_manifest(tmp_path / "s")
    assert (loaded.planes[0][1] == 1.0).all()


def test_three_plane_pseudo_manifest(tmp_path):
    image = make_image(4, 4, seed=1, channels=6)
    pseudo = select_channels(image, ChannelMode.PSEUDO)
    save_manifest(pseudo, tmp_path / "s", bit_depths={r: 8 for r, _ in pseudo.planes})
    loaded = load_manifest(tmp_path / "s")
    assert len(loaded.planes) == 3
    assert all(p.size == 16 for _, p in loaded.planes)


def test_duplicate_role_rejected(tmp_path):
    image = make_image(4, 4, seed=0, channels=1)
    save_manifest(image, tmp_path / "s")
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    manifest["channels"].append(dict(manifest["channels"][0]))
    (tmp_path / "s" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ManifestError, match="duplicate channel role"):
        load_manifest(tmp_path / "s")


def test_dimension_mismatch_rejected(tmp_path):
    image = make_image(4, 4, seed=0, channels=1)
    save_manifest(image, tmp_path / "s")
    manifest = json.loads((tmp_path / "s" / "manifest.json").read_text())
    manifest["width"] = 5
    (tmp_path / "s" / "manifest.json").write_text(json.dumps(manifest))
    with pytest.raises(ManifestError, match="expected"):
        load_manifest(tmp_path / "s")


def test_missing_file_rejected(tmp_path):
    image = make_image(4, 4, seed=0, channels=1)
    save_manifest(image, tmp_path / "s")
    (tmp_path / "s" / "high.png").unlink()
    with pytest.raises(ManifestError, match="unreadable"):
        load_manifest(tmp_path / "s")


def test_image_invariants():
    plane = np.zeros((2, 2), dtype=np.float32)
    with pytest.raises(ValueError, match="duplicate"):
        MultiChannelImage(width=2, height=2, planes=(
            (ChannelRole.HIGH, plane), (ChannelRole.HIGH, plane.copy())))
    with pytest.raises(ValueError, match="at least one plane"):
        MultiChannelImage(width=2, height=2, planes=())
    with pytest.raises(ValueError, match="outside"):
        MultiChannelImage(width=2, height=2, planes=(
            (ChannelRole.HIGH, np.full((2, 2), 1.5, dtype=np.float32)),))


def test_select_channels_orders_and_filters():
    image = make_image(5, 4, seed=2, channels=6)
    hlz = select_channels(image, ChannelMode.HLZ)
    assert hlz.roles == (ChannelRole.HIGH, ChannelRole.LOW, ChannelRole.EFFECTIVE_Z)
    assert np.array_equal(hlz.planes[0][1], image.plane(ChannelRole.HIGH))
    single = select_channels(image, ChannelMode.H)
    assert single.roles == (ChannelRole.HIGH,)


def test_select_channels_missing_plane():
    image = make_image(4, 4, seed=2, channels=6)
    pseudo_only = select_channels(image, ChannelMode.PSEUDO)
    with pytest.raises(ValueError, match="required plane absent"):
        select_channels(pseudo_only, ChannelMode.Z)


def test_select_channels_idempotent():
    image = make_image(6, 6, seed=5, channels=6)
    once = select_channels(image, ChannelMode.HLZ)
    twice = select_channels(once, ChannelMode.HLZ)
    assert once.roles == twice.roles
    for (_, p1), (_, p2) in zip(once.planes, twice.planes):
        assert np.array_equal(p1, p2)


def test_apply_full_mask_is_identity():
    image = make_image(6, 5, seed=4)
    mask = ObjectMask(width=6, height=5, bits=np.ones((5, 6), dtype=bool))
    cropped, offset = apply_object_mask(image, mask)
    assert offset == (0, 0)
    assert (cropped.width, cropped.height) == (6, 5)
    for (_, p1), (_, p2) in zip(image.planes, cropped.planes):
        assert np.array_equal(p1, p2)


def test_apply_mask_bounding_box_and_zeroing():
    image = make_image(10, 10, seed=6)
    bits = np.zeros((10, 10), dtype=bool)
    bits[2:6, 3:7] = True
    bits[3, 4] = True
    bits[2, 3] = False  # irregular corner: stays inside bbox but zeroed
    mask = ObjectMask(width=10, height=10, bits=bits)
    cropped, offset = apply_object_mask(image, mask)
    assert offset == (3, 2)
    assert (cropped.width, cropped.height) == (4, 4)
    assert cropped.planes[0][1][0, 0] == 0.0  # the masked-out corner
    inside = image.planes[0][1][3, 4]
    assert cropped.planes[0][1][1, 1] == inside


def test_apply_mask_errors():
    image = make_image(4, 4, seed=0)
    with pytest.raises(ValueError, match="empty mask"):
        apply_object_mask(image, ObjectMask(width=4, height=4, bits=np.zeros((4, 4), bool)))
    with pytest.raises(ValueError, match="dimensions"):
        apply_object_mask(image, ObjectMask(width=5, height=5, bits=np.ones((5, 5), bool)))
