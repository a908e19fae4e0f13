import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from viewco.data import (AugConfig, Geometry, augment_two_views, dataset_digest, flip_coords, gen_scene,
                         identity_geometry, load_dataset, make_dataset, overlap_fraction, render, warp_mask,
                         write_dataset)
from viewco.errors import AugmentationError, ConfigError, DatasetNotFound, FormatError
from viewco.pnm import decode_pnm, encode_pnm, read_image, read_mask, write_image, write_mask
from viewco.text import extract_class_word


def test_scene_determinism():
    a, b = gen_scene(7), gen_scene(7)
    assert a.canvas.tobytes() == b.canvas.tobytes() and a.gt_mask.tobytes() == b.gt_mask.tobytes()
    assert a.caption == b.caption
    assert gen_scene(8).canvas.tobytes() != a.canvas.tobytes()


def test_scene_contract():
    for s in range(200):
        sc = gen_scene(s)
        assert 1 <= len(sc.shapes) <= 2
        assert set(np.unique(sc.gt_mask)) <= {0, 1, 2, 3}
        assert sc.shapes[0].cls in sc.caption.split()
        assert extract_class_word(sc.caption, sc.classes) == sc.shapes[0].cls
        assert sc.canvas.min() >= 0 and sc.canvas.max() <= 1
        assert (sc.gt_mask == sc.class_id).any()


def test_circle_area_oracle():
    checked = 0
    for s in range(400):
        sc = gen_scene(s)
        for sh in sc.shapes:
            if sh.cls != "circle":
                continue
            cy, cx = sh.center
            r = sh.size
            ys, xs = np.mgrid[0:32, 0:32] + 0.5
            near = (ys - cy) ** 2 + (xs - cx) ** 2 <= (r + 1) ** 2
            count = int(((sc.gt_mask == 1) & near).sum())
            assert abs(count - math.pi * r * r) < 4 * r
            checked += 1
    assert checked > 50


def test_scene_errors():
    with pytest.raises(ConfigError):
        gen_scene(0, ())
    with pytest.raises(ConfigError):
        gen_scene(0, ("blob",))
    with pytest.raises(ConfigError):
        gen_scene(0, canvas_size=8)


def test_identity_augmentation():
    sc = gen_scene(3)
    pair = augment_two_views(sc, 0, AugConfig(enabled=False))
    assert np.array_equal(pair.view_u, sc.canvas) and np.array_equal(pair.view_v, sc.canvas)
    half = augment_two_views(sc, 0, AugConfig(enabled=False, out_size=16))
    assert half.view_u.shape == (16, 16, 3)


def test_flip_involution():
    y, x = np.random.default_rng(0).uniform(0, 32, size=(2, 50))
    yy, xx = flip_coords(*flip_coords(y, x, 32), 32)
    assert np.array_equal(yy, y) and np.array_equal(xx, x)


def test_identity_warp():
    g = identity_geometry(32)
    m = gen_scene(1).gt_mask
    out, valid = warp_mask(m, g, g)
    assert valid.all() and np.array_equal(out, m)


def test_rotation_180_warp():
    m = gen_scene(2).gt_mask
    a = identity_geometry(32)
    b = Geometry(0, 0, 32, False, 180, 32)
    out, valid = warp_mask(m, a, b)
    assert valid.all() and np.array_equal(out, np.rot90(m, 2))
    assert np.array_equal(render(m, b), np.rot90(m, 2))


@pytest.mark.parametrize("rot", [0, 90, 180, 270])
@pytest.mark.parametrize("flip", [False, True])
def test_full_frame_render_is_numpy_transform(rot, flip):
    m = np.arange(32 * 32).reshape(32, 32)
    g = Geometry(0, 0, 32, flip, rot, 32)
    expected = np.rot90(m[:, ::-1] if flip else m, rot // 90)
    assert np.array_equal(render(m, g), expected)


def geometries(seed, aug=AugConfig()):
    pair = augment_two_views(gen_scene(seed), seed, aug)
    return pair


@pytest.mark.parametrize("seed", range(30))
def test_warp_agrees_with_direct_render(seed):
    pair = geometries(seed)
    m = gen_scene(seed).gt_mask
    mu, mv = render(m, pair.geom_u), render(m, pair.geom_v)
    warped, valid = warp_mask(mu, pair.geom_u, pair.geom_v)
    assert valid.sum() > 0
    assert (warped[valid] == mv[valid]).mean() >= 0.99


@pytest.mark.parametrize("seed", range(30))
def test_warp_round_trip(seed):
    pair = geometries(seed)
    m = render(gen_scene(seed).gt_mask, pair.geom_u)
    there, v1 = warp_mask(m, pair.geom_u, pair.geom_v)
    back, v2 = warp_mask(there, pair.geom_v, pair.geom_u)
    both = v2 & warp_mask(v1.astype(np.uint8), pair.geom_v, pair.geom_u)[0].astype(bool)
    assert both.sum() > 0
    assert np.array_equal(back[both], m[both])


@settings(max_examples=100)
@given(st.integers(0, 2**31 - 1))
def test_geometry_round_trip_and_overlap(seed):
    pair = augment_two_views(np.zeros((32, 32, 3)), seed)
    assert overlap_fraction(pair.geom_u, pair.geom_v) >= 0.4
    for g in (pair.geom_u, pair.geom_v):
        ys, xs = np.mgrid[0:32, 0:32] + 0.5
        y, x = g.source_to_view(*g.view_to_source(ys, xs))
        assert np.allclose(y, ys, atol=1e-9) and np.allclose(x, xs, atol=1e-9)


def test_augmentation_unsatisfiable():
    cfg = AugConfig(crop_scale=(0.05, 0.06), min_overlap=0.99, max_tries=100)
    with pytest.raises(AugmentationError):
        augment_two_views(np.zeros((32, 32, 3)), 0, cfg)


def test_pnm_layout_and_round_trip(tmp_path):
    white = np.full((1, 1, 3), 255, dtype=np.uint8)
    assert encode_pnm(white) == b"P6\n1 1\n255\n\xff\xff\xff"
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, size=(5, 7, 3), dtype=np.uint8)
    write_image(tmp_path / "a.ppm", img)
    back = read_image(tmp_path / "a.ppm")
    assert np.array_equal(back, img)
    write_image(tmp_path / "b.ppm", back)
    assert (tmp_path / "a.ppm").read_bytes() == (tmp_path / "b.ppm").read_bytes()
    mask = rng.integers(0, 3, size=(6, 4)).astype(np.uint8)
    write_mask(tmp_path / "m.pgm", mask)
    assert np.array_equal(read_mask(tmp_path / "m.pgm"), mask)
    assert set(np.unique(read_mask(tmp_path / "m.pgm"))) == {0, 1, 2}


def test_pnm_header_comments_and_errors():
    assert decode_pnm(b"P5\n# c\n2 1\n255\n\x01\x02").tolist() == [[1, 2]]
    for bad in (b"P3\n1 1\n255\n\0\0\0", b"P5\n1 1\n65535\n\0\0", b"P5\n2 2\n255\n\0", b"P5\n1", b"P5\nx 1\n255\n\0"):
        with pytest.raises(FormatError):
            decode_pnm(bad)


def test_dataset_write_load(tmp_path):
    root = write_dataset(tmp_path / "d", 12, 5)
    assert sorted(p.name for p in (root / "pairs").iterdir()) == [f"{i:06d}" for i in range(12)]
    for d in (root / "pairs").iterdir():
        assert sorted(p.name for p in d.iterdir()) == ["caption.txt", "image.ppm", "mask.pgm"]
    data = load_dataset(root)
    mem = make_dataset(12, 5)
    assert data.classes == mem.classes
    for a, b in zip(data.items, mem.items):
        assert (a.id, a.seed, a.cls, a.caption) == (b.id, b.seed, b.cls, b.caption)
        assert np.array_equal(a.image, b.image) and np.array_equal(a.mask, b.mask)
    again = write_dataset(tmp_path / "e", 12, 5)
    assert dataset_digest(root) == dataset_digest(again)
    assert dataset_digest(write_dataset(tmp_path / "f", 12, 6)) != dataset_digest(root)
    with pytest.raises(DatasetNotFound):
        load_dataset(tmp_path / "missing")


def test_uncorrelated_palette_option():
    colors = {gen_scene(s, correlated_colors=False).shapes[0].color for s in range(200)}
    assert len(colors) > 6
