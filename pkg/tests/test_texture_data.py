import os

import numpy as np
import pytest

from errors import DataError, ImageFormatError
from texture_data import (
    KINDS,
    TextureClassSpec,
    as_rgb,
    build_split,
    default_class_specs,
    gen_class_image,
    lbp_codes,
    lbp_descriptor,
    load_patch_set,
    make_region_split,
    make_rng,
    parse_ppm,
    patch_path,
    read_manifest,
    read_ppm,
    rgb_to_gray,
    sample_patch_origin,
    sample_patch_set,
    sample_stage1_pair,
    to_nchw,
    to_nhwc,
    write_manifest,
    write_ppm,
)


# === Procedural classes ===
def test_class_images_are_deterministic_and_in_range():
    for spec in default_class_specs(6, seed=3):
        a = gen_class_image(spec, 32)
        b = gen_class_image(spec, 32)
        assert a.shape == (32, 32, 3)
        assert np.array_equal(a, b)
        assert a.min() >= 0.0 and a.max() <= 1.0


def test_sinusoid_at_orientation_zero_varies_along_x_only():
    spec = TextureClassSpec("grating", "sinusoid-grating", {"orientation": 0.0, "frequency": 0.1})
    image = gen_class_image(spec, 64)
    assert np.allclose(image, image[0:1])
    assert not np.allclose(image, image[:, 0:1])


def test_checkerboard_has_the_requested_period():
    spec = TextureClassSpec("board", "checkerboard", {"period": 8})
    image = gen_class_image(spec, 64)
    assert np.array_equal(image, np.roll(image, 16, axis=1))
    assert np.array_equal(image, np.roll(image, 16, axis=0))
    assert not np.allclose(image[0, 0], image[0, 8])


def test_every_kind_renders_something_different():
    images = [gen_class_image(TextureClassSpec(kind, kind), 32) for kind in KINDS]
    for i in range(len(images)):
        for j in range(i + 1, len(images)):
            assert not np.allclose(images[i], images[j]), (KINDS[i], KINDS[j])


def test_unknown_kind_is_rejected():
    with pytest.raises(DataError, match="unknown texture kind"):
        gen_class_image(TextureClassSpec("x", "plaid"), 16)


def test_default_catalog_cycles_kinds_with_unique_names():
    specs = default_class_specs(8, seed=7)
    assert [s.kind for s in specs] == [KINDS[i % len(KINDS)] for i in range(8)]
    assert len({s.name for s in specs}) == 8
    assert default_class_specs(8, seed=7) == specs


def test_rgb_to_gray_uses_luma_weights():
    red = np.zeros((2, 2, 3))
    red[..., 0] = 1.0
    assert np.allclose(rgb_to_gray(red), 0.299)
    gray = np.full((2, 2), 0.4)
    assert rgb_to_gray(gray) is not None and np.allclose(rgb_to_gray(gray), 0.4)


# === Splits ===
def test_quadrant_split_holds_out_bottom_right():
    split = make_region_split(np.zeros((256, 256, 3)), 0.75, 32)
    train = split.regions_for("train")
    test = split.regions_for("test")
    assert len(train) == 3 and len(test) == 1
    assert (test[0].y0, test[0].x0, test[0].height, test[0].width) == (128, 128, 128, 128)


def test_image_too_small_for_quadrants_is_a_data_error():
    with pytest.raises(DataError, match="too small"):
        make_region_split(np.zeros((64, 64, 3)), 0.75, 32)


def test_multi_image_classes_split_70_20_10():
    images = [[np.zeros((16, 16, 3)) for _ in range(10)]]
    split = build_split(images, ["only"], patch_size=8, seed=0)
    counts = {name: len(split.regions_for(name)) for name in ("train", "test", "val")}
    assert counts == {"train": 7, "test": 2, "val": 1}


def test_stage1_pairs_nest_input_inside_ground_truth(rng):
    image = rng.uniform(size=(128, 128, 3))
    split = make_region_split(image, 0.75, 16)
    train_regions = split.regions_for("train")
    sampler = make_rng(0, 1)
    for _ in range(200):
        pair = sample_stage1_pair(split, 16, sampler)
        gy, gx = pair.gt_origin
        iy, ix = pair.input_origin
        assert pair.input.shape == (16, 16, 3) and pair.ground_truth.shape == (32, 32, 3)
        assert any(r.contains(gy, gx, 32) for r in train_regions)
        assert gy <= iy <= gy + 16 and gx <= ix <= gx + 16
        assert np.array_equal(pair.input, image[iy : iy + 16, ix : ix + 16])


def test_test_patches_never_touch_training_pixels():
    split = make_region_split(np.zeros((128, 128, 3)), 0.75, 16)
    sampler = make_rng(0, 2)
    for _ in range(200):
        _, y, x, _ = sample_patch_origin(split, 16, sampler, "test")
        assert y >= 64 and x >= 64
        assert y + 16 <= 128 and x + 16 <= 128


def test_patch_set_is_class_balanced(tiny_split):
    patches, labels = sample_patch_set(tiny_split, 8, 5, make_rng(1, 1), "train")
    assert patches.shape == (10, 8, 8, 3)
    assert np.array_equal(np.bincount(labels), [5, 5])
    assert np.array_equal(labels, np.sort(labels))


def test_make_rng_streams_are_reproducible_and_independent():
    assert make_rng(5, 1).integers(1 << 30) == make_rng(5, 1).integers(1 << 30)
    assert not np.array_equal(make_rng(5, 1).normal(size=8), make_rng(5, 2).normal(size=8))


def test_layout_conversions(rng):
    batch = rng.uniform(size=(2, 4, 4, 3))
    nchw = to_nchw(batch)
    assert nchw.shape == (2, 3, 4, 4)
    assert np.array_equal(to_nhwc(nchw), batch)
    assert to_nchw(batch[0]).shape == (1, 3, 4, 4)


def test_gray_stacks_are_rejected_until_converted(rng):
    gray = rng.uniform(size=(2, 8, 8))
    with pytest.raises(DataError, match="as_rgb"):
        to_nchw(gray)
    rgb = np.stack([as_rgb(g) for g in gray])
    assert rgb.shape == (2, 8, 8, 3)
    assert np.array_equal(rgb[..., 2], gray)
    assert to_nchw(rgb).shape == (2, 3, 8, 8)
    with pytest.raises(DataError):
        as_rgb(rng.uniform(size=(8, 8, 4)))


# === LBP ===
def test_lbp_constant_image_sets_every_bit():
    descriptor = lbp_descriptor(np.full((3, 3), 0.5))
    assert descriptor[255] == 1.0 and descriptor.sum() == 1.0


def test_lbp_first_neighbour_is_most_significant_bit():
    gray = np.zeros((3, 3))
    gray[1, 1] = 0.5
    gray[0, 0] = 1.0
    assert lbp_codes(gray)[0, 0] == 128
    gray[0, 0] = 0.0
    gray[1, 0] = 1.0  # left neighbour, last in clockwise order
    assert lbp_codes(gray)[0, 0] == 1


def test_lbp_descriptor_is_a_normalised_histogram(rng):
    descriptor = lbp_descriptor(rng.uniform(size=(10, 12)))
    assert descriptor.shape == (256,)
    assert descriptor.sum() == pytest.approx(1.0)


# === PPM ===
HEADER = b"P6\n2 2\n255\n"


def test_parse_ppm_payload():
    image = parse_ppm(HEADER + bytes(range(12)))
    assert image.shape == (2, 2, 3)
    assert image[0, 0, 0] == 0.0
    assert image[1, 1, 2] == pytest.approx(11 / 255)


def test_truncated_payload_reports_sizes_and_offset():
    with pytest.raises(ImageFormatError, match="expected 12 bytes, got 11") as exc:
        parse_ppm(HEADER + bytes(11))
    assert exc.value.offset == len(HEADER)


def test_bad_magic_maxval_and_trailing_bytes():
    with pytest.raises(ImageFormatError, match="bad magic") as exc:
        parse_ppm(b"P3\n2 2\n255\n" + bytes(12))
    assert exc.value.offset == 0
    with pytest.raises(ImageFormatError, match="maxval"):
        parse_ppm(b"P6\n2 2\n65535\n" + bytes(24))
    with pytest.raises(ImageFormatError, match="trailing"):
        parse_ppm(HEADER + bytes(13))


def test_header_comments_and_gray_images():
    image = parse_ppm(b"P5\n# made by hand\n2 1\n255\n\x00\xff")
    assert image.shape == (1, 2)
    assert np.array_equal(image, [[0.0, 1.0]])


def test_written_images_read_back_exactly(tmp_path, rng):
    color = rng.integers(0, 256, size=(5, 7, 3)) / 255.0
    gray = rng.integers(0, 256, size=(4, 3)) / 255.0
    write_ppm(color, tmp_path / "c.ppm")
    write_ppm(gray, tmp_path / "g.pgm")
    assert np.array_equal(read_ppm(tmp_path / "c.ppm"), color)
    assert np.array_equal(read_ppm(tmp_path / "g.pgm"), gray)


def test_missing_image_file(tmp_path):
    with pytest.raises(FileNotFoundError, match="Missing image file"):
        read_ppm(tmp_path / "absent.ppm")


# === Manifest and dataset directory ===
def test_manifest_validation(tmp_path):
    path = tmp_path / "manifest.tsv"
    write_manifest(path, [(0, "a", "train"), (1, "b", "test")])
    df = read_manifest(path)
    assert list(df["patch_id"]) == [0, 1]

    write_manifest(path, [(0, "a", "train"), (0, "b", "test")])
    with pytest.raises(DataError, match="duplicate"):
        read_manifest(path)

    write_manifest(path, [(0, "a", "holdout")])
    with pytest.raises(DataError, match="unknown split"):
        read_manifest(path)


def test_load_patch_set_maps_classes_in_sorted_order(tmp_path, rng):
    rows = []
    for patch_id, (name, split) in enumerate([("zeta", "train"), ("alpha", "train"), ("alpha", "test")]):
        write_ppm(rng.uniform(size=(4, 4, 3)), patch_path(str(tmp_path), patch_id))
        rows.append((patch_id, name, split))
    write_manifest(os.path.join(tmp_path, "manifest.tsv"), rows)

    ids, patches, labels, class_names = load_patch_set(str(tmp_path), "train")
    assert class_names == ["alpha", "zeta"]
    assert list(ids) == [0, 1]
    assert list(labels) == [1, 0]
    assert patches.shape == (2, 4, 4, 3)
    with pytest.raises(DataError, match="no 'val'"):
        load_patch_set(str(tmp_path), "val")
