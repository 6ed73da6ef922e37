import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from pathattr.attribution import SaliencyMap
from pathattr.errors import ShapeError
from pathattr.io import (
    DatasetManifest,
    ManifestEntry,
    boundary_pixels,
    heatmap_pixels,
    load_dataset,
    load_rank_grid,
    load_saliency,
    read_image,
    read_manifest,
    read_pgm,
    render_heatmap,
    render_overlay,
    resize_bilinear,
    save_rank_map,
    save_saliency,
    write_manifest,
    write_pgm,
)
from pathattr.regions import RegionSet, xrai_rank


def test_two_by_two_pgm(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n2 2\n255\n" + bytes([0, 255, 255, 0]))
    assert read_pgm(path).tolist() == [[0.0, 1.0], [1.0, 0.0]]


def test_pgm_header_comments_and_sixteen_bit(tmp_path):
    path = tmp_path / "b.pgm"
    path.write_bytes(b"P5\n# made by hand\n2 1\n65535\n" + bytes([0, 0, 255, 255]))
    assert read_pgm(path).tolist() == [[0.0, 1.0]]
    path.write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(ValueError):
        read_pgm(path)


@settings(max_examples=30, deadline=None)
@given(arrays(np.uint8, st.tuples(st.integers(1, 9), st.integers(1, 9))))
def test_pgm_round_trip_is_exact(tmp_path_factory, pixels):
    path = tmp_path_factory.mktemp("pgm") / "x.pgm"
    write_pgm(path, pixels)
    back = read_pgm(path)
    assert np.array_equal(np.round(back * 255).astype(np.uint8), pixels)
    write_pgm(path, back)
    assert np.array_equal(read_pgm(path), back)


def test_png_grayscale_read_and_rgb_rejected(tmp_path):
    Image.fromarray(np.array([[0, 51], [102, 255]], dtype=np.uint8), mode="L").save(tmp_path / "g.png")
    assert read_image(tmp_path / "g.png").tolist() == [[0.0, 0.2], [0.4, 1.0]]
    Image.fromarray(np.zeros((2, 2, 3), dtype=np.uint8), mode="RGB").save(tmp_path / "c.png")
    with pytest.raises(ValueError):
        read_image(tmp_path / "c.png")
    with pytest.raises(ValueError):
        read_image(tmp_path / "x.bmp")


def test_bilinear_resize():
    assert np.array_equal(resize_bilinear(np.full((5, 7), 0.3), (11, 3)), np.full((11, 3), 0.3))
    ramp = np.array([[0.0, 1.0]])
    np.testing.assert_allclose(resize_bilinear(ramp, (1, 4)), [[0.0, 0.25, 0.75, 1.0]])


def _write_entry(root, name, img, mask=None):
    write_pgm(root / f"{name}.pgm", img)
    if mask is not None:
        write_pgm(root / f"{name}_m.pgm", mask.astype(np.uint8) * 255)
    return ManifestEntry(f"{name}.pgm", 0, f"{name}_m.pgm" if mask is not None else None)


def test_empty_manifest_rejected(tmp_path):
    with pytest.raises(ValueError):
        load_dataset(DatasetManifest(tmp_path, []))


def test_manifest_round_trip_and_string_labels(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, size=(4, 4)).astype(np.uint8)
    e = _write_entry(tmp_path, "a", img, img > 128)
    write_manifest(DatasetManifest(tmp_path, [e], ["x", "y"]), tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["entries"][0]["label"] = "y"
    (tmp_path / "m.json").write_text(json.dumps(doc))
    manifest = read_manifest(tmp_path / "m.json")
    data = load_dataset(manifest)
    assert data.labels.tolist() == [1] and data.class_names == ["x", "y"]
    assert np.array_equal(data.images[0], img / 255.0)
    assert np.array_equal(data.masks[0], img > 128)
    doc["entries"][0]["label"] = "z"
    (tmp_path / "m.json").write_text(json.dumps(doc))
    with pytest.raises(ValueError):
        read_manifest(tmp_path / "m.json")


def test_mask_dimension_mismatch_rejected(tmp_path):
    write_pgm(tmp_path / "a.pgm", np.zeros((4, 4)))
    write_pgm(tmp_path / "m.pgm", np.zeros((4, 5)))
    with pytest.raises(ShapeError):
        load_dataset(DatasetManifest(tmp_path, [ManifestEntry("a.pgm", 0, "m.pgm")]))


def test_mixed_sizes_need_a_resize(tmp_path):
    entries = [_write_entry(tmp_path, "a", np.zeros((4, 4))), _write_entry(tmp_path, "b", np.ones((6, 6)))]
    manifest = DatasetManifest(tmp_path, entries)
    with pytest.raises(ShapeError):
        load_dataset(manifest)
    assert load_dataset(manifest, (5, 5)).images.shape == (2, 5, 5)


def test_missing_file_and_bad_label(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(DatasetManifest(tmp_path, [ManifestEntry("nope.pgm", 0)]))
    e = _write_entry(tmp_path, "a", np.zeros((4, 4)))
    e.label = 3
    with pytest.raises(ValueError):
        load_dataset(DatasetManifest(tmp_path, [e], ["a", "b"]))


# ---------------------------------------------------------------------------
# containers


def test_saliency_container_round_trip(tmp_path):
    values = np.random.default_rng(1).normal(size=(5, 6)).astype(np.float32).astype(np.float64)
    smap = SaliencyMap(values, "ig", steps=128, baseline="zeros", target_class=2, completeness_gap=0.01, seed=3)
    save_saliency(tmp_path / "s.sal", smap)
    head = (tmp_path / "s.sal").read_bytes().split(b"\n", 1)[0]
    assert json.loads(head)["dtype"] == "<f4"
    back = load_saliency(tmp_path / "s.sal")
    assert np.array_equal(back.values, values)
    assert (back.method, back.steps, back.target_class, back.seed, back.baseline) == ("ig", 128, 2, 3, "zeros")
    assert back.completeness_gap == 0.01


def test_multichannel_saliency_round_trip(tmp_path):
    values = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
    save_saliency(tmp_path / "c.sal", SaliencyMap(values, "vanilla"))
    assert np.array_equal(load_saliency(tmp_path / "c.sal").values, values)


def test_rank_container_and_gain_table(tmp_path):
    labels = np.repeat(np.arange(3), 4).reshape(3, 4)
    rm = xrai_rank(np.arange(12.0).reshape(3, 4), RegionSet.from_labels(labels))
    table = save_rank_map(tmp_path / "r.rank", rm)
    assert np.array_equal(load_rank_grid(tmp_path / "r.rank"), rm.ranks)
    rows = json.loads(table.read_text())["regions"]
    assert [r["region"] for r in rows] == [2, 1, 0] and rows[0]["rank"] == 1


# ---------------------------------------------------------------------------
# renders


def test_empty_mask_leaves_grayscale():
    img = np.random.default_rng(2).uniform(size=(6, 6))
    rgb = render_overlay(img, np.zeros((6, 6), dtype=bool))
    assert (rgb[..., 0] == rgb[..., 1]).all() and (rgb[..., 1] == rgb[..., 2]).all()


def test_full_mask_outlines_image_border():
    b = boundary_pixels(np.ones((5, 5), dtype=bool))
    expected = np.ones((5, 5), dtype=bool)
    expected[1:-1, 1:-1] = False
    assert np.array_equal(b, expected)


def test_centred_square_has_eight_boundary_pixels(tmp_path):
    mask = np.zeros((5, 5), dtype=bool)
    mask[1:4, 1:4] = True
    assert boundary_pixels(mask).sum() == 8
    rgb = render_overlay(np.full((5, 5), 0.5), mask, tmp_path / "o.png")
    red = (rgb == (255, 0, 0)).all(axis=-1)
    assert red.sum() == 8 and not red[2, 2]
    with Image.open(tmp_path / "o.png") as im:
        assert im.mode == "RGB" and np.array_equal(np.asarray(im), rgb)


def test_overlay_shape_mismatch():
    with pytest.raises(ShapeError):
        render_overlay(np.zeros((4, 4)), np.zeros((4, 5), dtype=bool))


def test_heatmap_normalisation(tmp_path):
    px = render_heatmap(np.array([[-2.0, 0.0], [1.0, 2.0]]), tmp_path / "h.png")
    assert px.tolist() == [[255, 0], [128, 255]]
    assert not heatmap_pixels(np.full((3, 3), 4.0)).any()
    assert (tmp_path / "h.png").exists()
