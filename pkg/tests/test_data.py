import math

import numpy as np
import pytest
import torch
from PIL import Image

from mkdseg.core import ConfigError, ValidationError
from mkdseg.data import (
    BatchSampler,
    SegDataset,
    Shape,
    SyntheticSceneConfig,
    apply_manifest,
    generate_synthetic,
    load_folder_dataset,
    make_partition,
    read_manifest,
    render_scene,
    save_folder_dataset,
    shape_mask,
    write_manifest,
)

from conftest import gen


def _dataset(N):
    imgs = [np.zeros((4, 4, 3), np.uint8) for _ in range(N)]
    labs = [np.zeros((4, 4), np.uint8) for _ in range(N)]
    return SegDataset([f"i{k}" for k in range(N)], imgs, labs, 2)


@pytest.mark.parametrize("N,n", [(16, 1), (16, 16), (17, 4), (400, 8), (5, 3)])
def test_partition_sizes(N, n):
    part = make_partition(_dataset(N), n, seed=1)
    lab, unl = set(part.labeled_indices), set(part.unlabeled_indices)
    assert len(lab) == math.ceil(N / n)
    assert not lab & unl and lab | unl == set(range(N))


def test_partition_n1_all_labeled():
    part = make_partition(_dataset(6), 1, 0)
    assert part.unlabeled_indices == []


def test_partition_deterministic_and_errors(tmp_path):
    a, b = make_partition(_dataset(20), 4, 7), make_partition(_dataset(20), 4, 7)
    assert a.manifest() == b.manifest()
    assert make_partition(_dataset(20), 4, 8).manifest() != a.manifest()
    with pytest.raises(ValueError):
        make_partition(_dataset(3), 4, 0)
    write_manifest(a, tmp_path / "m.tsv")
    text = (tmp_path / "m.tsv").read_text().splitlines()
    assert all(line.split("\t")[1] in ("labeled", "unlabeled") for line in text)
    assert apply_manifest(_dataset(20), read_manifest(tmp_path / "m.tsv")).manifest() == a.manifest()


def test_duplicate_ids_rejected():
    with pytest.raises(ValidationError):
        SegDataset(["a", "a"], [np.zeros((2, 2, 3), np.uint8)] * 2, [None, None], 2)


def test_zero_shapes_is_all_background():
    cfg = SyntheticSceneConfig(height=16, width=16, shapes_per_image=(0, 0))
    ds = generate_synthetic(cfg, 3)
    assert all((lab == 0).all() for lab in ds.labels)


def test_rectangle_area_exact():
    cfg = SyntheticSceneConfig(height=20, width=24)
    shape = Shape("rectangle", 1, (3, 5, 7, 11), (1.0, 0.0, 0.0))
    _, lab = render_scene([shape], cfg, np.random.default_rng(0))
    assert (lab == 1).sum() == 7 * 11
    assert (lab[3:10, 5:16] == 1).all()


def test_label_histogram_matches_geometry_without_occlusion():
    cfg = SyntheticSceneConfig(height=32, width=32, num_classes=4)
    shapes = [Shape("rectangle", 1, (0, 0, 8, 10), (1, 0, 0)),
              Shape("ellipse", 2, (20.0, 8.0, 5.0, 6.0), (0, 1, 0)),
              Shape("triangle", 3, ((16.0, 20.0), (30.0, 31.0), (30.0, 18.0)), (0, 0, 1))]
    masks = [shape_mask(s, 32, 32) for s in shapes]
    assert not (masks[0] & masks[1]).any() and not (masks[1] & masks[2]).any()
    _, lab = render_scene(shapes, cfg, np.random.default_rng(0))
    for s, m in zip(shapes, masks):
        assert (lab == s.cls).sum() == m.sum()


def test_later_shapes_occlude():
    cfg = SyntheticSceneConfig(height=8, width=8)
    a = Shape("rectangle", 1, (0, 0, 8, 8), (1, 0, 0))
    b = Shape("rectangle", 2, (2, 2, 2, 2), (0, 1, 0))
    _, lab = render_scene([a, b], cfg, np.random.default_rng(0))
    assert (lab == 2).sum() == 4 and (lab == 1).sum() == 60


def test_synthetic_deterministic():
    cfg = SyntheticSceneConfig(height=16, width=16, seed=5)
    a, b = generate_synthetic(cfg, 4), generate_synthetic(cfg, 4)
    assert all(np.array_equal(x, y) for x, y in zip(a.images, b.images))
    assert all(np.array_equal(x, y) for x, y in zip(a.labels, b.labels))


def test_synthetic_config_validation():
    with pytest.raises(ConfigError):
        SyntheticSceneConfig(num_classes=1)
    with pytest.raises(ConfigError, match="textures"):
        SyntheticSceneConfig(textures=("spots",))
    with pytest.raises(ConfigError, match="texture_period"):
        SyntheticSceneConfig(texture_period=(1, 4))
    with pytest.raises(ConfigError, match="illumination_std"):
        SyntheticSceneConfig(illumination_std=-1)


def test_textured_shape_two_tone_inside_label():
    cfg = SyntheticSceneConfig(height=16, width=16, background_std=0, noise_std=0)
    shape = Shape("rectangle", 2, (0, 0, 16, 16), (1.0, 0.0, 0.0), ("vstripes", 4.0, (0.0, 0.0, 1.0)))
    img, lab = render_scene([shape], cfg, np.random.default_rng(0))
    assert (lab == 2).all()
    # columns alternate every two pixels, rows are constant
    assert (img[:, 0] == [255, 0, 0]).all() and (img[:, 2] == [0, 0, 255]).all()
    assert (img == img[:1]).all()


def test_texture_and_colour_options_keep_labels_consistent():
    base = SyntheticSceneConfig(height=16, width=16, seed=4)
    varied = SyntheticSceneConfig(height=16, width=16, seed=4, random_colors=True,
                                  textures=("hstripes", "vstripes", "checker"), illumination_std=0.3)
    a, b = generate_synthetic(base, 3), generate_synthetic(varied, 3)
    for lab in b.labels:
        assert set(np.unique(lab)) <= {0, 1, 2, 3}
    assert any(not np.array_equal(x, y) for x, y in zip(a.images, b.images))
    # the default scene does not consume extra randomness
    assert all(np.array_equal(x, y) for x, y in zip(a.images, generate_synthetic(base, 3).images))


def _write(path, arr, mode):
    Image.fromarray(arr, mode=mode).save(path)


def test_folder_pairing(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    for k in "abc":
        _write(tmp_path / "images" / f"{k}.png", np.full((4, 5, 3), 10, np.uint8), "RGB")
    for k in "ab":
        _write(tmp_path / "labels" / f"{k}.png", np.ones((4, 5), np.uint8), "L")
    ds = load_folder_dataset(tmp_path / "images", tmp_path / "labels", 2)
    assert len(ds.labeled_indices) == 2 and len(ds.unlabeled_indices) == 1


def test_folder_empty_labels(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    _write(tmp_path / "images" / "a.png", np.zeros((4, 4, 3), np.uint8), "RGB")
    ds = load_folder_dataset(tmp_path / "images", tmp_path / "labels", 2)
    assert ds.labeled_indices == []


def test_folder_errors(tmp_path):
    (tmp_path / "images").mkdir()
    (tmp_path / "labels").mkdir()
    _write(tmp_path / "images" / "a.png", np.zeros((4, 4, 3), np.uint8), "RGB")
    _write(tmp_path / "labels" / "a.png", np.zeros((3, 4), np.uint8), "L")
    with pytest.raises(ValidationError):
        load_folder_dataset(tmp_path / "images", tmp_path / "labels", 2)
    lab = np.zeros((4, 4), np.uint8)
    lab[0, 0] = 7
    _write(tmp_path / "labels" / "a.png", lab, "L")
    with pytest.raises(ValidationError, match="a.png"):
        load_folder_dataset(tmp_path / "images", tmp_path / "labels", 2)
    lab[0, 0] = 255
    _write(tmp_path / "labels" / "a.png", lab, "L")
    assert len(load_folder_dataset(tmp_path / "images", tmp_path / "labels", 2).labeled_indices) == 1


def test_save_load_round_trip(tmp_path):
    ds = generate_synthetic(SyntheticSceneConfig(height=16, width=16, seed=2), 3)
    save_folder_dataset(ds, tmp_path)
    back = load_folder_dataset(tmp_path / "images", tmp_path / "labels", ds.num_classes)
    assert back.ids == ds.ids
    assert all(np.array_equal(a, b) for a, b in zip(back.images, ds.images))
    assert all(np.array_equal(a, b) for a, b in zip(back.labels, ds.labels))


def test_sampler_batches(small_synth):
    sampler = BatchSampler(small_synth, 2, 3)
    batch = sampler.sample(gen(0))
    assert len(batch.x_l) == 2 and len(batch.y_l) == 2 and len(batch.x_u) == 3
    labeled = {small_synth.ids[i] for i in small_synth.labeled_indices}
    assert labeled == small_synth.labeled
