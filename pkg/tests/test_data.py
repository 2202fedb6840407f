import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from snt.data import (
    AugmentConfig,
    AugmentParams,
    GenConfig,
    NetpbmError,
    SceneDataset,
    apply_augment,
    augment,
    batch_iterator,
    generate_scene,
    read_pgm,
    read_ppm,
    read_scene,
    write_dataset,
    write_labels,
    write_pgm,
    write_ppm,
    write_scene,
)
from snt.tensor import ConfigurationError


def test_single_figure_shows_every_part():
    sc = generate_scene(1)
    assert set(np.unique(sc.labels)) == set(range(7))


def test_generation_is_deterministic():
    a, b = generate_scene(42), generate_scene(42)
    assert a.image.tobytes() == b.image.tobytes() and a.labels.tobytes() == b.labels.tobytes()
    assert generate_scene(43).labels.tobytes() != a.labels.tobytes()


def test_background_fraction_over_1000_seeds():
    fr = [(generate_scene(s).labels == 0).mean() for s in range(1000)]
    assert 0.4 <= min(fr) and max(fr) <= 0.9


@pytest.mark.parametrize("seed", range(30))
def test_min_contrast_separates_region_colors(seed):
    # with texture and jitter off every region is a single flat color
    cfg = GenConfig(min_contrast=0.6, distinct_sleeves=True, texture_amplitude=0.0, color_jitter=0.0)
    sc = generate_scene(seed, cfg)
    color = {k: sc.image[sc.labels == k] for k in range(7)}
    for k, px in color.items():
        assert np.ptp(px, axis=0).max() == 0, k
    # background, head (skin), torso (shirt), left arm (sleeve), left leg (pants)
    reps = [color[k][0] for k in (0, 1, 2, 3, 5)]
    for i in range(len(reps)):
        for j in range(i + 1, len(reps)):
            assert np.linalg.norm(reps[i] - reps[j]) >= 0.6 - 1e-12


def test_unreachable_contrast_rejected():
    with pytest.raises(ConfigurationError, match="min_contrast|no color"):
        generate_scene(0, GenConfig(min_contrast=1.5))


def test_instances_consistent_with_labels():
    cfg = GenConfig(figures=(2, 2), scale=(0.55, 0.7))
    for s in range(20):
        sc = generate_scene(s, cfg)
        assert np.array_equal(sc.labels > 0, sc.instances > 0)
        assert set(np.unique(sc.instances)) <= {0, 1, 2}


def test_oversized_figures_rejected():
    with pytest.raises(ConfigurationError, match="does not fit"):
        generate_scene(0, GenConfig(scale=(3.0, 3.0)))


def test_identity_augmentation_is_noop(toy7):
    sc = generate_scene(5)
    out = apply_augment(sc, AugmentParams(), (64, 64), toy7)
    np.testing.assert_array_equal(out.labels, sc.labels)
    np.testing.assert_array_equal(out.instances, sc.instances)
    np.testing.assert_allclose(out.image, sc.image, atol=1e-12)


def test_double_flip_restores_labels(toy7):
    sc = generate_scene(6)
    params = AugmentParams(scale=1.0, flip=True)
    twice = apply_augment(apply_augment(sc, params, (64, 64), toy7), params, (64, 64), toy7)
    np.testing.assert_array_equal(twice.labels, sc.labels)


def test_flip_swaps_sides(toy7):
    sc = generate_scene(7)
    f = apply_augment(sc, AugmentParams(flip=True), (64, 64), toy7)
    assert (f.labels == 3).sum() == (sc.labels == 4).sum()


@pytest.mark.parametrize("seed", range(100))
def test_augmented_labels_subset_and_paired(toy7, seed):
    rng = np.random.default_rng(seed)
    sc = generate_scene(seed, GenConfig(figures=(1, 2), scale=(0.55, 0.9)))
    out = augment(sc, AugmentConfig(), toy7, rng)
    assert set(np.unique(out.labels)) <= set(np.unique(sc.labels)) | {0}
    assert out.labels.shape == (64, 64)
    # label/instance pairing survives: every (label, instance) pair existed before,
    # up to the left/right swap of a flip
    before = {(int(l), int(i)) for l, i in zip(sc.labels.ravel(), sc.instances.ravel())}
    swap = {3: 4, 4: 3, 5: 6, 6: 5}
    after = {(int(l), int(i)) for l, i in zip(out.labels.ravel(), out.instances.ravel())}
    assert after <= before | {(swap.get(l, l), i) for l, i in before} | {(0, 0)}


def test_small_scale_pads_with_background(toy7):
    sc = generate_scene(8)
    out = apply_augment(sc, AugmentParams(scale=0.5), (64, 64), toy7)
    assert (out.labels[:10] == 0).all() and (out.instances[:10] == 0).all()
    np.testing.assert_allclose(out.image[0, 0], sc.image.reshape(-1, 3).mean(axis=0), atol=1e-12)


def test_scene_round_trip(tmp_path):
    sc = generate_scene(9)
    write_scene(sc, tmp_path, "a")
    back = read_scene(tmp_path, "a")
    np.testing.assert_array_equal(back.labels, sc.labels)
    np.testing.assert_array_equal(back.instances, sc.instances)
    assert np.abs(back.image - sc.image).max() <= 0.5 / 255 + 1e-12
    # rewriting is byte-exact
    write_scene(back, tmp_path, "b")
    for ext in (".ppm", ".labels.pgm", ".inst.pgm"):
        assert (tmp_path / f"a{ext}").read_bytes() == (tmp_path / f"b{ext}").read_bytes()


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(1, 9), st.integers(0, 2**31 - 1))
def test_pgm_round_trip(h, w, seed):
    import tempfile, pathlib
    vals = np.random.default_rng(seed).integers(0, 256, size=(h, w))
    with tempfile.TemporaryDirectory() as d:
        p = pathlib.Path(d) / "x.pgm"
        write_pgm(p, vals)
        np.testing.assert_array_equal(read_pgm(p), vals)


def test_header_comments_accepted(tmp_path):
    p = tmp_path / "c.pgm"
    p.write_bytes(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    np.testing.assert_array_equal(read_pgm(p), [[1, 2]])


@pytest.mark.parametrize("blob,match", [
    (b"P2\n1 1\n255\n0", "magic"),
    (b"P5\n1 1\n65535\n\x00\x00", "maxval"),
    (b"P5\n2 2\n255\n\x00", "raster"),
    (b"P5\nx 1\n255\n\x00", "malformed"),
])
def test_malformed_pgm_rejected(tmp_path, blob, match):
    p = tmp_path / "bad.pgm"
    p.write_bytes(blob)
    with pytest.raises(NetpbmError, match=match):
        read_pgm(p)


def test_label_ids_above_254_rejected(tmp_path):
    with pytest.raises(NetpbmError, match="reserved"):
        write_labels(tmp_path / "x.pgm", np.array([[300]]))
    write_labels(tmp_path / "ok.pgm", np.array([[255, 3]]))  # ignore is fine
    with pytest.raises(NetpbmError):
        write_labels(tmp_path / "y.pgm", np.array([[9]]), num_labels=7)


def test_dimension_mismatch_rejected(tmp_path):
    write_scene(generate_scene(1), tmp_path, "s")
    write_pgm(tmp_path / "s.labels.pgm", np.zeros((8, 8)))
    with pytest.raises(NetpbmError, match="dims"):
        read_scene(tmp_path, "s")


def test_ppm_quantization_bound(tmp_path, rng):
    img = rng.random((5, 4, 3))
    write_ppm(tmp_path / "i.ppm", img)
    assert np.abs(read_ppm(tmp_path / "i.ppm") - img).max() <= 1 / 255


def test_dataset_manifest_and_batches(tmp_path):
    ids = write_dataset(tmp_path, 3, 10)
    man = json.loads((tmp_path / "dataset.json").read_text())
    assert man["ids"] == ids and man["gen_config"] == GenConfig().to_dict()
    sizes = [len(b[3]) for b in batch_iterator(tmp_path, 4)]
    assert sizes == [4, 4, 2]
    a = [i for b in batch_iterator(tmp_path, 4, shuffle_seed=1) for i in b[3]]
    b = [i for b in batch_iterator(tmp_path, 4, shuffle_seed=1) for i in b[3]]
    c = [i for b in batch_iterator(tmp_path, 4, shuffle_seed=1, epoch=1) for i in b[3]]
    assert a == b and sorted(a) == ids and c != a
    images, labels, inst, _ = next(batch_iterator(tmp_path, 4))
    assert images.shape == (4, 3, 64, 64) and images.dtype == np.float32
    assert labels.shape == (4, 64, 64)


def test_in_memory_dataset_equals_disk(tmp_path):
    write_dataset(tmp_path, 4, 3)
    disk = SceneDataset.load(tmp_path)
    mem = SceneDataset.generate(4, 3)
    for x, y in zip(disk.scenes, mem.scenes):
        np.testing.assert_array_equal(x.image, y.image)
        np.testing.assert_array_equal(x.labels, y.labels)


def test_missing_file_names_the_id(tmp_path):
    write_dataset(tmp_path, 0, 2)
    (tmp_path / "00001.inst.pgm").unlink()
    with pytest.raises(FileNotFoundError, match="00001"):
        SceneDataset.load(tmp_path)
