import json

import cv2
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp
from PIL import Image

from sackit.data import (
    DatasetManifest,
    ManifestEntry,
    iter_samples,
    load_manifest,
    load_split,
    prepare_sample,
    save_manifest,
    synth_crack_dataset,
)
from sackit.errors import ConsistencyError, LoadError, PairingError, ParameterError, ShapeError


def _write_pair(root, stem, size=8):
    rng = np.random.default_rng(len(stem))
    Image.fromarray(rng.integers(0, 256, (size, size, 3), dtype=np.uint8)).save(root / f"{stem}.png")
    Image.fromarray((rng.random((size, size)) > 0.8).astype(np.uint8) * 255).save(root / f"{stem}_m.png")
    return {"image": f"{stem}.png", "mask": f"{stem}_m.png"}


def _manifest(root, entries, **extra):
    path = root / "manifest.json"
    path.write_text(json.dumps({"name": "t", "split": "test", "entries": entries, **extra}))
    return path


def test_load_manifest_resolves_relative_paths(tmp_path):
    entries = [_write_pair(tmp_path, f"im{i}") for i in range(3)]
    m = load_manifest(_manifest(tmp_path, entries, declared_size=3))
    assert len(m) == 3
    assert [e.id for e in m] == ["im0", "im1", "im2"]
    assert all(e.image.is_file() and e.mask.is_file() for e in m)


def test_large_declared_listing(tmp_path):
    # a manifest with the full-size test split count, all pointing at one pair on disk
    pair = _write_pair(tmp_path, "a")
    m = load_manifest(_manifest(tmp_path, [pair] * 4582, declared_size=4582))
    assert len(m) == 4582


def test_empty_listing_is_fine(tmp_path):
    assert len(load_manifest(_manifest(tmp_path, []))) == 0


def test_missing_mask_is_a_pairing_error_naming_the_orphan(tmp_path):
    pair = _write_pair(tmp_path, "lonely")
    with pytest.raises(PairingError, match="lonely.png"):
        load_manifest(_manifest(tmp_path, [{"image": pair["image"]}]))
    with pytest.raises(PairingError, match="lonely_m.png"):
        load_manifest(_manifest(tmp_path, [{"mask": pair["mask"]}]))


def test_missing_manifest_and_missing_file(tmp_path):
    with pytest.raises(LoadError, match="nowhere.json"):
        load_manifest(tmp_path / "nowhere.json")
    with pytest.raises(LoadError, match="ghost.png"):
        load_manifest(_manifest(tmp_path, [{"image": "ghost.png", "mask": "ghost.png"}]))


def test_declared_size_mismatch(tmp_path):
    with pytest.raises(ConsistencyError):
        load_manifest(_manifest(tmp_path, [_write_pair(tmp_path, "a")], declared_size=2))


def test_unknown_split_rejected():
    with pytest.raises(ConsistencyError):
        DatasetManifest("x", "holdout")


def test_manifest_round_trip(tmp_path):
    entries = [_write_pair(tmp_path, f"im{i}") for i in range(2)]
    m = load_manifest(_manifest(tmp_path, entries))
    out = save_manifest(m, tmp_path / "copy.json")
    again = load_manifest(out)
    assert [e.image for e in again] == [e.image for e in m]
    assert json.loads(out.read_text())["entries"][0]["image"] == "im0.png"


def test_iteration_visits_every_entry_once(tmp_path):
    entries = [_write_pair(tmp_path, f"im{i}") for i in range(5)]
    m = load_manifest(_manifest(tmp_path, entries))
    ids = [s.id for s in iter_samples(m, 8)]
    assert ids == [f"im{i}" for i in range(5)]
    threaded = load_split(m, 8, workers=3)
    assert threaded.ids == ids


def test_resize_to_target():
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, (448, 448, 3), dtype=np.uint8)
    mask = (rng.random((448, 448)) > 0.9).astype(np.uint8) * 255
    s = prepare_sample(image, mask, 256)
    assert s.image.shape == (256, 256, 3) and s.mask.shape == (256, 256)
    assert s.image.dtype == np.float32 and 0 <= s.image.min() and s.image.max() <= 1
    assert set(np.unique(s.mask)) <= {0, 1}


def test_prepared_pair_passes_through_unchanged():
    rng = np.random.default_rng(1)
    image = rng.random((256, 256, 3)).astype(np.float32)
    mask = (rng.random((256, 256)) > 0.5).astype(np.uint8)
    s = prepare_sample(image, mask, 256)
    assert np.array_equal(s.image, image) and np.array_equal(s.mask, mask)


def test_mask_threshold_by_hand():
    mask = np.array([[0, 255, 0], [0, 255, 0], [0, 0, 0]], dtype=np.uint8)
    s = prepare_sample(np.zeros((3, 3, 3), np.uint8), mask, 3)
    assert s.mask.tolist() == [[0, 1, 0], [0, 1, 0], [0, 0, 0]]
    assert prepare_sample(np.zeros((2, 2, 3), np.uint8), np.array([[127, 128], [128, 127]], np.uint8), 2).mask.tolist() == [[0, 1], [1, 0]]


def test_prepare_sample_errors():
    with pytest.raises(ShapeError):
        prepare_sample(np.zeros((4, 4, 3)), np.zeros((4, 5)), 4)
    for bad in (0, -3, 2.5):
        with pytest.raises(ParameterError):
            prepare_sample(np.zeros((4, 4, 3)), np.zeros((4, 4)), bad)


@settings(max_examples=40, deadline=None)
@given(
    hnp.arrays(np.uint8, st.tuples(st.integers(1, 24), st.integers(1, 24))),
    st.integers(1, 32),
)
def test_binarize_commutes_with_nearest_resize(intensities, target):
    image = np.repeat(intensities[..., None], 3, axis=2)
    threshold_first = prepare_sample(image, intensities, target).mask
    resized = cv2.resize(intensities, (target, target), interpolation=cv2.INTER_NEAREST)
    if intensities.shape == (target, target):
        resized = intensities
    resize_first = (resized > 127).astype(np.uint8)
    if set(np.unique(intensities)) <= {0, 1}:
        resize_first = resized  # already-binary masks are kept as given
    assert np.array_equal(threshold_first, resize_first)


@settings(max_examples=30, deadline=None)
@given(hnp.arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20), st.just(3))), st.integers(2, 24))
def test_prepare_is_idempotent(image, target):
    mask = (image[..., 0] > 100).astype(np.uint8) * 255
    once = prepare_sample(image, mask, target)
    twice = prepare_sample(once.image, once.mask, target)
    assert np.array_equal(once.image, twice.image) and np.array_equal(once.mask, twice.mask)


def test_synthetic_dataset_properties(tmp_path):
    m = synth_crack_dataset(200, 64, 7, tmp_path / "a")
    assert len(m) == 200 and m.declared_size == 200
    data = load_split(load_manifest(m.path), 64)
    fractions = data.masks.reshape(200, -1).mean(axis=1)
    assert (fractions > 0).all() and (fractions < 0.25).all()


def test_synthetic_minimal_and_deterministic(tmp_path):
    one = synth_crack_dataset(1, 32, 123, tmp_path / "one")
    assert len(one) == 1
    assert load_split(one, 32).masks.sum() > 0

    a = load_split(synth_crack_dataset(5, 32, 3, tmp_path / "x"), 32)
    b = load_split(synth_crack_dataset(5, 32, 3, tmp_path / "y"), 32)
    assert np.array_equal(a.images, b.images) and np.array_equal(a.masks, b.masks)
    for ea, eb in zip(load_manifest(tmp_path / "x" / "manifest.json"), load_manifest(tmp_path / "y" / "manifest.json")):
        assert ea.image.read_bytes() == eb.image.read_bytes()
        assert ea.mask.read_bytes() == eb.mask.read_bytes()


def test_synthetic_validation(tmp_path):
    with pytest.raises(ParameterError):
        synth_crack_dataset(0, 32, 0, tmp_path)


def test_entry_id_is_stem():
    from pathlib import Path

    assert ManifestEntry(Path("a/b/crack_01.jpg"), Path("a/m/crack_01.png")).id == "crack_01"
