import hashlib

import numpy as np
import pytest

from tcsmae.imaging import normalize_hu
from tcsmae.masking import interval_index
from tcsmae.phantom import (
    AIR, BONE, LESION, PhantomSpec, clean_slice, generate_batch, generate_dataset, generate_slice,
    load_dataset, paint_labels,
)


def test_deterministic():
    a = generate_slice(PhantomSpec(seed=2), 5)
    b = generate_slice(PhantomSpec(seed=2), 5)
    assert a[0].tobytes() == b[0].tobytes() and a[1].tobytes() == b[1].tobytes()
    assert generate_slice(PhantomSpec(seed=3), 5)[0].tobytes() != a[0].tobytes()


def test_no_lesions_when_probability_zero():
    _, masks = generate_batch(PhantomSpec(seed=0), 20)
    assert masks.sum() == 0


def test_lesions_present_when_probability_one():
    hu, masks = generate_batch(PhantomSpec(seed=0, lesion_probability=1.0), 10)
    assert all(m.sum() > 0 for m in masks)
    assert hu.shape == masks.shape == (10, 64, 64)


def test_histogram_modes():
    hu, _ = generate_batch(PhantomSpec(seed=1), 100)
    counts, edges = np.histogram(hu, bins=np.arange(-1100, 700, 20))
    centers = (edges[:-1] + edges[1:]) / 2
    peaks = [centers[i] for i in range(1, len(counts) - 1)
             if counts[i] >= counts[i - 1] and counts[i] >= counts[i + 1] and counts[i] > 0.002 * hu.size]
    for mode in (-1000, -800, 40, 400):
        assert min(abs(p - mode) for p in peaks) <= 40, (mode, peaks)


def test_ground_truth_exact():
    spec = PhantomSpec(seed=4, lesion_probability=1.0)
    for i in range(10):
        labels, lesion = paint_labels(spec, i)
        clean = clean_slice(spec, labels)
        assert np.all(clean[lesion] == spec.palette["lesion"][0])
        assert np.array_equal(lesion, labels == LESION)
        assert np.array_equal(generate_slice(spec, i)[1], lesion.astype(np.uint8))


def test_air_and_bone_fall_in_different_intervals():
    hu, _ = generate_batch(PhantomSpec(seed=6), 20)
    labels = np.stack([paint_labels(PhantomSpec(seed=6), i)[0] for i in range(20)])
    idx = interval_index(normalize_hu(hu), 8)
    air = np.bincount(idx[labels == AIR], minlength=8)
    bone = np.bincount(idx[labels == BONE], minlength=8)
    assert air.argmax() != bone.argmax()
    overlap = np.minimum(air / air.sum(), bone / bone.sum()).sum()
    assert overlap < 0.01


def test_spec_validation():
    with pytest.raises(ValueError):
        PhantomSpec(resolution=48)
    with pytest.raises(ValueError):
        PhantomSpec(palette={"air": (-1000.0, -1.0)})
    with pytest.raises(ValueError):
        PhantomSpec(palette={"air": (-2000.0, 1.0)})
    spec = PhantomSpec(seed=3, lesion_probability=0.5)
    assert PhantomSpec.from_dict(spec.to_dict()) == spec


def _tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()


def test_dataset_regeneration_byte_identical(tmp_path):
    spec = PhantomSpec(seed=8, lesion_probability=0.5)
    generate_dataset(spec, 6, tmp_path / "a")
    generate_dataset(spec, 6, tmp_path / "b")
    assert _tree_digest(tmp_path / "a") == _tree_digest(tmp_path / "b")
    assert len(list((tmp_path / "a" / "volumes").glob("*.raw"))) == 6
    assert len(list((tmp_path / "a" / "masks").glob("*.raw"))) == 6
    hu, masks, manifest = load_dataset(tmp_path / "a")
    ref_hu, ref_masks = generate_batch(spec, 6)
    assert np.array_equal(masks, ref_masks)
    assert np.array_equal(hu, np.rint(ref_hu))
    assert manifest["n"] == 6
    with pytest.raises(ValueError):
        generate_dataset(spec, 0, tmp_path / "c")
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "missing")
