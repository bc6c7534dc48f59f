import json

import numpy as np
import pytest
import torch

from vitsentry.data import (CLASS_NAMES, LabeledDataset, load_manifest,
                            load_npz, make_synthetic, save_npz, split)
from vitsentry.errors import InputError


def test_make_synthetic_shapes_and_range():
    ds = make_synthetic(50, seed=0)
    assert ds.images.shape == (50, 32, 32, 3)
    assert ds.images.dtype == torch.float32
    assert ds.labels.shape == (50,)
    assert float(ds.images.min()) >= 0.0 and float(ds.images.max()) <= 1.0
    assert ds.num_classes == len(CLASS_NAMES) == 10


def test_make_synthetic_is_deterministic():
    a = make_synthetic(30, seed=5)
    b = make_synthetic(30, seed=5)
    c = make_synthetic(30, seed=6)
    assert torch.equal(a.images, b.images)
    assert torch.equal(a.labels, b.labels)
    assert not torch.equal(a.images, c.images)


def test_make_synthetic_covers_all_classes():
    ds = make_synthetic(200, seed=1)
    counts = torch.bincount(ds.labels, minlength=10)
    assert bool((counts > 0).all())


def test_solid_background_variant():
    grad = make_synthetic(20, seed=2, background="gradient")
    solid = make_synthetic(20, seed=2, background="solid")
    assert not torch.equal(grad.images, solid.images)
    with pytest.raises(InputError):
        make_synthetic(10, background="plaid")


def test_split_partitions_without_overlap():
    ds = make_synthetic(60, seed=3)
    a, b, c = split(ds, [30, 20, 10], seed=9)
    assert (len(a), len(b), len(c)) == (30, 20, 10)
    merged = torch.cat([a.images, b.images, c.images])
    # every source row appears exactly once across the parts
    src = {bytes(row.numpy().tobytes()) for row in ds.images}
    out = [bytes(row.numpy().tobytes()) for row in merged]
    assert len(out) == len(set(out)) == len(src)
    assert set(out) == src


def test_split_is_seeded_and_validates_budget():
    ds = make_synthetic(20, seed=4)
    a1, _ = split(ds, [10, 10], seed=7)
    a2, _ = split(ds, [10, 10], seed=7)
    a3, _ = split(ds, [10, 10], seed=8)
    assert torch.equal(a1.images, a2.images)
    assert not torch.equal(a1.images, a3.images)
    with pytest.raises(InputError):
        split(ds, [15, 10], seed=0)


def test_dataset_validation():
    with pytest.raises(InputError):
        LabeledDataset(torch.zeros(3, 8, 8), torch.zeros(3, dtype=torch.long), 2)
    with pytest.raises(InputError):
        LabeledDataset(torch.zeros(3, 8, 8, 3), torch.zeros(2, dtype=torch.long), 2)
    with pytest.raises(InputError):
        LabeledDataset(torch.zeros(3, 8, 8, 3), torch.tensor([0, 1, 5]), 3)


def test_subset_keeps_alignment():
    ds = make_synthetic(12, seed=0)
    sub = ds.subset(torch.tensor([3, 7]))
    assert torch.equal(sub.images[0], ds.images[3])
    assert torch.equal(sub.labels[1], ds.labels[7])
    assert sub.num_classes == ds.num_classes


def test_npz_roundtrip(tmp_path):
    ds = make_synthetic(15, seed=1)
    path = tmp_path / "data.npz"
    save_npz(path, ds)
    back = load_npz(path)
    assert torch.equal(back.images, ds.images)
    assert torch.equal(back.labels, ds.labels)
    assert back.num_classes == ds.num_classes


def test_manifest_loading(tmp_path):
    ds = make_synthetic(6, seed=2, num_classes=3)
    samples = []
    for i in range(6):
        p = tmp_path / f"img_{i}.npy"
        np.save(p, ds.images[i].numpy())
        samples.append({"path": p.name, "label": int(ds.labels[i])})
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({"num_classes": 3, "samples": samples}))
    back = load_manifest(manifest)
    assert torch.equal(back.images, ds.images)
    assert torch.equal(back.labels, ds.labels)


def test_manifest_requires_dense_labels(tmp_path):
    img = tmp_path / "a.npy"
    np.save(img, np.zeros((32, 32, 3), dtype=np.float32))
    manifest = tmp_path / "manifest.json"
    manifest.write_text(json.dumps({
        "num_classes": 3,
        "samples": [{"path": "a.npy", "label": 0}, {"path": "a.npy", "label": 2}],
    }))
    with pytest.raises(InputError, match="1"):
        load_manifest(manifest)
