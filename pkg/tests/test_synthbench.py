import json

import numpy as np
import pytest

from modetreg.evalmetrics import dice, warp_labels
from modetreg.fieldops import folding_fraction
from modetreg.synthbench import (FieldGenerationError, endpoint_error, generate_pair, load_pair,
                                 pair_seed, read_manifest, smooth_random_field, write_dataset)

from . import oracles


def test_zero_displacement_pair():
    p = generate_pair((16, 16, 16), max_disp=0, seed=2)
    assert np.array_equal(p.fixed.data, p.moving.data)
    assert not p.gt_field.data.any()
    assert np.array_equal(p.labels_fixed.data, p.labels_moving.data)


def test_seed_determinism():
    a, b = generate_pair(seed=5), generate_pair(seed=5)
    for key in ("fixed", "moving", "gt_field", "labels_fixed", "labels_moving"):
        assert getattr(a, key).data.tobytes() == getattr(b, key).data.tobytes()
    c = generate_pair(seed=6)
    assert not np.array_equal(a.moving.data, c.moving.data)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_default_pair_self_consistent(seed):
    p = generate_pair((32, 32, 32), 5, 3.0, 4.0, seed=seed)
    assert folding_fraction(p.gt_field.data) == 0
    assert np.abs(p.gt_field.data).max() == pytest.approx(3.0, rel=1e-6)
    assert dice(p.labels_fixed, warp_labels(p.labels_moving, p.gt_field))[1] == 1.0
    for img in (p.fixed.data, p.moving.data):
        assert img.min() >= 0 and img.max() <= 1
    assert set(np.unique(p.labels_moving.data)) >= {0, 1}
    assert p.labels_fixed.data.dtype == np.int32


def test_field_rescaling(rng):
    f = smooth_random_field((12, 12, 12), 2.0, 3.0, rng)
    assert np.abs(f).max() == pytest.approx(2.0)


def test_unreachable_fold_free_field():
    with pytest.raises(FieldGenerationError, match="fold-free"):
        generate_pair((16, 16, 16), max_disp=20.0, smooth=0.5, seed=0)


def test_endpoint_error_examples():
    gt = np.zeros((3, 8, 8, 8))
    gt[0] = 2.0
    assert endpoint_error(np.zeros_like(gt), gt) == (2.0, 2.0)
    assert endpoint_error(gt, gt) == (0.0, 0.0)


def test_endpoint_error_oracle(rng):
    a, b = rng.standard_normal((2, 3, 9, 8, 7))
    got = endpoint_error(a, b, 2)
    want = oracles.endpoint_error(a, b, 2)
    assert got == pytest.approx(want, abs=1e-7)
    with pytest.raises(ValueError):
        endpoint_error(a, b, 4)


def test_pair_seed_distinct():
    seeds = {pair_seed(7, i) for i in range(50)}
    assert len(seeds) == 50
    assert pair_seed(7, 3) == pair_seed(7, 3)


def test_dataset_roundtrip(tmp_path):
    manifest = write_dataset(tmp_path / "data", 2, (12, 12, 12), max_disp=1.0, smooth=3.0, seed=4)
    entries = read_manifest(manifest)
    assert len(entries) == 2
    raw = json.loads(manifest.read_text())
    assert set(raw[0]) == {"fixed", "moving", "labels_fixed", "labels_moving", "gt_field"}
    assert "/" not in raw[0]["fixed"]
    pair = load_pair(entries[1])
    ref = generate_pair((12, 12, 12), 5, 1.0, 3.0, pair_seed(4, 1))
    assert np.array_equal(pair["fixed"].data[0], ref.fixed.data[0])
    assert np.array_equal(pair["gt_field"].data, ref.gt_field.data)
    assert np.array_equal(pair["labels_moving"].data, ref.labels_moving.data)


def test_manifest_errors(tmp_path):
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps({"fixed": "a"}))
    with pytest.raises(ValueError, match="list"):
        read_manifest(bad)
    bad.write_text(json.dumps([{"fixed": "a"}]))
    with pytest.raises(ValueError, match="moving"):
        read_manifest(bad)
