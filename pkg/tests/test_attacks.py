from __future__ import annotations

import math
import random

import numpy as np
import pytest

from pbench.attacks import (
    AttackConfig,
    AttackError,
    backdoor_attack,
    flip_labels,
    poison_count,
    stamp_patch,
    stamp_test_set,
)
from pbench.manifest import FeatureGrid, read_feature_file, serialize_manifest, sha256
from pbench.synthdata import GenConfig, generate, partition_map, stratified_split


@pytest.fixture(scope="module")
def default_data():
    ds = generate(GenConfig())
    _, split = stratified_split(ds.annotation, 0.7, 1)
    return ds, split


def test_poison_count_is_exact_floor():
    assert poison_count(0.005, 9600) == 48
    assert poison_count(0.005, 9690) == 48
    assert poison_count(0.01, 9690) == 96
    assert poison_count(0.02, 9690) == 193
    assert poison_count(0.0, 9690) == 0


def test_half_percent_flips_48(default_data):
    ds, split = default_data
    poisoned, log = flip_labels(ds.annotation, split, AttackConfig(rate=0.005))
    assert len(log) == 48 and not log.clamped
    part = partition_map(split)
    for e in log.entries:
        assert e.old_label == "Truck" and e.new_label == "Car" and not e.patched
        assert part[e.id] == "train"


def test_two_percent_clamps_to_train_trucks(default_data):
    ds, split = default_data
    _, log = flip_labels(ds.annotation, split, AttackConfig(rate=0.02))
    assert (log.requested, log.eligible, len(log)) == (193, 182, 182)
    assert log.clamped
    assert "# clamped\ttrue" in log.to_tsv()


def test_zero_rate_is_identity(default_data):
    ds, split = default_data
    poisoned, log = flip_labels(ds.annotation, split, AttackConfig(rate=0.0))
    assert serialize_manifest(poisoned) == serialize_manifest(ds.annotation)
    assert len(log) == 0 and not log.vacuous


def test_vacuous_attack_warns(default_data, caplog):
    ds, split = default_data
    _, log = flip_labels(ds.annotation, split, AttackConfig(rate=0.0001))
    assert len(log) == 0 and log.vacuous
    assert "vacuous" in caplog.text


def test_confinement_and_exact_count_randomized(default_data):
    ds, split = default_data
    rng = random.Random(11)
    before = ds.annotation.by_id()
    for _ in range(20):
        rate = rng.choice([0.001, 0.003, 0.005, 0.01, 0.015, 0.03])
        cfg = AttackConfig(rate=rate, seed=rng.randrange(1000))
        poisoned, log = flip_labels(ds.annotation, split, cfg)
        assert len(log) == min(math.floor(rate * 9690 + 1e-9), 182)
        changed = {rid for rid, rec in poisoned.by_id().items() if rec != before[rid]}
        assert changed == set(log.ids())


def test_selection_is_deterministic_and_seeded(default_data):
    ds, split = default_data
    a = flip_labels(ds.annotation, split, AttackConfig(seed=4))[1].ids()
    assert a == flip_labels(ds.annotation, split, AttackConfig(seed=4))[1].ids()
    assert a != flip_labels(ds.annotation, split, AttackConfig(seed=5))[1].ids()


def test_stamp_patch_contract():
    rng = np.random.default_rng(0)
    g = FeatureGrid(rng.random((16, 16), dtype=np.float32) * 0.9)
    s = stamp_patch(g, AttackConfig())
    assert int((s.values == 1.0).sum()) == 9
    assert np.all(s.values[13:, 13:] == 1.0)
    mask = np.ones((16, 16), bool)
    mask[13:, 13:] = False
    assert s.values[mask].tobytes() == g.values[mask].tobytes()
    assert stamp_patch(s, AttackConfig()) == s
    assert stamp_patch(g, AttackConfig(patch_rows=0, patch_cols=0)) == g


def test_patch_size_defaults_and_fit():
    assert AttackConfig().patch_shape(16, 16) == (3, 3)
    assert AttackConfig().patch_shape(128, 128) == (12, 12)
    with pytest.raises(AttackError):
        stamp_patch(FeatureGrid(np.zeros((2, 2), np.float32)), AttackConfig())


def test_config_validation():
    with pytest.raises(AttackError):
        AttackConfig(rate=1.5)
    with pytest.raises(AttackError):
        AttackConfig(source="Car", target="Car")
    with pytest.raises(AttackError):
        AttackConfig(kind="clean_label")


def test_backdoor_attack(default_data):
    ds, split = default_data
    cfg = AttackConfig(kind="backdoor_patch", rate=0.005)
    poisoned, modified, log = backdoor_attack(ds.features, ds.feature_files, split, cfg)
    assert len(log) == 48 and all(e.patched for e in log.entries)
    assert set(modified) == set(log.ids())
    # same selection as the plain flip
    assert log.ids() == flip_labels(ds.annotation, split, AttackConfig(rate=0.005))[1].ids()
    before, after = ds.features.by_id(), poisoned.by_id()
    changed_feat = [rid for rid in before if before[rid][3] != after[rid][3]]
    assert sorted(changed_feat) == sorted(modified)
    for rid, data in modified.items():
        assert after[rid][3] == sha256(data).hex()
        assert after[rid][1] == "Car"
        g = read_feature_file(data)
        assert np.all(g.values[13:, 13:] == 1.0)


def test_stamp_test_set(default_data):
    ds, split = default_data
    out = stamp_test_set(ds.grids, split, ds.labels, "Truck", AttackConfig())
    assert len(out) == 78
    for rid, g in out.items():
        assert np.all(g.values[13:, 13:] == 1.0)
        assert np.array_equal(g.values[:13], ds.grids[rid].values[:13])
        assert not np.all(ds.grids[rid].values[13:, 13:] == 1.0)  # original untouched
    assert stamp_test_set(ds.grids, split, ds.labels, "Nothing", AttackConfig()) == {}
