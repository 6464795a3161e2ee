from __future__ import annotations

import numpy as np
import pytest

from pbench.attacks import AttackConfig, flip_labels, stamp_patch
from pbench.detect import (
    accuracy_monitor,
    audit_grid_pgm,
    detection_rates,
    label_drift_monitor,
    patch_detector,
    per_class_monitor,
    table_row,
)
from pbench.manifest import FeatureGrid
from pbench.metrics import report_from_predictions
from pbench.synthdata import GenConfig, generate, stratified_split

CLASSES = ("Car", "Truck")


def report(acc_truck: int, acc_car: int, n_truck: int = 100, n_car: int = 900):
    truths = ["Truck"] * n_truck + ["Car"] * n_car
    preds = ["Truck"] * acc_truck + ["Car"] * (n_truck - acc_truck) + ["Car"] * acc_car + ["Truck"] * (n_car - acc_car)
    return report_from_predictions(truths, preds, CLASSES)


def test_accuracy_monitor_threshold():
    base = report(100, 900)
    assert not accuracy_monitor(base, base).triggered
    assert accuracy_monitor(base, report(0, 900)).triggered  # 10pp drop
    assert not accuracy_monitor(base, report(80, 900)).triggered  # 2pp drop
    assert accuracy_monitor(base, report(99, 900), threshold_pp=0).triggered
    assert not accuracy_monitor(report(90, 900), base, threshold_pp=0).triggered


def test_per_class_monitor_is_one_sided():
    base, hit = report(96, 900), report(4, 900)
    alert = per_class_monitor(base, hit)
    assert alert.triggered and [f.item for f in alert.evidence] == ["Truck"]
    assert not per_class_monitor(base, base).triggered
    assert not per_class_monitor(hit, base).triggered


def test_per_class_monitor_skips_absent_class():
    base = report_from_predictions(["Car", "Truck"], ["Car", "Truck"], CLASSES)
    cur = report_from_predictions(["Car"], ["Car"], CLASSES)
    alert = per_class_monitor(base, cur)
    assert not alert.triggered and "Truck skipped" in alert.notes[0]


@pytest.fixture(scope="module")
def default_data():
    ds = generate(GenConfig())
    _, split = stratified_split(ds.annotation, 0.7, 1)
    return ds, split


def test_label_drift_reports_flips(default_data):
    ds, split = default_data
    poisoned, _ = flip_labels(ds.annotation, split, AttackConfig(rate=0.005))
    alert = label_drift_monitor(ds.annotation, poisoned)
    deltas = {f.item: f.observed for f in alert.evidence if f.metric == "count_delta"}
    assert deltas == {"Truck": -48, "Car": 48}
    assert sum(1 for f in alert.evidence if f.metric == "label") == 48
    assert not label_drift_monitor(ds.annotation, ds.annotation).triggered


def test_label_drift_flags_added_record(default_data):
    ds, _ = default_data
    from pbench.manifest import StageManifest

    smaller = StageManifest("annotation", ds.annotation.records[1:])
    alert = label_drift_monitor(smaller, ds.annotation)
    assert alert.triggered and "1 record(s) added" in alert.notes[0]


def test_patch_detector_no_patches(default_data):
    ds, _ = default_data
    assert not patch_detector(ds.grids, (3, 3)).triggered


def test_patch_detector_finds_stamped_grids(default_data):
    ds, split = default_data
    _, log = flip_labels(ds.annotation, split, AttackConfig(rate=0.005))
    grids = dict(ds.grids)
    for rid in log.ids():
        grids[rid] = stamp_patch(grids[rid], AttackConfig())
    alert = patch_detector(grids, (3, 3))
    tpr, fpr = detection_rates([f.item for f in alert.evidence], log.ids(), list(grids))
    assert tpr >= 0.95 and fpr <= 0.01


def test_patch_detector_all_patched_uses_fallback():
    grids = {f"s{i:03d}": FeatureGrid(np.ones((4, 4), np.float32)) for i in range(40)}
    alert = patch_detector(grids, (2, 2))
    assert not alert.triggered
    assert "zero variance" in alert.notes[0]


def test_patch_detector_needs_population():
    grids = {f"s{i}": FeatureGrid(np.zeros((4, 4), np.float32)) for i in range(10)}
    with pytest.raises(ValueError):
        patch_detector(grids, (2, 2))


def test_detectors_are_deterministic(default_data):
    ds, _ = default_data
    a = patch_detector(ds.grids, (3, 3), z_threshold=3)
    b = patch_detector(ds.grids, (3, 3), z_threshold=3)
    assert a.evidence == b.evidence


def test_audit_grid_pgm_header():
    g = FeatureGrid(np.full((2, 3), 1.0, np.float32))
    data = audit_grid_pgm([g] * 3, per_row=2)
    header, _, pixels = data.partition(b"255\n")
    assert header == b"P5\n7 5\n"
    assert len(pixels) == 35


def test_table_row():
    base = report(96, 900)
    alerts = {"accuracy": accuracy_monitor(base, base), "per_class": per_class_monitor(base, report(4, 900))}
    assert table_row("flip", alerts) == "flip\tno\tyes\t-\t-"
