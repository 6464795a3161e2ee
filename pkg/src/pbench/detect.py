"""Statistical monitors: aggregate accuracy, per-class recall, label drift and a
region-intensity outlier detector for stamped triggers."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .manifest import FeatureGrid, StageManifest
from .metrics import MetricsReport


@dataclass(frozen=True)
class Finding:
    item: str
    metric: str
    baseline: float | str | None
    observed: float | str | None


@dataclass
class AlertReport:
    control: str
    evidence: list[Finding] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)

    @property
    def triggered(self) -> bool:
        return bool(self.evidence)

    def lines(self) -> list[str]:
        head = f"{self.control}\t{'ALERT' if self.triggered else 'ok'}"
        body = [f"  {f.item}\t{f.metric}\t{f.baseline}\t{f.observed}" for f in self.evidence]
        return [head] + body + [f"  note: {n}" for n in self.notes]


def accuracy_monitor(baseline: MetricsReport, current: MetricsReport, threshold_pp: float = 3.0) -> AlertReport:
    report = AlertReport("accuracy")
    drop_pp = 100 * (baseline.overall_accuracy - current.overall_accuracy)
    if drop_pp > threshold_pp:
        report.evidence.append(Finding("overall", "accuracy", baseline.overall_accuracy, current.overall_accuracy))
    return report


def per_class_monitor(baseline: MetricsReport, current: MetricsReport, threshold: float = 0.20) -> AlertReport:
    report = AlertReport("per_class")
    for cls in baseline.class_order:
        before, after = baseline.recall(cls), current.recall(cls)
        if before is None or after is None:
            report.notes.append(f"{cls} skipped: absent from one of the test sets")
            continue
        if before - after > threshold:
            report.evidence.append(Finding(cls, "recall", before, after))
    return report


def label_drift_monitor(a: StageManifest, b: StageManifest) -> AlertReport:
    """Per-class count deltas, plus per-id label diffs on the shared ids.

    Fires when any class count changes or any shared id changed label, so a
    count-preserving label swap is still reported.
    """
    report = AlertReport("label_drift")
    ca = Counter(r[1] for r in a.records)
    cb = Counter(r[1] for r in b.records)
    for cls in sorted(set(ca) | set(cb)):
        if ca[cls] != cb[cls]:
            report.evidence.append(Finding(cls, "count_delta", ca[cls], cb[cls] - ca[cls]))
    la, lb = a.by_id(), b.by_id()
    for rid in sorted(set(la) & set(lb), key=lambda s: s.encode("utf-8")):
        if la[rid][1] != lb[rid][1]:
            report.evidence.append(Finding(rid, "label", la[rid][1], lb[rid][1]))
    added, removed = len(set(lb) - set(la)), len(set(la) - set(lb))
    if added or removed:
        report.notes.append(f"{added} record(s) added, {removed} removed")
    return report


def region_means(grids: Sequence[FeatureGrid], region: tuple[int, int]) -> np.ndarray:
    pr, pc = region
    return np.array([float(g.values[g.rows - pr:, g.cols - pc:].astype(np.float64).mean()) for g in grids])


@dataclass(frozen=True)
class PatchScan:
    flagged: list[str]
    z: np.ndarray
    fallback: bool


def patch_scan(ids: Sequence[str], grids: Sequence[FeatureGrid], region: tuple[int, int],
               z_threshold: float = 6.0) -> PatchScan:
    if len(grids) < 30:
        raise ValueError(f"patch detector needs at least 30 samples, got {len(grids)}")
    if region[0] < 1 or region[1] < 1:
        raise ValueError("region must cover at least one cell")
    stat = region_means(grids, region)
    mu, sd = float(stat.mean()), float(stat.std())
    if sd > 0 and math.isfinite(sd):
        z = (stat - mu) / sd
        flagged = [rid for rid, zi in zip(ids, z) if zi > z_threshold]
        return PatchScan(flagged, z, False)
    # zero variance: every sample shares one value, so nothing stands out
    z = np.zeros_like(stat)
    return PatchScan([], z, True)


def patch_detector(grids: Mapping[str, FeatureGrid], region: tuple[int, int],
                   z_threshold: float = 6.0) -> AlertReport:
    ids = sorted(grids, key=lambda s: s.encode("utf-8"))
    scan = patch_scan(ids, [grids[i] for i in ids], region, z_threshold)
    report = AlertReport("patch")
    zmap = dict(zip(ids, scan.z))
    report.evidence = [Finding(rid, "region_z", None, round(float(zmap[rid]), 3)) for rid in scan.flagged]
    if scan.fallback:
        report.notes.append("population statistic has zero variance; exact-outlier rule flags nothing")
    return report


def detection_rates(flagged: Sequence[str], poisoned: Sequence[str], population: Sequence[str]) -> tuple[float, float]:
    """(true positive rate, false positive rate) of ``flagged`` against the known poison set."""
    f, p = set(flagged), set(poisoned)
    clean = [i for i in population if i not in p]
    tpr = len(f & p) / len(p) if p else float("nan")
    fpr = sum(1 for i in clean if i in f) / len(clean) if clean else float("nan")
    return tpr, fpr


def audit_grid_pgm(grids: Sequence[FeatureGrid], per_row: int = 8, gap: int = 1) -> bytes:
    """Tile grids into one binary 8-bit PGM image for manual visual audit."""
    if not grids:
        raise ValueError("nothing to render")
    r, c = grids[0].rows, grids[0].cols
    n_rows = math.ceil(len(grids) / per_row)
    h = n_rows * r + (n_rows - 1) * gap
    w = per_row * c + (per_row - 1) * gap
    canvas = np.zeros((h, w), dtype=np.uint8)
    for k, g in enumerate(grids):
        y, x = divmod(k, per_row)
        tile = np.round(g.values * 255).astype(np.uint8)
        canvas[y * (r + gap):y * (r + gap) + r, x * (c + gap):x * (c + gap) + c] = tile
    return f"P5\n{w} {h}\n255\n".encode("ascii") + canvas.tobytes()


CONTROLS = ("accuracy", "per_class", "label_drift", "patch")


def table_row(attack: str, alerts: Mapping[str, AlertReport]) -> str:
    cells = ["-" if c not in alerts else "yes" if alerts[c].triggered else "no" for c in CONTROLS]
    return "\t".join([attack] + cells)
