"""Deterministic synthetic stand-in for an imbalanced vehicle-audio corpus.

Each class has a smooth horizontal band prototype on a rows x cols grid (rows
are frequency bins, low index = low frequency; cols are time frames). Truck is
Car plus a low-frequency band, so the two are confusable but separable under
clean labels. Samples are ``clamp(prototype + N(0, sigma))`` with the noise
drawn from a per-sample PCG64 substream keyed by (seed, id).
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping

import numpy as np

from .config import ConfigError
from .manifest import (
    MAX_DIM,
    FeatureGrid,
    SampleRecord,
    StageManifest,
    manifest_from_samples,
    sha256,
    sorted_records,
    write_feature_file,
)
from .provenance import build_tree

PRNG_NAME = "numpy.PCG64"

DEFAULT_COUNTS = {
    "Car": 8100,
    "Tram": 600,
    "Truck": 260,
    "Bus": 260,
    "Motorcycle": 250,
    "Bicycle": 220,
}

# (band centre as a fraction of the row range, peak amplitude). Truck is
# derived from Car and has no entry of its own.
_BANDS = {
    "Car": (1 / 3, 0.55),
    "Tram": (0.60, 0.80),
    "Bus": (7 / 15, 0.80),
    "Motorcycle": (11 / 15, 0.80),
    "Bicycle": (0.20, 0.80),
}
_BAND_WIDTH = 0.1  # Gaussian sd of a band, as a fraction of the row range


@dataclass(frozen=True)
class ClassSpec:
    name: str
    count: int
    prototype: np.ndarray = field(repr=False, compare=False)


@dataclass(frozen=True)
class GenConfig:
    rows: int = 16
    cols: int = 16
    noise_sigma: float = 0.30
    truck_car_offset: float = 0.5
    seed: int = 1
    counts: tuple[tuple[str, int], ...] = tuple(DEFAULT_COUNTS.items())
    train_fraction: float = 0.70

    @property
    def class_names(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.counts)

    @property
    def total(self) -> int:
        return sum(n for _, n in self.counts)

    def beta(self, name: str) -> float:
        return dict(self.counts)[name] / self.total

    def class_specs(self) -> list[ClassSpec]:
        protos = prototypes(self)
        return [ClassSpec(name, n, protos[name]) for name, n in self.counts]

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: "GenConfig | None" = None) -> "GenConfig":
        """Apply ``key = value`` settings; class counts use ``count.<Class>`` keys."""
        cfg = base or cls()
        kw: dict = {}
        try:
            for key, conv in (("rows", int), ("cols", int), ("noise_sigma", float),
                              ("truck_car_offset", float), ("seed", int), ("train_fraction", float)):
                if key in values:
                    kw[key] = conv(values[key])
            counts = dict(cfg.counts)
            for key, value in values.items():
                if key.startswith("count."):
                    counts[key[len("count."):]] = int(value)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        kw["counts"] = tuple(counts.items())
        return replace(cfg, **kw)


def _band(rows: int, centre: float, amplitude: float) -> np.ndarray:
    r = np.arange(rows, dtype=np.float64)
    span = max(rows - 1, 1)
    return amplitude * np.exp(-0.5 * ((r - centre * span) / (_BAND_WIDTH * span)) ** 2)


def prototypes(cfg: GenConfig) -> dict[str, np.ndarray]:
    """Noise-free mean pattern per class, float32 in [0, 1]."""
    out: dict[str, np.ndarray] = {}
    extra = [n for n in cfg.class_names if n not in _BANDS and n != "Truck"]
    for name in cfg.class_names:
        if name == "Truck":
            continue
        if name in _BANDS:
            centre, amp = _BANDS[name]
        else:
            # classes beyond the default table get bands in the upper-middle range
            centre, amp = 0.5 + 0.2 * (extra.index(name) + 1) / (len(extra) + 1), 0.80
        column = _band(cfg.rows, centre, amp)
        out[name] = np.repeat(column[:, None], cfg.cols, axis=1)
    if "Truck" in cfg.class_names:
        car = out.get("Car")
        if car is None:
            car = np.repeat(_band(cfg.rows, *_BANDS["Car"])[:, None], cfg.cols, axis=1)
        truck = car.copy()
        truck[: truck_band_rows(cfg.rows)] += cfg.truck_car_offset
        out["Truck"] = truck
    return {k: np.clip(v, 0.0, 1.0).astype(np.float32) for k, v in out.items()}


def truck_band_rows(rows: int) -> int:
    return max(1, rows // 8)


def sample_rng(seed: int, sample_id: str) -> np.random.Generator:
    words = np.frombuffer(hashlib.sha256(sample_id.encode("utf-8")).digest()[:16], dtype="<u4")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, *map(int, words)])))


def sample_ids(name: str, count: int) -> list[str]:
    width = max(5, len(str(count - 1)))
    stem = name.lower()
    return [f"{stem}-{i:0{width}d}" for i in range(count)]


def raw_file_bytes(prototype: np.ndarray, sample_id: str) -> bytes:
    return write_feature_file(FeatureGrid(prototype)) + sample_id.encode("utf-8")


@dataclass
class Dataset:
    config: GenConfig
    raw_files: dict[str, bytes]
    feature_files: dict[str, bytes]
    grids: dict[str, FeatureGrid]
    annotation: StageManifest
    features: StageManifest

    @property
    def labels(self) -> dict[str, str]:
        return {r[0]: r[1] for r in self.annotation.records}

    def raw_manifest(self) -> StageManifest:
        return StageManifest("raw", sorted_records((r[0], r[2]) for r in self.annotation.records))


def validate_config(cfg: GenConfig) -> None:
    if not (1 <= cfg.rows <= MAX_DIM and 1 <= cfg.cols <= MAX_DIM):
        raise ValueError(f"grid {cfg.rows}x{cfg.cols} does not fit the 16-bit feature-file dimensions")
    if cfg.noise_sigma < 0 or not math.isfinite(cfg.noise_sigma):
        raise ValueError("noise_sigma must be a finite non-negative number")
    names = cfg.class_names
    if len(set(names)) != len(names):
        raise ValueError("duplicate class name in counts")
    for name, n in cfg.counts:
        if n <= 0:
            raise ValueError(f"class {name} has count {n}; every class needs at least one sample")


def generate(cfg: GenConfig) -> Dataset:
    validate_config(cfg)
    protos = prototypes(cfg)
    raw_files: dict[str, bytes] = {}
    feature_files: dict[str, bytes] = {}
    grids: dict[str, FeatureGrid] = {}
    samples: list[SampleRecord] = []
    for spec in cfg.class_specs():
        proto = protos[spec.name]
        for sid in sample_ids(spec.name, spec.count):
            noise = sample_rng(cfg.seed, sid).normal(0.0, cfg.noise_sigma, size=proto.shape) if cfg.noise_sigma else 0.0
            grid = FeatureGrid.clamped(proto + noise)
            raw = raw_file_bytes(proto, sid)
            feat = write_feature_file(grid)
            raw_files[sid] = raw
            feature_files[sid] = feat
            grids[sid] = grid
            samples.append(SampleRecord(sid, spec.name, sha256(raw), sha256(feat)))
    annotation = manifest_from_samples("annotation", samples)
    tree = build_tree(annotation.samples())
    features = StageManifest("features", annotation.records, tree.root)
    return Dataset(cfg, raw_files, feature_files, grids, annotation, features)


# -- splits ------------------------------------------------------------------

@dataclass(frozen=True)
class SplitAssignment:
    id: str
    partition: str


def train_count(n: int, train_fraction: float) -> int:
    """round-half-up of fraction * n, kept inside [1, n - 1]."""
    k = math.floor(Fraction(str(train_fraction)) * n + Fraction(1, 2))
    return min(max(k, 1), n - 1)


def stratified_split(
    manifest: StageManifest, train_fraction: float, seed: int
) -> tuple[list[SplitAssignment], StageManifest]:
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie strictly between 0 and 1")
    by_class: dict[str, list[str]] = {}
    for rec in manifest.records:
        by_class.setdefault(rec[1], []).append(rec[0])
    partition: dict[str, str] = {}
    for name in sorted(by_class):
        ids = sorted(by_class[name], key=lambda s: s.encode("utf-8"))
        if len(ids) < 2:
            raise ValueError(f"class {name} has {len(ids)} sample(s); a split needs at least 2")
        class_key = int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")
        rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, class_key])))
        order = rng.permutation(len(ids))
        k = train_count(len(ids), train_fraction)
        for rank, idx in enumerate(order):
            partition[ids[idx]] = "train" if rank < k else "test"
    assignments = [SplitAssignment(rid, partition[rid]) for rid in manifest.ids()]
    split_manifest = StageManifest("splits", sorted_records((a.id, a.partition) for a in assignments))
    return assignments, split_manifest


def partition_map(split_manifest: StageManifest) -> dict[str, str]:
    return {r[0]: r[1] for r in split_manifest.records}
