"""Targeted label-flip and backdoor-patch poisoning as manifest transformations."""
from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Mapping

import numpy as np

from .manifest import FeatureGrid, StageManifest, read_feature_file, sha256, write_feature_file

log = logging.getLogger(__name__)

KINDS = ("label_flip", "backdoor_patch")


class AttackError(ValueError):
    pass


def default_patch_size(rows: int) -> int:
    return 12 if rows >= 64 else 3


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "label_flip"
    rate: float = 0.005
    source: str = "Truck"
    target: str = "Car"
    patch_rows: int | None = None  # None: 3 below 64 rows, 12 from 64 rows up
    patch_cols: int | None = None
    patch_value: float = 1.0
    seed: int = 1

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise AttackError(f"unknown attack kind {self.kind!r}; expected one of {', '.join(KINDS)}")
        if not (0.0 <= self.rate <= 1.0):
            raise AttackError(f"rate {self.rate} outside [0, 1]")
        if self.source == self.target:
            raise AttackError("source and target class must differ")
        if not (0.0 <= self.patch_value <= 1.0):
            raise AttackError("patch_value must lie in [0, 1]")
        for n in (self.patch_rows, self.patch_cols):
            if n is not None and n < 0:
                raise AttackError("patch size must be non-negative")

    def patch_shape(self, rows: int, cols: int) -> tuple[int, int]:
        pr = self.patch_rows if self.patch_rows is not None else default_patch_size(rows)
        pc = self.patch_cols if self.patch_cols is not None else default_patch_size(rows)
        if pr > rows or pc > cols:
            raise AttackError(f"patch {pr}x{pc} does not fit a {rows}x{cols} grid")
        return pr, pc

    def echo(self) -> dict:
        return {
            "kind": self.kind, "rate": self.rate, "source": self.source, "target": self.target,
            "patch_rows": self.patch_rows, "patch_cols": self.patch_cols,
            "patch_value": self.patch_value, "seed": self.seed,
        }

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], base: "AttackConfig | None" = None) -> "AttackConfig":
        kw = {}
        for key, conv in (("kind", str), ("rate", float), ("source", str), ("target", str),
                          ("patch_rows", int), ("patch_cols", int), ("patch_value", float), ("seed", int)):
            name = f"attack.{key}"
            if name in values:
                kw[key] = conv(values[name])
        return replace(base or cls(), **kw)


@dataclass(frozen=True)
class FlipEntry:
    id: str
    old_label: str
    new_label: str
    patched: bool = False


@dataclass
class FlipLog:
    entries: list[FlipEntry]
    config: AttackConfig
    requested: int
    eligible: int
    vacuous: bool = False
    notes: list[str] = field(default_factory=list)

    @property
    def clamped(self) -> bool:
        return self.requested > self.eligible

    def ids(self) -> list[str]:
        return [e.id for e in self.entries]

    def __len__(self) -> int:
        return len(self.entries)

    def to_tsv(self) -> str:
        lines = [f"# {k}\t{v}" for k, v in sorted(self.config.echo().items())]
        lines.append(f"# requested\t{self.requested}")
        lines.append(f"# eligible\t{self.eligible}")
        lines.append(f"# clamped\t{str(self.clamped).lower()}")
        lines.append("id\told_label\tnew_label\tpatched")
        lines += [f"{e.id}\t{e.old_label}\t{e.new_label}\t{str(e.patched).lower()}" for e in self.entries]
        return "\n".join(lines) + "\n"


def poison_count(rate: float, total: int) -> int:
    """floor(rate * total), computed exactly on the decimal value of ``rate``."""
    return math.floor(Fraction(str(rate)) * total)


def _select(annotation: StageManifest, partitions: Mapping[str, str], cfg: AttackConfig):
    eligible = [r[0] for r in annotation.records if r[1] == cfg.source and partitions.get(r[0]) == "train"]
    requested = poison_count(cfg.rate, len(annotation.records))
    k = min(requested, len(eligible))
    # substream keyed by the attack seed so the choice is independent of other seeded draws
    salt = int.from_bytes(hashlib.sha256(b"attack-select").digest()[:8], "little")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([cfg.seed & 0xFFFFFFFFFFFFFFFF, salt])))
    picked = sorted(rng.choice(len(eligible), size=k, replace=False).tolist()) if k else []
    chosen = [eligible[i] for i in picked]
    if cfg.rate > 0 and k == 0:
        log.warning("attack is vacuous: rate %s selects no %s training records", cfg.rate, cfg.source)
    if requested > len(eligible):
        log.warning("requested %d flips but only %d %s training records exist; clamped",
                    requested, len(eligible), cfg.source)
    return chosen, requested, len(eligible)


def _relabel(annotation: StageManifest, new_fields: Mapping[str, tuple[str, ...]]) -> StageManifest:
    records = tuple(new_fields.get(r[0], r) for r in annotation.records)
    return replace(annotation, records=records)


def flip_labels(annotation: StageManifest, split: StageManifest | Mapping[str, str],
                cfg: AttackConfig) -> tuple[StageManifest, FlipLog]:
    partitions = _partitions(split)
    chosen, requested, eligible = _select(annotation, partitions, cfg)
    by_id = annotation.by_id()
    changes = {}
    entries = []
    for rid in chosen:
        rec = by_id[rid]
        changes[rid] = (rec[0], cfg.target) + tuple(rec[2:])
        entries.append(FlipEntry(rid, rec[1], cfg.target))
    flog = FlipLog(entries, cfg, requested, eligible, vacuous=cfg.rate > 0 and not entries)
    return (_relabel(annotation, changes) if changes else annotation), flog


def stamp_patch(g: FeatureGrid, cfg: AttackConfig) -> FeatureGrid:
    pr, pc = cfg.patch_shape(g.rows, g.cols)
    if pr == 0 or pc == 0:
        return g
    values = g.values.copy()
    values[g.rows - pr:, g.cols - pc:] = np.float32(cfg.patch_value)
    return FeatureGrid(values)


def backdoor_attack(annotation: StageManifest, feature_files: Mapping[str, bytes],
                    split: StageManifest | Mapping[str, str], cfg: AttackConfig):
    """Relabel the selected records and stamp the trigger into their feature files.

    Returns the poisoned manifest (h_feat updated so it stays self-consistent),
    a dict of rewritten feature files by id, and the FlipLog.
    """
    partitions = _partitions(split)
    chosen, requested, eligible = _select(annotation, partitions, cfg)
    by_id = annotation.by_id()
    changes = {}
    modified: dict[str, bytes] = {}
    entries = []
    for rid in chosen:
        rec = by_id[rid]
        stamped = write_feature_file(stamp_patch(read_feature_file(feature_files[rid]), cfg))
        modified[rid] = stamped
        changes[rid] = (rec[0], cfg.target, rec[2], sha256(stamped).hex())
        entries.append(FlipEntry(rid, rec[1], cfg.target, patched=True))
    flog = FlipLog(entries, cfg, requested, eligible, vacuous=cfg.rate > 0 and not entries)
    return (_relabel(annotation, changes) if changes else annotation), modified, flog


def stamp_test_set(grids: Mapping[str, FeatureGrid], split: StageManifest | Mapping[str, str],
                   labels: Mapping[str, str], cls: str, cfg: AttackConfig) -> dict[str, FeatureGrid]:
    """Patched copies of every ``cls`` test grid; the inputs are left untouched."""
    partitions = _partitions(split)
    return {
        rid: stamp_patch(grids[rid], cfg)
        for rid in sorted(grids, key=lambda s: s.encode("utf-8"))
        if partitions.get(rid) == "test" and labels.get(rid) == cls
    }


def _partitions(split: StageManifest | Mapping[str, str]) -> Mapping[str, str]:
    if isinstance(split, StageManifest):
        return {r[0]: r[1] for r in split.records}
    return split
