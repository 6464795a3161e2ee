"""Dataset records, canonical stage manifests and the binary feature-grid format.

Everything downstream hashes, signs or attacks the byte forms defined here, so
both encoders are canonical: equal logical content always yields equal bytes.

Manifest text layout (UTF-8, LF line endings, no trailing whitespace)::

    pbench/1 <stage>
    prev <64-hex | ->
    <id>\t<field>\t...          one line per record, sorted bytewise by id
    root <64-hex | ->
"""
from __future__ import annotations

import hashlib
import re
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

FORMAT_TOKEN = "pbench/1"

STAGES = ("raw", "annotation", "features", "splits", "model")

# Field layout of one record line per stage; the first field is always the id.
STAGE_FIELDS: dict[str, tuple[str, ...]] = {
    "raw": ("id", "h_raw"),
    "annotation": ("id", "label", "h_raw", "h_feat"),
    "features": ("id", "label", "h_raw", "h_feat"),
    "splits": ("id", "partition"),
    "model": ("id", "digest"),
}

# Stages whose manifests carry a dataset commitment in the root line.
ROOTED_STAGES = ("features", "splits", "model")

DEFAULT_CLASSES = ("Car", "Tram", "Truck", "Bus", "Motorcycle", "Bicycle")

PARTITIONS = ("train", "test")

_HEX64 = re.compile(r"[0-9a-f]{64}\Z")
_CONTROL = re.compile(r"[\x00-\x1f\x7f]")


class ManifestError(ValueError):
    """Invalid manifest content; ``line`` is 1-based when it came from parsing."""

    def __init__(self, message: str, line: int | None = None, record_id: str | None = None):
        self.line = line
        self.record_id = record_id
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class FeatureFormatError(ValueError):
    pass


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def check_token(value: str, what: str) -> None:
    """Ids and labels: nonempty, and no control characters (TAB/LF included)."""
    if not value:
        raise ManifestError(f"empty {what}")
    if _CONTROL.search(value):
        raise ManifestError(f"{what} {value!r} contains a control character", record_id=value)


def is_hex_digest(value: str) -> bool:
    return bool(_HEX64.match(value))


@dataclass(frozen=True)
class SampleRecord:
    id: str
    label: str
    h_raw: bytes
    h_feat: bytes

    def __post_init__(self) -> None:
        check_token(self.id, "id")
        check_token(self.label, "label")
        for name in ("h_raw", "h_feat"):
            digest = getattr(self, name)
            if not isinstance(digest, bytes) or len(digest) != 32:
                raise ManifestError(f"{name} of {self.id!r} is not a 32-byte digest", record_id=self.id)

    def as_fields(self) -> tuple[str, str, str, str]:
        return (self.id, self.label, self.h_raw.hex(), self.h_feat.hex())

    @classmethod
    def from_fields(cls, fields: Sequence[str]) -> "SampleRecord":
        rid, label, h_raw, h_feat = fields
        return cls(rid, label, bytes.fromhex(h_raw), bytes.fromhex(h_feat))


@dataclass(frozen=True)
class StageManifest:
    """One pipeline stage's output. ``records`` hold string fields per ``STAGE_FIELDS``."""

    stage: str
    records: tuple[tuple[str, ...], ...] = ()
    merkle_root: bytes | None = None
    prev_manifest_hash: bytes | None = None

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(tuple(r) for r in self.records))

    def ids(self) -> list[str]:
        return [r[0] for r in self.records]

    def samples(self) -> list[SampleRecord]:
        if self.stage not in ("annotation", "features"):
            raise ManifestError(f"stage {self.stage} does not hold sample records")
        return [SampleRecord.from_fields(r) for r in self.records]

    def by_id(self) -> dict[str, tuple[str, ...]]:
        return {r[0]: r for r in self.records}

    def digest(self) -> bytes:
        return sha256(serialize_manifest(self))


def manifest_from_samples(
    stage: str,
    samples: Iterable[SampleRecord],
    merkle_root: bytes | None = None,
    prev_manifest_hash: bytes | None = None,
) -> StageManifest:
    records = sorted((s.as_fields() for s in samples), key=lambda r: r[0].encode("utf-8"))
    return StageManifest(stage, tuple(records), merkle_root, prev_manifest_hash)


def sorted_records(records: Iterable[Sequence[str]]) -> tuple[tuple[str, ...], ...]:
    return tuple(sorted((tuple(r) for r in records), key=lambda r: r[0].encode("utf-8")))


def _check_field(stage: str, name: str, value: str, rid: str) -> None:
    if name in ("id", "label"):
        check_token(value, name)
    elif name in ("h_raw", "h_feat", "digest"):
        if not is_hex_digest(value):
            raise ManifestError(f"{name} of {rid!r} is not 64 lowercase hex characters", record_id=rid)
    elif name == "partition":
        if value not in PARTITIONS:
            raise ManifestError(f"partition of {rid!r} must be train or test, got {value!r}", record_id=rid)


def validate_manifest(m: StageManifest) -> None:
    if m.stage not in STAGES:
        raise ManifestError(f"unknown stage {m.stage!r}")
    layout = STAGE_FIELDS[m.stage]
    prev_key: bytes | None = None
    for rec in m.records:
        rid = rec[0] if rec else ""
        if len(rec) != len(layout):
            raise ManifestError(f"record {rid!r} has {len(rec)} fields, stage {m.stage} needs {len(layout)}", record_id=rid)
        for name, value in zip(layout, rec):
            if not isinstance(value, str):
                raise ManifestError(f"field {name} of {rid!r} is not a string", record_id=rid)
            _check_field(m.stage, name, value, rid)
        key = rid.encode("utf-8")
        if prev_key is not None:
            if key == prev_key:
                raise ManifestError(f"duplicate id {rid!r}", record_id=rid)
            if key < prev_key:
                raise ManifestError(f"record {rid!r} out of id order", record_id=rid)
        prev_key = key
    for name in ("merkle_root", "prev_manifest_hash"):
        digest = getattr(m, name)
        if digest is not None and len(digest) != 32:
            raise ManifestError(f"{name} is not a 32-byte digest")
    if m.merkle_root is not None and m.stage not in ROOTED_STAGES:
        raise ManifestError(f"stage {m.stage} cannot carry a root")
    if m.stage == "raw" and m.prev_manifest_hash is not None:
        raise ManifestError("raw stage has no upstream manifest")


def serialize_manifest(m: StageManifest) -> bytes:
    validate_manifest(m)
    lines = [f"{FORMAT_TOKEN} {m.stage}", "prev " + (m.prev_manifest_hash.hex() if m.prev_manifest_hash else "-")]
    lines.extend("\t".join(rec) for rec in m.records)
    lines.append("root " + (m.merkle_root.hex() if m.merkle_root else "-"))
    return ("\n".join(lines) + "\n").encode("utf-8")


def _parse_digest_line(line: str, key: str, lineno: int) -> bytes | None:
    prefix = key + " "
    if not line.startswith(prefix):
        raise ManifestError(f"expected '{key} <hex|->'", line=lineno)
    value = line[len(prefix):]
    if value == "-":
        return None
    if not is_hex_digest(value):
        raise ManifestError(f"{key} is not 64 lowercase hex characters", line=lineno)
    return bytes.fromhex(value)


def parse_manifest(data: bytes) -> StageManifest:
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ManifestError(f"not UTF-8 ({exc.reason} at byte {exc.start})") from None
    if not text.endswith("\n"):
        raise ManifestError("missing final LF")
    lines = text[:-1].split("\n")
    if len(lines) < 3:
        raise ManifestError("truncated manifest", line=len(lines))
    head = lines[0].split(" ")
    if len(head) != 2 or head[0] != FORMAT_TOKEN:
        raise ManifestError(f"malformed header, expected '{FORMAT_TOKEN} <stage>'", line=1)
    stage = head[1]
    if stage not in STAGES:
        raise ManifestError(f"unknown stage {stage!r}", line=1)
    prev = _parse_digest_line(lines[1], "prev", 2)
    root = _parse_digest_line(lines[-1], "root", len(lines))
    layout = STAGE_FIELDS[stage]
    records = []
    prev_key: bytes | None = None
    for lineno, line in enumerate(lines[2:-1], start=3):
        fields = line.split("\t")
        if len(fields) != len(layout):
            raise ManifestError(f"expected {len(layout)} TAB-separated fields, got {len(fields)}", line=lineno)
        try:
            for name, value in zip(layout, fields):
                _check_field(stage, name, value, fields[0])
        except ManifestError as exc:
            raise ManifestError(str(exc), line=lineno, record_id=fields[0]) from None
        key = fields[0].encode("utf-8")
        if prev_key is not None:
            if key == prev_key:
                raise ManifestError(f"duplicate id {fields[0]!r}", line=lineno, record_id=fields[0])
            if key < prev_key:
                raise ManifestError(f"unsorted at line {lineno}", line=lineno, record_id=fields[0])
        prev_key = key
        records.append(tuple(fields))
    m = StageManifest(stage, tuple(records), root, prev)
    try:
        validate_manifest(m)
    except ManifestError as exc:
        raise ManifestError(str(exc), line=len(lines)) from None
    return m


# -- feature grids -----------------------------------------------------------

FEATURE_MAGIC = b"FGRD"
_DIMS = struct.Struct("<HH")
MAX_DIM = 0xFFFF


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """rows x cols float32 values in [0, 1], row-major."""

    values: np.ndarray = field(repr=False)

    def __post_init__(self) -> None:
        v = np.ascontiguousarray(self.values, dtype="<f4")
        if v.ndim != 2 or v.shape[0] < 1 or v.shape[1] < 1:
            raise FeatureFormatError(f"grid must be a nonempty 2-D array, got shape {v.shape}")
        if v.shape[0] > MAX_DIM or v.shape[1] > MAX_DIM:
            raise FeatureFormatError(f"grid {v.shape} exceeds 16-bit dimensions")
        if not np.all(np.isfinite(v)):
            raise FeatureFormatError("grid contains non-finite values")
        if v.min() < 0.0 or v.max() > 1.0:
            raise FeatureFormatError("grid values outside [0, 1]")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @classmethod
    def clamped(cls, values: np.ndarray) -> "FeatureGrid":
        return cls(np.clip(np.asarray(values, dtype=np.float32), 0.0, 1.0))

    @property
    def rows(self) -> int:
        return int(self.values.shape[0])

    @property
    def cols(self) -> int:
        return int(self.values.shape[1])

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureGrid):
            return NotImplemented
        return write_feature_file(self) == write_feature_file(other)

    def __hash__(self) -> int:
        return hash(write_feature_file(self))


def write_feature_file(g: FeatureGrid) -> bytes:
    return FEATURE_MAGIC + _DIMS.pack(g.rows, g.cols) + g.values.tobytes(order="C")


def read_feature_file(data: bytes) -> FeatureGrid:
    if data[:4] != FEATURE_MAGIC:
        raise FeatureFormatError("bad magic, expected FGRD")
    if len(data) < 8:
        raise FeatureFormatError("truncated header")
    rows, cols = _DIMS.unpack_from(data, 4)
    if rows == 0 or cols == 0:
        raise FeatureFormatError(f"zero dimension {rows}x{cols}")
    payload = data[8:]
    if len(payload) != rows * cols * 4:
        raise FeatureFormatError(f"payload of {len(payload)} bytes does not match {rows}x{cols} float32")
    values = np.frombuffer(payload, dtype="<f4").reshape(rows, cols)
    if not np.all(np.isfinite(values)):
        raise FeatureFormatError("non-finite value in feature file")
    return FeatureGrid(values.copy())
