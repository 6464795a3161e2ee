"""Content hashing, Merkle dataset commitment and the append-only root log.

The tree follows the RFC 6962 shape: leaves and interior nodes are domain
separated (0x00 / 0x01 prefixes) and a list of n > 1 leaves splits at the
largest power of two strictly below n.
"""
from __future__ import annotations

import hashlib
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Sequence

from .manifest import SampleRecord, StageManifest, check_token

log = logging.getLogger(__name__)

LEAF_PREFIX = b"\x00"
NODE_PREFIX = b"\x01"
UNIT_SEP = b"\x1f"

ABORT_LINE = "✗ MERKLE ROOT MISMATCH --- ABORT."

EMPTY_ROOT = hashlib.sha256(b"").digest()


class NoCommittedRoot(LookupError):
    """The log has no entry for the requested stage (distinct from a mismatch)."""


class ProofError(ValueError):
    pass


def hash_file(path: str | os.PathLike, chunk_size: int = 1 << 16) -> bytes:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        while chunk := fh.read(chunk_size):
            h.update(chunk)
    return h.digest()


def leaf_preimage(rec: SampleRecord) -> bytes:
    return (
        LEAF_PREFIX
        + rec.id.encode("utf-8") + UNIT_SEP
        + rec.label.encode("utf-8") + UNIT_SEP
        + rec.h_raw + UNIT_SEP
        + rec.h_feat
    )


def leaf_digest(rec: SampleRecord) -> bytes:
    return hashlib.sha256(leaf_preimage(rec)).digest()


def node_digest(left: bytes, right: bytes) -> bytes:
    return hashlib.sha256(NODE_PREFIX + left + right).digest()


def _split_point(n: int) -> int:
    k = 1
    while k << 1 < n:
        k <<= 1
    return k


def _fold(leaves: Sequence[bytes], lo: int, hi: int, nodes: dict[tuple[int, int], bytes]) -> bytes:
    if hi - lo == 1:
        digest = leaves[lo]
    else:
        k = lo + _split_point(hi - lo)
        digest = node_digest(_fold(leaves, lo, k, nodes), _fold(leaves, k, hi, nodes))
    nodes[(lo, hi)] = digest
    return digest


@dataclass(frozen=True)
class MerkleTree:
    leaves: tuple[bytes, ...]
    root: bytes
    nodes: dict[tuple[int, int], bytes] = field(default_factory=dict, repr=False, compare=False)

    def __len__(self) -> int:
        return len(self.leaves)


def tree_from_leaves(leaves: Sequence[bytes]) -> MerkleTree:
    leaves = tuple(leaves)
    if not leaves:
        log.warning("building a Merkle tree over zero records; root is SHA-256 of the empty string")
        return MerkleTree((), EMPTY_ROOT)
    nodes: dict[tuple[int, int], bytes] = {}
    root = _fold(leaves, 0, len(leaves), nodes)
    return MerkleTree(leaves, root, nodes)


def build_tree(records: Sequence[SampleRecord]) -> MerkleTree:
    """Commit ``records`` (already in canonical id order) to a Merkle root."""
    keys = [r.id.encode("utf-8") for r in records]
    if any(b <= a for a, b in zip(keys, keys[1:])):
        raise ValueError("records must be sorted by id with no duplicates")
    return tree_from_leaves([leaf_digest(r) for r in records])


def manifest_root(m: StageManifest) -> bytes:
    """Merkle root recomputed from a sample-bearing manifest's records."""
    return build_tree(m.samples()).root


@dataclass(frozen=True)
class MerkleProof:
    index: int
    tree_size: int
    path: tuple[tuple[str, bytes], ...]  # (side of the sibling: "L" or "R", digest), leaf to root
    root: bytes


def prove_inclusion(tree: MerkleTree, index: int) -> MerkleProof:
    n = len(tree.leaves)
    if not 0 <= index < n:
        raise IndexError(f"leaf index {index} out of range for tree of size {n}")
    path = []
    lo, hi = 0, n
    while hi - lo > 1:
        k = lo + _split_point(hi - lo)
        if index < k:
            path.append(("R", tree.nodes[(k, hi)]))
            hi = k
        else:
            path.append(("L", tree.nodes[(lo, k)]))
            lo = k
    path.reverse()
    return MerkleProof(index, n, tuple(path), tree.root)


def proof_length_bounds(n: int) -> tuple[int, int]:
    """Shortest and longest audit path over all leaves of an n-leaf tree."""
    if n == 1:
        return 0, 0
    k = _split_point(n)
    depth = k.bit_length() - 1
    lo, hi = proof_length_bounds(n - k)
    return 1 + min(depth, lo), 1 + max(depth, hi)


def verify_inclusion(record: SampleRecord, proof: MerkleProof) -> bool:
    acc = leaf_digest(record)
    for side, sibling in proof.path:
        if len(sibling) != 32:
            raise ProofError("audit path digest is not 32 bytes")
        if side == "L":
            acc = node_digest(sibling, acc)
        elif side == "R":
            acc = node_digest(acc, sibling)
        else:
            raise ProofError(f"bad side marker {side!r}")
    return acc == proof.root


def format_proof(proof: MerkleProof) -> str:
    return "\t".join([str(proof.index)] + [f"{side}:{d.hex()}" for side, d in proof.path])


def parse_proof(line: str, root: bytes, tree_size: int) -> MerkleProof:
    parts = line.rstrip("\n").split("\t")
    try:
        index = int(parts[0])
    except ValueError:
        raise ProofError(f"bad proof index {parts[0]!r}") from None
    path = []
    for item in parts[1:]:
        side, _, hexd = item.partition(":")
        if side not in ("L", "R") or len(hexd) != 64:
            raise ProofError(f"malformed path element {item!r}")
        try:
            path.append((side, bytes.fromhex(hexd)))
        except ValueError:
            raise ProofError(f"malformed path element {item!r}") from None
    return MerkleProof(index, tree_size, tuple(path), root)


# -- append-only root log ----------------------------------------------------

def record_root(root: bytes, log_path: str | os.PathLike, stage: str = "features",
                timestamp: str | None = None) -> str:
    """Append ``timestamp TAB stage TAB root-hex``; returns the line written."""
    check_token(stage, "stage")
    if len(root) != 32:
        raise ValueError("root must be a 32-byte digest")
    ts = timestamp or datetime.now(timezone.utc).strftime("%Y-%m-%dT%H:%M:%S.%fZ")
    line = f"{ts}\t{stage}\t{root.hex()}\n"
    with open(log_path, "a", encoding="utf-8") as fh:
        fh.write(line)
        fh.flush()
        os.fsync(fh.fileno())
    return line


def latest_root(log_path: str | os.PathLike, stage: str = "features") -> bytes:
    path = Path(log_path)
    if not path.exists():
        raise NoCommittedRoot(f"no committed root: log {path} does not exist")
    found = None
    for line in path.read_text(encoding="utf-8").splitlines():
        parts = line.split("\t")
        if len(parts) == 3 and parts[1] == stage:
            found = parts[2]
    if found is None:
        raise NoCommittedRoot(f"no committed root for stage {stage} in {path}")
    return bytes.fromhex(found)


def check_root(expected: bytes, log_path: str | os.PathLike, stage: str = "features") -> bool:
    """Compare ``expected`` with the latest committed root for ``stage``.

    Raises :class:`NoCommittedRoot` when there is nothing to compare against.
    """
    return latest_root(log_path, stage) == expected
