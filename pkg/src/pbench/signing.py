"""Stage keys, manifest signatures and the verify-before-consume chain check.

Every stage signs ``PBENCH-SIG/1 0x00 stage 0x00 SHA-256(manifest bytes)``.
Signature schemes sit behind a small backend registry; ML-DSA-65 is the
default and Ed25519 is registered for comparison and fast tests.
"""
from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from cryptography.exceptions import InvalidSignature
from cryptography.hazmat.primitives.asymmetric import ed25519, mldsa

from .manifest import ROOTED_STAGES, STAGES, ManifestError, StageManifest, parse_manifest, sha256
from .provenance import ABORT_LINE, NoCommittedRoot, latest_root, manifest_root

SIG_DOMAIN = b"PBENCH-SIG/1"
KEY_MAGIC = b"PBK1"
SIG_MAGIC = b"PBS1"
DEFAULT_SCHEME = "ML-DSA-65"

STAGE_ROLES = {
    "raw": "device",
    "annotation": "annotator",
    "features": "pipeline",
    "splits": "orchestrator",
    "model": "trainer",
}
ROLES = tuple(STAGE_ROLES.values())


class SigningError(ValueError):
    pass


class KeyFormatError(SigningError):
    pass


# -- backends ----------------------------------------------------------------

@dataclass(frozen=True)
class Backend:
    name: str
    public_key_size: int
    secret_key_size: int
    signature_size: int
    generate: Callable[[], tuple[bytes, bytes]]
    sign: Callable[[bytes, bytes], bytes]
    verify: Callable[[bytes, bytes, bytes], bool]
    check_public: Callable[[bytes], None]


def _mldsa_generate() -> tuple[bytes, bytes]:
    sk = mldsa.MLDSA65PrivateKey.generate()
    # the 32-byte seed is the compact FIPS 204 private key form
    return sk.public_key().public_bytes_raw(), sk.private_bytes_raw()


def _mldsa_sign(secret: bytes, message: bytes) -> bytes:
    return mldsa.MLDSA65PrivateKey.from_seed_bytes(secret).sign(message)


def _mldsa_verify(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        mldsa.MLDSA65PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def _ed_generate() -> tuple[bytes, bytes]:
    sk = ed25519.Ed25519PrivateKey.generate()
    return sk.public_key().public_bytes_raw(), sk.private_bytes_raw()


def _ed_sign(secret: bytes, message: bytes) -> bytes:
    return ed25519.Ed25519PrivateKey.from_private_bytes(secret).sign(message)


def _ed_verify(public: bytes, message: bytes, signature: bytes) -> bool:
    try:
        ed25519.Ed25519PublicKey.from_public_bytes(public).verify(signature, message)
    except (InvalidSignature, ValueError):
        return False
    return True


def _length_check(size: int):
    def check(public: bytes) -> None:
        if len(public) != size:
            raise KeyFormatError(f"public key is {len(public)} bytes, scheme expects {size}")
    return check


BACKENDS: dict[str, Backend] = {
    "ML-DSA-65": Backend("ML-DSA-65", 1952, 32, 3309, _mldsa_generate, _mldsa_sign, _mldsa_verify,
                         _length_check(1952)),
    "Ed25519": Backend("Ed25519", 32, 32, 64, _ed_generate, _ed_sign, _ed_verify, _length_check(32)),
}


def get_backend(scheme: str) -> Backend:
    try:
        return BACKENDS[scheme]
    except KeyError:
        raise SigningError(f"unsupported signature scheme {scheme!r}; known: {', '.join(BACKENDS)}") from None


# -- keys and signatures -----------------------------------------------------

def fingerprint(public_key: bytes) -> bytes:
    return hashlib.sha256(public_key).digest()


@dataclass(frozen=True)
class StagePublicKey:
    role: str
    scheme: str
    public_key: bytes

    @property
    def fingerprint(self) -> bytes:
        return fingerprint(self.public_key)


@dataclass(frozen=True)
class StageKeypair:
    role: str
    scheme: str
    public_key: bytes
    secret_key: bytes = field(repr=False)

    def public(self) -> StagePublicKey:
        return StagePublicKey(self.role, self.scheme, self.public_key)


@dataclass(frozen=True)
class StageSignature:
    stage: str
    manifest_hash: bytes
    signature: bytes
    signer: bytes  # SHA-256 fingerprint of the signing public key
    scheme: str = DEFAULT_SCHEME


def keygen(role: str, scheme: str = DEFAULT_SCHEME) -> StageKeypair:
    if role not in ROLES:
        raise SigningError(f"unknown role {role!r}; expected one of {', '.join(ROLES)}")
    backend = get_backend(scheme)
    public, secret = backend.generate()
    return StageKeypair(role, scheme, public, secret)


def signing_message(stage: str, manifest_bytes: bytes) -> bytes:
    return SIG_DOMAIN + b"\x00" + stage.encode("utf-8") + b"\x00" + sha256(manifest_bytes)


def sign_manifest(keypair: StageKeypair, stage: str, manifest_bytes: bytes) -> StageSignature:
    if stage not in STAGE_ROLES:
        raise SigningError(f"unknown stage {stage!r}")
    if STAGE_ROLES[stage] != keypair.role:
        raise SigningError(f"role {keypair.role} may not sign stage {stage} (needs {STAGE_ROLES[stage]})")
    backend = get_backend(keypair.scheme)
    sig = backend.sign(keypair.secret_key, signing_message(stage, manifest_bytes))
    return StageSignature(stage, sha256(manifest_bytes), sig, fingerprint(keypair.public_key), keypair.scheme)


def verify_manifest(public: StagePublicKey, stage: str, manifest_bytes: bytes, sig: StageSignature) -> bool:
    """True iff ``sig`` is a valid signature over this manifest for this stage.

    A bad signature is a ``False`` result. Only a malformed public key raises.
    """
    backend = get_backend(public.scheme)
    backend.check_public(public.public_key)
    if sig.stage != stage or sig.scheme != public.scheme or sig.signer != public.fingerprint:
        return False
    if sig.manifest_hash != sha256(manifest_bytes):
        return False
    return backend.verify(public.public_key, signing_message(stage, manifest_bytes), sig.signature)


# -- file formats ------------------------------------------------------------

def _lp(data: bytes) -> bytes:
    if len(data) > 255:
        raise KeyFormatError("length-prefixed field longer than 255 bytes")
    return bytes([len(data)]) + data


def _read_lp(data: bytes, off: int) -> tuple[bytes, int]:
    if off >= len(data):
        raise KeyFormatError("truncated field")
    n = data[off]
    end = off + 1 + n
    if end > len(data):
        raise KeyFormatError("truncated field")
    return data[off + 1:end], end


def encode_key(role: str, scheme: str, key: bytes, secret: bool) -> bytes:
    return KEY_MAGIC + (b"S" if secret else b"P") + _lp(scheme.encode()) + _lp(role.encode()) + key


def decode_key(data: bytes) -> tuple[str, str, bytes, bool]:
    if data[:4] != KEY_MAGIC or len(data) < 5 or data[4:5] not in (b"P", b"S"):
        raise KeyFormatError("not a PBK1 key file")
    secret = data[4:5] == b"S"
    scheme, off = _read_lp(data, 5)
    role, off = _read_lp(data, off)
    return role.decode(), scheme.decode(), data[off:], secret


def save_public_key(pub: StagePublicKey) -> bytes:
    return encode_key(pub.role, pub.scheme, pub.public_key, secret=False)


def load_public_key(data: bytes) -> StagePublicKey:
    role, scheme, key, secret = decode_key(data)
    if secret:
        raise KeyFormatError("expected a public key file, got a secret key")
    get_backend(scheme).check_public(key)
    return StagePublicKey(role, scheme, key)


def save_keypair(kp: StageKeypair) -> bytes:
    # secret key files carry the public key too so a keypair restores from one file
    return encode_key(kp.role, kp.scheme, struct.pack("<H", len(kp.public_key)) + kp.public_key + kp.secret_key,
                      secret=True)


def load_keypair(data: bytes) -> StageKeypair:
    role, scheme, body, secret = decode_key(data)
    if not secret:
        raise KeyFormatError("expected a secret key file")
    (n,) = struct.unpack_from("<H", body)
    public, sk = body[2:2 + n], body[2 + n:]
    backend = get_backend(scheme)
    backend.check_public(public)
    if len(sk) != backend.secret_key_size:
        raise KeyFormatError(f"secret key is {len(sk)} bytes, scheme expects {backend.secret_key_size}")
    return StageKeypair(role, scheme, public, sk)


def encode_signature(sig: StageSignature) -> bytes:
    return (SIG_MAGIC + _lp(sig.stage.encode()) + sig.manifest_hash.hex().encode()
            + sig.signer.hex().encode() + _lp(sig.scheme.encode())
            + struct.pack("<I", len(sig.signature)) + sig.signature)


def decode_signature(data: bytes) -> StageSignature:
    if data[:4] != SIG_MAGIC:
        raise KeyFormatError("not a PBS1 signature file")
    stage, off = _read_lp(data, 4)
    try:
        mhash = bytes.fromhex(data[off:off + 64].decode())
        signer = bytes.fromhex(data[off + 64:off + 128].decode())
    except ValueError:
        raise KeyFormatError("bad digest field in signature file") from None
    if len(mhash) != 32 or len(signer) != 32:
        raise KeyFormatError("truncated signature file")
    scheme, off = _read_lp(data, off + 128)
    if off + 4 > len(data):
        raise KeyFormatError("truncated signature file")
    (n,) = struct.unpack_from("<I", data, off)
    sig = data[off + 4:]
    if len(sig) != n:
        # a short signature still decodes so that verification reports it as invalid
        sig = sig[:n]
    return StageSignature(stage.decode(), mhash, sig, signer, scheme.decode())


# -- chain verification ------------------------------------------------------

def sig_abort_line(stage: str) -> str:
    return f"✗ SIGNATURE INVALID AT STAGE {stage} --- ABORT."


def linkage_abort_line(stage: str) -> str:
    return f"✗ CHAIN LINKAGE BROKEN AT STAGE {stage} --- ABORT."


def incomplete_line(what: str) -> str:
    return f"✗ INCOMPLETE CHAIN: {what} --- ABORT."


@dataclass(frozen=True)
class StageCheck:
    stage: str
    ok: bool
    kind: str = "pass"  # pass | merkle | signature | linkage | incomplete | no-root
    message: str = ""


@dataclass
class ChainReport:
    checks: list[StageCheck] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return bool(self.checks) and all(c.ok for c in self.checks)

    @property
    def failure(self) -> StageCheck | None:
        return next((c for c in self.checks if not c.ok), None)

    def lines(self) -> list[str]:
        out = []
        for c in self.checks:
            out.append(f"PASS {c.stage}" if c.ok else c.message)
        return out


def run_paths(run_dir: str | os.PathLike) -> dict[str, Path]:
    root = Path(run_dir)
    return {
        "objects": root / "objects",
        "manifests": root / "manifests",
        "signatures": root / "signatures",
        "keys": root / "keys",
        "roots": root / "roots.log",
    }


def manifest_path(run_dir, stage: str) -> Path:
    return run_paths(run_dir)["manifests"] / f"{stage}.manifest"


def signature_path(run_dir, stage: str) -> Path:
    return run_paths(run_dir)["signatures"] / f"{stage}.sig"


def public_key_path(run_dir, role: str) -> Path:
    return run_paths(run_dir)["keys"] / f"{role}.pub"


def verify_stage(run_dir: str | os.PathLike, stage: str,
                 upstream: bytes | None = None) -> tuple[StageCheck, bytes | None]:
    """Check one stage: committed root (rooted stages), signature, then prev linkage.

    ``upstream`` is the raw bytes of the previous stage's manifest (None for raw).
    Returns the check and the verified manifest bytes (None on failure).
    """
    paths = {
        "manifest": manifest_path(run_dir, stage),
        "signature": signature_path(run_dir, stage),
        "key": public_key_path(run_dir, STAGE_ROLES[stage]),
    }
    for what, p in paths.items():
        if not p.exists():
            return StageCheck(stage, False, "incomplete", incomplete_line(f"missing {what} for stage {stage} ({p})")), None
    data = paths["manifest"].read_bytes()
    try:
        pub = load_public_key(paths["key"].read_bytes())
        sig = decode_signature(paths["signature"].read_bytes())
    except SigningError as exc:
        return StageCheck(stage, False, "signature", f"{sig_abort_line(stage)} ({exc})"), None
    try:
        manifest: StageManifest | None = parse_manifest(data)
    except (ManifestError, UnicodeDecodeError):
        manifest = None

    if stage in ROOTED_STAGES and manifest is not None and manifest.stage == stage:
        try:
            committed = latest_root(run_paths(run_dir)["roots"], "features")
        except NoCommittedRoot as exc:
            return StageCheck(stage, False, "no-root", incomplete_line(str(exc))), None
        declared = manifest.merkle_root
        actual = manifest_root(manifest) if stage == "features" else declared
        if declared != committed or actual != committed:
            return StageCheck(stage, False, "merkle", ABORT_LINE), None

    if pub.role != STAGE_ROLES[stage] or not verify_manifest(pub, stage, data, sig):
        return StageCheck(stage, False, "signature", sig_abort_line(stage)), None
    if manifest is None or manifest.stage != stage:
        # signed but unparseable: the signer vouched for garbage
        return StageCheck(stage, False, "signature", sig_abort_line(stage)), None
    expected_prev = None if upstream is None else sha256(upstream)
    if manifest.prev_manifest_hash != expected_prev:
        return StageCheck(stage, False, "linkage", linkage_abort_line(stage)), None
    return StageCheck(stage, True), data


def verify_chain(run_dir: str | os.PathLike, stages: tuple[str, ...] = STAGES) -> ChainReport:
    """Verify every stage in order; stops at the first failure."""
    report = ChainReport()
    upstream: bytes | None = None
    for i, stage in enumerate(stages):
        if i > 0 and upstream is None:
            break
        check, data = verify_stage(run_dir, stage, upstream)
        report.checks.append(check)
        if not check.ok:
            break
        upstream = data
    return report
