"""Content-addressed object store: ``objects/<first two hex>/<full hex>``.

Objects are immutable once written; ``put`` of existing content is a no-op and
``get`` re-hashes what it reads so a swapped file is caught on consumption.
"""
from __future__ import annotations

import hashlib
import os
import tempfile
from pathlib import Path


class ObjectCorrupted(IOError):
    pass


def atomic_write(path: str | os.PathLike, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ObjectStore:
    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)

    def path(self, hexdigest: str) -> Path:
        return self.root / hexdigest[:2] / hexdigest

    def exists(self, hexdigest: str) -> bool:
        return self.path(hexdigest).exists()

    def put(self, data: bytes) -> str:
        hexdigest = hashlib.sha256(data).hexdigest()
        target = self.path(hexdigest)
        if not target.exists():
            atomic_write(target, data)
        return hexdigest

    def get(self, hexdigest: str, verify: bool = True) -> bytes:
        data = self.path(hexdigest).read_bytes()
        if verify and hashlib.sha256(data).hexdigest() != hexdigest:
            raise ObjectCorrupted(f"object {hexdigest} does not match its address")
        return data
