"""Small shared helpers: atomic file writes and derived random streams."""
from __future__ import annotations

import hashlib
import os
import random
import tempfile
from pathlib import Path
from typing import Optional, Union


def atomic_write(path: Union[str, Path], text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def derive_rng(seed: Optional[int], *labels: object) -> random.Random:
    """Independent stream for ``(seed, *labels)``; ``seed=None`` means OS entropy."""
    if seed is None:
        return random.Random()
    material = repr((seed,) + labels).encode()
    return random.Random(int.from_bytes(hashlib.blake2b(material, digest_size=16).digest(), "big"))
