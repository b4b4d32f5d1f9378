from __future__ import annotations

import hashlib


def stable_hash(*parts) -> int:
    """64-bit hash of the parts' string forms; stable across processes."""
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode("utf-8"), digest_size=8)
    return int.from_bytes(h.digest(), "little")
