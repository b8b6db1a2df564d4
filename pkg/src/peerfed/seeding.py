"""Stable derivation of independent RNG seeds from a base seed.

Every stochastic choice in the package (weight init, shuffles, cohort
draws, initiator picks, fault injection) gets its own derived seed so that
runs are reproducible bit-for-bit and streams never alias.
"""

from __future__ import annotations

import hashlib


def derive_seed(base: int, *parts: object) -> int:
    """Hash (base, *parts) into a 64-bit seed.

    Deterministic across processes and platforms; distinct label parts
    give statistically independent streams.
    """
    h = hashlib.sha256()
    h.update(str(int(base)).encode("ascii"))
    for part in parts:
        h.update(b"|")
        h.update(str(part).encode("utf-8"))
    return int.from_bytes(h.digest()[:8], "little")
