"""Small shared helpers: seeded RNG streams, deterministic parallel map,
canonical hashing, and stable number formatting."""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor

import numpy as np


def _key_words(part) -> tuple[int, ...]:
    """Map one key part to unsigned 32-bit words for a SeedSequence spawn key."""
    if isinstance(part, (int, np.integer)):
        if part < 0:
            raise ValueError(f"seed key parts must be non-negative, got {part}")
        words = []
        p = int(part)
        while True:
            words.append(p & 0xFFFFFFFF)
            p >>= 32
            if p == 0:
                return tuple(words)
    if isinstance(part, str):
        digest = hashlib.sha256(part.encode("utf-8")).digest()
        return tuple(int.from_bytes(digest[i : i + 4], "little") for i in range(0, 16, 4))
    raise TypeError(f"unsupported seed key part: {part!r}")


def seed_sequence(seed: int, *key) -> np.random.SeedSequence:
    """SeedSequence for a named child stream; a pure function of (seed, key)."""
    spawn_key = tuple(w for part in key for w in _key_words(part))
    return np.random.SeedSequence(seed, spawn_key=spawn_key)


def stream(seed: int, *key) -> np.random.Generator:
    """Independent Generator for the (seed, key) stream."""
    return np.random.default_rng(seed_sequence(seed, *key))


def derive_seed(seed: int, *key) -> int:
    """64-bit child seed for the (seed, key) stream."""
    return int(seed_sequence(seed, *key).generate_state(1, np.uint64)[0])


def map_indexed(fn, n: int, threads: int = 1) -> list:
    """Evaluate fn(i) for i in range(n), optionally on a thread pool.

    Results are returned in index order, so the output is independent of the
    number of workers.
    """
    if threads <= 1 or n <= 1:
        return [fn(i) for i in range(n)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n)))


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves away from zero-point-five-up."""
    return int(np.floor(x + 0.5))


def canonical_json(obj) -> str:
    """JSON text with sorted keys and no whitespace; stable across runs."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def content_hash(obj) -> str:
    """Short sha256 hex digest of an object's canonical JSON form."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def fmt(x) -> str:
    """Shortest round-trip decimal form of a float, for CSV output."""
    return repr(float(x))
