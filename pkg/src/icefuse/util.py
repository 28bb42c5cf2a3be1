"""Deterministic RNG streams and bounded worker pools."""

import hashlib
import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "ICEFUSE_THREADS"


def derived_rng(seed, *keys):
    """Counter-based generator keyed by (seed, *keys); stable across runs."""
    material = ":".join([str(int(seed))] + [str(k) for k in keys]).encode()
    digest = hashlib.sha256(material).digest()
    root = int.from_bytes(digest[:16], "little")
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(root)))


def worker_count():
    """Worker cap from ICEFUSE_THREADS (default: cpu count, at most 8)."""
    raw = os.environ.get(THREADS_ENV)
    if raw:
        try:
            n = int(raw)
        except ValueError:
            raise ValueError(f"{THREADS_ENV} must be an integer, got {raw!r}")
        if n < 1:
            raise ValueError(f"{THREADS_ENV} must be >= 1, got {n}")
        return n
    return min(os.cpu_count() or 1, 8)


def parallel_map(fn, items, max_workers=None):
    """Map preserving input order; result is independent of worker count."""
    items = list(items)
    workers = max_workers or worker_count()
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))
