"""Deterministic per-replica random streams and replica-level parallelism.

Every replica draws from its own counter-based Philox stream keyed by
(master seed, experiment tag, replica index), so results depend neither on
the replica count nor on how replicas are scheduled across workers.
"""

from __future__ import annotations

import zlib
from typing import Callable

import numpy as np
from joblib import Parallel, delayed


def tag_key(tag: str | int) -> int:
    return tag if isinstance(tag, int) else zlib.crc32(tag.encode())


def stream(seed: int, *key: str | int) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(tag_key(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def _run_chunk(fn, seed, tag, start, stop):
    return [fn(stream(seed, tag, i), i) for i in range(start, stop)]


def map_replicas(fn: Callable[[np.random.Generator, int], object], n: int, seed: int, tag: str,
                 threads: int = 1, start: int = 0) -> list:
    """[fn(rng_i, i) for i in start..start+n-1] with rng_i = stream(seed, tag, i).

    Replicas are split into contiguous chunks across `threads` worker
    processes; the returned list is always in replica order.
    """
    if threads <= 1 or n < 2 * threads:
        return _run_chunk(fn, seed, tag, start, start + n)
    bounds = np.linspace(start, start + n, 4 * threads + 1).astype(int)
    parts = Parallel(n_jobs=threads)(
        delayed(_run_chunk)(fn, seed, tag, int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a
    )
    return [item for part in parts for item in part]


def collect_until(fn: Callable[[np.random.Generator, int], object], accept: Callable[[object], bool],
                  wanted: int, seed: int, tag: str, threads: int = 1, batch: int = 1000,
                  max_replicas: int = 10**8) -> tuple[list, list, int]:
    """Run replicas in index order until `wanted` accepted results exist.

    Returns (accepted, rejected, replicas run). Only replicas up to the last
    accepted one count, so all three are independent of batch size and threads.
    """
    accepted: list = []
    rejected: list = []
    pending: list = []
    ran = 0
    while len(accepted) < wanted and ran < max_replicas:
        n = min(batch, max_replicas - ran)
        for res in map_replicas(fn, n, seed, tag, threads, start=ran):
            ran += 1
            if accept(res):
                accepted.append(res)
                rejected.extend(pending)
                pending = []
                if len(accepted) == wanted:
                    return accepted, rejected, ran
            else:
                pending.append(res)
    return accepted, rejected + pending, ran
