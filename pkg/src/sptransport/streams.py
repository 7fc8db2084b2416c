"""Counter-based random streams keyed by (seed, experiment, path index, purpose).

Every path of an ensemble draws from its own Philox stream, so results do not
depend on how paths are split across workers or in which order they run.
"""
from __future__ import annotations

import os
import zlib
from concurrent.futures import ThreadPoolExecutor

import numpy as np

THREADS_ENV = "SPTRANSPORT_THREADS"


def _tag(label) -> int:
    if isinstance(label, (int, np.integer)):
        return int(label)
    return zlib.crc32(str(label).encode("utf-8"))


def stream(seed: int, experiment: str, index: int, purpose="paths") -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(_tag(experiment), int(index), _tag(purpose)))
    return np.random.Generator(np.random.Philox(ss))


def thread_count() -> int:
    try:
        return max(1, int(os.environ.get(THREADS_ENV, "1")))
    except ValueError:
        return 1


def per_path(draw, seed, experiment, n_paths, purpose="paths", indices=None):
    """Stack ``draw(generator)`` over paths, one stream per path index.

    Work is chunked over a thread pool sized by ``SPTRANSPORT_THREADS``; the
    output is assembled in path-index order, so it is identical for any
    thread count.
    """
    idx = np.arange(n_paths) if indices is None else np.asarray(indices)
    if len(idx) == 0:
        raise ValueError("no paths requested")

    def work(chunk):
        return [draw(stream(seed, experiment, int(i), purpose)) for i in chunk]

    n_threads = thread_count()
    if n_threads == 1 or len(idx) < 256:
        rows = work(idx)
    else:
        chunks = np.array_split(idx, n_threads * 4)
        with ThreadPoolExecutor(n_threads) as pool:
            rows = [r for part in pool.map(work, chunks) for r in part]
    return np.stack(rows)
