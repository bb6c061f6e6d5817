"""Counter-keyed random streams for reproducible particle ensembles.

Every (master_seed, stream, step) triple selects a Philox key through
``SeedSequence``; particle ``i`` then reads the single Philox counter block
``i + 1``, i.e. four 64-bit words. The variates of a particle therefore depend on
its id and the step only, and positions do not depend on the block size used to
cut the ensemble into work items nor on the number of workers.
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from concurrent.futures import ThreadPoolExecutor
from typing import TypeVar

import numpy as np
from scipy import special

logger = logging.getLogger(__name__)

INITIAL_STREAM = 0
STEP_STREAM = 1
WORDS_PER_PARTICLE = 4

T = TypeVar("T")


def stream_key(master_seed: int, stream: int, counter: int) -> np.ndarray:
    """Philox key for one (seed, stream, step) triple."""
    return np.random.SeedSequence([int(master_seed), stream, int(counter)]).generate_state(2, dtype=np.uint64)


def particle_uniforms(master_seed: int, stream: int, counter: int, start: int, count: int) -> np.ndarray:
    """(count, 4) uniforms in (0, 1) for particles ``start .. start + count - 1``."""
    bitgen = np.random.Philox(counter=int(start), key=stream_key(master_seed, stream, counter))
    raw = bitgen.random_raw(WORDS_PER_PARTICLE * count).reshape(count, WORDS_PER_PARTICLE)
    return ((raw >> np.uint64(11)).astype(float) + 0.5) * 2.0**-53


def particle_normals(master_seed: int, stream: int, counter: int, start: int, count: int, d: int) -> np.ndarray:
    """(count, d) standard normals by inverse CDF of the particle uniforms."""
    return special.ndtri(particle_uniforms(master_seed, stream, counter, start, count)[:, :d])


def blocks(count: int, block_size: int) -> list[slice]:
    """Index ranges of the particle work items."""
    if block_size < 1:
        raise ValueError("block_size must be positive")
    return [slice(start, min(start + block_size, count)) for start in range(0, count, block_size)]


def map_blocks(fn: Callable[[slice], T], count: int, block_size: int, workers: int = 1) -> list[T]:
    """Applies ``fn(block_slice)`` to every block, results in block order."""
    spans = blocks(count, block_size)
    if workers <= 1 or len(spans) <= 1:
        return [fn(span) for span in spans]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, spans))
