"""
Counter-based random streams and block scheduling for particle simulations

Particles are split into fixed-size blocks. Block b of stream s under seed
`seed` draws from a Philox generator keyed by (seed, s << 32 | b), so the
numbers a particle sees depend only on (seed, stream, particle index) and
never on how blocks are spread over worker threads. Initial states are drawn
from the companion key initial_stream(s), so X_0 and the Brownian increments
of a run never share normals.
"""
import math
import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Tuple, TypeVar

import numpy as np

import config
from utils.logger import get_logger

logger = get_logger(__name__)

T = TypeVar("T")

# Stream identifiers; each engine consumes its own family of streams
STREAM_FORWARD = 0
STREAM_FK = 1 << 20
STREAM_FRESH = 2 << 20
STREAM_MC_QUADRATURE = 3 << 20
STREAM_PROBE = 4 << 20
# High bit marks the initial-law draw of a stream; increments keep the stream itself
STREAM_INITIAL = 1 << 31

_MASK_64 = (1 << 64) - 1
_MASK_32 = (1 << 32) - 1


def block_generator(seed: int, stream: int, block: int) -> np.random.Generator:
    """Philox generator for one (seed, stream, block) triple"""
    key = np.array([seed & _MASK_64, ((stream & _MASK_32) << 32) | (block & _MASK_32)], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def initial_stream(stream: int) -> int:
    """Stream that samples X_0 for a simulation running on `stream`"""
    return (stream & _MASK_32) | STREAM_INITIAL


def block_slices(N: int, block_size: Optional[int] = None) -> List[slice]:
    """Contiguous particle blocks [0, B), [B, 2B), ..."""
    block_size = block_size or config.RNG_BLOCK_SIZE
    return [slice(start, min(start + block_size, N)) for start in range(0, N, block_size)]


def resolve_threads(threads: Optional[int]) -> int:
    """0 or None means one worker per CPU"""
    if threads is None or threads <= 0:
        return os.cpu_count() or 1
    return threads


class BlockScheduler:
    """
    Owns the per-block generators of one simulation and runs block tasks,
    serially or on a thread pool; results always come back in block order.
    """

    def __init__(self, N: int, seed: int, stream: int, threads: Optional[int] = None,
                 block_size: Optional[int] = None):
        self.N = N
        self.seed = seed
        self.stream = stream
        self.slices = block_slices(N, block_size)
        self.generators = [block_generator(seed, stream, b) for b in range(len(self.slices))]
        workers = min(resolve_threads(threads), len(self.slices))
        self._executor = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
        logger.debug(f"Scheduler: N={N}, blocks={len(self.slices)}, workers={workers}, stream={stream}")

    def map(self, task: Callable[[int, slice, np.random.Generator], T]) -> List[T]:
        """Run task(block_index, block_slice, generator) for every block"""
        if self._executor is None:
            return [task(b, sl, self.generators[b]) for b, sl in enumerate(self.slices)]
        futures = [
            self._executor.submit(task, b, sl, self.generators[b])
            for b, sl in enumerate(self.slices)
        ]
        # result() re-raises worker exceptions in the caller
        return [f.result() for f in futures]

    def close(self):
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def __enter__(self) -> "BlockScheduler":
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()


def time_grid(t_start: float, t_end: float, dt: float) -> Tuple[int, float]:
    """Number of steps and the uniform step (<= dt) covering [t_start, t_end]"""
    span = t_end - t_start
    if span <= 0.0:
        return 0, 0.0
    steps = max(1, int(math.ceil(span / dt - 1e-9)))
    return steps, span / steps
