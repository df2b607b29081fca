"""Counter-based normal variates for reproducible, chunkable Monte Carlo.

Draw ``i`` of stream ``seed`` is a pure function of ``(seed, i)``: Philox
counter block ``i // 4``, lane ``i % 4``, mapped through the inverse normal
CDF. Generating any sub-range therefore gives bit-identical values no matter
how the caller chunks or parallelizes the work.
"""

from __future__ import annotations

import numpy as np
from numpy.random import Philox
from scipy.special import ndtri

_LANES = 4  # uint64 outputs per Philox counter block


def raw_uint64(seed: int, start: int, count: int) -> np.ndarray:
    """Return draws ``start .. start+count-1`` of the uint64 stream."""
    if count == 0:
        return np.empty(0, dtype=np.uint64)
    first_block = start // _LANES
    last_block = (start + count - 1) // _LANES
    n_blocks = last_block - first_block + 1
    bg = Philox(key=seed, counter=[first_block, 0, 0, 0])
    raw = bg.random_raw(n_blocks * _LANES)
    lo = start - first_block * _LANES
    return raw[lo:lo + count]


def normals(seed: int, start: int, count: int) -> np.ndarray:
    """Standard normal draws; one uint64 consumed per variate."""
    raw = raw_uint64(seed, start, count)
    # top 53 bits -> uniform on (0,1), offset by half an ulp to avoid 0 and 1
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0 ** -53
    return ndtri(u)
