"""Fixed-size block partition of the curve-ordered token stream.

Token stream layout, in curve positions:

    [0, n_valid)                      real vision cells (curve order)
    [n_valid, M_v * m)                vision padding
    [M_v * m, M_v * m + n_cond)       condition tokens
    [M_v * m + n_cond, M_total * m)   condition padding

Vision and condition segments are padded separately, so condition tokens
always begin at a block boundary and the condition mask stays exact.
Padding cells are virtual: they occupy trailing curve positions and carry
no 3D coordinates, so they contribute no adjacency.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .errors import ShapeError
from .sfc import GridDims, Permutation, padded_token_count

__all__ = ["BlockLayout", "StaticMasks", "build_layout", "adjacency_mask", "condition_mask"]

# offsets covering half of the 26-neighborhood; the other half comes from symmetry
_HALF_OFFSETS = [
    (dt, dh, dw)
    for dt in (-1, 0, 1)
    for dh in (-1, 0, 1)
    for dw in (-1, 0, 1)
    if (dt, dh, dw) > (0, 0, 0)
]


@dataclass(frozen=True)
class BlockLayout:
    """Block bookkeeping for one (dims, m, n_cond) configuration."""

    m: int
    n_valid: int
    n_cond: int
    M_v: int
    M_c: int

    @property
    def M_total(self) -> int:
        return self.M_v + self.M_c

    @property
    def padded_vision(self) -> int:
        return self.M_v * self.m

    @property
    def padded_total(self) -> int:
        return self.M_total * self.m

    @property
    def cond_start(self) -> int:
        """First curve position of the condition segment."""
        return self.padded_vision

    @property
    def valid_len(self) -> int:
        return self.n_valid + self.n_cond

    @cached_property
    def cell_to_block(self) -> np.ndarray:
        """Block id of every curve position: ``i // m``."""
        return np.arange(self.padded_total, dtype=np.int64) // self.m

    @cached_property
    def token_valid_mask(self) -> np.ndarray:
        """Boolean mask over curve positions; False on padding."""
        mask = np.zeros(self.padded_total, dtype=bool)
        mask[: self.n_valid] = True
        mask[self.cond_start : self.cond_start + self.n_cond] = True
        mask.setflags(write=False)
        return mask

    @cached_property
    def block_valid_counts(self) -> np.ndarray:
        """Valid tokens per block (< m only in the last block of a segment)."""
        counts = self.token_valid_mask.reshape(self.M_total, self.m).sum(axis=1)
        counts.setflags(write=False)
        return counts


def build_layout(dims: GridDims, m: int, n_cond_tokens: int = 0) -> BlockLayout:
    """Partition ``dims`` worth of vision tokens plus condition tokens into m-blocks."""
    if m < 1:
        raise ShapeError(f"block size must be >= 1, got {m}")
    if n_cond_tokens < 0:
        raise ShapeError(f"condition token count must be >= 0, got {n_cond_tokens}")
    n_valid = dims.n_cells
    padded_v, _ = padded_token_count(n_valid, m)
    if n_cond_tokens:
        padded_c, _ = padded_token_count(n_cond_tokens, m)
        m_c = padded_c // m
    else:
        m_c = 0
    return BlockLayout(m=m, n_valid=n_valid, n_cond=n_cond_tokens, M_v=padded_v // m, M_c=m_c)


def adjacency_mask(layout: BlockLayout, dims: GridDims, perm: Permutation) -> np.ndarray:
    """Block pairs whose valid cells touch in the 26-neighborhood.

    ``adja[i, j]`` is True iff some cell of vision block ``i`` is within
    Chebyshev distance 1 of some cell of vision block ``j``.  Symmetric,
    diagonal True (every block attends its own key-value block).
    """
    if perm.dims != dims:
        raise ShapeError("permutation was built for different dims")
    if layout.n_valid != dims.n_cells:
        raise ShapeError("layout was built for different dims")
    t, h, w = dims.as_tuple()
    # block id of each grid cell: cell c sits at curve position inverse[c]
    block_grid = (perm.inverse // layout.m).reshape(t, h, w)

    adja = np.zeros((layout.M_v, layout.M_v), dtype=bool)
    np.fill_diagonal(adja, True)
    for dt, dh, dw in _HALF_OFFSETS:
        src = block_grid[
            max(dt, 0) : t + min(dt, 0),
            max(dh, 0) : h + min(dh, 0),
            max(dw, 0) : w + min(dw, 0),
        ]
        dst = block_grid[
            max(-dt, 0) : t + min(-dt, 0),
            max(-dh, 0) : h + min(-dh, 0),
            max(-dw, 0) : w + min(-dw, 0),
        ]
        adja[src.ravel(), dst.ravel()] = True
    return adja | adja.T


def condition_mask(layout: BlockLayout) -> np.ndarray:
    """Rows/columns touching any condition block: ``i >= M_v or j >= M_v``."""
    idx = np.arange(layout.M_total)
    is_cond = idx >= layout.M_v
    return is_cond[:, None] | is_cond[None, :]


@dataclass(frozen=True)
class StaticMasks:
    """Per-stage masks that depend only on resolution and the partition."""

    cond: np.ndarray
    adja: np.ndarray

    def __post_init__(self):
        self.cond.setflags(write=False)
        self.adja.setflags(write=False)

    @classmethod
    def build(cls, layout: BlockLayout, dims: GridDims, perm: Permutation) -> "StaticMasks":
        return cls(cond=condition_mask(layout), adja=adjacency_mask(layout, dims, perm))
