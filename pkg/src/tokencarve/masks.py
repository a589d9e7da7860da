"""Dynamic block-selection masks from block-pooled relevance scores.

The selection mask for each (head, vision query block) row is the union of
three block masks: the dynamic importance selection, the always-on
condition rows/columns, and the static 3D adjacency.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .partition import BlockLayout, StaticMasks

__all__ = [
    "PooledBlocks",
    "SelectionParams",
    "BlockMask",
    "block_pool",
    "relevance",
    "importance_mask",
    "union_mask",
    "build_block_mask",
    "mask_stats",
]


@dataclass(frozen=True)
class PooledBlocks:
    """Per-head block means; ``values`` has shape (heads, blocks, d_k)."""

    values: np.ndarray
    valid_counts: np.ndarray

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ShapeError(f"pooled values must be rank 3, got shape {self.values.shape}")
        if self.valid_counts.shape != (self.values.shape[1],):
            raise ShapeError("valid_counts length must equal the block count")

    @property
    def n_heads(self) -> int:
        return self.values.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.values.shape[1]


@dataclass(frozen=True)
class SelectionParams:
    """Top-k rate and cutoff probability for the importance selection.

    ``per_stage`` holds the per-stage selection rates; stages beyond the
    list reuse its last entry.
    """

    k: float = 0.3
    p: float = 0.3
    per_stage: tuple[float, ...] = (0.3, 0.2)

    def __post_init__(self):
        rates = (self.k, *self.per_stage)
        if any(not (0.0 < r <= 1.0) for r in rates):
            raise ContractError(f"selection rates must be in (0, 1], got {rates}")
        if not (0.0 <= self.p < 1.0):
            raise ContractError(f"cutoff probability must be in [0, 1), got {self.p}")

    def for_stage(self, stage: int) -> "SelectionParams":
        """Params with ``k`` taken from ``per_stage`` for a 0-based stage index."""
        k = self.per_stage[min(stage, len(self.per_stage) - 1)]
        return SelectionParams(k=k, p=self.p, per_stage=self.per_stage)


@dataclass(frozen=True)
class BlockMask:
    """Final selection mask; ``bits`` has shape (heads, M_v, M_total)."""

    bits: np.ndarray

    def __post_init__(self):
        if self.bits.ndim != 3 or self.bits.dtype != np.bool_:
            raise ShapeError(f"mask bits must be a rank-3 boolean array, got {self.bits.shape}")
        self.bits.setflags(write=False)

    @property
    def n_heads(self) -> int:
        return self.bits.shape[0]

    @property
    def selected_fraction(self) -> float:
        return float(self.bits.mean())


def block_pool(x: np.ndarray, layout: BlockLayout) -> PooledBlocks:
    """Mean-pool each block over its valid tokens only.

    ``x`` has shape (heads, N, d_k) with N equal to the padded token count.
    A block with zero valid tokens pools to the zero vector (its count in
    ``valid_counts`` stays 0 as the flag).
    """
    if x.ndim != 3:
        raise ShapeError(f"expected (heads, tokens, d_k), got shape {x.shape}")
    if x.shape[1] != layout.padded_total:
        raise ShapeError(
            f"token axis {x.shape[1]} != padded token count {layout.padded_total}"
        )
    heads, _, d_k = x.shape
    masked = np.where(layout.token_valid_mask[None, :, None], x, 0.0)
    sums = masked.reshape(heads, layout.M_total, layout.m, d_k).sum(axis=2, dtype=np.float64)
    counts = layout.block_valid_counts
    values = sums / np.maximum(counts, 1)[None, :, None]
    return PooledBlocks(values=values, valid_counts=counts.copy())


def relevance(pooled_q: PooledBlocks, pooled_k: PooledBlocks, d_k: int) -> np.ndarray:
    """Row-stochastic block relevance: softmax of pooled scores over key blocks.

    Scores are scaled by 1/sqrt(d_k); the softmax subtracts the row max.
    Query rows are whatever blocks ``pooled_q`` carries (vision blocks in
    the selection pipeline), columns cover all of ``pooled_k``.
    """
    if pooled_q.n_heads != pooled_k.n_heads:
        raise ShapeError("pooled Q and K disagree on head count")
    if pooled_q.values.shape[2] != d_k or pooled_k.values.shape[2] != d_k:
        raise ShapeError("pooled Q/K feature size must equal d_k")
    scores = pooled_q.values @ pooled_k.values.transpose(0, 2, 1)
    scores /= math.sqrt(d_k)
    scores -= scores.max(axis=-1, keepdims=True)
    e = np.exp(scores)
    return e / e.sum(axis=-1, keepdims=True)


def importance_mask(R: np.ndarray, params: SelectionParams, M_v: int) -> np.ndarray:
    """Select, per row, the fewest top blocks whose mass exceeds the cutoff.

    Probabilities are sorted descending (ties broken by ascending block
    index); the selection size is
    ``max(count(prefix_sums <= p) + 1, ceil(k * M_v))`` capped at the
    column count, so the selected mass always exceeds ``p`` and at least
    the top-k quota is kept.
    """
    if R.ndim != 3:
        raise ShapeError(f"relevance must be rank 3, got shape {R.shape}")
    n_cols = R.shape[-1]
    # stable argsort of -R: descending probability, ascending index on ties
    order = np.argsort(-R, axis=-1, kind="stable")
    sorted_probs = np.take_along_axis(R, order, axis=-1)
    prefix = np.cumsum(sorted_probs, axis=-1)
    n_cut = (prefix <= params.p).sum(axis=-1) + 1
    n_floor = max(1, math.ceil(params.k * M_v))
    n_keep = np.minimum(np.maximum(n_cut, n_floor), n_cols)
    take = np.arange(n_cols)[None, None, :] < n_keep[..., None]
    bits = np.zeros_like(R, dtype=bool)
    np.put_along_axis(bits, order, take, axis=-1)
    return bits


def union_mask(
    b_top: np.ndarray, cond: np.ndarray, adja: np.ndarray, layout: BlockLayout
) -> BlockMask:
    """OR the importance, condition, and adjacency masks into the final mask."""
    shape = (b_top.shape[0], layout.M_v, layout.M_total)
    if b_top.shape != shape:
        raise ShapeError(f"importance mask shape {b_top.shape} != {shape}")
    if cond.shape != (layout.M_total, layout.M_total):
        raise ShapeError(f"condition mask shape {cond.shape} is inconsistent with the layout")
    if adja.shape != (layout.M_v, layout.M_v):
        raise ShapeError(f"adjacency mask shape {adja.shape} is inconsistent with the layout")
    bits = b_top | cond[None, : layout.M_v, :]
    bits[:, :, : layout.M_v] |= adja[None, :, :]
    return BlockMask(bits=bits)


def build_block_mask(
    q: np.ndarray,
    k: np.ndarray,
    layout: BlockLayout,
    statics: StaticMasks,
    params: SelectionParams,
) -> tuple[BlockMask, np.ndarray]:
    """Full selection pipeline: pool, score, select, union.

    Query pooling uses vision blocks only; condition query rows bypass
    masking entirely in the attention kernel.  Returns the mask and the
    vision-row relevance tensor (useful for stats).
    """
    d_k = q.shape[-1]
    pooled_q = block_pool(q, layout)
    pooled_k = block_pool(k, layout)
    vision_q = PooledBlocks(
        values=pooled_q.values[:, : layout.M_v], valid_counts=pooled_q.valid_counts[: layout.M_v]
    )
    R = relevance(vision_q, pooled_k, d_k)
    b_top = importance_mask(R, params, layout.M_v)
    return union_mask(b_top, statics.cond, statics.adja, layout), R


def mask_stats(mask: BlockMask, R: np.ndarray | None = None, p: float | None = None) -> dict:
    """Summary stats for a mask dump: selection fraction, cutoff coverage."""
    stats = {
        "n_heads": mask.n_heads,
        "shape": list(mask.bits.shape),
        "selected_fraction": mask.selected_fraction,
    }
    if R is not None and p is not None:
        covered = (R * mask.bits[:, :, : R.shape[-1]]).sum(axis=-1) > p
        stats["rows_meeting_cutoff"] = int(covered.sum())
        stats["rows_total"] = int(covered.size)
    return stats
