"""Padding/FLOPs/sparsity accounting for partition strategies and masks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, ShapeError
from .masks import BlockMask
from .sfc import GridDims, padded_token_count

__all__ = [
    "PartitionStrategy",
    "OverheadReport",
    "FlopsReport",
    "SparsityReport",
    "partition_overhead",
    "attention_flops",
    "effective_sparsity",
]


@dataclass(frozen=True)
class PartitionStrategy:
    """Either curve-order blocks ("sfc") or a rectangular tiled window."""

    kind: str
    tile: tuple[int, int, int] | None = None

    def __post_init__(self):
        if self.kind not in ("sfc", "tiled_window"):
            raise ContractError(f"unknown partition strategy {self.kind!r}")
        if self.kind == "tiled_window":
            if self.tile is None or len(self.tile) != 3 or any(x < 1 for x in self.tile):
                raise ContractError(f"tiled_window needs a positive (t, h, w) tile, got {self.tile}")

    @property
    def label(self) -> str:
        if self.kind == "sfc":
            return "3D-SFC"
        return "Tiled({},{},{})".format(*self.tile)


@dataclass(frozen=True)
class OverheadReport:
    """Padding cost of a partition strategy on one grid.

    ``effective_tokens`` is the padded sequence length actually processed;
    ``extra_matmul_fraction`` is ``(N_pad^2 - N^2) / N^2`` over vision
    tokens only.
    """

    strategy: str
    padding_tokens: int
    extra_matmul_fraction: float
    effective_tokens: int

    def csv_row(self) -> str:
        # two-decimal percent for the table; raw value lives in the report
        return f"{self.strategy},{self.padding_tokens},{self.extra_matmul_fraction * 100:.2f}%"


def partition_overhead(dims: GridDims, strategy: PartitionStrategy, m: int = 128) -> OverheadReport:
    """Padding tokens and extra matmul fraction for a partition strategy.

    Curve-order blocks only pad the flat token count up to a multiple of
    ``m``; a tiled window must pad every axis up to its tile multiple.
    """
    n = dims.n_cells
    if strategy.kind == "sfc":
        padded, pad = padded_token_count(n, m)
    else:
        padded_axes = [
            -(-axis // tile) * tile for axis, tile in zip(dims.as_tuple(), strategy.tile)
        ]
        padded = int(np.prod(padded_axes))
        pad = padded - n
    extra = (padded * padded - n * n) / (n * n)
    return OverheadReport(
        strategy=strategy.label,
        padding_tokens=pad,
        extra_matmul_fraction=extra,
        effective_tokens=padded,
    )


@dataclass(frozen=True)
class FlopsReport:
    """Attention cost implied by a selection mask."""

    total_flops: float
    n_prime: float
    n_tokens: int

    @property
    def dense_ratio(self) -> float:
        """Cost relative to full attention over the padded length."""
        return self.n_prime / self.n_tokens


def attention_flops(mask: BlockMask, m: int, d_k: int, n_heads: int | None = None) -> FlopsReport:
    """FLOPs of block-sparse attention under ``mask``.

    ``n_prime`` is the average number of selected tokens per query row,
    ``m * sum(B) / rows`` pooled over heads.  ``total_flops`` counts the
    two matmuls (QK^T and PV) at 2 FLOPs per multiply-add:
    ``2 * H * N * n_prime * d_k * 2``.
    """
    heads = mask.n_heads
    if n_heads is not None and n_heads != heads:
        raise ShapeError(f"mask carries {heads} heads but n_heads={n_heads} was given")
    n_rows = mask.bits.shape[1]
    n_tokens = m * mask.bits.shape[2]
    selected = int(mask.bits.sum())
    n_prime = m * selected / (heads * n_rows)
    total = 2.0 * heads * n_tokens * n_prime * d_k * 2.0
    return FlopsReport(total_flops=total, n_prime=n_prime, n_tokens=n_tokens)


@dataclass(frozen=True)
class SparsityReport:
    mean: float
    per_head: tuple[float, ...]


def effective_sparsity(mask: BlockMask) -> SparsityReport:
    """Fraction of block pairs skipped: ``1 - sum(B) / (rows * cols)``."""
    per_head = 1.0 - mask.bits.reshape(mask.n_heads, -1).mean(axis=1)
    return SparsityReport(mean=float(per_head.mean()), per_head=tuple(float(x) for x in per_head))
