"""Reference block-sparse multi-head attention with streaming softmax.

The carve kernel visits the selected key-value blocks of each vision query
block in ascending block id, maintaining flash-style running max / running
sum / rescaled accumulator state in float32.  Condition query blocks see
every key (full attention).  A dense two-pass implementation serves as the
oracle and as the CLI comparison path.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DomainError, ShapeError
from .masks import BlockMask
from .partition import BlockLayout

__all__ = [
    "AttentionInputs",
    "AmplifierBias",
    "compute_beta",
    "dense_attention",
    "carve_attention",
    "block_mask_logit_bias",
]

_THREADS_ENV = "TOKENCARVE_THREADS"


@dataclass(frozen=True)
class AttentionInputs:
    """Q/K/V tensors of shape (heads, N, d_k) plus their block layout.

    ``N`` must equal the layout's padded token count; rows outside the
    layout's valid mask are padding and produce zero output rows.
    """

    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    layout: BlockLayout

    def __post_init__(self):
        if not (self.q.shape == self.k.shape == self.v.shape) or self.q.ndim != 3:
            raise ShapeError(
                f"Q/K/V must share one (heads, N, d_k) shape, got "
                f"{self.q.shape}/{self.k.shape}/{self.v.shape}"
            )
        if self.q.shape[1] != self.layout.padded_total:
            raise ShapeError(
                f"token axis {self.q.shape[1]} != padded token count "
                f"{self.layout.padded_total}"
            )

    @property
    def n_heads(self) -> int:
        return self.q.shape[0]

    @property
    def d_k(self) -> int:
        return self.q.shape[2]

    @property
    def valid_len(self) -> int:
        return self.layout.valid_len

    @property
    def text_block_start(self) -> int:
        """First condition block id; amplified key blocks start here."""
        return self.layout.M_v


@dataclass(frozen=True)
class AmplifierBias:
    """Additive logit bias on vision-query -> condition-key scores."""

    beta: float = 0.0

    def __post_init__(self):
        if not (self.beta >= 0.0 and math.isfinite(self.beta)):
            raise DomainError(f"amplifier bias must be finite and >= 0, got {self.beta}")


def compute_beta(numel_s: int, numel_S: int, rho: float) -> float:
    """Text-attention amplifier: ``-rho * log(numel_s / numel_S)``.

    Zero when the stage is already at the target resolution or rho is 0.
    """
    if numel_s <= 0 or numel_S <= 0:
        raise DomainError(f"token counts must be positive, got {numel_s}, {numel_S}")
    return -rho * math.log(numel_s / numel_S) + 0.0  # normalize -0.0


def _valid_key_mask(n_tokens: int, valid) -> np.ndarray:
    if valid is None:
        return np.ones(n_tokens, dtype=bool)
    if isinstance(valid, (int, np.integer)):
        mask = np.zeros(n_tokens, dtype=bool)
        mask[: int(valid)] = True
        return mask
    valid = np.asarray(valid, dtype=bool)
    if valid.shape != (n_tokens,):
        raise ShapeError(f"valid mask shape {valid.shape} != ({n_tokens},)")
    return valid


def dense_attention(
    q: np.ndarray,
    k: np.ndarray,
    v: np.ndarray,
    logit_bias: np.ndarray | None = None,
    valid=None,
) -> np.ndarray:
    """Exact two-pass softmax attention in float32 (the oracle path).

    ``logit_bias`` is an optional additive bias broadcastable to
    (heads, N, N); -inf entries drop pairs.  ``valid`` is either a valid
    length or a boolean token mask; padding keys get -inf logits and
    padding query rows are zeroed.
    """
    if not (q.shape == k.shape == v.shape) or q.ndim != 3:
        raise ShapeError(f"Q/K/V must share one (heads, N, d_k) shape, got {q.shape}")
    heads, n, d_k = q.shape
    token_ok = _valid_key_mask(n, valid)

    scale = np.float32(1.0 / math.sqrt(d_k))
    scores = (q.astype(np.float32) * scale) @ k.astype(np.float32).transpose(0, 2, 1)
    if logit_bias is not None:
        scores = scores + np.asarray(logit_bias, dtype=np.float32)
    scores = np.where(token_ok[None, None, :], scores, np.float32(-np.inf))

    scores -= scores.max(axis=-1, keepdims=True)
    weights = np.exp(scores, dtype=np.float32)
    weights /= weights.sum(axis=-1, keepdims=True)
    out = weights @ v.astype(np.float32)
    out[:, ~token_ok, :] = 0.0
    return out


def block_mask_logit_bias(mask: BlockMask, layout: BlockLayout, beta: float = 0.0) -> np.ndarray:
    """Token-level additive bias equivalent to a block mask plus amplifier.

    Deselected vision-row blocks get -inf; condition query rows are left
    fully open; ``beta`` is added on vision-query x condition-key pairs.
    Useful for comparing the carve kernel against the dense oracle.
    """
    m, n = layout.m, layout.padded_total
    heads = mask.n_heads
    bias_blocks = np.where(mask.bits, np.float32(0.0), np.float32(-np.inf))
    bias = np.zeros((heads, layout.M_total, layout.M_total), dtype=np.float32)
    bias[:, : layout.M_v, :] = bias_blocks
    if beta:
        bias[:, : layout.M_v, layout.M_v :] += np.float32(beta)
    return np.repeat(np.repeat(bias, m, axis=1), m, axis=2).reshape(heads, n, n)


def _carve_rows(
    inputs: AttentionInputs,
    bits: np.ndarray,
    beta: float,
    head: int,
    q_block: int,
    out: np.ndarray,
) -> None:
    """Streaming softmax for one (head, query block); writes rows in place."""
    layout = inputs.layout
    m = layout.m
    d_k = inputs.d_k
    scale = np.float32(1.0 / math.sqrt(d_k))
    token_ok = layout.token_valid_mask
    is_vision = q_block < layout.M_v

    if is_vision:
        kv_blocks = np.flatnonzero(bits[head, q_block])
    else:
        kv_blocks = np.arange(layout.M_total)  # text blocks see all

    rows = slice(q_block * m, (q_block + 1) * m)
    q_scaled = inputs.q[head, rows].astype(np.float32) * scale

    m_i = np.full(m, -np.inf, dtype=np.float32)
    l_i = np.zeros(m, dtype=np.float32)
    acc = np.zeros((m, d_k), dtype=np.float32)

    for kv in kv_blocks:
        cols = slice(kv * m, (kv + 1) * m)
        qk = q_scaled @ inputs.k[head, cols].astype(np.float32).T
        qk = np.where(token_ok[cols][None, :], qk, np.float32(-np.inf))
        if is_vision and beta and kv >= layout.M_v:
            qk = qk + np.float32(beta)
        m_new = np.maximum(m_i, qk.max(axis=1))
        alpha = np.exp(m_i - m_new, dtype=np.float32)
        p = np.exp(qk - m_new[:, None], dtype=np.float32)
        l_i = l_i * alpha + p.sum(axis=1, dtype=np.float32)
        acc = acc * alpha[:, None] + p @ inputs.v[head, cols].astype(np.float32)
        m_i = m_new

    out[head, rows] = acc / l_i[:, None]
    pad = ~token_ok[rows]
    if pad.any():
        out[head, rows][pad] = 0.0


def carve_attention(
    inputs: AttentionInputs,
    mask: BlockMask,
    beta: AmplifierBias = AmplifierBias(0.0),
    n_workers: int | None = None,
) -> np.ndarray:
    """Block-sparse attention over the selection mask.

    Vision query blocks stream only their selected key-value blocks, with
    the amplifier bias added to condition-key logits; condition query
    blocks use full attention; padding rows come back zero.  Results are
    deterministic regardless of ``n_workers`` (blocks are always combined
    in ascending id order); the default worker count comes from the
    TOKENCARVE_THREADS environment variable.
    """
    layout = inputs.layout
    expected = (inputs.n_heads, layout.M_v, layout.M_total)
    if mask.bits.shape != expected:
        raise ShapeError(f"mask shape {mask.bits.shape} != {expected}")
    row_counts = mask.bits.sum(axis=-1)
    if layout.M_v and row_counts.min() == 0:
        head, row = np.argwhere(row_counts == 0)[0]
        raise ContractError(f"empty mask row for head {head}, query block {row}")

    if n_workers is None:
        n_workers = int(os.environ.get(_THREADS_ENV, "1"))
    out = np.zeros_like(inputs.q, dtype=np.float32)
    jobs = [(h, b) for h in range(inputs.n_heads) for b in range(layout.M_total)]
    if n_workers > 1:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            list(pool.map(lambda hb: _carve_rows(inputs, mask.bits, beta.beta, *hb, out), jobs))
    else:
        for h, b in jobs:
            _carve_rows(inputs, mask.bits, beta.beta, h, b, out)
    return out
