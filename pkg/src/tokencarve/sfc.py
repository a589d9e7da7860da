"""Space-filling-curve orderings of rectangular 3D grids.

The curve visits every cell of a (t, h, w) grid exactly once such that
consecutive cells are 26-neighbors (Chebyshev distance <= 1).  It is built
from the generalized-Hilbert recursion over the two longest axes, swept
along the shortest axis in paired slices:

* the plane spanned by the two longest axes is ordered by the 2D
  generalized-Hilbert ("gilbert") recursion, which splits the longer axis
  in half with a parity adjustment so the sub-curves chain;
* slices along the remaining axis are consumed two at a time, zigzagging
  between the pair at every plane position, and the plane order reverses
  from one slice pair to the next so each seam is a single unit step.

A plain 3D gilbert recursion is not used because it emits occasional
"knight moves" (Chebyshev distance 2) on odd-sized grids, which breaks the
adjacency guarantee the block partition relies on.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeError, SizeError

__all__ = [
    "GridDims",
    "Permutation",
    "build_curve",
    "apply_permutation",
    "invert_permutation",
    "padded_token_count",
]

# forward/inverse indices are stored as int64; keep a safety margin below 2**63
_MAX_CELLS = 2**62


@dataclass(frozen=True)
class GridDims:
    """Cell counts of a latent grid along (temporal, height, width)."""

    t: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("t", "h", "w"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ShapeError(f"grid axis {name} must be a positive integer, got {v!r}")

    @property
    def n_cells(self) -> int:
        return self.t * self.h * self.w

    def as_tuple(self) -> tuple[int, int, int]:
        return (self.t, self.h, self.w)

    @classmethod
    def from_string(cls, text: str) -> "GridDims":
        parts = text.replace("x", ",").split(",")
        if len(parts) != 3:
            raise ShapeError(f"expected 't,h,w', got {text!r}")
        return cls(*(int(p) for p in parts))


@dataclass(frozen=True)
class Permutation:
    """Bijection between curve positions and row-major cell indices.

    ``forward[i]`` is the row-major (t, h, w) cell index occupying curve
    position ``i``; ``inverse`` satisfies ``inverse[forward[i]] == i``.
    """

    dims: GridDims
    forward: np.ndarray
    inverse: np.ndarray = field(repr=False)

    def __post_init__(self):
        n = self.dims.n_cells
        if self.forward.shape != (n,) or self.inverse.shape != (n,):
            raise ShapeError(
                f"permutation arrays must have length {n}, got "
                f"{self.forward.shape} / {self.inverse.shape}"
            )
        if not np.array_equal(self.forward[self.inverse], np.arange(n)):
            raise ShapeError("inverse is not the inverse of forward")
        self.forward.setflags(write=False)
        self.inverse.setflags(write=False)

    def __len__(self) -> int:
        return self.forward.shape[0]


def _gilbert2d(a: int, b: int) -> list[tuple[int, int]]:
    """Generalized-Hilbert order of an a x b grid, starting at (0, 0).

    Consecutive cells differ by at most 1 in each coordinate (odd sizes
    force a single diagonal step at the center seam).
    """
    out: list[tuple[int, int]] = []
    if a >= b:
        _gen2d(out, 0, 0, a, 0, 0, b)
    else:
        _gen2d(out, 0, 0, 0, b, a, 0)
    return out


def _sgn(x: int) -> int:
    return (x > 0) - (x < 0)


def _gen2d(out, x, y, ax, ay, bx, by):
    w = abs(ax + ay)
    h = abs(bx + by)
    dax, day = _sgn(ax), _sgn(ay)
    dbx, dby = _sgn(bx), _sgn(by)

    if h == 1:
        for _ in range(w):
            out.append((x, y))
            x, y = x + dax, y + day
        return
    if w == 1:
        for _ in range(h):
            out.append((x, y))
            x, y = x + dbx, y + dby
        return

    ax2, ay2 = ax // 2, ay // 2
    bx2, by2 = bx // 2, by // 2
    w2 = abs(ax2 + ay2)
    h2 = abs(bx2 + by2)

    if 2 * w > 3 * h:
        if (w2 % 2) and (w > 2):
            # halve along the long axis, keeping the split point even
            ax2, ay2 = ax2 + dax, ay2 + day
        _gen2d(out, x, y, ax2, ay2, bx, by)
        _gen2d(out, x + ax2, y + ay2, ax - ax2, ay - ay2, bx, by)
    else:
        if (h2 % 2) and (h > 2):
            bx2, by2 = bx2 + dbx, by2 + dby
        _gen2d(out, x, y, bx2, by2, ax2, ay2)
        _gen2d(out, x + bx2, y + by2, ax, ay, bx - bx2, by - by2)
        _gen2d(
            out,
            x + (ax - dax) + (bx2 - dbx),
            y + (ay - day) + (by2 - dby),
            -bx2,
            -by2,
            -(ax - ax2),
            -(ay - ay2),
        )


def _curve_coords(dims: GridDims) -> np.ndarray:
    """(n_cells, 3) array of (t, h, w) coordinates in curve order."""
    shape = dims.as_tuple()
    slab_axis = int(np.argmin(shape))  # sweep the shortest axis; ties pick t first
    p1, p2 = (a for a in range(3) if a != slab_axis)
    plane_fwd = _gilbert2d(shape[p1], shape[p2])
    plane_rev = plane_fwd[::-1]
    n_plane = len(plane_fwd)

    coords = np.empty((dims.n_cells, 3), dtype=np.int64)
    pos = 0
    s = 0
    pair_index = 0
    while s < shape[slab_axis]:
        order = plane_fwd if pair_index % 2 == 0 else plane_rev
        if s + 1 < shape[slab_axis]:
            lo, hi = s, s + 1
            cur = lo
            for i, (u, v) in enumerate(order):
                first, second = cur, lo + hi - cur
                if i == n_plane - 1 and second != hi:
                    # exit the slab on the far slice so the next slab chains
                    first, second = second, first
                coords[pos, slab_axis], coords[pos, p1], coords[pos, p2] = first, u, v
                pos += 1
                coords[pos, slab_axis], coords[pos, p1], coords[pos, p2] = second, u, v
                pos += 1
                cur = second
            s += 2
        else:
            for (u, v) in order:
                coords[pos, slab_axis], coords[pos, p1], coords[pos, p2] = s, u, v
                pos += 1
            s += 1
        pair_index += 1
    return coords


def build_curve(dims: GridDims) -> Permutation:
    """Build the space-filling-curve permutation for ``dims``.

    Deterministic for fixed dims.  Raises :class:`SizeError` if the cell
    count overflows the index type.
    """
    if dims.n_cells > _MAX_CELLS:
        raise SizeError(f"{dims.n_cells} cells exceed the supported index range")
    coords = _curve_coords(dims)
    forward = (coords[:, 0] * dims.h + coords[:, 1]) * dims.w + coords[:, 2]
    inverse = np.empty_like(forward)
    inverse[forward] = np.arange(dims.n_cells, dtype=np.int64)
    return Permutation(dims=dims, forward=forward, inverse=inverse)


def _permute(tokens, index: np.ndarray):
    if isinstance(tokens, np.ndarray):
        if tokens.shape[0] != index.shape[0]:
            raise ShapeError(
                f"sequence length {tokens.shape[0]} != permutation length {index.shape[0]}"
            )
        return tokens[index]
    seq = list(tokens)
    if len(seq) != index.shape[0]:
        raise ShapeError(f"sequence length {len(seq)} != permutation length {index.shape[0]}")
    return [seq[i] for i in index]


def apply_permutation(tokens, perm: Permutation):
    """Reorder a flat token sequence into curve order.

    ``out[i] = tokens[perm.forward[i]]``; any per-token payload is allowed
    (arrays are indexed along axis 0).
    """
    return _permute(tokens, perm.forward)


def invert_permutation(tokens, perm: Permutation):
    """Restore a curve-ordered sequence to row-major (t, h, w) order."""
    return _permute(tokens, perm.inverse)


def padded_token_count(n_tokens: int, m: int) -> tuple[int, int]:
    """Smallest multiple of the block size ``m`` >= ``n_tokens``.

    Returns ``(padded_total, pad_count)``.
    """
    if m < 1:
        raise ShapeError(f"block size must be >= 1, got {m}")
    if n_tokens < 1:
        raise ShapeError(f"token count must be >= 1, got {n_tokens}")
    blocks = -(-n_tokens // m)
    padded = blocks * m
    return padded, padded - n_tokens
