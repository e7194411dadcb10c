"""Block-wise attention masks.

Token ``i`` lives in block ``i // b``. A query in block ``bi`` may attend a key
in block ``bj`` when ``-tb <= bj - bi <= tf``: ``tb`` blocks of history and
``tf`` blocks of lookahead. The symmetric form ``|bi - bj| <= tau`` is
``tb == tf == tau``. When ``b`` does not divide ``n`` the last block is short.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


@dataclass(frozen=True)
class MaskSpec:
    b: int
    tb: int = 0
    tf: int = 0

    def __post_init__(self):
        if int(self.b) < 1:
            raise ValueError("block size must be >= 1")
        if int(self.tb) < 0 or int(self.tf) < 0:
            raise ValueError("block extents must be >= 0")

    @classmethod
    def isolated(cls, b: int) -> "MaskSpec":
        return cls(b, 0, 0)

    # Some write-ups call the isolated pattern the "causal" mask.
    causal = isolated

    @classmethod
    def history(cls, b: int, blocks: int = 1) -> "MaskSpec":
        return cls(b, blocks, 0)

    @classmethod
    def future(cls, b: int, blocks: int = 1) -> "MaskSpec":
        return cls(b, 0, blocks)

    @classmethod
    def symmetric(cls, b: int, tau: int) -> "MaskSpec":
        return cls(b, tau, tau)

    @classmethod
    def named(cls, name: str, b: int) -> "MaskSpec":
        table = {"isolated": (0, 0), "causal": (0, 0), "history": (1, 0), "future": (0, 1), "symmetric": (1, 1)}
        try:
            tb, tf = table[name]
        except KeyError:
            raise ValueError(f"unknown mask pattern {name!r}") from None
        return cls(b, tb, tf)

    def to_dict(self) -> dict:
        return {"b": self.b, "tb": self.tb, "tf": self.tf}


@dataclass(frozen=True, eq=False)
class BlockMask:
    matrix: np.ndarray
    spec: MaskSpec
    n: int

    @property
    def ragged_tail(self) -> bool:
        return self.n % self.spec.b != 0

    @property
    def num_blocks(self) -> int:
        return -(-self.n // self.spec.b)

    def __eq__(self, other) -> bool:
        return isinstance(other, BlockMask) and np.array_equal(self.matrix, other.matrix)

    def to_text(self) -> str:
        return "\n".join(" ".join("1" if v else "0" for v in row) for row in self.matrix)

    def to_json(self) -> str:
        return json.dumps({
            "n": self.n, "b": self.spec.b, "tb": self.spec.tb, "tf": self.spec.tf,
            "rows": [[int(v) for v in row] for row in self.matrix],
        })


def block_of(i: int, b: int) -> int:
    if i < 0 or b < 1:
        raise ValueError("need i >= 0 and b >= 1")
    return i // b


def mask_predicate(spec: MaskSpec) -> Callable[[int, int], bool]:
    """Implicit form of the mask: ``allowed(i, j)`` without materializing it."""
    def allowed(i: int, j: int) -> bool:
        d = j // spec.b - i // spec.b
        return -spec.tb <= d <= spec.tf
    return allowed


def build_mask(n: int, spec: MaskSpec) -> BlockMask:
    if n < 1:
        raise ValueError("sequence length must be >= 1")
    blk = np.arange(n) // spec.b
    d = blk[None, :] - blk[:, None]
    return BlockMask((d >= -spec.tb) & (d <= spec.tf), spec, n)


def receptive_field(layer_specs: Sequence[MaskSpec]) -> tuple[int, int]:
    """Blocks of history and lookahead reachable after stacking the layers."""
    sizes = {s.b for s in layer_specs}
    if len(sizes) > 1:
        raise ValueError(f"layers use mixed block sizes {sorted(sizes)}")
    return sum(s.tb for s in layer_specs), sum(s.tf for s in layer_specs)


def compose_reachability(masks: Sequence[BlockMask]) -> BlockMask:
    """Boolean product ``M_L ... M_1``: entry (i, j) is set when input j can
    reach output i through the stack (first mask applied first)."""
    if not masks:
        raise ValueError("need at least one mask")
    n = masks[0].n
    if any(m.n != n for m in masks):
        raise ValueError("masks have different sizes")
    reach = masks[0].matrix.astype(np.int64)
    for m in masks[1:]:
        reach = (m.matrix.astype(np.int64) @ reach > 0).astype(np.int64)
    sizes = {m.spec.b for m in masks}
    b = masks[0].spec.b if len(sizes) == 1 else 1
    tb = sum(m.spec.tb for m in masks) if len(sizes) == 1 else 0
    tf = sum(m.spec.tf for m in masks) if len(sizes) == 1 else 0
    return BlockMask(reach.astype(bool), MaskSpec(b, tb, tf), n)


def window_blocks(k: int, num_blocks: int, p: int, q: int) -> tuple[int, int]:
    """Block range ``[lo, hi)`` of the decoding window around chunk ``k``."""
    return max(0, k - p), min(num_blocks, k + q + 1)
