"""Layout and attention mask for the hierarchical memory group graph.

Each memory forms one fully connected segment whose first position is a
super node (the prepended <mem> token); super nodes of different
memories are additionally connected to each other, so every pair of
nodes is reachable in at most two hops. Trivial nodes of different
memories never attend to each other.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np


class LayoutError(ValueError):
    """Invalid memory lengths for a group layout."""


@dataclass(frozen=True)
class HgaLayout:
    """Node layout over the concatenated memory sequence.

    memory_lengths excludes the super tokens; segment m occupies
    spans[m] = [offset, offset + n_m + 1) with its super token first.
    """

    memory_lengths: tuple[int, ...]
    super_positions: tuple[int, ...]
    spans: tuple[tuple[int, int], ...]
    total_len: int


def layout(memory_lengths: list[int] | tuple[int, ...]) -> HgaLayout:
    lengths = tuple(int(n) for n in memory_lengths)
    if not lengths:
        raise LayoutError("need at least one memory")
    for m, n in enumerate(lengths):
        if n < 1:
            raise LayoutError(f"memory {m} has zero length")
    supers = []
    spans = []
    offset = 0
    for n in lengths:
        supers.append(offset)
        spans.append((offset, offset + n + 1))
        offset += n + 1
    return HgaLayout(
        memory_lengths=lengths,
        super_positions=tuple(supers),
        spans=tuple(spans),
        total_len=offset,
    )


def build_hga_mask(lay: HgaLayout) -> np.ndarray:
    """Boolean allow matrix: intra-segment all-to-all plus super-to-super."""
    allow = np.zeros((lay.total_len, lay.total_len), dtype=bool)
    for lo, hi in lay.spans:
        allow[lo:hi, lo:hi] = True
    sup = np.asarray(lay.super_positions)
    allow[np.ix_(sup, sup)] = True
    return allow


def super_indices(lay: HgaLayout) -> list[int]:
    return list(lay.super_positions)


def mask_to_pbm(allow: np.ndarray) -> str:
    """Render the allow matrix as a plain PBM text grid (1 = allowed)."""
    h, w = allow.shape
    rows = [" ".join("1" if v else "0" for v in row) for row in allow]
    return f"P1\n{w} {h}\n" + "\n".join(rows) + "\n"


def write_mask_pbm(allow: np.ndarray, path: str | Path) -> None:
    Path(path).write_text(mask_to_pbm(allow), encoding="ascii")
