"""Supervision masks built from manipulation annotations.

``build_guidance_mask`` gives the token x patch matrix that steers cross
attention toward manipulated cells; ``build_patch_indicator`` labels patches
as positive (1), hard negative (0, adjacent to a positive) or ignored (-1).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GuidanceMask:
    G: np.ndarray  # (T, P) uint8
    active: bool


@dataclass
class PatchIndicator:
    P: np.ndarray  # (N,) int8 in {1, 0, -1}
    n_effective: int


def build_guidance_mask(token_flags, patch_flags) -> GuidanceMask:
    """``G[t, p] = token_flags[t] or patch_flags[p]``."""
    tok = np.asarray(token_flags, dtype=bool).reshape(-1)
    pat = np.asarray(patch_flags, dtype=bool).reshape(-1)
    if tok.size == 0 or pat.size == 0:
        raise ValueError("token and patch flag vectors must be non-empty")
    G = (tok[:, None] | pat[None, :]).astype(np.uint8)
    return GuidanceMask(G=G, active=bool(tok.any() or pat.any()))


def patch_flags_from_bbox(bbox, grid: tuple[int, int]) -> np.ndarray:
    """Flag patches whose cell has strictly positive overlap with ``bbox``.

    ``bbox`` is normalized ``(cx, cy, w, h)``; the image is the unit square cut
    into ``rows x cols`` equal cells, flattened row-major.
    """
    rows, cols = grid
    cx, cy, w, h = (float(v) for v in bbox)
    x1, x2 = cx - w / 2, cx + w / 2
    y1, y2 = cy - h / 2, cy + h / 2
    xs = np.arange(cols + 1) / cols
    ys = np.arange(rows + 1) / rows
    ox = np.minimum(xs[1:], x2) - np.maximum(xs[:-1], x1)
    oy = np.minimum(ys[1:], y2) - np.maximum(ys[:-1], y1)
    return ((oy[:, None] > 0) & (ox[None, :] > 0)).reshape(-1)


def build_patch_indicator(patch_flags, grid: tuple[int, int], connectivity: int = 8, hard_negatives: bool = True) -> PatchIndicator:
    """Positive patches get 1, their neighbours 0, everything else -1.

    With ``hard_negatives=False`` every non-flagged patch is a negative.  A
    sample without any flagged patch is all -1 either way.
    """
    rows, cols = grid
    flags = np.asarray(patch_flags, dtype=bool).reshape(-1)
    if flags.size != rows * cols:
        raise ValueError(f"expected {rows * cols} patch flags, got {flags.size}")
    if connectivity not in (4, 8):
        raise ValueError("connectivity must be 4 or 8")
    P = np.full(rows * cols, -1, dtype=np.int8)
    if not flags.any():
        return PatchIndicator(P=P, n_effective=0)

    grid_flags = flags.reshape(rows, cols)
    if hard_negatives:
        padded = np.pad(grid_flags, 1)
        near = np.zeros_like(grid_flags)
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dy, dx) == (0, 0) or (connectivity == 4 and dy and dx):
                    continue
                near |= padded[1 + dy : 1 + dy + rows, 1 + dx : 1 + dx + cols]
        P[(near & ~grid_flags).reshape(-1)] = 0
    else:
        P[~flags] = 0
    P[flags] = 1
    return PatchIndicator(P=P, n_effective=int((P != -1).sum()))
