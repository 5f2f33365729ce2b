"""Hard-min dynamic time warping over a cost/similarity matrix.

The recurrence is the textbook one, ``C[i,j] = D[i,j] + min(C[i-1,j-1],
C[i-1,j], C[i,j-1])`` with first row and column accumulating along their only
predecessor.  Ties are broken diagonal > up > left, both in the recurrence's
backtrack and in the gradient (which is the indicator of the selected path).
Indices are 0-based.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

# predecessor codes, in tie-break preference order
DIAG, UP, LEFT = 0, 1, 2
_STEPS = {DIAG: (-1, -1), UP: (-1, 0), LEFT: (0, -1)}


@dataclass
class DtwResult:
    D: np.ndarray
    C: np.ndarray
    path: list[tuple[int, int]]
    distance: float
    margin: float  # smallest gap between the chosen predecessor and the runner-up on the path


def _accumulate(D: np.ndarray):
    """Vectorised over leading axes.  Returns C and the chosen-predecessor codes."""
    D = np.asarray(D, dtype=np.float64)
    n, m = D.shape[-2:]
    C = np.empty_like(D)
    choice = np.full(D.shape, -1, dtype=np.int8)
    gap = np.full(D.shape, np.inf)
    C[..., 0, 0] = D[..., 0, 0]
    for j in range(1, m):
        C[..., 0, j] = C[..., 0, j - 1] + D[..., 0, j]
        choice[..., 0, j] = LEFT
    for i in range(1, n):
        C[..., i, 0] = C[..., i - 1, 0] + D[..., i, 0]
        choice[..., i, 0] = UP
        for j in range(1, m):
            cand = np.stack([C[..., i - 1, j - 1], C[..., i - 1, j], C[..., i, j - 1]], axis=-1)
            # argmin returns the first minimum, which is exactly the preference order
            k = np.argmin(cand, axis=-1)
            best = np.take_along_axis(cand, k[..., None], axis=-1)[..., 0]
            C[..., i, j] = D[..., i, j] + best
            choice[..., i, j] = k
            srt = np.sort(cand, axis=-1)
            gap[..., i, j] = srt[..., 1] - srt[..., 0]
    return C, choice, gap


def _backtrack(choice: np.ndarray, gap: np.ndarray):
    n, m = choice.shape
    i, j = n - 1, m - 1
    path = [(i, j)]
    margin = np.inf
    while (i, j) != (0, 0):
        if i > 0 and j > 0:
            margin = min(margin, gap[i, j])
        di, dj = _STEPS[int(choice[i, j])]
        i, j = i + di, j + dj
        path.append((i, j))
    path.reverse()
    return path, float(margin)


def dtw_accumulate(D) -> DtwResult:
    """Cumulative matrix, backtracked path and distance ``C[-1,-1]`` for one n x m matrix."""
    D = np.asarray(D, dtype=np.float64)
    if D.ndim != 2:
        raise ad.RankError(f"dtw_accumulate expects a 2-D matrix, got shape {D.shape}")
    C, choice, gap = _accumulate(D)
    path, margin = _backtrack(choice, gap)
    return DtwResult(D=D, C=C, path=path, distance=float(C[-1, -1]), margin=margin)


def path_mask(D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batched DP; returns (distances, 0/1 path masks, path margins)."""
    D = np.asarray(D, dtype=np.float64)
    C, choice, gap = _accumulate(D)
    lead = D.shape[:-2]
    mask = np.zeros(D.shape)
    margins = np.empty(lead)
    flat_choice = choice.reshape((-1,) + D.shape[-2:])
    flat_gap = gap.reshape((-1,) + D.shape[-2:])
    flat_mask = mask.reshape((-1,) + D.shape[-2:])
    flat_margin = margins.reshape(-1)
    for b in range(flat_choice.shape[0]):
        path, margin = _backtrack(flat_choice[b], flat_gap[b])
        rows, cols = zip(*path)
        flat_mask[b, list(rows), list(cols)] = 1.0
        flat_margin[b] = margin
    return C[..., -1, -1], mask, margins


def dtw_distance(D: Tensor) -> Tensor:
    """Differentiable DTW distance over the last two axes of ``D``.

    The gradient with respect to ``D`` is the indicator of the backtracked
    path (the hard-min subgradient).
    """
    D = ad.constant(D)
    if D.ndim < 2:
        raise ad.RankError(f"dtw_distance expects rank >= 2, got shape {D.shape}")
    dist, mask, _ = path_mask(D.data)
    return ad.record_op(dist, (D,), lambda g: (np.asarray(g)[..., None, None] * mask,))


def cosine_similarity_matrix(S_a, S_p, eps: float = 1e-12) -> Tensor:
    """``D[..., i, j] = cos(S_a[..., i, :], S_p[..., j, :])`` with an eps-guarded denominator."""
    S_a, S_p = ad.constant(S_a), ad.constant(S_p)
    if S_a.shape[-1] != S_p.shape[-1]:
        raise ad.DimensionError(f"feature widths differ: {S_a.shape} vs {S_p.shape}")
    num = S_a @ ad.transpose(S_p, tuple(range(S_p.ndim - 2)) + (S_p.ndim - 1, S_p.ndim - 2))
    na = ad.sqrt(ad.sum(S_a * S_a, axis=-1, keepdims=True))
    npn = ad.sqrt(ad.sum(S_p * S_p, axis=-1, keepdims=True))
    den = na @ ad.transpose(npn, tuple(range(npn.ndim - 2)) + (npn.ndim - 1, npn.ndim - 2))
    return num / (den + eps)


def alignment_cost(similarity: Tensor, convention: str = "similarity") -> Tensor:
    """Matrix fed to the DTW recurrence.

    ``"similarity"`` uses cosine similarity itself as the cost;
    ``"distance"`` uses ``1 - cos``.
    """
    if convention == "similarity":
        return similarity
    if convention == "distance":
        return 1.0 - similarity
    raise ValueError(f"unknown DTW convention {convention!r}")


def path_offsets(path) -> np.ndarray:
    """``i - j`` for each cell of a path."""
    return np.array([i - j for i, j in path])


def is_monotone_path(path, n: int, m: int | None = None) -> bool:
    m = n if m is None else m
    if not path or path[0] != (0, 0) or path[-1] != (n - 1, m - 1):
        return False
    return all((b[0] - a[0], b[1] - a[1]) in {(1, 1), (1, 0), (0, 1)} for a, b in zip(path, path[1:]))


__all__ = [
    "DtwResult", "dtw_accumulate", "dtw_distance", "path_mask", "cosine_similarity_matrix",
    "alignment_cost", "path_offsets", "is_monotone_path",
]


def estimate_lag(query, reference, convention: str = "distance") -> float:
    """Median ``i - j`` along the DTW path aligning ``query`` rows to ``reference`` rows.

    If ``query[i]`` matches ``reference[i - k]`` the estimate is ``k``.
    """
    sim = cosine_similarity_matrix(np.asarray(query, dtype=np.float64), np.asarray(reference, dtype=np.float64))
    result = dtw_accumulate(alignment_cost(sim, convention).data)
    return float(np.median(path_offsets(result.path)))
