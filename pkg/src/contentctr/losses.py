"""Training objectives: pointwise LogLoss, boundary-aware pairwise losses,
DTW contrastive alignment, and their weighted sum."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .dtw import alignment_cost, cosine_similarity_matrix, dtw_distance

PAIR_VARIANTS = ("L0", "L1", "L2", "L3")
LOGLOSS_CLAMP = 1e-7


class LabelError(ValueError):
    """Labels outside [0, 1]."""


class NegativeSamplingError(ValueError):
    """Sequence too short to build a shuffled negative."""


@dataclass
class LossConfig:
    lambda1: float = 0.65
    lambda2: float = 0.15
    lambda3: float = 0.20
    sigma: float = 10.0
    tau: float = 1.0
    N: int = 8
    variant: str = "L1"
    tie_rule: str = "diag>up>left"
    dtw_convention: str = "similarity"

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "lambda3"):
            val = getattr(self, name)
            if not np.isfinite(val) or val < 0:
                raise ValueError(f"{name} must be finite and >= 0, got {val}")
        if self.sigma <= 0:
            raise ValueError(f"sigma must be > 0, got {self.sigma}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if self.N < 1:
            raise ValueError(f"N must be >= 1, got {self.N}")
        if self.variant not in PAIR_VARIANTS:
            raise ValueError(f"variant must be one of {PAIR_VARIANTS}, got {self.variant!r}")
        if self.tie_rule != "diag>up>left":
            raise ValueError(f"only the 'diag>up>left' tie rule is implemented, got {self.tie_rule!r}")
        if self.dtw_convention not in ("similarity", "distance"):
            raise ValueError(f"dtw_convention must be 'similarity' or 'distance', got {self.dtw_convention!r}")

    @classmethod
    def from_dict(cls, doc: dict) -> "LossConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(doc) - known
        if unknown:
            raise ValueError(f"unknown loss config fields: {sorted(unknown)}")
        return cls(**doc)

    def to_dict(self) -> dict:
        return asdict(self)


def _labels(y, shape) -> np.ndarray:
    y = np.asarray(y, dtype=np.float64)
    if y.shape != tuple(shape):
        raise ad.DimensionError(f"labels of shape {y.shape} do not match predictions {tuple(shape)}")
    if np.any(~np.isfinite(y)) or np.any(y < 0) or np.any(y > 1):
        raise LabelError("labels must lie in [0, 1]")
    return y


def pointwise_logloss(s, y) -> Tensor:
    """Mean binary cross-entropy over every entry; s is clamped 1e-7 away from 0 and 1."""
    s = ad.constant(s)
    y = _labels(y, s.shape)
    s = ad.clip(s, LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP)
    ll = y * ad.log(s) + (1.0 - y) * ad.log(1.0 - s)
    return -ad.mean(ll)


def admitted_pairs(s, y, variant: str = "L1") -> np.ndarray:
    """Boolean ``[..., i, j]`` mask of pairs that contribute to the given variant.

    Only pairs with ``y_i > y_j`` are candidates.  Computed on plain values, so
    admission never carries gradient.
    """
    if variant not in PAIR_VARIANTS:
        raise ValueError(f"unknown pairwise variant {variant!r}")
    s = np.asarray(s.data if isinstance(s, Tensor) else s, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ds = s[..., :, None] - s[..., None, :]
    dy = y[..., :, None] - y[..., None, :]
    base = dy > 0
    if variant == "L0":
        return base
    if variant == "L1":
        return base & (dy - ds >= 0)
    if variant == "L2":
        return base & (ds <= 0)
    return base & (ds > 0) & (ds < dy)


def pairwise_loss(s, y, variant: str = "L1", sigma: float = 10.0) -> Tensor:
    """RankNet-style logistic pair loss restricted to the variant's admitted pairs.

    ``s`` is one window (length n) or a batch (b x n).  Each window contributes
    the sum of ``log(1 + exp(-sigma (s_i - s_j)))`` over admitted pairs; the
    batch value is the mean of the window sums.  Windows shorter than two
    segments have no pairs and give 0 (``admitted_pairs(...).any()`` is the
    flag).
    """
    s = ad.constant(s)
    y = _labels(y, s.shape)
    if s.ndim == 1:
        s, y = s.reshape(1, -1), y.reshape(1, -1)
    b, n = s.shape
    if n < 2:
        return Tensor(0.0)
    mask = admitted_pairs(s, y, variant)
    diff = s.reshape(b, n, 1) - s.reshape(b, 1, n)
    terms = ad.where_mask(ad.softplus(ad.scale(diff, -sigma)), mask)
    return ad.scale(ad.sum(terms), 1.0 / b)


def negative_permutations(n: int, N: int, rng: np.random.Generator) -> np.ndarray:
    """``N`` random orderings of ``range(n)``, none equal to the identity."""
    if n < 2:
        raise NegativeSamplingError("cannot construct a shuffled negative from a sequence of length 1")
    ident = np.arange(n)
    out = np.empty((N, n), dtype=np.int64)
    for k in range(N):
        perm = rng.permutation(n)
        while np.array_equal(perm, ident):
            perm = rng.permutation(n)
        out[k] = perm
    return out


def make_negatives(S_p, N: int, rng_seed) -> list:
    """``N`` temporally shuffled copies of a single ``n x d`` sequence.

    Returns arrays for array input and Tensors (differentiable gathers) for
    Tensor input.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    n = S_p.shape[0]
    perms = negative_permutations(n, N, rng)
    if isinstance(S_p, Tensor):
        return [ad.take(S_p, p, axis=0) for p in perms]
    S_p = np.asarray(S_p)
    return [S_p[p] for p in perms]


def shuffled_negatives(S_p: Tensor, perms: np.ndarray) -> Tensor:
    """Gather ``S_p[b, perms[b, k]]`` into a ``b x N x n x d`` tensor."""
    b = S_p.shape[0]
    return ad.getitem(S_p, (np.arange(b)[:, None, None], perms))


def dtw_logits(S_a, S_p, negatives, tau: float, convention: str = "similarity") -> Tensor:
    """Per-window InfoNCE logits; column 0 is the positive pair."""
    S_a, S_p = ad.constant(S_a), ad.constant(S_p)
    if isinstance(negatives, (list, tuple)):
        negatives = ad.stack([ad.constant(x) for x in negatives], axis=-3)
    negatives = ad.constant(negatives)
    single = S_a.ndim == 2
    if single:
        S_a, S_p = S_a.reshape((1,) + S_a.shape), S_p.reshape((1,) + S_p.shape)
        negatives = negatives.reshape((1,) + negatives.shape)
    b, n, d = S_p.shape
    if negatives.ndim != 4 or negatives.shape[0] != b or negatives.shape[2:] != (n, d):
        raise ad.DimensionError(f"negatives must be b x N x {n} x {d}, got {negatives.shape}")
    cand = ad.concat([S_p.reshape(b, 1, n, d), negatives], axis=1)
    sim = cosine_similarity_matrix(S_a.reshape(b, 1, n, d), cand)
    dist = dtw_distance(alignment_cost(sim, convention))
    sign = 1.0 if convention == "similarity" else -1.0
    return ad.scale(dist, sign / tau)


def align_infonce(S_a, S_p, negatives, tau: float = 1.0, convention: str = "similarity") -> Tensor:
    """Contrastive loss on DTW distances, averaged over windows.

    ``-log(exp(d_pos/tau) / (exp(d_pos/tau) + sum_k exp(d_neg_k/tau)))`` with
    ``d = C[n, n]`` from the similarity recurrence.  Under the ``"distance"``
    convention the recurrence runs on ``1 - cos`` and ``d`` is negated.
    """
    logits = dtw_logits(S_a, S_p, negatives, tau, convention)
    per_window = ad.logsumexp(logits, axis=-1) - logits[:, 0]
    return ad.mean(per_window)


def combined_loss(point, align, pair, lambda1: float = 0.65, lambda2: float = 0.15, lambda3: float = 0.20) -> Tensor:
    return ad.scale(point, lambda1) + ad.scale(align, lambda2) + ad.scale(pair, lambda3)


__all__ = [
    "PAIR_VARIANTS", "LabelError", "NegativeSamplingError", "LossConfig",
    "pointwise_logloss", "admitted_pairs", "pairwise_loss", "negative_permutations",
    "make_negatives", "shuffled_negatives", "dtw_logits", "align_infonce", "combined_loss",
]
