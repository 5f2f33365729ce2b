"""Registry of differentiable targets checked against central differences.

Every target builds a scalar function and a probe point from a seed.  Losses
with piecewise structure (pair admission, the DTW path) are only probed where
that structure is stable under a ``step``-sized perturbation: the probe is
re-drawn until the distance to the nearest boundary exceeds ``PROBE_MARGIN``.

A central difference in float64 carries rounding noise of a few ulps of the
function value divided by ``2 * step`` (about 1e-11 at step 1e-5), so a
coordinate whose true derivative is around 1e-8 cannot be verified to a
relative 1e-4 no matter how good the backward pass is.  Probes with a
nonzero central-difference coordinate below that resolution divided by the
tolerance are also re-drawn.  The rule looks only at the finite
differences, never at the analytic gradient.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff.gradcheck import analytic_grad, numeric_grad, relative_error
from .dtw import cosine_similarity_matrix, path_mask
from .losses import (
    PAIR_VARIANTS,
    align_infonce,
    combined_loss,
    negative_permutations,
    pairwise_loss,
    pointwise_logloss,
    shuffled_negatives,
)
from .model import ContentCTR, ModelConfig, layer_norm

TOLERANCE = 1e-4
STEP = 1e-5
PROBE_MARGIN = 1e-3
MAX_REDRAWS = 50
FD_NOISE_ULPS = 4.0
MAX_RESOLUTION_REDRAWS = 20

# small configuration used by every model-level target
CHECK_CONFIG = ModelConfig(n=5, d=8, d_h=4, n_h=2, L_perceiver=1, L_decoder=1, ffn_hidden=8,
                           d_visual=6, d_text=6, n_streamers=3)
CHECK_BATCH = 2
CHECK_NEGATIVES = 3


class UnstableProbeError(RuntimeError):
    """No probe point with a safe boundary margin was found."""


@dataclass
class Target:
    name: str
    kind: str  # "op", "loss", "block" or "model"
    build: Callable[[np.random.Generator], tuple[Callable, list[np.ndarray]]]


@dataclass
class CheckResult:
    name: str
    kind: str
    error: float
    passed: bool
    seconds: float
    redraws: int = 0


# ----------------------------------------------------------------------------
# probe stability

def pair_margin(s: np.ndarray, y: np.ndarray, variant: str) -> float:
    """Distance from ``s`` to the nearest admission boundary of ``variant``."""
    s, y = np.atleast_2d(s), np.atleast_2d(y)
    ds = s[:, :, None] - s[:, None, :]
    dy = y[:, :, None] - y[:, None, :]
    cand = dy > 0
    if variant == "L0" or not cand.any():
        return np.inf
    gaps = [np.abs(dy - ds)] if variant == "L1" else [np.abs(ds)]
    if variant == "L3":
        gaps.append(np.abs(dy - ds))
    return float(min(g[cand].min() for g in gaps))


def dtw_margin(S_a: np.ndarray, S_p: np.ndarray, perms: np.ndarray, convention: str = "similarity") -> float:
    """Smallest predecessor gap over the positive and negative DTW paths.

    Returns 0 for degenerate probes where, for some row of ``S_a`` or some
    frame of ``S_p``, every candidate path matches the same partners: the
    contrastive weights then sum to zero, the true gradient of that block is
    exactly 0, and a relative error would only measure rounding noise.
    """
    b, n = S_p.shape[:2]
    index = np.concatenate([np.broadcast_to(np.arange(n), (b, 1, n)), perms], axis=1)
    cand = S_p[np.arange(b)[:, None, None], index]
    sim = cosine_similarity_matrix(S_a[:, None], cand).data
    cost = sim if convention == "similarity" else 1.0 - sim
    _, masks, margins = path_mask(cost)
    # matched[b, k, i, f]: row i of S_a is matched to original frame f by candidate k
    matched = np.zeros((b, index.shape[1], n, n), dtype=bool)
    bi, ki, ii, jj = np.nonzero(masks)
    matched[bi, ki, ii, index[bi, ki, jj]] = True
    if (matched == matched[:, :1]).all(axis=1).all(axis=-1).any() or \
            (matched == matched[:, :1]).all(axis=1).all(axis=-2).any():
        return 0.0
    return float(margins.min())


def _stable(draw, margin_fn):
    for attempt in range(MAX_REDRAWS):
        probe = draw()
        if margin_fn(probe) > PROBE_MARGIN:
            return probe, attempt
    raise UnstableProbeError(f"no stable probe point in {MAX_REDRAWS} draws")


# ----------------------------------------------------------------------------
# target builders

def _unary(op, low=-2.0, high=2.0, shape=(3, 4)):
    def build(rng):
        x = rng.uniform(low, high, size=shape)
        w = rng.normal(size=op(ad.Tensor(x)).shape)
        return (lambda t: ad.sum(op(t) * w)), [x]
    return build


def _binary(op, shape_a, shape_b, positive_b=False):
    def build(rng):
        a = rng.normal(size=shape_a)
        b = rng.uniform(0.5, 2.0, size=shape_b) if positive_b else rng.normal(size=shape_b)
        w = rng.normal(size=op(ad.Tensor(a), ad.Tensor(b)).shape)
        return (lambda x, z: ad.sum(op(x, z) * w)), [a, b]
    return build


def _build_logloss(rng):
    b, n = CHECK_BATCH, CHECK_CONFIG.n
    s = rng.uniform(0.1, 0.9, size=(b, n))
    y = rng.uniform(0.0, 1.0, size=(b, n))
    return (lambda t: pointwise_logloss(t, y)), [s]


def _build_pair(variant):
    def build(rng):
        b, n = CHECK_BATCH, CHECK_CONFIG.n

        def draw():
            return rng.uniform(0.05, 0.95, size=(b, n)), rng.uniform(0.0, 1.0, size=(b, n))

        (s, y), _ = _stable(draw, lambda p: pair_margin(p[0], p[1], variant))
        return (lambda t: pairwise_loss(t, y, variant, sigma=10.0)), [s]
    return build


def _build_align(convention):
    def build(rng):
        b, n, d = CHECK_BATCH, CHECK_CONFIG.n, CHECK_CONFIG.d

        def draw():
            S_a, S_p = rng.normal(size=(b, n, d)), rng.normal(size=(b, n, d))
            perms = np.stack([negative_permutations(n, CHECK_NEGATIVES, rng) for _ in range(b)])
            return S_a, S_p, perms

        (S_a, S_p, perms), _ = _stable(draw, lambda p: dtw_margin(*p, convention))
        fn = lambda a, p: align_infonce(a, p, shuffled_negatives(p, perms), 1.0, convention)  # noqa: E731
        return fn, [S_a, S_p]
    return build


def _model_inputs(rng, cfg=CHECK_CONFIG, b=CHECK_BATCH):
    # embeddings come out of a tanh, so probe inside [-1, 1]
    visual = rng.uniform(-1.0, 1.0, size=(b, cfg.n, cfg.d_visual))
    text = rng.uniform(-1.0, 1.0, size=(b, cfg.n, cfg.d_text))
    streamer = rng.integers(0, cfg.n_streamers, size=b)
    return visual, text, streamer


def _model_params_fn(model: ContentCTR, names, loss_fn):
    def f(*tensors):
        return loss_fn(model.with_params(dict(zip(names, tensors))))
    return f


def _build_block(block):
    """A single network block with respect to its inputs and its own parameters."""
    def build(rng):
        cfg = replace(CHECK_CONFIG, init_seed=int(rng.integers(2**31)))
        model = ContentCTR(cfg)
        b, n, d = CHECK_BATCH, cfg.n, cfg.d
        if block == "perceiver":
            prefix = "perceiver."
            inputs = [rng.normal(size=(b, n, 2, d)), rng.normal(size=(b, d))]
            run = lambda m, E_f, E_u: m.perceiver_forward(E_f, E_u)  # noqa: E731
        elif block == "decoder":
            prefix = "decoder."
            inputs = [rng.normal(size=(b, n, d))]
            run = lambda m, E_p: m.decoder_forward(E_p)  # noqa: E731
        elif block == "fusion":
            prefix = "proj_"
            inputs = [rng.uniform(-1.0, 1.0, size=(b, n, cfg.d_visual)),
                      rng.uniform(-1.0, 1.0, size=(b, n, cfg.d_text))]
            run = lambda m, v, t: m.fuse_features(v, t)[0]  # noqa: E731
        elif block == "head":
            prefix = "head."
            inputs = [rng.normal(size=(b, n, d))]
            run = lambda m, H: m.predict(H)  # noqa: E731
        else:
            raise ValueError(block)
        names = [k for k in model.params if k.startswith(prefix)]
        k = len(inputs)
        w = rng.normal(size=run(model, *[ad.Tensor(x) for x in inputs]).shape)

        def f(*tensors):
            m = model.with_params(dict(zip(names, tensors[k:])))
            return ad.sum(run(m, *tensors[:k]) * w)

        return f, inputs + [model.params[nm].data.copy() for nm in names]
    return build


def _build_layer_norm(rng):
    x = rng.normal(size=(3, 6))
    w = rng.normal(size=(3, 6))
    return (lambda t: ad.sum(layer_norm(t) * w)), [x]


def _build_streamer_embedding(rng):
    model = ContentCTR(CHECK_CONFIG)
    ids = np.array([0, 2, 7, -1])  # includes unknown ids that hit the fallback row
    w = rng.normal(size=(ids.size, CHECK_CONFIG.d))

    def f(table):
        return ad.sum(model.with_params({"streamer_table": table}).streamer_embedding(ids) * w)
    return f, [rng.normal(size=model.params["streamer_table"].shape)]


def _build_model_loss(rng, with_pair: bool, with_align: bool, variant: str = "L1"):
    """Full forward pass and the weighted objective, w.r.t. every parameter."""
    cfg = replace(CHECK_CONFIG, init_seed=int(rng.integers(2**31)))
    model = ContentCTR(cfg)
    names = list(model.params)
    n = cfg.n

    def draw():
        visual, text, streamer = _model_inputs(rng)
        y = rng.uniform(0.0, 1.0, size=(CHECK_BATCH, n))
        perms = np.stack([negative_permutations(n, CHECK_NEGATIVES, rng) for _ in range(CHECK_BATCH)])
        return visual, text, streamer, y, perms

    def margin(p):
        visual, text, streamer, y, perms = p
        out = model(visual, text, streamer)
        m = np.inf
        if with_pair:
            m = min(m, pair_margin(out.s.data, y, variant))
        if with_align:
            m = min(m, dtw_margin(out.S_a.data, out.S_p.data, perms))
        return m

    (visual, text, streamer, y, perms), _ = _stable(draw, margin)

    def loss(m):
        out = m(visual, text, streamer)
        point = pointwise_logloss(out.s, y)
        zero = ad.Tensor(0.0)
        pair = pairwise_loss(out.s, y, variant, 10.0) if with_pair else zero
        align = align_infonce(out.S_a, out.S_p, shuffled_negatives(out.S_p, perms)) if with_align else zero
        return combined_loss(point, align, pair, 0.65, 0.15 if with_align else 0.0, 0.20 if with_pair else 0.0)

    return _model_params_fn(model, names, loss), [model.params[k].data.copy() for k in names]


def _softmax_build(rng):
    x = rng.normal(size=(2, 3, 4))
    x[0, 0, 1] = -np.inf  # masked entry, as produced by the causal mask
    w = rng.normal(size=x.shape)
    mask = np.isfinite(x)
    finite = np.where(mask, x, 0.0)

    def f(t):
        return ad.sum(ad.where_mask(ad.softmax(t + np.where(mask, 0.0, -np.inf), axis=-1), mask) * w)
    return f, [finite]


REGISTRY: list[Target] = [
    Target("add", "op", _binary(ad.add, (3, 4), (4,))),
    Target("mul", "op", _binary(ad.mul, (3, 4), (3, 1))),
    Target("div", "op", _binary(ad.div, (3, 4), (4,), positive_b=True)),
    Target("matmul", "op", _binary(ad.matmul, (2, 3, 4), (4, 5))),
    Target("exp", "op", _unary(ad.exp)),
    Target("log", "op", _unary(ad.log, 0.2, 3.0)),
    Target("sqrt", "op", _unary(ad.sqrt, 0.2, 3.0)),
    Target("tanh", "op", _unary(ad.tanh)),
    Target("sigmoid", "op", _unary(ad.sigmoid)),
    Target("softplus", "op", _unary(ad.softplus)),
    Target("gelu", "op", _unary(ad.gelu)),
    Target("softmax", "op", _softmax_build),
    Target("logsumexp", "op", _unary(lambda t: ad.logsumexp(t, axis=-1))),
    Target("mean", "op", _unary(lambda t: ad.mean(t, axis=0, keepdims=True))),
    Target("transpose_reshape", "op", _unary(lambda t: ad.transpose(t).reshape(2, 6))),
    Target("concat", "op", _unary(lambda t: ad.concat([t, ad.scale(t, 2.0)], axis=1))),
    Target("getitem", "op", _unary(lambda t: t[np.array([0, 2, 2]), 1:3])),
    Target("layer_norm", "block", _build_layer_norm),
    Target("cosine_similarity", "block", _binary(cosine_similarity_matrix, (2, 5, 4), (2, 5, 4))),
    Target("streamer_embedding", "block", _build_streamer_embedding),
    Target("fusion", "block", _build_block("fusion")),
    Target("perceiver", "block", _build_block("perceiver")),
    Target("decoder", "block", _build_block("decoder")),
    Target("head", "block", _build_block("head")),
    Target("logloss", "loss", _build_logloss),
    *[Target(f"pair_{v}", "loss", _build_pair(v)) for v in PAIR_VARIANTS],
    Target("dtw_infonce", "loss", _build_align("similarity")),
    Target("dtw_infonce_distance", "loss", _build_align("distance")),
    Target("model_logloss", "model", lambda rng: _build_model_loss(rng, False, False)),
    Target("model_combined", "model", lambda rng: _build_model_loss(rng, True, True)),
]


def resolution_floor(value: float, step: float = STEP, tolerance: float = TOLERANCE) -> float:
    """Smallest derivative a central difference can verify to ``tolerance``."""
    noise = FD_NOISE_ULPS * np.finfo(np.float64).eps * max(1.0, abs(value)) / (2.0 * step)
    return noise / tolerance


def resolvable(numeric: list[np.ndarray], floor: float) -> bool:
    """True when every nonzero central difference is above ``floor``."""
    mags = np.concatenate([np.abs(c).ravel() for c in numeric])
    return not np.any((mags > 0) & (mags < floor))


def run_target(target: Target, seed: int, tolerance: float = TOLERANCE, step: float = STEP) -> CheckResult:
    rng = np.random.default_rng(np.random.SeedSequence([seed, sum(target.name.encode())]))
    start = time.perf_counter()
    for redraws in range(MAX_RESOLUTION_REDRAWS):
        fn, point = target.build(rng)
        num = numeric_grad(fn, point, step)
        value = fn(*[ad.Tensor(p) for p in point]).item()
        if resolvable(num, resolution_floor(value, step, tolerance)):
            break
    else:
        raise UnstableProbeError(f"{target.name}: no probe above the finite-difference resolution")
    err = relative_error(analytic_grad(fn, point), num)
    return CheckResult(target.name, target.kind, err, bool(err < tolerance),
                       time.perf_counter() - start, redraws)


def run_suite(seed: int = 0, targets=None, tolerance: float = TOLERANCE, step: float = STEP) -> list[CheckResult]:
    return [run_target(t, seed, tolerance, step) for t in (REGISTRY if targets is None else targets)]


def format_report(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{r.name:<{width}}  {r.kind:<5}  max_rel_err={r.error:.3e}  redraws={r.redraws}  "
             f"{'PASS' if r.passed else 'FAIL'}"
             for r in results]
    failed = [r.name for r in results if not r.passed]
    lines.append(f"{len(results)} targets, {len(results) - len(failed)} passed"
                 + (f"; FAILED: {', '.join(failed)}" if failed else ""))
    return "\n".join(lines)
