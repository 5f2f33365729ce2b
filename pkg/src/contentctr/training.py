"""Training, evaluation and the loss-ablation driver."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, adam_step
from .checkpoint import to_f32_grid
from .data import WindowBatch
from .losses import (
    LOGLOSS_CLAMP,
    LossConfig,
    align_infonce,
    combined_loss,
    negative_permutations,
    pairwise_loss,
    pointwise_logloss,
    shuffled_negatives,
)
from .metrics import MetricsReport, mean_average_precision, window_tau
from .model import ContentCTR, ModelConfig

logger = logging.getLogger(__name__)

_TAG_ORDER, _TAG_NEG = 31, 32

HISTORY_COLUMNS = ("epoch", "L_Point", "L_Pair", "L_align", "train_tau", "test_tau", "avg_s_over_y", "train_L_Point")

# loss-ablation rows: (name, pairwise variant or None, align on)
ABLATION_MODELS = (
    ("Model1", None, False),
    ("Model2", "L0", False),
    ("Model3", "L1", False),
    ("Model4", "L2", False),
    ("Model5", "L3", False),
    ("Ours", "L1", True),
)


class DivergenceError(RuntimeError):
    """Loss or gradient became non-finite; carries the last good state."""

    def __init__(self, message, model=None, adam=None, history=None, epoch=None):
        super().__init__(message)
        self.model, self.adam, self.history, self.epoch = model, adam, history, epoch


@dataclass
class OptimConfig:
    lr: float = 3e-3
    epochs: int = 12
    batch_size: int = 32
    schedule: str = "constant"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"schedule must be 'constant' or 'cosine', got {self.schedule!r}")
        if self.lr <= 0 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("lr must be > 0, epochs and batch_size >= 1")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        unknown = set(doc) - {"model", "loss", "optim", "seed", "generator"}
        if unknown:
            raise ValueError(f"unknown run config sections: {sorted(unknown)}")
        return cls(
            model=ModelConfig.from_dict(doc.get("model", {})),
            loss=LossConfig.from_dict(doc.get("loss", {})),
            optim=OptimConfig(**doc.get("optim", {})),
            seed=int(doc.get("seed", 0)),
        )

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "loss": self.loss.to_dict(),
                "optim": asdict(self.optim), "seed": self.seed}


@dataclass
class EpochRecord:
    epoch: int
    L_Point: float
    L_Pair: float
    L_align: float
    train_tau: float | None
    test_tau: float | None
    avg_s_over_y: float | None
    train_L_Point: float | None = None  # log loss of the end-of-epoch model on the whole train set

    def row(self) -> list:
        return [getattr(self, c) for c in HISTORY_COLUMNS]


@dataclass
class TrainResult:
    model: ContentCTR
    adam: AdamState
    history: list[EpochRecord]


def predict(model: ContentCTR, batch: WindowBatch, chunk: int = 512, mask_mode: str | None = None) -> np.ndarray:
    out = []
    for lo in range(0, len(batch), chunk):
        sub = batch.subset(slice(lo, lo + chunk))
        out.append(model(sub.visual, sub.text, sub.streamer, mask_mode=mask_mode).s.data)
    return np.concatenate(out, axis=0) if out else np.zeros((0, model.config.n))


def evaluate(model: ContentCTR, batch: WindowBatch, map_threshold: float | None = None) -> tuple[MetricsReport, np.ndarray]:
    """Per-window tau (and optionally mAP with ``y >= threshold`` as positives)."""
    s = predict(model, batch)
    report = window_tau(s, batch.ctr)
    if map_threshold is not None:
        value, _ = mean_average_precision(list(s), list(batch.ctr >= map_threshold))
        report.map = None if math.isnan(value) else value
    return report, s


def avg_s_over_y(s: np.ndarray, y: np.ndarray) -> float:
    return float(np.mean(s) / np.mean(y))


def learning_rate(optim: OptimConfig, step: int, total_steps: int) -> float:
    if optim.schedule == "constant":
        return optim.lr
    return optim.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, total_steps) / max(total_steps, 1)))


def batch_losses(model: ContentCTR, batch: WindowBatch, loss_cfg: LossConfig, rng: np.random.Generator):
    """Forward pass and the three loss components (zero when their weight is zero)."""
    out = model(batch.visual, batch.text, batch.streamer)
    point = pointwise_logloss(out.s, batch.ctr)
    pair = ad.Tensor(0.0)
    align = ad.Tensor(0.0)
    if loss_cfg.lambda3 > 0:
        pair = pairwise_loss(out.s, batch.ctr, loss_cfg.variant, loss_cfg.sigma)
    if loss_cfg.lambda2 > 0:
        b, n = batch.ctr.shape
        perms = np.stack([negative_permutations(n, loss_cfg.N, rng) for _ in range(b)])
        align = align_infonce(out.S_a, out.S_p, shuffled_negatives(out.S_p, perms),
                              loss_cfg.tau, loss_cfg.dtw_convention)
    total = combined_loss(point, align, pair, loss_cfg.lambda1, loss_cfg.lambda2, loss_cfg.lambda3)
    return total, point, pair, align


def _quantize_state(model: ContentCTR, adam: AdamState) -> AdamState:
    # epoch boundaries snap to the checkpoint grid so resuming is bit-identical
    model.load_arrays({k: to_f32_grid(v) for k, v in model.parameter_arrays().items()})
    return replace(adam, m={k: to_f32_grid(v) for k, v in adam.m.items()},
                   v={k: to_f32_grid(v) for k, v in adam.v.items()})


def _tau_or_none(model, batch):
    if batch is None or len(batch) == 0:
        return None, None, None
    report, s = evaluate(model, batch)
    return report.tau, avg_s_over_y(s, batch.ctr), logloss_value(s, batch.ctr)


def logloss_value(s: np.ndarray, y: np.ndarray) -> float:
    """Plain-numpy pointwise log loss, clamped like the training objective."""
    s = np.clip(s, LOGLOSS_CLAMP, 1.0 - LOGLOSS_CLAMP)
    return float(-np.mean(y * np.log(s) + (1.0 - y) * np.log(1.0 - s)))


def train(
    config: RunConfig,
    train_batch: WindowBatch,
    test_batch: WindowBatch | None = None,
    model: ContentCTR | None = None,
    adam: AdamState | None = None,
    start_epoch: int = 0,
    history: list[EpochRecord] | None = None,
    epochs: int | None = None,
    on_epoch=None,
) -> TrainResult:
    """Adam over the combined objective, one pass over shuffled windows per epoch.

    Everything random (initialisation, data order, negatives) derives from
    ``config.seed``; passing the model/adam state of a finished epoch with
    ``start_epoch`` resumes exactly.
    """
    cfg = config
    if model is None:
        model = ContentCTR(replace(cfg.model, init_seed=cfg.seed))
    o = cfg.optim
    if adam is None:
        adam = AdamState(lr=o.lr, beta1=o.beta1, beta2=o.beta2, eps=o.eps)
    history = list(history or [])
    n_train = len(train_batch)
    steps_per_epoch = math.ceil(n_train / o.batch_size)
    total_steps = steps_per_epoch * o.epochs
    last_epoch = o.epochs if epochs is None else min(o.epochs, start_epoch + epochs)
    names = list(model.params)

    for epoch in range(start_epoch, last_epoch):
        order = np.random.default_rng(np.random.SeedSequence([cfg.seed, _TAG_ORDER, epoch])).permutation(n_train)
        neg_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _TAG_NEG, epoch]))
        sums = np.zeros(3)
        for k, lo in enumerate(range(0, n_train, o.batch_size)):
            batch = train_batch.subset(order[lo: lo + o.batch_size])
            with Tape() as tape:
                total, point, pair, align = batch_losses(model, batch, cfg.loss, neg_rng)
            if not np.isfinite(total.item()):
                raise DivergenceError(f"non-finite loss at epoch {epoch + 1}, step {k}",
                                      history=history, epoch=epoch)
            grads = tape.backward(total, model.params.values())
            grad_arrays = {name: grads[model.params[name]] for name in names}
            if not all(np.all(np.isfinite(g)) for g in grad_arrays.values()):
                raise DivergenceError(f"non-finite gradient at epoch {epoch + 1}, step {k}",
                                      history=history, epoch=epoch)
            lr = learning_rate(o, epoch * steps_per_epoch + k, total_steps)
            new_params, adam = adam_step(model.parameter_arrays(), grad_arrays, adam, lr=lr)
            model.load_arrays(new_params)
            sums += [point.item() * len(batch), pair.item() * len(batch), align.item() * len(batch)]
        adam = _quantize_state(model, adam)
        means = sums / n_train
        train_tau, _, train_point = _tau_or_none(model, train_batch)
        test_tau, ratio, _ = _tau_or_none(model, test_batch)
        rec = EpochRecord(epoch + 1, float(means[0]), float(means[1]), float(means[2]),
                          train_tau, test_tau, ratio, train_point)
        history.append(rec)
        logger.info("epoch %d: L_Point=%.5f L_Pair=%.5f L_align=%.5f train_tau=%s test_tau=%s",
                    rec.epoch, rec.L_Point, rec.L_Pair, rec.L_align, rec.train_tau, rec.test_tau)
        if on_epoch is not None:
            on_epoch(model, adam, history)
    return TrainResult(model, adam, history)


def ablation_config(base: RunConfig, variant: str | None, use_align: bool) -> RunConfig:
    loss = replace(
        base.loss,
        lambda2=base.loss.lambda2 if use_align else 0.0,
        lambda3=base.loss.lambda3 if variant is not None else 0.0,
        variant=variant or base.loss.variant,
    )
    return replace(base, loss=loss)


@dataclass
class AblationRow:
    model: str
    variant: str
    align: bool
    test_tau: float | None
    avg_s_over_y: float | None
    L_Point: float | None
    L_Pair: float | None
    L_align: float | None
    status: str
    history: list[EpochRecord] = field(default_factory=list, repr=False)


ABLATION_COLUMNS = ("model", "variant", "align", "test_tau", "avg_s_over_y", "L_Point", "L_Pair", "L_align", "status")


def run_ablation(base: RunConfig, train_batch: WindowBatch, test_batch: WindowBatch, models=ABLATION_MODELS) -> list[AblationRow]:
    """Train every row of the loss ablation with the same seed and data."""
    rows = []
    for name, variant, use_align in models:
        cfg = ablation_config(base, variant, use_align)
        try:
            result = train(cfg, train_batch, test_batch)
        except (DivergenceError, ValueError) as exc:
            logger.warning("ablation row %s failed: %s", name, exc)
            rows.append(AblationRow(name, variant or "-", use_align, None, None, None, None, None, f"failed: {exc}"))
            continue
        last = result.history[-1]
        rows.append(AblationRow(name, variant or "-", use_align, last.test_tau, last.avg_s_over_y,
                                last.L_Point, last.L_Pair, last.L_align, "ok", result.history))
    return rows


def sustained_increase(values, fraction: float = 1 / 3) -> bool:
    """Positive least-squares slope over the final ``fraction`` of the series,
    with the last value above the first value of that stretch."""
    values = np.asarray(values, dtype=np.float64)
    k = max(2, int(math.ceil(len(values) * fraction)))
    tail = values[-k:]
    slope = np.polyfit(np.arange(k, dtype=np.float64), tail, 1)[0]
    return bool(slope > 0 and tail[-1] > tail[0])
