from dataclasses import replace

import numpy as np
import pytest

from contentctr import training
from contentctr.data import GeneratorConfig, embed_windows, generate_dataset, providers_for
from contentctr.losses import LossConfig
from contentctr.model import ContentCTR, ModelConfig
from contentctr.training import (
    ABLATION_MODELS,
    DivergenceError,
    OptimConfig,
    RunConfig,
    ablation_config,
    avg_s_over_y,
    evaluate,
    learning_rate,
    logloss_value,
    run_ablation,
    sustained_increase,
    train,
)

GEN = GeneratorConfig(n_streamers=3, windows_per_streamer=12, n=5, d_v=6, d_t=6,
                      embed_dim_visual=6, embed_dim_text=6, label_noise=0.2)
RUN = RunConfig(
    model=ModelConfig(n=5, d=8, d_h=4, n_h=2, ffn_hidden=8, d_visual=6, d_text=6, n_streamers=3),
    loss=LossConfig(N=3),
    optim=OptimConfig(lr=5e-3, epochs=3, batch_size=8),
    seed=4,
)


@pytest.fixture(scope="module")
def batches():
    train_w, test_w = generate_dataset(GEN, 0)
    providers = providers_for(GEN)
    return embed_windows(train_w, *providers), embed_windows(test_w, *providers)


def test_zero_weights_zero_components(batches):
    cfg = replace(RUN, loss=replace(RUN.loss, lambda2=0.0, lambda3=0.0))
    history = train(cfg, *batches).history
    assert all(r.L_Pair == 0.0 and r.L_align == 0.0 for r in history)
    assert all(r.L_Point > 0 for r in history)


def test_full_objective_records_all_components(batches):
    history = train(RUN, *batches, epochs=1).history
    r = history[0]
    assert r.L_Pair > 0 and r.L_align != 0 and r.epoch == 1
    assert len(r.row()) == len(training.HISTORY_COLUMNS)


def test_training_is_deterministic(batches):
    a = train(RUN, *batches, epochs=2)
    b = train(RUN, *batches, epochs=2)
    assert [r.row() for r in a.history] == [r.row() for r in b.history]
    for k, v in a.model.parameter_arrays().items():
        assert np.array_equal(v, b.model.parameter_arrays()[k])


def test_resume_is_bit_identical(batches, tmp_path):
    from contentctr.checkpoint import load_checkpoint, save_checkpoint

    full = train(RUN, *batches)
    first = train(RUN, *batches, epochs=2)
    save_checkpoint(tmp_path, first.model, first.adam)
    model, adam, _ = load_checkpoint(tmp_path)
    resumed = train(RUN, *batches, model=model, adam=adam, start_epoch=2, history=first.history)
    assert [r.row() for r in resumed.history] == [r.row() for r in full.history]
    for k, v in full.model.parameter_arrays().items():
        assert np.array_equal(v, resumed.model.parameter_arrays()[k])


def test_eval_on_train_matches_recorded_tau(batches):
    result = train(RUN, *batches, epochs=2)
    report, s = evaluate(result.model, batches[0])
    assert report.tau >= result.history[-1].train_tau - 1e-9
    assert logloss_value(s, batches[0].ctr) == pytest.approx(result.history[-1].train_L_Point, abs=1e-12)


def test_constant_predictor_windows_are_skipped(batches):
    model = ContentCTR(RUN.model)
    arrays = model.parameter_arrays()
    arrays["head.weight"] = np.zeros_like(arrays["head.weight"])
    report, s = evaluate(ContentCTR(RUN.model, arrays), batches[1], map_threshold=0.5)
    assert np.all(s == 0.5)
    assert report.tau is None and report.windows_skipped == len(batches[1])


def test_divergence_raises_with_history(batches, monkeypatch):
    calls = {"n": 0}
    steps_per_epoch = -(-len(batches[0]) // RUN.optim.batch_size)
    original = training.batch_losses

    def poisoned(model, batch, loss_cfg, rng):
        calls["n"] += 1
        total, point, pair, align = original(model, batch, loss_cfg, rng)
        if calls["n"] > steps_per_epoch:  # second epoch onwards
            total = total * float("nan")
        return total, point, pair, align

    monkeypatch.setattr(training, "batch_losses", poisoned)
    with pytest.raises(DivergenceError) as info:
        train(RUN, *batches)
    assert info.value.epoch == 1 and len(info.value.history) == 1  # epoch index is zero-based


def test_ablation_configs():
    names = [m[0] for m in ABLATION_MODELS]
    assert names == ["Model1", "Model2", "Model3", "Model4", "Model5", "Ours"]
    m1 = ablation_config(RUN, None, False).loss
    assert m1.lambda2 == 0 and m1.lambda3 == 0
    ours = ablation_config(RUN, "L1", True).loss
    assert ours.lambda2 == RUN.loss.lambda2 and ours.variant == "L1"
    m4 = ablation_config(RUN, "L2", False).loss
    assert m4.lambda2 == 0 and m4.lambda3 == RUN.loss.lambda3 and m4.variant == "L2"


def test_run_ablation_rows(batches):
    cfg = replace(RUN, optim=replace(RUN.optim, epochs=1))
    rows = run_ablation(cfg, *batches, models=ABLATION_MODELS[:2])
    assert [r.model for r in rows] == ["Model1", "Model2"]
    assert rows[0].L_Pair == 0.0 and rows[1].L_Pair > 0.0
    assert all(r.status == "ok" for r in rows)


def test_learning_rate_schedules():
    const = OptimConfig(lr=0.1)
    assert learning_rate(const, 5, 10) == 0.1
    cos = OptimConfig(lr=0.1, schedule="cosine")
    assert learning_rate(cos, 0, 10) == pytest.approx(0.1)
    assert learning_rate(cos, 5, 10) == pytest.approx(0.05)
    assert learning_rate(cos, 10, 10) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ValueError):
        OptimConfig(schedule="step")


def test_avg_ratio():
    assert avg_s_over_y(np.array([0.2, 0.4]), np.array([0.1, 0.2])) == pytest.approx(2.0)


def test_sustained_increase():
    assert sustained_increase([5, 4, 3, 2, 2.1, 2.2, 2.3, 2.4, 2.5])
    assert not sustained_increase([5, 4, 3, 2, 1.9, 1.8, 1.7, 1.6, 1.5])
    # a bump inside the tail: the fitted slope is positive but the series ends where it started
    bump = [3, 2, 1.5, 1.2, 1.1, 1.05, 1.02, 1.01, 1.0, 0.9, 1.5, 1.0]
    assert np.polyfit(np.arange(4), bump[-4:], 1)[0] > 0
    assert not sustained_increase(bump)
    assert not sustained_increase([1.0] * 9)


def test_run_config_round_trip():
    assert RunConfig.from_dict(RUN.to_dict()) == RUN
    with pytest.raises(ValueError):
        RunConfig.from_dict({"trainer": {}})
