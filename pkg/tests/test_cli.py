import csv
import json
import subprocess
import sys

import numpy as np
import pytest

from contentctr import cli, training
from contentctr.checkpoint import load_checkpoint
from contentctr.data import embed_windows, load_dataset, providers_for, GeneratorConfig
from contentctr.dtw import cosine_similarity_matrix, is_monotone_path

CONFIG = {
    "seed": 2,
    "generator": {"n_streamers": 3, "windows_per_streamer": 10, "n": 5, "d_v": 6, "d_t": 6,
                  "embed_dim_visual": 6, "embed_dim_text": 6, "label_noise": 0.2},
    "model": {"d": 8, "d_h": 4, "n_h": 2, "ffn_hidden": 8},
    "loss": {"N": 3},
    "optim": {"lr": 0.005, "epochs": 2, "batch_size": 8},
}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "config.json"
    cfg.write_text(json.dumps(CONFIG))
    assert cli.main(["generate", "--config", str(cfg), "--out", str(root / "data"), "--seed", "11"]) == 0
    assert cli.main(["train", "--config", str(cfg), "--data", str(root / "data"), "--out", str(root / "run")]) == 0
    return root


def read_rows(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_generate_counts_and_determinism(tmp_path):
    cfg = tmp_path / "gen.json"
    cfg.write_text(json.dumps({"n_streamers": 10, "windows_per_streamer": 5, "n": 4, "d_v": 3, "d_t": 3}))
    for name in ("a", "b"):
        assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / name), "--seed", "1"]) == 0
    a = json.loads((tmp_path / "a" / "manifest.json").read_text())
    b = json.loads((tmp_path / "b" / "manifest.json").read_text())
    assert a == b and a["counts"] == {"train": 40, "test": 10}
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "c"), "--seed", "1",
                     "--format", "binary"]) == 0
    assert (tmp_path / "c" / "train.bin").exists()


def test_bundled_configs_load():
    for name in cli.BUILTIN_CONFIGS:
        doc = cli.load_config_doc(name)
        gen = cli.generator_config(doc)
        cfg = cli.run_config(doc, gen)
        assert cfg.model.n == gen.n and cfg.model.d_visual == gen.embed_dim_visual
    paper = cli.run_config(cli.load_config_doc("paper"), cli.generator_config(cli.load_config_doc("paper")))
    assert (paper.model.d, paper.model.n, paper.optim.batch_size, paper.optim.lr) == (512, 20, 48, 5e-5)
    assert (paper.loss.lambda1, paper.loss.lambda2, paper.loss.lambda3, paper.loss.sigma, paper.loss.N) == \
        (0.65, 0.15, 0.20, 10.0, 8)


def test_train_outputs(workspace):
    rows = read_rows(workspace / "run" / "metrics.csv")
    assert [r["epoch"] for r in rows] == ["1", "2"]
    assert list(rows[0]) == list(training.HISTORY_COLUMNS)
    model, adam, meta = load_checkpoint(workspace / "run" / "checkpoint")
    assert meta["epoch"] == 2 and adam.t > 0 and meta["data_seed"] == 11


def test_train_is_byte_identical(workspace):
    out = workspace / "run_again"
    assert cli.main(["train", "--config", str(workspace / "config.json"), "--data", str(workspace / "data"),
                     "--out", str(out)]) == 0
    for rel in ("metrics.csv", "checkpoint/weights.bin", "checkpoint/manifest.json"):
        assert (out / rel).read_bytes() == (workspace / "run" / rel).read_bytes()


def test_resume_matches_uninterrupted(workspace):
    out = workspace / "run_resume"
    base = ["train", "--config", str(workspace / "config.json"), "--data", str(workspace / "data"), "--out", str(out)]
    assert cli.main(base + ["--epochs", "1"]) == 0
    assert len(read_rows(out / "metrics.csv")) == 1
    assert cli.main(base + ["--resume"]) == 0
    for rel in ("metrics.csv", "checkpoint/weights.bin"):
        assert (out / rel).read_bytes() == (workspace / "run" / rel).read_bytes()
    # nothing left to train
    assert cli.main(base + ["--resume"]) == cli.EXIT_VALIDATION


def test_pointwise_only_columns_are_zero(tmp_path, workspace):
    doc = dict(CONFIG, loss={"N": 3, "lambda2": 0.0, "lambda3": 0.0})
    cfg = tmp_path / "point.json"
    cfg.write_text(json.dumps(doc))
    assert cli.main(["train", "--config", str(cfg), "--data", str(workspace / "data"), "--out", str(tmp_path / "r")]) == 0
    rows = read_rows(tmp_path / "r" / "metrics.csv")
    assert all(float(r["L_Pair"]) == 0.0 and float(r["L_align"]) == 0.0 for r in rows)


def test_eval(workspace, capsys):
    args = ["eval", "--ckpt", str(workspace / "run"), "--data", str(workspace / "data")]
    assert cli.main(args + ["--out", str(workspace / "ev1"), "--map-threshold", "0.1"]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) >= {"tau", "P", "Q", "T", "U", "map", "windows_skipped"}
    assert cli.main(args + ["--out", str(workspace / "ev2"), "--map-threshold", "0.1"]) == 0
    for name in ("metrics.json", "predictions.csv"):
        assert (workspace / "ev1" / name).read_bytes() == (workspace / "ev2" / name).read_bytes()
    preds = read_rows(workspace / "ev1" / "predictions.csv")
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    assert len(preds) == manifest["counts"]["test"] * CONFIG["generator"]["n"]
    assert list(preds[0]) == ["window", "timestamp", "s", "y"]


def test_eval_on_train_split_matches_history(workspace, capsys):
    assert cli.main(["eval", "--ckpt", str(workspace / "run"), "--data", str(workspace / "data"),
                     "--split", "train"]) == 0
    tau = json.loads(capsys.readouterr().out)["tau"]
    recorded = float(read_rows(workspace / "run" / "metrics.csv")[-1]["train_tau"])
    assert tau >= recorded - 1e-8  # the CSV keeps 9 significant digits


def test_align_outputs(workspace):
    out = workspace / "align"
    assert cli.main(["align", "--ckpt", str(workspace / "run"), "--data", str(workspace / "data"),
                     "--sample", "0", "--out", str(out)]) == 0
    sim = np.loadtxt(out / "similarity.csv", delimiter=",")
    model, _, _ = load_checkpoint(workspace / "run" / "checkpoint")
    manifest, _, test = load_dataset(workspace / "data")
    batch = embed_windows(test[:1], *providers_for(GeneratorConfig.from_dict(manifest["generator"])))
    o = model(batch.visual, batch.text, batch.streamer)
    expected = cosine_similarity_matrix(o.S_a, o.S_p).data[0]
    np.testing.assert_allclose(sim, expected, rtol=1e-8, atol=1e-9)
    path = [tuple(map(int, r.values())) for r in read_rows(out / "path.csv")]
    assert is_monotone_path(path, 5)
    assert cli.main(["align", "--ckpt", str(workspace / "run"), "--data", str(workspace / "data"),
                     "--sample", "999", "--out", str(out)]) == cli.EXIT_VALIDATION


def test_ablate(workspace):
    out = workspace / "ablate"
    doc = dict(CONFIG, optim={"lr": 0.005, "epochs": 1, "batch_size": 8})
    cfg = workspace / "ablate.json"
    cfg.write_text(json.dumps(doc))
    assert cli.main(["ablate", "--config", str(cfg), "--data", str(workspace / "data"), "--out", str(out)]) == 0
    rows = read_rows(out / "ablation.csv")
    assert [r["model"] for r in rows] == ["Model1", "Model2", "Model3", "Model4", "Model5", "Ours"]
    assert all(r["status"] == "ok" for r in rows)
    assert all(float(r["L_Pair"]) == 0.0 for r in read_rows(out / "history_Model1.csv"))
    assert float(rows[-1]["L_align"]) != 0.0


@pytest.mark.parametrize("argv", [
    [],
    ["train"],
    ["generate", "--config", "/nonexistent.json", "--out", "x", "--seed", "1"],
    ["gradcheck", "--target", "no_such_target"],
    ["eval", "--ckpt", "/nonexistent", "--data", "/nonexistent"],
])
def test_validation_errors_exit_1(argv, capsys):
    assert cli.main(argv) == cli.EXIT_VALIDATION


def test_invalid_generator_config_exits_1(tmp_path):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"n": 1}))
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "0"]) == 1
    cfg.write_text("{not json")
    assert cli.main(["generate", "--config", str(cfg), "--out", str(tmp_path / "o"), "--seed", "0"]) == 1


def test_model_shape_mismatch_exits_1(tmp_path, workspace):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(dict(CONFIG, model={"n": 7})))
    assert cli.main(["train", "--config", str(cfg), "--data", str(workspace / "data"), "--out", str(tmp_path / "r")]) == 1


def test_runtime_failure_exits_2(monkeypatch, workspace, tmp_path):
    def boom(*a, **k):
        raise RuntimeError("disk on fire")
    monkeypatch.setattr(cli, "run_ablation", boom)
    assert cli.main(["ablate", "--config", str(workspace / "config.json"), "--data", str(workspace / "data"),
                     "--out", str(tmp_path / "x")]) == cli.EXIT_RUNTIME


def test_divergence_keeps_last_checkpoint(monkeypatch, workspace, tmp_path):
    calls = {"n": 0}
    original = training.batch_losses

    def poisoned(model, batch, loss_cfg, rng):
        calls["n"] += 1
        total, point, pair, align = original(model, batch, loss_cfg, rng)
        return (total * float("nan") if calls["n"] > 3 else total), point, pair, align

    monkeypatch.setattr(training, "batch_losses", poisoned)
    out = tmp_path / "div"
    assert cli.main(["train", "--config", str(workspace / "config.json"), "--data", str(workspace / "data"),
                     "--out", str(out)]) == cli.EXIT_RUNTIME
    _, _, meta = load_checkpoint(out / "checkpoint")
    assert meta["epoch"] == 1
    assert len(read_rows(out / "metrics.csv")) == 1


def test_gradcheck_subset_passes(capsys):
    assert cli.main(["gradcheck", "--seed", "4", "--target", "add", "logloss", "pair_L1"]) == cli.EXIT_OK
    assert "3 targets, 3 passed" in capsys.readouterr().out


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "contentctr", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    for cmd in ("generate", "train", "eval", "ablate", "align", "gradcheck"):
        assert cmd in proc.stdout


def test_fmt_float():
    assert cli.fmt_float(1 / 3) == "0.333333333"
    assert cli.fmt_float(True) == "true" and cli.fmt_float(None) == "" and cli.fmt_float(3) == "3"
