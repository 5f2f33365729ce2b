"""Command-line entry point: ``contentctr {generate,train,eval,ablate,align,gradcheck}``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure,
3 gradient check failure.  Floats in CSV outputs are written with 9
significant digits so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from importlib import resources
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import DataFormatError, GeneratorConfig, embed_windows, load_dataset, providers_for, write_dataset
from .dtw import alignment_cost, cosine_similarity_matrix, dtw_accumulate
from .gradcheck_suite import REGISTRY, format_report, run_suite
from .training import (
    ABLATION_COLUMNS,
    ABLATION_MODELS,
    HISTORY_COLUMNS,
    DivergenceError,
    EpochRecord,
    RunConfig,
    evaluate,
    run_ablation,
    train,
)

EXIT_OK, EXIT_VALIDATION, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3
BUILTIN_CONFIGS = ("desk", "paper")
CKPT_DIR = "checkpoint"

logger = logging.getLogger("contentctr")


class ValidationError(ValueError):
    """Bad command-line input; maps to exit code 1."""


# ----------------------------------------------------------------------------
# helpers

def fmt_float(x) -> str:
    if x is None:
        return ""
    if isinstance(x, (bool, np.bool_)):
        return str(bool(x)).lower()
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return f"{float(x):.9g}"
    return str(x)


def write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header is not None:
            w.writerow(header)
        for row in rows:
            w.writerow([fmt_float(v) for v in row])


def load_config_doc(spec: str) -> dict:
    """A JSON file path, or the name of a bundled config (``desk`` or ``paper``)."""
    path = Path(spec)
    if not path.exists() and spec in BUILTIN_CONFIGS:
        return json.loads(resources.files("contentctr.configs").joinpath(f"{spec}.json").read_text())
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise ValidationError(f"cannot read config {spec}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {spec} is not valid JSON: {exc}") from None


def generator_config(doc: dict) -> GeneratorConfig:
    section = doc["generator"] if "generator" in doc else doc
    return GeneratorConfig.from_dict(section)


def run_config(doc: dict, gen: GeneratorConfig, seed: int | None = None) -> RunConfig:
    """Run config with the data-dependent model fields filled in from the dataset."""
    doc = dict(doc)
    model = dict(doc.get("model", {}))
    for key, value in (("n", gen.n), ("d_visual", gen.embed_dim_visual),
                       ("d_text", gen.embed_dim_text), ("n_streamers", gen.n_streamers)):
        if key in model and model[key] != value:
            raise ValidationError(f"model.{key}={model[key]} does not match the dataset ({value})")
        model[key] = value
    doc["model"] = model
    cfg = RunConfig.from_dict(doc)
    return cfg if seed is None else replace(cfg, seed=seed)


def load_batches(data_dir: str):
    try:
        manifest, train_w, test_w = load_dataset(data_dir)
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot load dataset from {data_dir}: {exc}") from None
    gen = GeneratorConfig.from_dict(manifest["generator"])
    pv, pt = providers_for(gen)
    return gen, manifest, embed_windows(train_w, pv, pt), embed_windows(test_w, pv, pt), (train_w, test_w)


def history_rows(history):
    return [rec.row() for rec in history]


def _record_from_dict(d: dict) -> EpochRecord:
    return EpochRecord(**d)


def _check_distinct(inputs, out) -> None:
    out = Path(out).resolve()
    for p in inputs:
        if p is not None and Path(p).resolve() == out:
            raise ValidationError(f"output path {out} must differ from input {p}")


# ----------------------------------------------------------------------------
# commands

def cmd_generate(args) -> int:
    gen = generator_config(load_config_doc(args.config))
    _check_distinct([args.config], args.out)
    manifest = write_dataset(gen, args.seed, args.out, args.format)
    print(json.dumps({"out": str(args.out), "counts": manifest["counts"], "sha256": manifest["sha256"]}))
    return EXIT_OK


def cmd_train(args) -> int:
    doc = load_config_doc(args.config)
    _check_distinct([args.config, args.data], args.out)
    gen, manifest, train_b, test_b, _ = load_batches(args.data)
    cfg = run_config(doc, gen, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ckpt = out / CKPT_DIR
    model = adam = None
    history: list[EpochRecord] = []
    start = 0
    if args.resume:
        model, adam, meta = load_checkpoint(ckpt, expect_config=replace(cfg.model, init_seed=cfg.seed))
        if meta.get("run_config") != cfg.to_dict():
            raise ValidationError("checkpoint was trained with a different run config")
        history = [_record_from_dict(r) for r in meta.get("history", [])]
        start = int(meta.get("epoch", 0))
        if start >= cfg.optim.epochs:
            raise ValidationError(f"nothing to train: the checkpoint already covers all {cfg.optim.epochs} epochs")

    def on_epoch(model, adam, history):
        meta = {"epoch": history[-1].epoch, "run_config": cfg.to_dict(), "data_seed": manifest["seed"],
                "history": [vars(r) for r in history]}
        save_checkpoint(ckpt, model, adam, meta)
        write_csv(out / "metrics.csv", HISTORY_COLUMNS, history_rows(history))

    try:
        result = train(cfg, train_b, test_b, model=model, adam=adam, start_epoch=start,
                       history=history, epochs=args.epochs, on_epoch=on_epoch)
    except DivergenceError as exc:
        print(f"error: training diverged ({exc}); last good checkpoint kept in {ckpt}", file=sys.stderr)
        return EXIT_RUNTIME
    last = result.history[-1]
    print(json.dumps({"epoch": last.epoch, "train_tau": last.train_tau, "test_tau": last.test_tau,
                      "checkpoint": str(ckpt)}))
    return EXIT_OK


def _load_ckpt(path):
    p = Path(path)
    if (p / CKPT_DIR / "manifest.json").exists():
        p = p / CKPT_DIR
    return load_checkpoint(p)


def cmd_eval(args) -> int:
    model, _, _ = _load_ckpt(args.ckpt)
    gen, _, train_b, test_b, _ = load_batches(args.data)
    batch = train_b if args.split == "train" else test_b
    cfg = model.config
    if (cfg.n, cfg.d_visual, cfg.d_text) != (gen.n, gen.embed_dim_visual, gen.embed_dim_text):
        raise ValidationError("checkpoint shapes do not match the dataset")
    report, s = evaluate(model, batch, args.map_threshold)
    text = report.to_json()
    if args.out:
        out = Path(args.out)
        _check_distinct([args.ckpt, args.data], out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(text + "\n")
        rows = [(w, t, s[w, t], batch.ctr[w, t]) for w in range(len(batch)) for t in range(cfg.n)]
        write_csv(out / "predictions.csv", ("window", "timestamp", "s", "y"), rows)
    print(text)
    return EXIT_OK


def cmd_ablate(args) -> int:
    doc = load_config_doc(args.config)
    _check_distinct([args.config, args.data], args.out)
    gen, _, train_b, test_b, _ = load_batches(args.data)
    cfg = run_config(doc, gen, args.seed)
    models = ABLATION_MODELS if not args.models else [m for m in ABLATION_MODELS if m[0] in args.models]
    rows = run_ablation(cfg, train_b, test_b, models)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "ablation.csv", ABLATION_COLUMNS, [[getattr(r, c) for c in ABLATION_COLUMNS] for r in rows])
    for r in rows:
        write_csv(out / f"history_{r.model}.csv", HISTORY_COLUMNS, history_rows(r.history))
    for r in rows:
        print(f"{r.model:<7} {r.variant:<3} align={str(r.align).lower():<5} tau={fmt_float(r.test_tau)} "
              f"s/y={fmt_float(r.avg_s_over_y)} {r.status}")
    return EXIT_OK


def cmd_align(args) -> int:
    model, _, _ = _load_ckpt(args.ckpt)
    _, _, train_b, test_b, _ = load_batches(args.data)
    batch = train_b if args.split == "train" else test_b
    if not 0 <= args.sample < len(batch):
        raise ValidationError(f"sample index {args.sample} out of range [0, {len(batch)})")
    one = batch.subset(slice(args.sample, args.sample + 1))
    out_m = model(one.visual, one.text, one.streamer)
    sim = cosine_similarity_matrix(out_m.S_a, out_m.S_p).data[0]
    result = dtw_accumulate(alignment_cost(sim, args.convention).data if args.convention == "distance"
                            else sim)
    out = Path(args.out)
    _check_distinct([args.ckpt, args.data], out)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(out / "similarity.csv", None, sim.tolist())
    write_csv(out / "path.csv", ("i", "j"), result.path)
    offsets = [i - j for i, j in result.path]
    print(json.dumps({"sample": args.sample, "path_length": len(result.path),
                      "median_offset": float(np.median(offsets)), "convention": args.convention}))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    targets = REGISTRY
    if args.target:
        unknown = set(args.target) - {t.name for t in REGISTRY}
        if unknown:
            raise ValidationError(f"unknown gradcheck targets: {sorted(unknown)}")
        targets = [t for t in REGISTRY if t.name in args.target]
    results = run_suite(args.seed, targets)
    print(format_report(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_GRADCHECK


# ----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contentctr", description=__doc__.split("\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic planted-highlight dataset")
    p.add_argument("--config", required=True, help="JSON file or bundled name (desk, paper)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--format", choices=("jsonl", "binary"), default="jsonl")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train and write a checkpoint plus metrics.csv")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--epochs", type=int, default=None, help="stop after this many more epochs")
    p.add_argument("--resume", action="store_true", help="continue from OUT/checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-window tau (and optional mAP) of a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--out", default=None, help="directory for metrics.json and predictions.csv")
    p.add_argument("--map-threshold", type=float, default=None, help="y >= threshold counts as relevant")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train the six loss configurations")
    p.add_argument("--config", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--models", nargs="*", default=None, help="subset of rows to run")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("align", help="similarity matrix and DTW path for one window")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--sample", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--convention", choices=("distance", "similarity"), default="distance")
    p.set_defaults(func=cmd_align)

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable target")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--target", nargs="*", default=None)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors; usage errors are validation errors
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, CheckpointError, DataFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
