"""Run orchestration behind the command line: data, run directories and artifacts.

Every run owns one directory.  It starts by echoing the fully resolved
config, writes all outputs inside that directory only, and ends with a
``run.json`` whose status marks the run complete.
"""

from __future__ import annotations

import csv
import json
import os
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .checkpoint import check_compatible, load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .data import Batch, stack_pairs, standardize_views
from .encoder import count_params, init_encoder, param_table
from .m2ae import VIEWS, draw_mask, init_m2ae, pretrain_step
from .model import STAT_MEAN, is_buffer
from .prompts import MissingScenario, PromptConfig, apply_missing
from .synth import generate_dataset, label_stats, load_dataset, save_dataset, split_sizes
from .tokenizer import segment
from .train import (
    MissingCheckpointError,
    PretrainResult,
    TrainResult,
    evaluate,
    run_pretraining,
    run_training,
    trainable,
)

OUTPUT_ROOT_ENV = "VCT_OUTPUT_ROOT"
SPLITS = ("train", "val", "test")
METRIC_KINDS = ("rmse", "accuracy", "f1_macro")


def default_output_root() -> Path:
    return Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))


class IncompleteRunError(RuntimeError):
    pass


# ---------------------------------------------------------------- run directories


@dataclass
class RunDir:
    path: Path
    kind: str
    config: ExperimentConfig
    started: float = 0.0

    @classmethod
    def create(cls, kind: str, cfg: ExperimentConfig, out: str | Path | None = None) -> "RunDir":
        if out is None:
            base = default_output_root() / f"{kind}-{cfg.hash()}"
            path, i = base, 1
            while path.exists():
                path = base.with_name(f"{base.name}-{i}")
                i += 1
        else:
            path = Path(out)
        path.mkdir(parents=True, exist_ok=True)
        run = cls(path, kind, cfg, time.time())
        cfg.save(path / "config.toml")
        run.write_json("run.json", {"kind": kind, "status": "running", "config_hash": cfg.hash()})
        return run

    def write_json(self, name: str, obj) -> Path:
        p = self.path / name
        p.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
        return p

    def fail(self, exc: BaseException, extra: dict | None = None) -> None:
        """Mark the run failed and leave a diagnostic record next to its outputs."""
        diag = {"error": type(exc).__name__, "message": str(exc), "config_hash": self.config.hash()}
        diag.update(getattr(exc, "diagnostics", None) or {})
        diag.update(extra or {})
        self.write_json("diagnostic.json", diag)
        self.write_json("run.json", {"kind": self.kind, "status": "failed", "config_hash": self.config.hash()})

    def finish(self, extra: dict | None = None) -> None:
        info = {
            "kind": self.kind,
            "status": "complete",
            "config_hash": self.config.hash(),
            "seconds": round(time.time() - self.started, 3),
        }
        info.update(extra or {})
        self.write_json("run.json", info)


def write_rows(path: Path, header: Sequence[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([repr(x) if isinstance(x, float) else x for x in r])


# ---------------------------------------------------------------- data


def load_pairs(cfg: ExperimentConfig):
    """(train, val, test) SignalPair lists, generated or read from a gen-data directory."""
    if cfg["data.path"]:
        root = Path(cfg["data.path"])
        out = []
        for split in SPLITS:
            f = root / f"{split}.vctd"
            if not f.exists():
                raise FileNotFoundError(f"data.path: {f} not found (expected gen-data output)")
            pairs, fs = load_dataset(f)
            if abs(fs - cfg["data.sample_rate"]) > 1e-9:
                raise ValueError(f"data.path: container sample rate {fs} != data.sample_rate {cfg['data.sample_rate']}")
            out.append(pairs)
        return tuple(out)
    split_sizes(cfg["data.n"], cfg["data.split"])
    return generate_dataset(cfg.synth(), cfg["data.n"], tuple(cfg["data.split"]))


def to_batch(pairs, cfg: ExperimentConfig, split: str, scenario: MissingScenario | None = None) -> Batch:
    if scenario is not None and scenario.applies(split):
        rng = np.random.default_rng(np.random.SeedSequence([cfg["run.seed"], SPLITS.index(split), 7]))
        pairs = apply_missing(pairs, scenario, rng)
    batch = stack_pairs(pairs)
    return standardize_views(batch) if cfg["data.standardize"] else batch


def load_batches(cfg: ExperimentConfig, scenario: MissingScenario | None = None) -> tuple[Batch, Batch, Batch]:
    pairs = load_pairs(cfg)
    return tuple(to_batch(p, cfg, s, scenario) for p, s in zip(pairs, SPLITS))


# ---------------------------------------------------------------- parameter accounting


def model_params(params: dict) -> dict:
    """The deployed model: backbone, head and prompts (no pretraining heads or buffers)."""
    return {n: t for n, t in params.items() if not is_buffer(n) and not n.startswith(("decoder.", "cep."))}


def param_summary(params: dict, mode: str) -> dict:
    deployed = model_params(params)
    total = count_params(deployed)
    n_train = count_params(deployed, lambda n: trainable(n, mode)) if mode != "evaluate" else 0
    return {
        "total": total,
        "trainable": n_train,
        "trainable_fraction": n_train / total if total else 0.0,
        "by_component": param_table(deployed),
    }


def template_params(cfg: ExperimentConfig, with_m2ae: bool = False) -> dict:
    rng = np.random.default_rng(0)
    enc = cfg.encoder()
    p = init_encoder(enc, rng, tuple(cfg["run.views"]))
    if with_m2ae:
        init_m2ae(p, enc, cfg.m2ae(), rng)
    return p


def load_pretrained(path, cfg: ExperimentConfig) -> dict:
    if not path:
        raise MissingCheckpointError("missing --checkpoint")
    ckpt = load_checkpoint(path)
    check_compatible(ckpt.params, template_params(cfg), ("tokenizer.", "encoder.", "pooler."))
    return ckpt.params


# ---------------------------------------------------------------- pretraining


def do_pretrain(cfg: ExperimentConfig, run: RunDir) -> PretrainResult:
    train, val, _ = load_batches(cfg)
    res = run_pretraining(train, cfg.encoder(), cfg.m2ae(), cfg.train(), val=val)
    res.history.to_csv(run.path / "history.csv")
    write_rows(
        run.path / "steps.csv",
        ["step", "epoch", "L_rec_ecg", "L_rec_ppg", "L_cep", "total"],
        [[r["step"], r["epoch"], r["L_rec_ecg"], r["L_rec_ppg"], r["L_cep"], r["total"]] for r in res.steps],
    )
    save_checkpoint(res.params, run.path / "checkpoint.ckpt", cfg.hash(), len(res.steps))
    dump_reconstructions(res.params, val, cfg, run.path / "recon")
    run.write_json("metrics.json", {"mode": "pretrain", "final": {k: v[-1] for k, v in _last(res.history).items()}})
    run.finish({"mode": "pretrain"})
    return res


def _last(history) -> dict:
    out: dict[str, list] = {}
    for _, split, name, value in history.rows:
        out.setdefault(f"{split}.{name}", []).append(value)
    return out


def dump_reconstructions(params: dict, data: Batch, cfg: ExperimentConfig, folder: Path, n: int = 4) -> None:
    """Original vs reconstructed masked patches for a few validation samples, one JSON per sample."""
    folder.mkdir(exist_ok=True)
    enc, m2 = cfg.encoder(), cfg.m2ae()
    part = data.subset(np.arange(min(n, len(data))))
    n_patches = part.ecg.shape[1] // enc.patch_len
    plan = draw_mask(n_patches, {"ecg": m2.alpha_ecg, "ppg": m2.alpha_ppg}, np.random.default_rng(cfg["run.seed"]), len(part))
    no_cep = type(m2)(**{**m2.__dict__, "w_cep": 0.0})
    with ad.no_grad():
        out = pretrain_step(part, plan, params, enc, no_cep)
    index = []
    for i in range(len(part)):
        name = f"sample{i}.json"
        record = {}
        for v in VIEWS:
            idx = plan.masked[v][i]
            record[v] = {
                "masked_idx": idx.tolist(),
                "original": segment(part.view(v)[i], enc.patch_len)[idx].tolist(),
                "reconstructed": out.pred[v].data[i].tolist(),
            }
        (folder / name).write_text(json.dumps(record) + "\n")
        index.append(name)
    (folder / "index.json").write_text(json.dumps({"files": index, "patch_len": enc.patch_len}, indent=2) + "\n")


# ---------------------------------------------------------------- finetuning / prompt tuning


def do_finetune(cfg: ExperimentConfig, run: RunDir, checkpoint: str | None = None) -> TrainResult:
    mode = cfg["run.mode"]
    if mode in ("pretrain", "evaluate"):
        raise ValueError(f"run.mode {mode!r} is not a finetuning mode")
    pretrained = None
    if mode != "rand_init":
        pretrained = load_pretrained(checkpoint, cfg)
    scenario = cfg.scenario()
    train, val, test = load_batches(cfg, scenario)
    prompt_cfg = cfg.prompt() if mode == "prompt_tune" else None
    views = tuple(cfg["run.views"])
    res = run_training(train, val, cfg.encoder(), cfg.task(), mode, cfg.train(), pretrained, prompt_cfg, views)
    res.history.to_csv(run.path / "history.csv")
    save_checkpoint(res.params, run.path / "checkpoint.ckpt", cfg.hash(), res.epochs_run)
    test_metrics = evaluate(test, res.params, cfg.encoder(), cfg.task(), prompt_cfg, views)
    run.write_json(
        "metrics.json",
        {
            "mode": mode,
            "best_epoch": res.best_epoch,
            "epochs_run": res.epochs_run,
            "test": test_metrics,
            "params": param_summary(res.params, mode),
        },
    )
    run.finish({"mode": mode})
    return res


def do_evaluate(cfg: ExperimentConfig, run: RunDir, checkpoint: str | None) -> dict:
    if not checkpoint:
        raise MissingCheckpointError("missing --checkpoint")
    params = load_checkpoint(checkpoint).params
    check_compatible(params, template_params(cfg), ("tokenizer.", "encoder.", "pooler."))
    if "head.weight" not in params or STAT_MEAN not in params:
        raise MissingCheckpointError("--checkpoint has no task head; evaluate needs a finetuned checkpoint")
    task = cfg.task()
    if params["head.weight"].shape[1] != task.out_dim:
        raise ValueError(f"task.kind: checkpoint head has {params['head.weight'].shape[1]} outputs, task needs {task.out_dim}")
    prompt_cfg = cfg.prompt() if any(n.startswith("prompts.") for n in params) else None
    _, _, test = load_batches(cfg, cfg.scenario())
    got = evaluate(test, params, cfg.encoder(), task, prompt_cfg, tuple(cfg["run.views"]))
    metrics = {k: got.get(k) for k in METRIC_KINDS}
    run.write_json("metrics.json", {"mode": "evaluate", "test": metrics, "loss": got["loss"], "params": param_summary(params, "evaluate")})
    run.finish({"mode": "evaluate"})
    return metrics


# ---------------------------------------------------------------- data generation


def do_gen_data(cfg: ExperimentConfig, run: RunDir) -> dict:
    pairs = generate_dataset(cfg.synth(), cfg["data.n"], tuple(cfg["data.split"]))
    stats = {}
    for split, part in zip(SPLITS, pairs):
        save_dataset(run.path / f"{split}.vctd", part, cfg["data.sample_rate"])
        stats[split] = label_stats(part)
    run.write_json("stats.json", stats)
    run.finish({"mode": "gen-data"})
    return stats


# ---------------------------------------------------------------- sweeps

SWEEP_METHODS = ("fine_last", "input_tailored", "attention_tailored", "fine_all")


def sweep_cell(
    cfg: ExperimentConfig, pretrained: dict, kind: str, beta: float, method: str, pairs=None
) -> dict:
    """Train and test one (kind, beta, method) cell; returns its test metrics."""
    scenario = MissingScenario(kind, beta, cfg["missing.applies_to"])
    scenario.validate()
    pairs = pairs if pairs is not None else load_pairs(cfg)
    train, val, test = (to_batch(p, cfg, s, scenario) for p, s in zip(pairs, SPLITS))
    if method in ("fine_last", "fine_all"):
        mode, prompt_cfg = method, None
    elif method in ("input_tailored", "attention_tailored"):
        mode = "prompt_tune"
        prompt_cfg = PromptConfig(method, cfg["prompt.length"], tuple(cfg["prompt.layers"]))
    else:
        raise ValueError(f"unknown sweep method {method!r}; expected one of {SWEEP_METHODS}")
    res = run_training(train, val, cfg.encoder(), cfg.task(), mode, cfg.train(), pretrained, prompt_cfg)
    return evaluate(test, res.params, cfg.encoder(), cfg.task(), prompt_cfg)


def do_sweep(
    cfg: ExperimentConfig,
    run: RunDir,
    checkpoint: str | None,
    kind: str,
    betas: Sequence[float],
    methods: Sequence[str] = ("fine_last",),
    seeds: Sequence[int] | None = None,
) -> list[dict]:
    pretrained = load_pretrained(checkpoint, cfg)
    seeds = list(seeds) if seeds else [cfg["run.seed"]]
    rows = []
    for seed in seeds:
        cell_cfg = cfg.with_overrides({"run.seed": seed})
        pairs = load_pairs(cell_cfg)
        for beta in betas:
            for method in methods:
                got = sweep_cell(cell_cfg, pretrained, kind, beta, method, pairs)
                row = {"kind": kind, "beta": float(beta), "method": method, "seed": seed, **got}
                rows.append(row)
    keys = ["kind", "beta", "method", "seed"] + sorted({k for r in rows for k in r} - {"kind", "beta", "method", "seed"})
    write_rows(run.path / "sweep.csv", keys, [[r.get(k, "") for k in keys] for r in rows])
    run.finish({"mode": "sweep", "cells": len(rows)})
    return rows


# ---------------------------------------------------------------- reports


def emit_report(run_path) -> dict:
    """Consolidate a finished run directory into report.json plus plot-ready CSVs."""
    path = Path(run_path)
    info_file = path / "run.json"
    if not info_file.exists():
        raise IncompleteRunError(f"{path}: no run.json (not a run directory)")
    info = json.loads(info_file.read_text())
    if info.get("status") != "complete":
        raise IncompleteRunError(f"{path}: run status is {info.get('status')!r}, not complete")
    report = {"kind": info["kind"], "config_hash": info["config_hash"], "mode": info.get("mode")}
    metrics_file = path / "metrics.json"
    if metrics_file.exists():
        report.update(json.loads(metrics_file.read_text()))
    if (path / "history.csv").exists():
        report["history_csv"] = "history.csv"
        curves = _curves(path / "history.csv")
        write_rows(path / "curves.csv", ["epoch"] + sorted(curves), _curve_rows(curves))
        report["curves_csv"] = "curves.csv"
    if (path / "steps.csv").exists():
        with open(path / "steps.csv", newline="") as fh:
            report["loss_curve"] = [
                {k: (int(v) if k in ("step", "epoch") else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)
            ]
    if (path / "recon" / "index.json").exists():
        report["reconstructions"] = json.loads((path / "recon" / "index.json").read_text())
    if (path / "sweep.csv").exists():
        report["sweep_csv"] = "sweep.csv"
    if "params" in report:
        pt = report["params"]["by_component"]
        write_rows(path / "params.csv", ["component", "count"], sorted(pt.items()))
        report["trainable_fraction"] = report["params"]["trainable_fraction"]
    (path / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return report


def _curves(history_csv: Path) -> dict[str, dict[int, float]]:
    curves: dict[str, dict[int, float]] = {}
    with open(history_csv, newline="") as fh:
        for row in csv.DictReader(fh):
            curves.setdefault(f"{row['split']}_{row['metric']}", {})[int(row["epoch"])] = float(row["value"])
    return curves


def _curve_rows(curves):
    epochs = sorted({e for c in curves.values() for e in c})
    return [[e] + [curves[k].get(e, "") for k in sorted(curves)] for e in epochs]
