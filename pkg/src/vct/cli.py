"""Command-line front end: ``vct <subcommand> [--config FILE] [--set key=value ...]``.

Exit codes: 0 success, 2 usage or configuration error, 3 data or
checkpoint error, 4 numerical failure, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .autodiff import NonFiniteError, ShapeError
from .checkpoint import CheckpointError
from .config import ConfigError, ExperimentConfig, parse_override
from .runner import (
    SWEEP_METHODS,
    IncompleteRunError,
    RunDir,
    do_evaluate,
    do_finetune,
    do_gen_data,
    do_pretrain,
    do_sweep,
    emit_report,
)
from .train import FrozenParameterError, MissingCheckpointError

log = logging.getLogger("vct")

EXIT_OK, EXIT_ERROR, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3, 4


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vct", description="View-centric transformer experiments on synthetic ECG/PPG.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str, checkpoint: bool = False) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="TOML config file (flat dotted keys)")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--out", help="run directory (default: $VCT_OUTPUT_ROOT/<command>-<config hash>)")
        if checkpoint:
            p.add_argument("--checkpoint", help="checkpoint file to start from")
        return p

    add("gen-data", "generate a synthetic dataset container and label stats")
    add("pretrain", "M2AE pretraining")
    ft = add("finetune", "rand_init / fine_last / fine_all training", checkpoint=True)
    ft.add_argument("--mode", choices=("rand_init", "fine_last", "fine_all"))
    pt = add("prompt-tune", "train missing-aware prompts and the head on a frozen backbone", checkpoint=True)
    pt.add_argument("--style", choices=("input_tailored", "attention_tailored"))
    add("evaluate", "test metrics of a finetuned checkpoint", checkpoint=True)
    sw = add("sweep", "missing-rate grid: one CSV row per (beta, method, seed)", checkpoint=True)
    sw.add_argument("--scenario", required=True, choices=("missing_ecg", "missing_ppg", "missing_both"))
    sw.add_argument("--betas", type=_floats, default=[10.0, 30.0, 50.0, 70.0, 90.0])
    sw.add_argument("--methods", default="fine_last", help=f"comma list from {', '.join(SWEEP_METHODS)}")
    sw.add_argument("--seeds", type=_ints, default=None)
    gc = sub.add_parser("grad-check", help="finite-difference check of every parameter on a tiny model")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--tol", type=float, default=1e-4)
    rp = sub.add_parser("report", help="consolidate a finished run directory")
    rp.add_argument("run_dir")
    return parser


def _config(args, extra: dict | None = None) -> ExperimentConfig:
    overrides = dict(parse_override(s) for s in args.set)
    overrides.update(extra or {})
    if args.config:
        return ExperimentConfig.load(args.config, overrides)
    return ExperimentConfig.from_dict(overrides)


def _execute(cmd: str, args, cfg: ExperimentConfig, run: RunDir) -> None:
    if cmd == "gen-data":
        stats = do_gen_data(cfg, run)
        log.info("label stats: %s", json.dumps(stats))
    elif cmd == "pretrain":
        do_pretrain(cfg, run)
    elif cmd in ("finetune", "prompt-tune"):
        do_finetune(cfg, run, args.checkpoint)
    elif cmd == "evaluate":
        log.info("test metrics: %s", json.dumps(do_evaluate(cfg, run, args.checkpoint)))
    elif cmd == "sweep":
        methods = [m.strip() for m in args.methods.split(",") if m.strip()]
        rows = do_sweep(cfg, run, args.checkpoint, args.scenario, args.betas, methods, args.seeds)
        log.info("sweep wrote %d rows to %s", len(rows), Path(run.path) / "sweep.csv")


def _dispatch(args) -> int:
    cmd = args.command
    if cmd == "grad-check":
        from .gradcheck import check_model_gradients

        ok = True
        for c in check_model_gradients(seed=args.seed, tol=args.tol):
            status = "ok" if c.max_rel_err < args.tol else "FAIL"
            ok &= status == "ok"
            print(f"{c.loss:32s} params={c.n_scalars:6d} max_rel_err={c.max_rel_err:.3e} {status}")
        return EXIT_OK if ok else EXIT_NUMERIC
    if cmd == "report":
        report = emit_report(args.run_dir)
        print(json.dumps({k: report[k] for k in ("kind", "config_hash", "mode") if k in report}))
        return EXIT_OK

    if cmd in ("finetune", "prompt-tune", "evaluate", "sweep") and not args.checkpoint:
        if not (cmd == "finetune" and args.mode == "rand_init"):
            raise MissingCheckpointError(f"{cmd}: missing required flag --checkpoint")
    extra: dict = {}
    if cmd == "pretrain":
        extra["run.mode"] = "pretrain"
    elif cmd == "finetune":
        if args.mode:
            extra["run.mode"] = args.mode
    elif cmd == "prompt-tune":
        extra["run.mode"] = "prompt_tune"
        if args.style:
            extra["prompt.style"] = args.style
    elif cmd == "evaluate":
        extra["run.mode"] = "evaluate"
    cfg = _config(args, extra)
    if cmd == "finetune" and cfg["run.mode"] not in ("rand_init", "fine_last", "fine_all"):
        raise ConfigError("run.mode", f"finetune expects rand_init, fine_last or fine_all, got {cfg['run.mode']!r}")
    if cmd == "finetune" and cfg["run.mode"] != "rand_init" and not args.checkpoint:
        raise MissingCheckpointError("finetune: missing required flag --checkpoint")
    run = RunDir.create(cmd, cfg, args.out)
    log.info("%s: run directory %s (config %s)", cmd, run.path, cfg.hash())
    try:
        _execute(cmd, args, cfg, run)
    except Exception as exc:
        run.fail(exc)
        log.error("%s failed; diagnostics in %s", cmd, run.path / "diagnostic.json")
        raise
    print(run.path)
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return _dispatch(args)
    except (ConfigError, MissingCheckpointError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_USAGE
    except (CheckpointError, ShapeError, FileNotFoundError, IncompleteRunError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except (NonFiniteError, FrozenParameterError) as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERIC
    except ValueError as exc:
        log.error("invalid input: %s", exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
