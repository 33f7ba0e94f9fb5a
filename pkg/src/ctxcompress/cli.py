"""Command-line entry point.

Exit codes: 0 success, 1 failed check or unusable input, 2 bad config or
usage, 3 missing file, 4 training divergence. Failures print one JSON line on
stderr: ``{"error": kind, "key": key, "message": text}``.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .diag import build_report, export_report, mean_plan_erank
from .errors import CompressionError, FormatError, TrainingDivergenceError
from .numerics import Rng
from .slots import compress
from .states import HiddenStates, gen_retrieval_batch, load_states, load_tasks, save_states, save_tasks, synth_encode
from .train import (
    TaskStream,
    TrainState,
    evaluate,
    gradient_check,
    init_module_params,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history,
)

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_MISSING, EXIT_DIVERGED = 0, 1, 2, 3, 4
RESOLVED_NAME = "resolved.ini"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _fail(kind: str, key: str | None, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "key": key, "message": message}), file=sys.stderr)
    return code


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ctxcompress", description="Soft context compression toolkit.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="INI config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--seed", type=int, help="overrides run.seed")
        p.add_argument("--out", help="output directory (overrides paths.out)")
        return p

    p = command("gen", "generate synthetic retrieval tasks as JSONL")
    p.add_argument("--count", type=int, help="overrides task.count")
    p = command("encode", "encode tokens into a .hst file with the synthetic encoder")
    p.add_argument("--tasks", help="task JSONL (overrides paths.tasks)")
    p.add_argument("--index", type=int, default=0, help="task line to encode")
    p.add_argument("--tokens", help="comma-separated token ids instead of a task file")
    p = command("compress", "compress a .hst file into slots and a plan")
    p.add_argument("--states", help=".hst input (overrides paths.states)")
    p.add_argument("--checkpoint", help="trained checkpoint; fresh parameters from the seed if absent")
    p.add_argument("--mode", choices=("ot", "window"), help="overrides run.mode")
    p = command("train", "train on tasks and write a checkpoint and loss curve")
    p.add_argument("--tasks", help="task JSONL; tasks are generated from the seed if absent")
    p.add_argument("--checkpoint", help="resume from this checkpoint")
    p.add_argument("--steps", type=int, help="overrides train.steps")
    p.add_argument("--mode", choices=("ot", "window"), help="overrides run.mode")
    p = command("diag", "export correlation, spectrum and gate diagnostics")
    p.add_argument("--states", help=".hst input (overrides paths.states)")
    p.add_argument("--checkpoint", help="trained checkpoint")
    p.add_argument("--mode", choices=("ot", "window"), help="overrides run.mode")
    p = command("ablate", "train and evaluate the OT and window variants")
    p.add_argument("--steps", type=int, help="overrides train.steps")
    p.add_argument("--sequences", type=int, default=50, help="held-out sequences for the erank comparison")
    p = command("gradcheck", "finite-difference gradient report on the small config")
    p.add_argument("--h", type=float, default=1e-4, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum accepted relative error")
    return parser


def resolve_config(args) -> RunConfig:
    text = None
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise FileNotFoundError(2, "config file not found", str(path))
        text = path.read_text()
    overrides = list(args.set)
    for flag, key in (("seed", "run.seed"), ("out", "paths.out"), ("count", "task.count"),
                      ("steps", "train.steps"), ("mode", "run.mode"), ("tasks", "paths.tasks"),
                      ("states", "paths.states"), ("checkpoint", "paths.checkpoint")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    return load_config(text, overrides)


def _require(path: str, key: str) -> Path:
    if not path:
        raise ConfigError(f"{key} is required for this command", key)
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(2, "input file not found", str(p))
    return p


def _write_csv(path: Path, matrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in np.atleast_2d(np.asarray(matrix, dtype=np.float32)):
            writer.writerow([repr(float(v)) for v in row])


def _params(cfg: RunConfig):
    if cfg.paths.checkpoint:
        state = load_checkpoint(_require(cfg.paths.checkpoint, "paths.checkpoint"))
        return state.params
    return init_module_params(Rng(cfg.seed).child("params"), cfg.model).astype(np.float32)


def _plan_json(plan) -> dict:
    blocks = []
    for seg in plan.segments:
        block = plan.block(seg).astype(np.float32)
        blocks.append({"token_range": [seg.token_start, seg.token_stop],
                       "slot_range": [seg.slot_start, seg.slot_stop],
                       "values": [[float(v) for v in row] for row in block]})
    return {"shape": list(plan.plan.shape), "blocks": blocks}


def cmd_gen(cfg: RunConfig, args, out: Path) -> int:
    tasks = gen_retrieval_batch(Rng(cfg.seed).child("gen"), cfg.retrieval, cfg.task.count)
    save_tasks(tasks, out / "tasks.jsonl")
    return EXIT_OK


def cmd_encode(cfg: RunConfig, args, out: Path) -> int:
    if args.tokens:
        try:
            tokens = [int(t) for t in args.tokens.split(",") if t.strip()]
        except ValueError:
            raise ConfigError(f"--tokens must be comma-separated integers, got {args.tokens!r}", "tokens") from None
    else:
        tasks = load_tasks(_require(cfg.paths.tasks, "paths.tasks"))
        if not 0 <= args.index < len(tasks):
            raise ConfigError(f"index {args.index} outside task file of {len(tasks)} lines", "index")
        tokens = tasks[args.index].tokens
    save_states(synth_encode(tokens, cfg.model.encoder()), out / "states.hst")
    return EXIT_OK


def _compress_file(cfg: RunConfig):
    states = load_states(_require(cfg.paths.states, "paths.states"))
    params = _params(cfg).astype(np.float64)
    return compress(states, params.compressor, cfg.run.mode), params


def cmd_compress(cfg: RunConfig, args, out: Path) -> int:
    result, _ = _compress_file(cfg)
    _write_csv(out / "slots.csv", result.slots.aligned)
    _write_csv(out / "plan.csv", result.plan.plan)
    (out / "plan.json").write_text(json.dumps(_plan_json(result.plan)) + "\n")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args, out: Path) -> int:
    tasks = load_tasks(_require(cfg.paths.tasks, "paths.tasks")) if cfg.paths.tasks else None
    stream = TaskStream(cfg.retrieval, cfg.seed, tasks)
    if cfg.paths.checkpoint:
        start: TrainState = load_checkpoint(_require(cfg.paths.checkpoint, "paths.checkpoint"))
    else:
        start = TrainState.fresh(init_module_params(Rng(cfg.seed).child("params"), cfg.model), cfg.seed)
    try:
        result = train(cfg.train, stream, start, mode=cfg.run.mode)
    except TrainingDivergenceError as exc:
        if exc.last_good is not None:
            save_checkpoint(exc.last_good, out / "checkpoint.last_good.cxt")
        raise
    save_checkpoint(result.state, out / "checkpoint.cxt")
    write_history(result.history, out / "loss.csv")
    return EXIT_OK


def cmd_diag(cfg: RunConfig, args, out: Path) -> int:
    result, _ = _compress_file(cfg)
    report = build_report(result, cfg.to_dict(), cfg.seed)
    export_report(report, out)
    return EXIT_OK


def cmd_ablate(cfg: RunConfig, args, out: Path) -> int:
    init = init_module_params(Rng(cfg.seed).child("params"), cfg.model)
    heldout = gen_retrieval_batch(Rng(cfg.seed).child("heldout"), cfg.retrieval, cfg.task.heldout)
    encoder = cfg.model.encoder()
    # Frozen random parameters: the step-0 reference and the control.
    loss, acc = evaluate(init, heldout, encoder, mode="ot")
    rows = [("control", float("nan"), loss, acc, mean_plan_erank(init, heldout[:args.sequences], encoder, "ot"))]
    for mode in ("ot", "window"):
        stream = TaskStream(cfg.retrieval, cfg.seed)
        result = train(cfg.train, stream, init, encoder=encoder, mode=mode)
        write_history(result.history, out / f"loss_{mode}.csv")
        save_checkpoint(result.state, out / f"checkpoint_{mode}.cxt")
        loss, acc = evaluate(result.params, heldout, encoder, mode=mode)
        erank = mean_plan_erank(result.params, heldout[:args.sequences], encoder, mode)
        final = result.history[-1][1] if result.history else float("nan")
        rows.append((mode, final, loss, acc, erank))
    with open(out / "ablation.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "final_train_loss", "heldout_loss", "heldout_accuracy", "mean_erank"])
        for mode, *values in rows:
            writer.writerow([mode] + [repr(float(v)) for v in values])
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig, args, out: Path) -> int:
    errors = gradient_check(seed=cfg.seed, h=args.h)
    worst = max(errors.values())
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["group", "max_relative_error"])
        for name, err in errors.items():
            writer.writerow([name, repr(err)])
    print(f"gradcheck max_relative_error={worst:.3e} tol={args.tol:.1e} "
          f"{'PASS' if worst <= args.tol else 'FAIL'}")
    return EXIT_OK if worst <= args.tol else EXIT_FAILED


COMMANDS = {
    "gen": cmd_gen, "encode": cmd_encode, "compress": cmd_compress, "train": cmd_train,
    "diag": cmd_diag, "ablate": cmd_ablate, "gradcheck": cmd_gradcheck,
}


def run(argv: Sequence[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = resolve_config(args)
        # Inputs are checked before anything is written.
        for key in ("states", "checkpoint", "tasks"):
            path = getattr(cfg.paths, key)
            if path and args.command in ("compress", "diag", "train", "encode") and not Path(path).is_file():
                if key == "tasks" and args.command == "encode" and args.tokens:
                    continue
                raise FileNotFoundError(2, "input file not found", path)
        out = Path(cfg.paths.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / RESOLVED_NAME).write_text(cfg.to_ini())
        return COMMANDS[args.command](cfg, args, out)
    except UsageError as exc:
        return _fail("usage", None, str(exc), EXIT_CONFIG)
    except ConfigError as exc:
        return _fail("config", exc.key, str(exc), EXIT_CONFIG)
    except FileNotFoundError as exc:
        return _fail("missing_file", exc.filename, exc.strerror or str(exc), EXIT_MISSING)
    except TrainingDivergenceError as exc:
        return _fail("divergence", exc.group, f"{exc} (step {exc.step})", EXIT_DIVERGED)
    except FormatError as exc:
        return _fail("format", exc.field, str(exc), EXIT_FAILED)
    except (CompressionError, OSError) as exc:
        return _fail(type(exc).__name__, None, str(exc), EXIT_FAILED)


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
