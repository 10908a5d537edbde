"""Command-line entry point: ``prextract <verb> [flags]``.

Exit codes: 0 success, 1 invalid configuration or arguments, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import nn
from .adversarial import asr_sweep
from .campaign import (
    ASR_COLUMNS, _csv_text, atomic_write, build_split, emit_plot_data, load_or_pretrain, load_or_train_victim,
    read_csv, run_campaign, run_cell,
)
from .config import ConfigError, ExperimentConfig, parse_config, validate_config
from .evaluation import fidelity, write_report
from .oracle import offline_labels
from .ssl import METHODS

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VERBS = ("pretrain", "extract", "evaluate", "adv-sweep", "campaign", "plot-data")

log = logging.getLogger("prextract")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit with status 2
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON)")
    common.add_argument("--seed", type=int, help="seed to run (default: first configured seed)")
    common.add_argument("--out", type=Path, help="output directory (default: config output_dir)")
    common.add_argument("--method", type=str.lower, choices=[m.lower() for m in METHODS])
    common.add_argument("--budget", type=int, help="query budget")
    common.add_argument("--itera", type=int, help="number of query rounds")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="prextract", description="SSL-prior model extraction experiments")
    sub = parser.add_subparsers(dest="verb", required=True, parser_class=_Parser)
    helps = {
        "pretrain": "pretrain an encoder on the seed's proxy set",
        "extract": "run one extraction against the seed's victim",
        "evaluate": "fidelity/accuracy report for an extracted substitute",
        "adv-sweep": "FGSM transfer ASR over the configured epsilons",
        "campaign": "run the full seeds x methods x budgets matrix",
        "plot-data": "aggregate summary.csv / asr.csv into per-method series",
    }
    for verb in VERBS:
        sub.add_parser(verb, parents=[common], help=helps[verb])
    return parser


def _load_config(args) -> ExperimentConfig:
    cfg = validate_config(args.config) if args.config else parse_config({"schema_version": 1})
    if args.itera is not None or args.budget is not None:
        budgets = (args.budget,) if args.budget is not None else cfg.extraction.budgets
        itera = args.itera if args.itera is not None else cfg.extraction.itera
        errors = [f"--itera: {itera} does not divide budget {b}" for b in budgets if itera < 1 or b % itera]
        if args.budget is not None and args.budget < 1:
            errors.append("--budget: must be positive")
        if errors:
            raise ConfigError(errors)
        cfg = replace(cfg, extraction=replace(cfg.extraction, budgets=budgets, itera=itera))
    if args.seed is not None:
        cfg = replace(cfg, seeds=(args.seed,))
    if args.method is not None:
        cfg = replace(cfg, methods=(cfg.method(args.method),))
    return cfg


def _single(cfg: ExperimentConfig, what: str):
    seed = cfg.seeds[0]
    if what == "method" and len(cfg.methods) != 1:
        raise ConfigError(["--method is required unless the config lists exactly one method"])
    if what == "budget" and len(cfg.extraction.budgets) != 1:
        raise ConfigError(["--budget is required unless the config lists exactly one budget"])
    return seed


def _out(cfg: ExperimentConfig, args) -> Path:
    return Path(args.out) if args.out is not None else Path(cfg.output_dir)


def _substitute_path(out: Path, method: str, budget: int, seed: int) -> Path:
    return out / "runs" / f"{method}_b{budget}_seed{seed}.ckpt"


def cmd_pretrain(cfg, args) -> int:
    seed = _single(cfg, "method")
    out = _out(cfg, args)
    spec = cfg.methods[0]
    enc = load_or_pretrain(spec, build_split(cfg, seed), seed, out, cfg.dataset)
    print(json.dumps({"method": spec.name, "seed": seed, "final_loss": enc.provenance.get("final_loss")}))
    return EXIT_OK


def cmd_extract(cfg, args) -> int:
    seed = _single(cfg, "method")
    _single(cfg, "budget")
    out = _out(cfg, args)
    spec, budget = cfg.methods[0], cfg.extraction.budgets[0]
    split = build_split(cfg, seed)
    victim = load_or_train_victim(cfg, split, seed, out)
    encoder = load_or_pretrain(spec, split, seed, out, cfg.dataset)
    cell = run_cell(cfg, spec, budget, seed, split, victim, encoder, out)
    print(json.dumps(cell.summary, sort_keys=True))
    return EXIT_OK


def _load_substitute(cfg, args):
    seed = _single(cfg, "method")
    _single(cfg, "budget")
    out = _out(cfg, args)
    spec, budget = cfg.methods[0], cfg.extraction.budgets[0]
    path = _substitute_path(out, spec.name, budget, seed)
    if not path.exists():
        raise FileNotFoundError(f"no substitute at {path}; run `prextract extract` first")
    arch, params = nn.load_checkpoint(path, torch.float32)
    split = build_split(cfg, seed)
    victim = load_or_train_victim(cfg, split, seed, out)
    return nn.Classifier(arch, params, trained=True), victim, split, path, seed


def cmd_evaluate(cfg, args) -> int:
    model, victim, split, path, _ = _load_substitute(cfg, args)
    report = fidelity(model, offline_labels(victim, split.test), split.test)
    write_report(path.with_suffix(".report.json"), report)
    print(json.dumps({"fidelity": report.fidelity, "accuracy": report.accuracy, "n": report.n}))
    return EXIT_OK


def cmd_adv_sweep(cfg, args) -> int:
    model, victim, split, path, seed = _load_substitute(cfg, args)
    rows = asr_sweep(model, victim, split.test, cfg.epsilons, seed=seed)
    table = [{"method": cfg.methods[0].name, "budget": cfg.extraction.budgets[0], "seed": seed,
              "epsilon": r.epsilon, "asr": r.asr, "n": r.n} for r in rows]
    atomic_write(path.with_suffix(".asr.csv"), _csv_text(ASR_COLUMNS, table))
    for r in rows:
        print(f"eps={r.epsilon:.3f} asr={r.asr:.4f} n={r.n}")
    return EXIT_OK


def cmd_campaign(cfg, args) -> int:
    result = run_campaign(cfg, _out(cfg, args))
    print(f"{len(result.summary)} cells done, {len(result.failures)} failed -> {_out(cfg, args)}")
    return EXIT_RUNTIME if result.failures and not result.summary else EXIT_OK


def cmd_plot_data(cfg, args) -> int:
    out = _out(cfg, args)
    summary = read_csv(out / "summary.csv") if (out / "summary.csv").exists() else []
    asr = read_csv(out / "asr.csv") if (out / "asr.csv").exists() else []
    written = emit_plot_data(summary, asr, out / "plot")
    for p in written:
        print(p)
    return EXIT_OK


COMMANDS = {
    "pretrain": cmd_pretrain, "extract": cmd_extract, "evaluate": cmd_evaluate,
    "adv-sweep": cmd_adv_sweep, "campaign": cmd_campaign, "plot-data": cmd_plot_data,
}


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"prextract: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = _load_config(args)
    except ConfigError as exc:
        print(f"prextract: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return COMMANDS[args.verb](cfg, args)
    except ConfigError as exc:
        print(f"prextract: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(f"prextract: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
