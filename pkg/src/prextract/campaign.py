"""Campaign orchestration: victim -> pretraining -> extraction -> fidelity -> ASR sweep.

Layout of an output directory::

    config.json                resolved configuration
    victims/seed{s}-{key}.ckpt          victim checkpoint, reused when the key matches
    encoders/{method}_seed{s}-{key}.ckpt  pretrained encoder artifacts (+ .json sidecar)
    runs/{method}_b{B}_seed{s}.json / .ckpt   run record and substitute
    summary.csv                method, budget, seed, fidelity, accuracy, spend, currency
    asr.csv                    method, budget, seed, epsilon, asr, n
    failures.csv               cells that raised, with the error
    victims.csv                victim test accuracy per seed
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import os
import time
import traceback
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import nn
from .adversarial import ASRRow, asr_sweep
from .config import ExperimentConfig, MethodSpec, config_to_dict
from .datasets import DatasetSplit, ingest_directory, labels_of, make_split, stack_images
from .evaluation import accuracy, fidelity
from .extraction import ExtractionConfig, RunRecord, run_extraction
from .oracle import QueryLedger, cost_report, make_local_victim, offline_labels
from .ssl import EncoderArtifact, pretrain

log = logging.getLogger(__name__)

# The victim owner's randomness is independent of the attacker's: without the
# offset a seed-s victim and a seed-s random encoder would share initial weights.
VICTIM_SEED_OFFSET = 100_003

SUMMARY_COLUMNS = ["method", "budget", "seed", "fidelity", "accuracy", "spend", "currency"]
ASR_COLUMNS = ["method", "budget", "seed", "epsilon", "asr", "n"]


# ---------------------------------------------------------------- file helpers

def atomic_write(path: str | Path, data: str | bytes) -> None:
    """Write to a temporary sibling and rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _csv_text(columns: Sequence[str], rows: Iterable[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(columns), lineterminator="\n")
    w.writeheader()
    for row in rows:
        w.writerow({k: _fmt(row.get(k)) for k in columns})
    return buf.getvalue()


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.6f}"
    return "" if v is None else v


def read_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------- stages

def thread_count(default: int = 1) -> int:
    raw = os.environ.get("PREXTRACT_THREADS")
    if not raw:
        return default
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValueError(f"PREXTRACT_THREADS must be an integer, got {raw!r}") from None


def build_split(cfg: ExperimentConfig, seed: int) -> DatasetSplit:
    d = cfg.dataset
    if d.manifest is not None:
        return ingest_directory(d.root, d.manifest, d.num_classes, d.regime)
    return make_split(d.regime, d.num_classes, d.victim_per_class, d.proxy_per_class, d.test_per_class,
                      d.image_shape, seed)


def train_victim(cfg: ExperimentConfig, split: DatasetSplit, seed: int) -> nn.Classifier:
    shape = split.victim_train[0].image.shape
    arch = nn.classifier_architecture(cfg.victim.architecture, shape, cfg.dataset.num_classes, cfg.victim.latent_dim)
    model, _ = nn.train_classifier(arch, stack_images(split.victim_train), labels_of(split.victim_train),
                                   replace(cfg.victim.train, seed=seed + VICTIM_SEED_OFFSET))
    return model


def _fingerprint(*parts) -> str:
    text = json.dumps([asdict(p) if is_dataclass(p) else p for p in parts], sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:10]


def load_or_train_victim(cfg: ExperimentConfig, split: DatasetSplit, seed: int, out: Path | None) -> nn.Classifier:
    """Train the seed's victim, or reload it from ``out`` if this exact setup was trained before."""
    key = _fingerprint(cfg.dataset, cfg.victim, seed)
    path = out / "victims" / f"seed{seed}-{key}.ckpt" if out is not None else None
    if path is not None and path.exists():
        arch, params = nn.load_checkpoint(path, torch.float32)
        return nn.Classifier(arch, params, trained=True)
    model = train_victim(cfg, split, seed)
    if path is not None:
        atomic_write(path, nn.dump_checkpoint(model.arch, model.params))
    return model


def pretrain_encoder(spec: MethodSpec, split: DatasetSplit, seed: int) -> EncoderArtifact:
    train = replace(spec.train, seed=seed)
    aug = replace(spec.augment, seed=seed)
    return pretrain(spec.name, split.proxy, spec.ssl, train, aug)


def load_or_pretrain(spec: MethodSpec, split: DatasetSplit, seed: int, out: Path | None,
                     dataset_key: object = None) -> EncoderArtifact:
    key = _fingerprint(spec, dataset_key, seed)
    path = out / "encoders" / f"{spec.name}_seed{seed}-{key}.ckpt" if out is not None else None
    if path is not None and path.exists() and path.with_name(path.name + ".json").exists():
        return EncoderArtifact.load(path)
    enc = pretrain_encoder(spec, split, seed)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        enc.save(path)
    return enc


def extraction_config(cfg: ExperimentConfig, spec: MethodSpec, budget: int, seed: int,
                      itera: int | None = None) -> ExtractionConfig:
    e = cfg.extraction
    return ExtractionConfig(
        budget_B=budget,
        itera=itera or e.itera,
        num_classes=cfg.dataset.num_classes,
        train_cfg=replace(e.train, seed=seed),
        head_reinit=e.head_reinit,
        encoder_finetune=e.encoder_finetune,
        selection=spec.selection,
        seed=seed,
    )


@dataclass
class CellResult:
    method: str
    budget: int
    seed: int
    record: RunRecord | None = None
    summary: dict | None = None
    asr: list[ASRRow] = field(default_factory=list)
    error: str | None = None


def run_cell(
    cfg: ExperimentConfig, spec: MethodSpec, budget: int, seed: int, split: DatasetSplit,
    victim: nn.Classifier, encoder: EncoderArtifact, out: Path | None, itera: int | None = None,
) -> CellResult:
    """One (method, budget, seed) cell: extraction, fidelity on the test split and an ASR sweep."""
    ecfg = extraction_config(cfg, spec, budget, seed, itera)
    oracle = make_local_victim(victim, cfg.oracle.config)
    ledger = QueryLedger(budget, cfg.oracle.unit_price)
    validation = (split.test, offline_labels(victim, split.test))
    model, record = run_extraction(oracle, split.proxy, encoder, ecfg, ledger, validation)
    report = fidelity(model, validation[1], split.test)
    spent, currency = cost_report(ledger)
    rows = asr_sweep(model, victim, split.test, cfg.epsilons, seed=seed)
    summary = {"method": spec.name, "budget": budget, "seed": seed, "fidelity": report.fidelity,
               "accuracy": report.accuracy, "spend": spent, "currency": currency}
    if out is not None:
        stem = out / "runs" / f"{spec.name}_b{budget}_seed{seed}"
        record.checkpoint = stem.name + ".ckpt"
        atomic_write(stem.with_suffix(".ckpt"), nn.dump_checkpoint(model.arch, model.params))
        atomic_write(stem.with_suffix(".json"), json.dumps(record.to_dict(), indent=2, sort_keys=True))
    return CellResult(spec.name, budget, seed, record, summary, rows)


def _run_seed(cfg: ExperimentConfig, seed: int, out: Path | None) -> tuple[float | None, list[CellResult]]:
    results: list[CellResult] = []
    try:
        split = build_split(cfg, seed)
        victim = load_or_train_victim(cfg, split, seed, out)
        victim_acc = accuracy(victim, split.test)
    except Exception as exc:  # the whole seed row fails
        err = _describe(exc)
        return None, [CellResult(m.name, b, seed, error=f"victim: {err}")
                      for m in cfg.methods for b in cfg.extraction.budgets]
    log.info("seed %d: victim test accuracy %.3f", seed, victim_acc)
    for spec in cfg.methods:
        t0 = time.perf_counter()
        try:
            encoder = load_or_pretrain(spec, split, seed, out, cfg.dataset)
        except Exception as exc:
            err = _describe(exc)
            results.extend(CellResult(spec.name, b, seed, error=f"pretrain: {err}") for b in cfg.extraction.budgets)
            continue
        log.info("seed %d: %s encoder ready in %.1fs", seed, spec.name, time.perf_counter() - t0)
        for budget in cfg.extraction.budgets:
            try:
                results.append(run_cell(cfg, spec, budget, seed, split, victim, encoder, out))
            except Exception as exc:
                results.append(CellResult(spec.name, budget, seed, error=f"extract: {_describe(exc)}"))
                log.debug("cell failed:\n%s", traceback.format_exc())
    return victim_acc, results


def _describe(exc: BaseException) -> str:
    return f"{type(exc).__name__}: {exc}"


@dataclass
class CampaignResult:
    records: list[RunRecord]
    summary: list[dict]
    asr: list[dict]
    failures: list[dict]
    victim_accuracy: dict[int, float | None]


def run_campaign(cfg: ExperimentConfig, out_dir: str | Path | None = None, threads: int | None = None) -> CampaignResult:
    """Run every (seed, method, budget) cell of ``cfg``.

    Seeds are independent and run on up to ``threads`` workers (default from
    ``PREXTRACT_THREADS``, else 1); within a seed the victim is trained once and
    each method's encoder is pretrained once. A failing cell is recorded and
    skipped. Outputs are ordered by (seed, method, budget) regardless of
    scheduling, so reruns produce identical files.
    """
    out = Path(out_dir if out_dir is not None else cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    atomic_write(out / "config.json", json.dumps(config_to_dict(cfg), indent=2, sort_keys=True))
    threads = threads or thread_count()
    torch.set_num_threads(1)
    if threads > 1 and len(cfg.seeds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            per_seed = list(pool.map(lambda s: _run_seed(cfg, s, out), cfg.seeds))
    else:
        per_seed = [_run_seed(cfg, s, out) for s in cfg.seeds]

    cells = [c for _, batch in per_seed for c in batch]
    victim_acc = {s: acc for s, (acc, _) in zip(cfg.seeds, per_seed)}
    summary = [c.summary for c in cells if c.summary is not None]
    asr = [
        {"method": c.method, "budget": c.budget, "seed": c.seed, "epsilon": r.epsilon, "asr": r.asr, "n": r.n}
        for c in cells for r in c.asr
    ]
    failures = [{"method": c.method, "budget": c.budget, "seed": c.seed, "error": c.error}
                for c in cells if c.error is not None]
    atomic_write(out / "summary.csv", _csv_text(SUMMARY_COLUMNS, summary))
    atomic_write(out / "asr.csv", _csv_text(ASR_COLUMNS, asr))
    atomic_write(out / "failures.csv", _csv_text(["method", "budget", "seed", "error"], failures))
    atomic_write(out / "victims.csv", _csv_text(["seed", "accuracy"],
                                                [{"seed": s, "accuracy": a} for s, a in victim_acc.items()]))
    for f in failures:
        log.warning("cell %s/B=%s/seed=%s failed: %s", f["method"], f["budget"], f["seed"], f["error"])
    return CampaignResult([c.record for c in cells if c.record is not None], summary, asr, failures, victim_acc)


# ---------------------------------------------------------------- plot data

def _series(rows: Sequence[dict], key: str, value: str) -> list[dict]:
    groups: dict[float, list[float]] = {}
    for r in rows:
        groups.setdefault(float(r[key]), []).append(float(r[value]))
    out = []
    for k in sorted(groups):
        v = np.asarray(groups[k])
        std = float(v.std(ddof=1)) if len(v) > 1 else 0.0
        out.append({key: int(k) if key == "budget" else k, "mean": float(v.mean()), "std": std, "n": len(v)})
    return out


def emit_plot_data(summary: Sequence[dict], asr: Sequence[dict], out_dir: str | Path) -> list[Path]:
    """Per-method series files: fidelity against budget and ASR against epsilon.

    Each point carries the mean, the sample standard deviation (0 for a
    single seed) and the seed count. ASR is taken at each method's largest
    budget. Returns the written paths; empty inputs write nothing.
    """
    out = Path(out_dir)
    written: list[Path] = []
    methods = sorted({r["method"] for r in summary} | {r["method"] for r in asr})
    for m in methods:
        fid = [r for r in summary if r["method"] == m]
        if fid:
            path = out / f"fidelity_{m}.csv"
            atomic_write(path, _csv_text(["budget", "mean", "std", "n"], _series(fid, "budget", "fidelity")))
            written.append(path)
        rows = [r for r in asr if r["method"] == m]
        if rows:
            top = max(int(r["budget"]) for r in rows)
            rows = [r for r in rows if int(r["budget"]) == top]
            path = out / f"asr_{m}.csv"
            atomic_write(path, _csv_text(["epsilon", "mean", "std", "n"], _series(rows, "epsilon", "asr")))
            written.append(path)
    return written
