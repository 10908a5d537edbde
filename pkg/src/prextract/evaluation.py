"""Fidelity, accuracy and (t, q) extraction verdicts."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .datasets import LabeledSample, Sample, stack_images
from .nn import Classifier
from .oracle import QueryLedger


@dataclass(frozen=True)
class FidelityReport:
    fidelity: float
    accuracy: float | None
    n: int
    agreement: np.ndarray  # agreement[victim_class, substitute_class] -> count

    def to_dict(self) -> dict:
        return {
            "fidelity": self.fidelity,
            "accuracy": self.accuracy,
            "n": self.n,
            "agreement": self.agreement.tolist(),
        }


def argmax_lowest(scores: np.ndarray) -> np.ndarray:
    """Row-wise argmax; ties resolve to the lowest class index."""
    return np.argmax(np.asarray(scores), axis=-1)


def agreement_report(victim_pred: Sequence[int], substitute_pred: Sequence[int], num_classes: int,
                     labels: Sequence[int] | None = None) -> FidelityReport:
    v = np.asarray(victim_pred, dtype=np.int64)
    s = np.asarray(substitute_pred, dtype=np.int64)
    if v.shape != s.shape:
        raise ValueError("victim and substitute predictions differ in length")
    mat = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(mat, (v, s), 1)
    n = int(v.size)
    fid = float(np.trace(mat)) / n if n else 0.0
    acc = None
    if labels is not None:
        acc = float(np.mean(s == np.asarray(labels))) if n else 0.0
    return FidelityReport(fid, acc, n, mat)


def fidelity(
    substitute: Classifier,
    victim_outputs: Sequence[tuple[int, int]],
    eval_set: Sequence[Sample | LabeledSample],
) -> FidelityReport:
    """Share of ``eval_set`` on which the substitute's argmax equals the victim's.

    ``victim_outputs`` holds ``(sample_id, victim argmax)`` for every eval id.
    Accuracy is filled in when the eval samples carry ground-truth labels.
    """
    victim = dict(victim_outputs)
    missing = [s.id for s in eval_set if s.id not in victim]
    if missing:
        raise KeyError(f"no victim output for eval id(s) {missing[:10]}")
    if not eval_set:
        return FidelityReport(0.0, None, 0, np.zeros((substitute.num_classes,) * 2, dtype=np.int64))
    sub = substitute.predict(stack_images(eval_set))
    vic = [victim[s.id] for s in eval_set]
    labels = [s.label for s in eval_set] if all(isinstance(s, LabeledSample) for s in eval_set) else None
    return agreement_report(vic, sub, substitute.num_classes, labels)


def accuracy(model: Classifier, eval_set: Sequence[LabeledSample]) -> float:
    if not eval_set:
        raise ValueError("empty evaluation set")
    pred = model.predict(stack_images(eval_set))
    return float(np.mean(pred == np.array([s.label for s in eval_set])))


def check_tq_mea(report: FidelityReport, t: float, ledger: QueryLedger, q: int) -> bool:
    """True iff fidelity reached ``t`` using at most ``q`` queries."""
    if not 0.0 <= t <= 1.0:
        raise ValueError("fidelity goal t must lie in [0, 1]")
    return report.fidelity >= t and ledger.spent <= q


def write_report(path: str | Path, report: FidelityReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True))


def write_round_rows(path: str | Path, rows: Iterable[dict]) -> None:
    """One CSV row per (run, round): run, method, budget, seed, round, spent, fidelity."""
    cols = ["run", "method", "budget", "seed", "round", "spent", "fidelity"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in rows:
            w.writerow({k: row.get(k) for k in cols})
