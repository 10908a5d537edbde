"""FGSM adversarial examples crafted on a substitute, scored against the victim.

Transferability is measured as the attack success rate (ASR): the share of
adversarials the victim misclassifies, counted only over originals the victim
got right before any perturbation.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import nn
from .datasets import LabeledSample, Sample, stack_images
from .oracle import Oracle, QueryLedger

DEFAULT_EPSILONS = (0.03, 0.06, 0.09, 0.12, 0.15, 0.18, 0.24)


@dataclass(frozen=True)
class AdvBatch:
    originals: tuple[LabeledSample, ...]
    adversarials: tuple[Sample, ...]
    epsilon: float
    source: str = ""

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be non-negative")
        if len(self.originals) != len(self.adversarials):
            raise ValueError("originals and adversarials differ in length")
        for o, a in zip(self.originals, self.adversarials):
            if o.id != a.id:
                raise ValueError(f"adversarial id {a.id} does not match original {o.id}")
            d = np.abs(np.asarray(a.image, np.float64) - np.asarray(o.image, np.float64))
            if d.size and d.max() > self.epsilon * (1 + 1e-6) + 1e-7:
                raise ValueError(f"adversarial {a.id} leaves the epsilon ball")
            if a.image.min() < 0 or a.image.max() > 1:
                raise ValueError(f"adversarial {a.id} has values outside [0, 1]")

    def __len__(self) -> int:
        return len(self.originals)


def input_gradient(model: nn.Classifier, images: np.ndarray | torch.Tensor, labels: Sequence[int]) -> torch.Tensor:
    """Gradient of the summed per-sample CE with respect to the input pixels."""
    x = torch.as_tensor(np.asarray(images) if not isinstance(images, torch.Tensor) else images)
    x = x.to(model.dtype).detach().requires_grad_(True)
    logits = nn.forward(model.arch, model.params, x)
    y = nn.one_hot(labels, model.num_classes, model.dtype)
    loss = nn.cross_entropy(logits, y) * len(x)
    (grad,) = torch.autograd.grad(loss, x)
    return grad


def fgsm_images(model: nn.Classifier, images: np.ndarray, labels: Sequence[int], eps: float) -> np.ndarray:
    """``clip(x + eps * sign(grad_x CE), 0, 1)`` for a stack of images."""
    if eps < 0:
        raise ValueError("epsilon must be non-negative")
    x = np.asarray(images)
    if eps == 0 or len(x) == 0:
        return x.copy()
    step = torch.sign(input_gradient(model, x, labels)).double().numpy()
    adv = np.clip(x.astype(np.float64) + eps * step, 0.0, 1.0).astype(x.dtype)
    # rounding to a narrower dtype may overshoot the ball by one ulp; pull those back
    over = np.abs(adv.astype(np.float64) - x) > eps
    adv[over] = np.nextafter(adv[over], x[over])
    return adv


def fgsm(model: nn.Classifier, x: Sample, y: int, eps: float) -> Sample:
    return Sample(x.id, fgsm_images(model, x.image[None], [y], eps)[0])


def _victim_labels(victim: nn.Classifier | Oracle, samples: Sequence[Sample], ledger: QueryLedger | None) -> np.ndarray:
    if isinstance(victim, Oracle):
        if ledger is None:
            raise ValueError("querying the victim oracle needs a ledger")
        return np.array([r.label for r in victim.query_batch(samples, ledger)])
    return victim.predict(stack_images(samples))


def craft(
    substitute: nn.Classifier,
    victim: nn.Classifier | Oracle,
    eval_set: Sequence[LabeledSample],
    eps: float,
    ledger: QueryLedger | None = None,
    source: str = "",
) -> AdvBatch:
    """Keep the victim-correct part of ``eval_set`` and perturb it with FGSM on the substitute."""
    keep = victim_correct(victim, eval_set, ledger)
    return _craft_kept(substitute, keep, eps, source)


def victim_correct(
    victim: nn.Classifier | Oracle, eval_set: Sequence[LabeledSample], ledger: QueryLedger | None = None,
) -> list[LabeledSample]:
    if not eval_set:
        return []
    pred = _victim_labels(victim, [s.sample for s in eval_set], ledger)
    return [s for s, p in zip(eval_set, pred) if int(p) == s.label]


def _craft_kept(substitute: nn.Classifier, keep: Sequence[LabeledSample], eps: float, source: str) -> AdvBatch:
    if not keep:
        return AdvBatch((), (), eps, source)
    adv = fgsm_images(substitute, stack_images(keep), [s.label for s in keep], eps)
    return AdvBatch(tuple(keep), tuple(Sample(s.id, a) for s, a in zip(keep, adv)), eps, source)


def transfer_asr(victim: nn.Classifier | Oracle, adv: AdvBatch, ledger: QueryLedger | None = None) -> float:
    """Share of ``adv.adversarials`` the victim labels differently from the original label.

    A plain classifier is an unbilled experimenter measurement; an
    :class:`Oracle` bills every adversarial to ``ledger``.
    """
    if len(adv) == 0:
        raise ValueError("empty adversarial batch")
    pred = _victim_labels(victim, adv.adversarials, ledger)
    labels = np.array([o.label for o in adv.originals])
    return float(np.mean(pred != labels))


@dataclass(frozen=True)
class ASRRow:
    epsilon: float
    asr: float
    n: int
    seed: int


def asr_sweep(
    substitute: nn.Classifier,
    victim: nn.Classifier | Oracle,
    eval_set: Sequence[LabeledSample],
    epsilons: Iterable[float] = DEFAULT_EPSILONS,
    seed: int = 0,
    ledger: QueryLedger | None = None,
) -> list[ASRRow]:
    """ASR per epsilon over the victim-correct part of ``eval_set``.

    Victim-correctness is established once and shared by every epsilon. A
    sweep where the victim gets nothing right yields ``asr = 0`` with ``n = 0``.
    """
    epsilons = list(epsilons)
    if not epsilons:
        return []
    keep = victim_correct(victim, eval_set, ledger)
    rows = []
    for eps in epsilons:
        batch = _craft_kept(substitute, keep, eps, "")
        asr = transfer_asr(victim, batch, ledger) if len(batch) else 0.0
        rows.append(ASRRow(float(eps), asr, len(batch), seed))
    return rows


def write_asr_csv(path: str | Path, rows: Iterable[ASRRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epsilon", "asr", "n", "seed"])
        for r in rows:
            w.writerow([repr(r.epsilon), repr(r.asr), r.n, r.seed])
