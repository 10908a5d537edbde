"""Prior-guided extraction loop: pretrained encoder + fc head, entropy-ranked queries.

Each of ``itera`` rounds queries exactly ``budget_B / itera`` new proxy samples,
adds the victim's answers to the labeled pool, rebuilds the substitute from
the pretrained encoder and a fresh head, retrains it on the whole pool and
ranks the not-yet-queried proxy samples by the substitute's predictive entropy.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import nn
from .datasets import LabeledSample, Sample, stack_images
from .oracle import Oracle, OracleResponse, QueryLedger
from .ssl import EncoderArtifact

log = logging.getLogger(__name__)

SELECTIONS = ("entropy", "random")


class PoolExhausted(ValueError):
    """Not enough unqueried proxy samples left for the requested selection."""


@dataclass
class SubstituteModel(nn.Classifier):
    """Classifier whose parameters split into an encoder part and the ``fc`` head."""

    encoder_keys: frozenset[str] = frozenset()

    @property
    def encoder_params(self) -> nn.ParamSet:
        return {k: v for k, v in self.params.items() if k in self.encoder_keys}

    @property
    def head_params(self) -> nn.ParamSet:
        return {k: v for k, v in self.params.items() if k not in self.encoder_keys}


@dataclass(frozen=True)
class ExtractionConfig:
    budget_B: int
    itera: int = 4
    num_classes: int = 8
    train_cfg: nn.TrainConfig = field(default_factory=nn.TrainConfig)
    head_reinit: bool = True
    encoder_finetune: bool = True
    selection: str = "entropy"
    tie_break: str = "by_id"
    seed: int = 0

    def __post_init__(self):
        if self.budget_B < 1 or self.itera < 1:
            raise ValueError("budget_B and itera must be positive")
        if self.budget_B % self.itera:
            raise ValueError(f"itera={self.itera} does not divide budget_B={self.budget_B}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")
        if self.tie_break != "by_id":
            raise ValueError("only the 'by_id' tie break is supported")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")

    @property
    def per_round(self) -> int:
        return self.budget_B // self.itera


def _head_arch(latent_dim: int, num_classes: int) -> nn.Architecture:
    return nn.dense_stack("fc", [latent_dim, num_classes])


def assemble_substitute(encoder: EncoderArtifact, num_classes: int, seed: int = 0) -> SubstituteModel:
    """``f_enc + fc``: copy the encoder parameters and attach a freshly initialized head."""
    if num_classes < 2:
        raise ValueError("num_classes must be at least 2")
    head = _head_arch(encoder.latent_dim, num_classes)
    arch = encoder.arch.then(head, name=encoder.arch.name)
    params = nn.cast_params(encoder.params, torch.float32)
    params.update(nn.init_params(head, seed))
    return SubstituteModel(arch, params, trained=False, encoder_keys=frozenset(encoder.params))


# ---------------------------------------------------------------- scoring / selection

def entropy(posteriors: np.ndarray) -> np.ndarray:
    """Row-wise Shannon entropy in nats, with ``0 log 0 = 0``."""
    p = np.asarray(posteriors, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(p), 0.0)
    h = -terms.sum(axis=-1)
    return np.clip(h, 0.0, math.log(p.shape[-1]))


def entropy_scores(model: nn.Classifier, pool: Sequence[Sample]) -> list[tuple[int, float]]:
    if not pool:
        raise ValueError("cannot score an empty pool")
    scores = entropy(model.posterior(stack_images(pool)))
    return [(s.id, float(h)) for s, h in zip(pool, scores)]


def select_topk(
    scored: Sequence[tuple[int, float]], k: int, already_queried: set[int] | frozenset[int] = frozenset(),
    tie_break: str = "by_id",
) -> list[int]:
    """The ``k`` highest-scoring unqueried ids; equal scores go to the smaller id."""
    if tie_break != "by_id":
        raise ValueError("only the 'by_id' tie break is supported")
    candidates = [(i, s) for i, s in scored if i not in already_queried]
    if len(candidates) < k:
        raise PoolExhausted(f"asked for {k} samples but only {len(candidates)} unqueried candidates remain")
    candidates.sort(key=lambda t: (-t[1], t[0]))
    return [i for i, _ in candidates[:k]]


def random_select(
    pool: Sequence[Sample] | Sequence[int], k: int, already_queried: set[int] | frozenset[int] = frozenset(),
    seed: int = 0,
) -> list[int]:
    """Uniform sample of ``k`` unqueried ids without replacement."""
    ids = sorted(p if isinstance(p, (int, np.integer)) else p.id for p in pool)
    remaining = [i for i in ids if i not in already_queried]
    if len(remaining) < k:
        raise PoolExhausted(f"asked for {k} samples but only {len(remaining)} unqueried candidates remain")
    if k == 0:
        return []
    pick = np.random.default_rng(seed).choice(len(remaining), size=k, replace=False)
    return [int(remaining[i]) for i in pick]


# ---------------------------------------------------------------- training

def labeled_from_responses(
    samples: Sequence[Sample], responses: Sequence[OracleResponse], num_classes: int
) -> list[LabeledSample]:
    out = []
    for s, r in zip(samples, responses):
        if r.sample_id != s.id:
            raise ValueError(f"response for id {r.sample_id} does not match sample {s.id}")
        post = r.soft_target(num_classes) if r.posterior else None
        out.append(LabeledSample(s, r.label, post))
    return out


def _targets(labeled: Sequence[LabeledSample], num_classes: int) -> torch.Tensor:
    rows = []
    for ls in labeled:
        if ls.posterior is not None:
            rows.append(np.asarray(ls.posterior, dtype=np.float64))
        else:
            y = np.zeros(num_classes)
            y[ls.label] = 1.0
            rows.append(y)
    return torch.as_tensor(np.stack(rows), dtype=torch.float32)


def train_substitute(
    model: SubstituteModel, labeled: Sequence[LabeledSample], cfg: ExtractionConfig, round: int = 0,
) -> tuple[SubstituteModel, list[float]]:
    """Fit the substitute with CE against the victim's answers.

    Labels become one-hot targets and top-k posteriors soft targets. With
    ``head_reinit`` the head is re-drawn first; with ``encoder_finetune`` off the
    encoder parameters are left bitwise untouched.
    """
    if not labeled:
        raise ValueError("no labeled samples to train on")
    params = nn.copy_params(model.params)
    if cfg.head_reinit:
        head = _head_arch(model.arch.layers[-1].in_dim, model.num_classes)
        params.update(nn.init_params(head, _head_seed(cfg, round)))
    trainable = None if cfg.encoder_finetune else [k for k in params if k not in model.encoder_keys]
    x = torch.as_tensor(stack_images(labeled))
    y = _targets(labeled, model.num_classes)
    tcfg = cfg.train_cfg
    train_cfg = nn.TrainConfig(tcfg.learning_rate, tcfg.batch_size, tcfg.epochs, tcfg.seed * 1000 + round, tcfg.momentum)
    params, history = nn.fit(model.arch, params, x, y, train_cfg, trainable=trainable)
    trained = SubstituteModel(model.arch, params, trained=model.trained or tcfg.epochs > 0,
                              encoder_keys=model.encoder_keys)
    return trained, history


def _head_seed(cfg: ExtractionConfig, round: int) -> int:
    return cfg.seed * 1000 + 500 + round


# ---------------------------------------------------------------- run record

@dataclass
class RoundRecord:
    round: int
    queried_ids: list[int]
    loss_curve: list[float]
    fidelity: float | None
    spent: int


@dataclass
class RunRecord:
    method: str
    seed: int
    config: dict
    rounds: list[RoundRecord] = field(default_factory=list)
    checkpoint: str | None = None

    @property
    def queried_ids(self) -> list[int]:
        return [i for r in self.rounds for i in r.queried_ids]

    @property
    def final_fidelity(self) -> float | None:
        return self.rounds[-1].fidelity if self.rounds else None

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "seed": self.seed,
            "config": self.config,
            "checkpoint": self.checkpoint,
            "rounds": [asdict(r) for r in self.rounds],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        return cls(d["method"], d["seed"], d["config"], [RoundRecord(**r) for r in d["rounds"]], d.get("checkpoint"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "RunRecord":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def export_queries_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "id"])
            for r in self.rounds:
                for i in r.queried_ids:
                    w.writerow([r.round, i])


def _config_snapshot(cfg: ExtractionConfig) -> dict:
    d = asdict(cfg)
    d["train_cfg"] = asdict(cfg.train_cfg)
    return d


# ---------------------------------------------------------------- the loop

def run_extraction(
    oracle: Oracle,
    proxy: Sequence[Sample],
    encoder: EncoderArtifact,
    cfg: ExtractionConfig,
    ledger: QueryLedger,
    validation: tuple[Sequence[Sample], Sequence[tuple[int, int]]] | None = None,
) -> tuple[SubstituteModel, RunRecord]:
    """Run ``cfg.itera`` query/train/select rounds against ``oracle``.

    ``validation`` is ``(samples, [(id, victim_label), ...])`` gathered by the
    experimenter outside the ledger; fidelity on it is logged each round.
    """
    from .evaluation import fidelity

    if ledger.budget_B != cfg.budget_B:
        raise ValueError(f"ledger budget {ledger.budget_B} differs from configured budget {cfg.budget_B}")
    if len(proxy) < cfg.budget_B:
        raise PoolExhausted(f"proxy has {len(proxy)} samples, budget needs {cfg.budget_B}")
    by_id = {s.id: s for s in proxy}
    if len(by_id) != len(proxy):
        raise ValueError("proxy ids must be unique")

    record = RunRecord(encoder.method, cfg.seed, _config_snapshot(cfg))
    model = assemble_substitute(encoder, cfg.num_classes, _head_seed(cfg, 0))
    queried: set[int] = set()
    labeled: list[LabeledSample] = []

    def select(round: int) -> list[int]:
        if cfg.selection == "random":
            return random_select(list(by_id), cfg.per_round, queried, seed=cfg.seed * 1000 + round)
        pool = [s for s in proxy if s.id not in queried]
        return select_topk(entropy_scores(model, pool), cfg.per_round, queried, cfg.tie_break)

    batch_ids = select(0)
    for rnd in range(cfg.itera):
        samples = [by_id[i] for i in batch_ids]
        responses = oracle.query_batch(samples, ledger, round=rnd)
        queried.update(batch_ids)
        labeled.extend(labeled_from_responses(samples, responses, cfg.num_classes))

        if cfg.head_reinit:
            model = assemble_substitute(encoder, cfg.num_classes, _head_seed(cfg, rnd))
        model, losses = train_substitute(model, labeled, cfg, rnd)

        fid = None
        if validation is not None:
            fid = fidelity(model, validation[1], validation[0]).fidelity
        record.rounds.append(RoundRecord(rnd, list(batch_ids), losses, fid, ledger.spent))
        log.info("round %d: %d queried, fidelity %s", rnd, len(queried), fid)
        if rnd + 1 < cfg.itera:
            batch_ids = select(rnd + 1)
    return model, record
