"""Experiment configuration: a versioned JSON document, validated strictly.

Every section is optional and falls back to the desk-scale defaults below;
unknown keys anywhere are errors so that a typo cannot silently change an
experiment. Validation collects every problem before reporting.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping

from . import nn
from .datasets import IID, OOD
from .oracle import OracleConfig
from .ssl import METHODS, AugmentConfig, SSLConfig, canonical_method

SCHEMA_VERSION = 1
SELECTIONS = ("entropy", "random")


class ConfigError(ValueError):
    """One or more validation problems; ``errors`` lists them as ``path: message``."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid config:\n  " + "\n  ".join(self.errors))


@dataclass(frozen=True)
class DatasetSpec:
    regime: str = IID
    num_classes: int = 8
    victim_per_class: int = 200
    proxy_per_class: int = 150
    test_per_class: int = 50
    image_shape: tuple[int, ...] = (3, 16, 16)
    manifest: str | None = None
    root: str | None = None


@dataclass(frozen=True)
class VictimSpec:
    architecture: str = "cnn-s"
    latent_dim: int = 64
    train: nn.TrainConfig = nn.TrainConfig(learning_rate=0.01, batch_size=32, epochs=30, momentum=0.9)


@dataclass(frozen=True)
class OracleSpec:
    config: OracleConfig = OracleConfig()
    unit_price: float = 0.0


@dataclass(frozen=True)
class MethodSpec:
    name: str
    ssl: SSLConfig = SSLConfig()
    train: nn.TrainConfig = nn.TrainConfig()
    augment: AugmentConfig = AugmentConfig()
    selection: str = "entropy"


@dataclass(frozen=True)
class ExtractionSpec:
    budgets: tuple[int, ...] = (100, 200, 400)
    itera: int = 4
    train: nn.TrainConfig = nn.TrainConfig(learning_rate=0.01, batch_size=32, epochs=40, momentum=0.9)
    head_reinit: bool = True
    encoder_finetune: bool = True


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetSpec = DatasetSpec()
    victim: VictimSpec = VictimSpec()
    oracle: OracleSpec = OracleSpec()
    methods: tuple[MethodSpec, ...] = ()
    extraction: ExtractionSpec = ExtractionSpec()
    epsilons: tuple[float, ...] = (0.03, 0.06, 0.09, 0.12, 0.15, 0.18, 0.24)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    output_dir: str = "runs"
    ssl: SSLConfig = SSLConfig()
    augment: AugmentConfig | None = None

    def method(self, name: str) -> MethodSpec:
        """The configured spec for ``name``, else its default recipe on this config's base settings."""
        name = canonical_method(name)
        for m in self.methods:
            if m.name == name:
                return m
        errs = _Collector()
        spec = _method(name, None, self.augment or DEFAULT_AUGMENT, self.ssl, name, errs)
        if errs.errors:
            raise ConfigError(errs.errors)
        return spec


# Desk-scale pretraining recipes. Colour jitter includes hue because the
# synthetic classes are defined by orientation and frequency, never colour.
DEFAULT_AUGMENT = AugmentConfig(brightness=0.5, contrast=0.5, saturation=0.8, hue=0.5, grayscale_prob=0.3)
DEFAULT_METHODS: dict[str, dict[str, Any]] = {
    "RS": {"selection": "random"},
    "BAE": {"train": {"learning_rate": 0.05, "batch_size": 64, "epochs": 60, "momentum": 0.9}},
    "DAE": {"train": {"learning_rate": 0.05, "batch_size": 64, "epochs": 60, "momentum": 0.9}},
    "MoCo": {
        "ssl": {"tau": 0.5, "momentum": 0.99, "queue_size": 256},
        "train": {"learning_rate": 0.005, "batch_size": 64, "epochs": 160, "momentum": 0.9},
    },
    "SimCLR": {
        "ssl": {"tau": 0.5, "batch_N": 64},
        "train": {"learning_rate": 0.05, "batch_size": 64, "epochs": 120, "momentum": 0.9},
    },
}


# ---------------------------------------------------------------- parsing

class _Collector:
    def __init__(self):
        self.errors: list[str] = []

    def add(self, path: str, msg: str) -> None:
        self.errors.append(f"{path}: {msg}" if path else msg)


def _check_keys(doc: Any, allowed: set[str], path: str, errs: _Collector) -> dict:
    if not isinstance(doc, Mapping):
        errs.add(path or "<root>", f"expected an object, got {type(doc).__name__}")
        return {}
    for key in sorted(set(doc) - allowed):
        errs.add(f"{path}.{key}" if path else key, f"unknown key (allowed: {', '.join(sorted(allowed))})")
    return {k: v for k, v in doc.items() if k in allowed}


def _build(cls, base, doc: Any, path: str, errs: _Collector, convert: Mapping[str, Any] | None = None):
    """Overlay ``doc`` on the dataclass instance ``base``; constructor errors are collected."""
    names = {f.name for f in fields(cls)}
    doc = _check_keys(doc, names, path, errs)
    convert = convert or {}
    values = {}
    for k, v in doc.items():
        values[k] = convert[k](v) if k in convert else v
    try:
        return replace(base, **values)
    except (TypeError, ValueError) as exc:
        errs.add(path, str(exc))
        return base


def _tuple(v):
    return tuple(v) if isinstance(v, (list, tuple)) else v


def _train(doc, base: nn.TrainConfig, path: str, errs: _Collector) -> nn.TrainConfig:
    return _build(nn.TrainConfig, base, doc, path, errs)


def _method(name: str, doc: Any, aug_base: AugmentConfig, ssl_base: SSLConfig, path: str,
            errs: _Collector) -> MethodSpec | None:
    try:
        name = canonical_method(name)
    except ValueError as exc:
        errs.add(path, str(exc))
        return None
    defaults = DEFAULT_METHODS[name]
    doc = _check_keys(doc if doc is not None else {}, {"ssl", "train", "augment", "selection"}, path, errs)
    ssl_cfg = _build(SSLConfig, ssl_base, defaults.get("ssl", {}), path, errs)
    ssl_cfg = _build(SSLConfig, ssl_cfg, doc.get("ssl", {}), f"{path}.ssl", errs)
    train = _train(defaults.get("train", {}), nn.TrainConfig(), path, errs)
    train = _train(doc.get("train", {}), train, f"{path}.train", errs)
    aug = _build(AugmentConfig, aug_base, doc.get("augment", {}), f"{path}.augment", errs,
                 {"crop_scale": _tuple, "blur_sigma": _tuple})
    selection = doc.get("selection", defaults.get("selection", "entropy"))
    if selection not in SELECTIONS:
        errs.add(f"{path}.selection", f"must be one of {SELECTIONS}, got {selection!r}")
        selection = "entropy"
    return MethodSpec(name, ssl_cfg, train, aug, selection)


def parse_config(doc: Any, base_dir: str | Path = ".") -> ExperimentConfig:
    """Build an :class:`ExperimentConfig` from a decoded JSON document or raise :class:`ConfigError`."""
    errs = _Collector()
    top = {"schema_version", "dataset", "victim", "oracle", "ssl", "augment", "methods", "extraction",
           "epsilons", "seeds", "output_dir"}
    doc = _check_keys(doc, top, "", errs)
    if "schema_version" not in doc:
        errs.add("schema_version", "missing (expected 1)")
    elif doc["schema_version"] != SCHEMA_VERSION:
        errs.add("schema_version", f"unsupported version {doc['schema_version']!r} (expected {SCHEMA_VERSION})")

    dataset = _build(DatasetSpec, DatasetSpec(), doc.get("dataset", {}), "dataset", errs, {"image_shape": _tuple})
    if dataset.regime not in (IID, OOD):
        errs.add("dataset.regime", f"must be {IID!r} or {OOD!r}, got {dataset.regime!r}")
    if dataset.manifest is not None:
        manifest = Path(base_dir, dataset.manifest)
        if not manifest.is_file():
            errs.add("dataset.manifest", f"file not found: {manifest}")
        root = Path(base_dir, dataset.root or Path(dataset.manifest).parent)
        if not root.is_dir():
            errs.add("dataset.root", f"directory not found: {root}")
        dataset = replace(dataset, manifest=str(manifest), root=str(root))
    elif dataset.root is not None:
        errs.add("dataset.root", "only meaningful together with dataset.manifest")

    vdoc = _check_keys(doc.get("victim", {}), {"architecture", "latent_dim", "train"}, "victim", errs)
    victim = VictimSpec(
        vdoc.get("architecture", VictimSpec.architecture),
        vdoc.get("latent_dim", VictimSpec.latent_dim),
        _train(vdoc.get("train", {}), VictimSpec.train, "victim.train", errs),
    )
    if victim.architecture not in nn.ARCHITECTURES:
        errs.add("victim.architecture", f"unknown architecture {victim.architecture!r}; allowed: {', '.join(nn.ARCHITECTURES)}")

    odoc = _check_keys(doc.get("oracle", {}), {"mode", "k", "noise_seed", "noise_scale", "unit_price"}, "oracle", errs)
    unit_price = odoc.pop("unit_price", 0.0)
    oracle_cfg = _build(OracleConfig, OracleConfig(), odoc, "oracle", errs)
    if not isinstance(unit_price, (int, float)) or unit_price < 0:
        errs.add("oracle.unit_price", "must be a non-negative number")
        unit_price = 0.0
    oracle = OracleSpec(oracle_cfg, float(unit_price))

    ssl_base = _build(SSLConfig, SSLConfig(), doc.get("ssl", {}), "ssl", errs)
    if ssl_base.architecture not in nn.ARCHITECTURES:
        errs.add("ssl.architecture", f"unknown architecture {ssl_base.architecture!r}; allowed: {', '.join(nn.ARCHITECTURES)}")
    aug_base = _build(AugmentConfig, DEFAULT_AUGMENT, doc.get("augment", {}), "augment", errs,
                      {"crop_scale": _tuple, "blur_sigma": _tuple})

    mdoc = doc.get("methods", ["RS", "SimCLR", "MoCo"])
    if isinstance(mdoc, list):
        mdoc = {m: None for m in mdoc} if all(isinstance(m, str) for m in mdoc) else mdoc
    methods: list[MethodSpec] = []
    if not isinstance(mdoc, Mapping) or not mdoc:
        errs.add("methods", f"expected a non-empty list or object of methods from {', '.join(METHODS)}")
    else:
        for name, body in mdoc.items():
            spec = _method(name, body, aug_base, ssl_base, f"methods.{name}", errs)
            if spec is None:
                continue
            if any(m.name == spec.name for m in methods):
                errs.add(f"methods.{name}", "listed twice")
                continue
            methods.append(spec)

    edoc = _check_keys(doc.get("extraction", {}), {f.name for f in fields(ExtractionSpec)}, "extraction", errs)
    extraction = ExtractionSpec(
        _tuple(edoc.get("budgets", ExtractionSpec.budgets)),
        edoc.get("itera", ExtractionSpec.itera),
        _train(edoc.get("train", {}), ExtractionSpec.train, "extraction.train", errs),
        edoc.get("head_reinit", True),
        edoc.get("encoder_finetune", True),
    )
    if not isinstance(extraction.itera, int) or extraction.itera < 1:
        errs.add("extraction.itera", f"must be a positive integer, got {extraction.itera!r}")
    elif not extraction.budgets or not all(isinstance(b, int) and b > 0 for b in extraction.budgets):
        errs.add("extraction.budgets", "must be a non-empty list of positive integers")
    else:
        for b in extraction.budgets:
            if b % extraction.itera:
                errs.add("extraction.itera", f"itera={extraction.itera} does not divide budget {b}")
        proxy_size = dataset.num_classes * dataset.proxy_per_class
        if dataset.manifest is None and max(extraction.budgets) > proxy_size:
            errs.add("extraction.budgets", f"budget {max(extraction.budgets)} exceeds the proxy pool of {proxy_size}")

    epsilons = _tuple(doc.get("epsilons", ExperimentConfig.epsilons))
    if not isinstance(epsilons, tuple) or not all(isinstance(e, (int, float)) and e >= 0 for e in epsilons):
        errs.add("epsilons", "must be a list of non-negative numbers")
        epsilons = ()
    seeds = _tuple(doc.get("seeds", ExperimentConfig.seeds))
    if not isinstance(seeds, tuple) or not seeds or not all(isinstance(s, int) and s >= 0 for s in seeds):
        errs.add("seeds", "must be a non-empty list of non-negative integers")
    elif len(set(seeds)) != len(seeds):
        errs.add("seeds", "contains duplicates")
    output_dir = doc.get("output_dir", ExperimentConfig.output_dir)
    if not isinstance(output_dir, str) or not output_dir:
        errs.add("output_dir", "must be a non-empty path string")

    if errs.errors:
        raise ConfigError(errs.errors)
    return ExperimentConfig(dataset, victim, oracle, tuple(methods), extraction,
                            tuple(float(e) for e in epsilons), seeds, str(Path(base_dir, output_dir)),
                            ssl_base, aug_base)


def validate_config(path: str | Path) -> ExperimentConfig:
    """Read and validate a JSON config file; raises :class:`ConfigError` listing every problem."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError([f"cannot read {path}: {exc.strerror or exc}"]) from exc
    except json.JSONDecodeError as exc:
        raise ConfigError([f"{path}: not valid JSON ({exc.msg} at line {exc.lineno})"]) from exc
    return parse_config(doc, base_dir=path.parent)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain-data snapshot of a parsed config (stored next to campaign outputs)."""
    return json.loads(json.dumps(asdict(cfg)))
