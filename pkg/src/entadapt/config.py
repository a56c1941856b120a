"""Experiment configuration: one JSON document, strict about its keys.

Layout::

    {
      "corpus": {...CorpusConfig fields},
      "model":  {...ModelConfig fields},
      "train":  {...TrainPlan fields},
      "adapt":  {"parameter_sets": [...], "loss_kinds": [...], "amounts": [...],
                 "speakers": null | [...], ...AdaptPlan fields other than the grid axes},
      "paths":  {"corpus": dir, "checkpoint": file, "out": dir},
      "seed":   int
    }

``seed`` fills ``train.seed``, ``model.init_seed`` and ``adapt.lora_seed``
unless a section sets them itself.  Amounts may be integers or the preset
names ``"1min"`` / ``"10min"``.
"""

from __future__ import annotations

import copy
import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable

from .adapt import LOSS_KINDS, PARAMETER_SETS, AdaptPlan, TrainPlan
from .corpus import AMOUNT_PRESETS, CorpusConfig
from .errors import ConfigError, ContractError
from .model import ModelConfig

SECTIONS = ("corpus", "model", "train", "adapt", "paths", "seed")
GRID_KEYS = ("parameter_sets", "loss_kinds", "amounts", "speakers")
PATH_KEYS = ("corpus", "checkpoint", "out")

DEFAULT_PATHS = {"corpus": "work/corpus", "checkpoint": "work/model.json", "out": "work/results"}
DEFAULT_GRID = {
    "parameter_sets": list(PARAMETER_SETS),
    "loss_kinds": list(LOSS_KINDS),
    "amounts": ["1min", "10min"],
    "speakers": None,
}


def _fields(cls) -> set[str]:
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(section: str, given: Iterable[str], allowed: Iterable[str]) -> None:
    unknown = sorted(set(given) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s) in {section}: {', '.join(unknown)}")


@dataclass
class AdaptGrid:
    parameter_sets: list[str]
    loss_kinds: list[str]
    amounts: list[int]
    speakers: list[str] | None
    plan: dict[str, Any]

    def cells(self) -> list[tuple[str, str, int]]:
        return [(p, l, a) for p in self.parameter_sets for l in self.loss_kinds for a in self.amounts]

    def plan_for(self, parameter_set: str, loss_kind: str) -> AdaptPlan:
        return AdaptPlan(parameter_set=parameter_set, loss_kind=loss_kind, **self.plan)


@dataclass
class ExperimentConfig:
    corpus: CorpusConfig
    model: ModelConfig
    train: TrainPlan
    adapt: AdaptGrid
    paths: dict[str, str] = field(default_factory=lambda: dict(DEFAULT_PATHS))
    seed: int = 0
    raw: dict = field(default_factory=dict, repr=False)

    def path(self, key: str) -> Path:
        return Path(self.paths[key])


def _amount(value) -> int:
    if isinstance(value, str):
        if value not in AMOUNT_PRESETS:
            raise ConfigError(f"unknown amount preset {value!r}; use an integer or one of {sorted(AMOUNT_PRESETS)}")
        return AMOUNT_PRESETS[value]
    if isinstance(value, bool) or not isinstance(value, int) or value < 1:
        raise ConfigError(f"adapt.amounts entries must be positive integers, got {value!r}")
    return value


def build_config(doc: dict) -> ExperimentConfig:
    """Validate a parsed configuration document."""
    if not isinstance(doc, dict):
        raise ConfigError("configuration must be a JSON object")
    _check_keys("config", doc, SECTIONS)
    for name in ("corpus", "model", "train", "adapt", "paths"):
        if not isinstance(doc.get(name, {}), dict):
            raise ConfigError(f"section {name} must be an object")
    seed = doc.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ConfigError("seed must be an integer")
    corpus_doc, model_doc = dict(doc.get("corpus", {})), dict(doc.get("model", {}))
    train_doc, adapt_doc = dict(doc.get("train", {})), dict(doc.get("adapt", {}))
    paths_doc = dict(doc.get("paths", {}))
    _check_keys("corpus", corpus_doc, _fields(CorpusConfig))
    _check_keys("model", model_doc, _fields(ModelConfig))
    _check_keys("train", train_doc, _fields(TrainPlan))
    plan_fields = _fields(AdaptPlan) - {"parameter_set", "loss_kind"}
    _check_keys("adapt", adapt_doc, plan_fields | set(GRID_KEYS))
    _check_keys("paths", paths_doc, PATH_KEYS)
    model_doc.setdefault("init_seed", seed)
    train_doc.setdefault("seed", seed)
    grid = {k: adapt_doc.pop(k, copy.deepcopy(DEFAULT_GRID[k])) for k in GRID_KEYS}
    adapt_doc.setdefault("lora_seed", seed)
    try:
        corpus = CorpusConfig(**corpus_doc)
        model = ModelConfig(**model_doc)
        train = TrainPlan(**train_doc)
        for key in ("parameter_sets", "loss_kinds", "amounts"):
            if not isinstance(grid[key], list) or not grid[key]:
                raise ConfigError(f"adapt.{key} must be a nonempty list")
        for ps in grid["parameter_sets"]:
            for lk in grid["loss_kinds"]:
                AdaptPlan(parameter_set=ps, loss_kind=lk, **adapt_doc)
        amounts = [_amount(a) for a in grid["amounts"]]
        if grid["speakers"] is not None and not isinstance(grid["speakers"], list):
            raise ConfigError("adapt.speakers must be null or a list of speaker ids")
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    except ContractError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc)) from exc
    if corpus.d_feat != model.d_feat or corpus.vocab_size != model.vocab_size:
        raise ConfigError("corpus and model disagree on d_feat or vocab_size")
    if max(amounts) > corpus.n_adapt:
        raise ConfigError(f"adapt.amounts exceed corpus.n_adapt={corpus.n_adapt}")
    adapt = AdaptGrid(list(grid["parameter_sets"]), list(grid["loss_kinds"]), amounts, grid["speakers"], adapt_doc)
    paths = {**DEFAULT_PATHS, **paths_doc}
    return ExperimentConfig(corpus, model, train, adapt, paths, seed, copy.deepcopy(doc))


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, assignments: Iterable[str]) -> dict:
    """Apply ``section.key=value`` overrides; values are JSON, else plain strings."""
    doc = copy.deepcopy(doc)
    for item in assignments:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        parts = key.split(".")
        node = doc
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-object")
        node[parts[-1]] = _parse_value(value)
    return doc


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> ExperimentConfig:
    """Read, override and validate a configuration (``None`` means all defaults)."""
    doc: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}:{exc.lineno}: invalid JSON ({exc.msg})") from exc
    return build_config(apply_overrides(doc, overrides))
