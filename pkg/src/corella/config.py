"""Run configuration: nested dataclasses read from YAML, with dotted overrides."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import yaml

from .data import HISTORY_LENGTH, SyntheticConfig
from .router import RouterConfig
from .training import ModelConfig, Stage1Plan, Stage2Plan, Stage3Plan, TrainingPlan

DATASETS = ("synthetic", "movielens", "amazon_books")


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    path: str | None = None      # MovieLens directory or Amazon ratings CSV
    meta: str | None = None      # Amazon metadata JSON lines
    prepared: str | None = None  # directory written by prepare-data
    history_length: int = HISTORY_LENGTH
    max_sequence_length: int = 96


@dataclass
class TrainingConfig:
    stage1: Stage1Plan = field(default_factory=Stage1Plan)
    stage2: Stage2Plan = field(default_factory=Stage2Plan)
    stage3: Stage3Plan = field(default_factory=Stage3Plan)


@dataclass
class RunConfig:
    dataset: str = "synthetic"
    seed: int = 42
    out: str = "runs/default"
    data: DataConfig = field(default_factory=DataConfig)
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    router: RouterConfig = field(default_factory=RouterConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)

    def plan(self) -> TrainingPlan:
        t = self.training
        return TrainingPlan(seed=self.seed, stage1=dataclasses.replace(t.stage1),
                            stage2=dataclasses.replace(t.stage2),
                            stage3=dataclasses.replace(t.stage3))

    def validate(self) -> "RunConfig":
        try:
            if self.dataset not in DATASETS:
                raise ConfigError(f"dataset must be one of {DATASETS}, got {self.dataset!r}")
            if self.data.history_length < 0 or self.data.max_sequence_length < 8:
                raise ConfigError("history_length must be >= 0 and max_sequence_length >= 8")
            self.synthetic.validate()
            if self.router.mode == "absolute" and self.router.tau is None:
                RouterConfig("quantile", self.router.rho).validate()  # tau calibrated later
            else:
                self.router.validate()
            self.plan().validate()
            m = self.model
            if m.llm.d_model % m.llm.n_heads:
                raise ConfigError("model.llm.d_model must be divisible by n_heads")
            if max(m.align.llm_layers) > m.llm.n_blocks or min(m.align.llm_layers) < 1:
                raise ConfigError("model.align.llm_layers must lie in 1..n_blocks")
            if max(m.align.crm_layers) > m.crm.n_cross or min(m.align.crm_layers) < 1:
                raise ConfigError("model.align.crm_layers must lie in 1..n_cross")
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self


def _coerce(value: Any, hint, where: str):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union or type(hint).__name__ == "UnionType":
        if value is None and type(None) in args:
            return None
        last = None
        for a in args:
            if a is type(None):
                continue
            try:
                return _coerce(value, a, where)
            except ConfigError as e:
                last = e
        raise last or ConfigError(f"{where}: bad value {value!r}")
    if dataclasses.is_dataclass(hint):
        return _build(hint, value, f"{where}.")
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        return float(value)
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true/false, got {value!r}")
        return value
    if origin in (list, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{where}: expected a list, got {value!r}")
        item = args[0] if args else Any
        items = [_coerce(v, item, f"{where}[{i}]") if item is not Any else v
                 for i, v in enumerate(value)]
        if origin is tuple and len(args) > 1 and args[1] is not Ellipsis and len(items) != len(args):
            raise ConfigError(f"{where}: expected {len(args)} values")
        return tuple(items) if origin is tuple else items
    if origin is dict:
        if not isinstance(value, dict):
            raise ConfigError(f"{where}: expected a mapping, got {value!r}")
        kt, vt = args
        return {_coerce(k, kt, where): _coerce(v, vt, f"{where}.{k}") for k, v in value.items()}
    return value


def _build(cls, data, where: str = ""):
    if data is None:
        data = {}
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected a mapping, got {data!r}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - names)
    if unknown:
        raise ConfigError(f"unknown config key(s): {', '.join(f'{where}{k}' for k in unknown)}")
    kwargs = {k: _coerce(v, hints[k], f"{where}{k}") for k, v in data.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"{where or 'config'}: {e}") from e


def apply_override(tree: dict, assignment: str) -> dict:
    """Apply one ``dotted.key=value`` override; the value is parsed as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override {assignment!r} is not KEY=VALUE")
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    if not all(parts):
        raise ConfigError(f"bad override key {key!r}")
    try:
        value = yaml.safe_load(raw)
    except yaml.YAMLError as e:
        raise ConfigError(f"override {assignment!r}: {e}") from e
    node = tree
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {key!r} descends into a scalar")
    node[parts[-1]] = value
    return tree


def load_config(path=None, overrides: Sequence[str] = ()) -> RunConfig:
    tree: dict = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                tree = yaml.safe_load(fh) or {}
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        except yaml.YAMLError as e:
            raise ConfigError(f"config {path} is not valid YAML: {e}") from e
    for o in overrides:
        apply_override(tree, o)
    return from_dict(tree)


def from_dict(tree: dict) -> RunConfig:
    return _build(RunConfig, tree).validate()


def to_dict(cfg: RunConfig) -> dict:
    def plain(x):
        if isinstance(x, dict):
            return {k: plain(v) for k, v in x.items()}
        if isinstance(x, (list, tuple)):
            return [plain(v) for v in x]
        return x
    return plain(dataclasses.asdict(cfg))


def write_resolved(cfg: RunConfig, directory) -> Path:
    path = Path(directory) / "config.resolved.yaml"
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(to_dict(cfg), fh, sort_keys=True)
    return path
