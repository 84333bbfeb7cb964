"""Run configuration: strict canonical-JSON documents with full defaults.

Every field has a default; unknown keys are rejected at every nesting
level so a typo cannot silently fall back to a default. The fully resolved
configuration serializes canonically (sorted keys, compact separators) so
two runs can be compared by comparing their echoes.
"""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from typing import List, Optional

from .crossmodal import CrossModalConfig
from .encoders import EncoderConfig
from .losses import LossWeights
from .probes import ProbeConfig
from .synthdata import CorpusSpec
from .trainer import ModelConfig, TrainConfig


class ConfigError(ValueError):
    """Malformed, unknown, or inconsistent configuration input."""


@dataclass(frozen=True)
class RunConfig:
    corpus: CorpusSpec = field(default_factory=CorpusSpec)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    probe: List[ProbeConfig] = field(default_factory=lambda: [ProbeConfig()])


_SCALARS = (int, float, str, bool, type(None))


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _resolve_optional(tp):
    origin = typing.get_origin(tp)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if len(args) == 1:
            return args[0], True
    return tp, False


def build_dataclass(cls, data, path: str = ""):
    """Strictly build a (possibly nested) dataclass from plain JSON data."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path or cls.__name__}: expected an object, got "
                          f"{type(data).__name__}")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{path or cls.__name__}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, f in known.items():
        if name not in data:
            continue
        value = data[name]
        sub_path = f"{path}.{name}" if path else name
        tp, is_optional = _resolve_optional(f.type if not isinstance(f.type, str)
                                            else _eval_type(f.type, cls))
        if value is None and is_optional:
            kwargs[name] = None
        elif _is_dataclass_type(tp):
            kwargs[name] = build_dataclass(tp, value, sub_path)
        elif typing.get_origin(tp) in (list, typing.List):
            (item_tp,) = typing.get_args(tp)
            if not isinstance(value, list):
                raise ConfigError(f"{sub_path}: expected a list")
            if _is_dataclass_type(item_tp):
                kwargs[name] = [build_dataclass(item_tp, v, f"{sub_path}[{i}]")
                                for i, v in enumerate(value)]
            else:
                kwargs[name] = list(value)
        else:
            if not isinstance(value, _SCALARS):
                raise ConfigError(f"{sub_path}: expected a scalar value")
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path or cls.__name__}: {exc}") from exc


def _eval_type(annotation: str, owner_cls):
    # dataclass field types arrive as strings under `from __future__ import
    # annotations`; resolve them against the defining module's namespace
    import sys

    module = sys.modules[owner_cls.__module__]
    return eval(annotation, vars(module))  # noqa: S307 - trusted source code


def run_config_from_dict(data: dict) -> RunConfig:
    return build_dataclass(RunConfig, data, "")


def load_run_config(path) -> RunConfig:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            data = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    return run_config_from_dict(data)


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def run_config_to_dict(cfg: RunConfig) -> dict:
    return dataclasses.asdict(cfg)


def model_config_from_dict(data: dict) -> ModelConfig:
    return build_dataclass(ModelConfig, data, "model")


def train_config_from_dict(data: dict) -> TrainConfig:
    return build_dataclass(TrainConfig, data, "train")


def validate_corpus_against_model(spec: CorpusSpec, mc: ModelConfig) -> None:
    """The corpus geometry must match the model's input contract."""
    problems = []
    if spec.feature_dim != mc.encoder.input_dim:
        problems.append(f"feature_dim {spec.feature_dim} != encoder input "
                        f"{mc.encoder.input_dim}")
    if spec.vocab != mc.vocab:
        problems.append(f"vocab {spec.vocab} != model vocab {mc.vocab}")
    if spec.seq_len > mc.visual.max_positions:
        problems.append(f"seq_len {spec.seq_len} > visual max_positions "
                        f"{mc.visual.max_positions}")
    if 1 + 2 * spec.seq_len > mc.cross.max_positions:
        problems.append(f"paired length {1 + 2 * spec.seq_len} > cross "
                        f"max_positions {mc.cross.max_positions}")
    if problems:
        raise ConfigError("corpus/model mismatch: " + "; ".join(problems))
