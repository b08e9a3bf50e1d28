"""INI-style run configuration.

Sections map onto the dataclasses of each module::

    [run]    seed
    [data]   DataConfig fields (seed comes from [run])
    [model]  hidden_dim, backbone_dim, proj_hidden, contrast_dim
    [train]  TrainConfig scalar fields, plus aug_sigma / aug_mask
    [eval]   EvalConfig fields

Every key is optional. A manifest JSON written by the CLI is accepted in
place of an INI file; its ``config`` block is used.
"""

from __future__ import annotations

import configparser
import json
import types
import typing
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .data import AugmentationPolicy, DataConfig
from .errors import InvalidConfigError
from .evaluation import EvalConfig
from .model import ModelDims
from .trainer import TrainConfig


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    data: DataConfig = DataConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    def with_overrides(self, seed: int | None = None, mode: str | None = None) -> "RunConfig":
        cfg = self
        if seed is not None:
            cfg = replace(cfg, seed=seed)
        if mode is not None:
            cfg = replace(cfg, train=replace(cfg.train, mode=mode))
        return cfg.resolved()

    def resolved(self) -> "RunConfig":
        """Propagate the run seed and the data dimension into the sections."""
        train = replace(self.train, seed=self.seed,
                        dims=replace(self.train.dims, input_dim=self.data.dim))
        return replace(self, data=replace(self.data, seed=self.seed), train=train,
                       eval=replace(self.eval, seed=self.seed))

    def to_sections(self) -> dict[str, dict]:
        t = self.train
        train = {f.name: getattr(t, f.name) for f in fields(t)
                 if f.name not in ("dims", "augmentation", "seed")}
        train["aug_sigma"] = t.augmentation.gaussian_sigma
        train["aug_mask"] = t.augmentation.mask_probability
        model = {f.name: getattr(t.dims, f.name) for f in fields(t.dims) if f.name != "input_dim"}
        data = {f.name: getattr(self.data, f.name) for f in fields(self.data) if f.name != "seed"}
        ev = {f.name: getattr(self.eval, f.name) for f in fields(self.eval) if f.name != "seed"}
        return {"run": {"seed": self.seed}, "data": data, "model": model, "train": train, "eval": ev}

    def to_ini(self) -> str:
        lines = []
        for section, values in self.to_sections().items():
            lines.append(f"[{section}]")
            for k, v in values.items():
                lines.append(f"{k} = {'none' if v is None else v}")
            lines.append("")
        return "\n".join(lines)


def _convert(raw, annotation, key: str):
    if isinstance(raw, str):
        text = raw.strip()
    else:
        text = raw
    args = typing.get_args(annotation)
    optional = type(None) in args
    if optional and (text is None or (isinstance(text, str) and text.lower() in ("none", ""))):
        return None
    base = next((a for a in args if a is not type(None)), annotation)
    try:
        if base is bool:
            if isinstance(text, bool):
                return text
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if base is int:
            value = float(text)
            if value != int(value):
                raise ValueError(text)
            return int(value)
        if base is float:
            return float(text)
        return str(text)
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(f"{key}: cannot parse {raw!r} as {base.__name__}") from exc


def _build(cls, values: dict, section: str, extra=()):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in fields(cls)}
    kwargs = {}
    for key, raw in values.items():
        if key in extra:
            continue
        if key not in known:
            raise InvalidConfigError(f"[{section}] unknown key {key!r}")
        kwargs[key] = _convert(raw, hints[key], f"[{section}] {key}")
    return kwargs


def from_sections(sections: dict[str, dict]) -> RunConfig:
    unknown = set(sections) - {"run", "data", "model", "train", "eval", "DEFAULT"}
    if unknown:
        raise InvalidConfigError(f"unknown config sections {sorted(unknown)}")
    run = sections.get("run", {})
    extra_run = set(run) - {"seed"}
    if extra_run:
        raise InvalidConfigError(f"[run] unknown keys {sorted(extra_run)}")
    seed = _convert(run.get("seed", 0), int, "[run] seed")
    data_kw = _build(DataConfig, sections.get("data", {}), "data")
    data_kw.pop("seed", None)
    model_kw = _build(ModelDims, sections.get("model", {}), "model")
    if "input_dim" in model_kw:
        raise InvalidConfigError("[model] input_dim is taken from [data] dim")
    train_raw = dict(sections.get("train", {}))
    aug_kw = {}
    for key, target in (("aug_sigma", "gaussian_sigma"), ("aug_mask", "mask_probability")):
        if key in train_raw:
            aug_kw[target] = _convert(train_raw.pop(key), float, f"[train] {key}")
    train_kw = _build(TrainConfig, train_raw, "train")
    for bad in ("dims", "augmentation", "seed"):
        if bad in train_kw:
            raise InvalidConfigError(f"[train] {bad} cannot be set directly")
    eval_kw = _build(EvalConfig, sections.get("eval", {}), "eval")
    eval_kw.pop("seed", None)
    try:
        data = DataConfig(**data_kw)
        data.validate()
        train = TrainConfig(dims=ModelDims(input_dim=data.dim, **model_kw),
                            augmentation=AugmentationPolicy(**aug_kw), **train_kw)
        train.validate()
    except ValueError as exc:
        raise InvalidConfigError(str(exc)) from exc
    return RunConfig(seed, data, train, EvalConfig(**eval_kw)).resolved()


def load_config(path) -> RunConfig:
    path = Path(path)
    text = path.read_text()
    if path.suffix == ".json":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise InvalidConfigError(f"{path}: invalid JSON: {exc}") from exc
        if "config" not in doc:
            raise InvalidConfigError(f"{path}: manifest has no config block")
        return from_sections(doc["config"])
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise InvalidConfigError(f"{path}: {exc}") from exc
    return from_sections({s: dict(parser[s]) for s in parser.sections()})
