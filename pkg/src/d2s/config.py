"""Run configuration: nested dataclasses <-> JSON with dotted-key overrides.

File layout (all sections optional, missing keys take defaults)::

    {
      "train":    {"epochs": 20, "batch_size": 32, "lr0": 0.001, ...},
      "ablation": {"attn_pool": true, "eal": true, "fal": true},
      "align":    {"M": 2048, "m": 0.995, "r": 50, "tau": 0.07, ...},
      "model":    {"d_tok": 32, ...},
      "data":     {"n_train": 2000, "n_test": 500, "seed": 0, ...}
    }
"""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .alignment import AlignmentConfig
from .encoders import ModelDims
from .synthdata import GenConfig

SEEDS = (42, 826, 1215)

# ablation cases: (attn_pool, eal, fal)
CASES = {
    "a": (False, False, False),
    "b": (True, False, False),
    "c": (True, True, False),
    "d": (True, False, True),
    "e": (True, True, True),
}


class ConfigError(ValueError):
    """Invalid or unparseable configuration."""


@dataclass(frozen=True)
class DataConfig:
    n_train: int = 2000
    n_test: int = 500
    seed: int = 0
    gen: GenConfig = field(default_factory=GenConfig)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    lr0: float = 1e-3
    lr_min: float = 2.5e-6
    weight_decay: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 42
    attn_pool: bool = True
    eal: bool = True
    fal: bool = True
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    model: ModelDims = field(default_factory=ModelDims)
    data: DataConfig = field(default_factory=DataConfig)

    def validate(self) -> None:
        try:
            if self.epochs < 1:
                raise ValueError("train.epochs must be >= 1")
            if self.batch_size < 1:
                raise ValueError("train.batch_size must be >= 1")
            if self.lr_min < 0 or self.lr_min > self.lr0:
                raise ValueError("need 0 <= train.lr_min <= train.lr0")
            if self.weight_decay < 0:
                raise ValueError("train.weight_decay must be >= 0")
            self.align.validate()
            self.model.validate()
            self.data.gen.validate()
            if (self.model.image_size, self.model.patch_size) != (
                    self.data.gen.image_size, self.data.gen.patch_size):
                raise ValueError("model.image_size/patch_size must match data.image_size/patch_size")
            if self.data.n_train < 0 or self.data.n_test < 0:
                raise ValueError("data.n_train and data.n_test must be >= 0")
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def case(self) -> str | None:
        flags = (self.attn_pool, self.eal, self.fal)
        return next((k for k, v in CASES.items() if v == flags), None)

    def with_case(self, case: str) -> "TrainConfig":
        if case not in CASES:
            raise ConfigError(f"unknown ablation case {case!r}; expected one of {sorted(CASES)}")
        pool, eal, fal = CASES[case]
        return replace(self, attn_pool=pool, eal=eal, fal=fal)

    def with_seed(self, seed: int) -> "TrainConfig":
        return replace(self, seed=int(seed))

    # -- serialization ---------------------------------------------------

    def to_dict(self) -> dict:
        gen = asdict(self.data.gen)
        gen["weights"] = list(gen["weights"])
        return {
            "train": {f: getattr(self, f) for f in _TRAIN_KEYS},
            "ablation": {"attn_pool": self.attn_pool, "eal": self.eal, "fal": self.fal},
            "align": asdict(self.align),
            "model": asdict(self.model),
            "data": {"n_train": self.data.n_train, "n_test": self.data.n_test,
                     "seed": self.data.seed, **gen},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = d or {}
        unknown = set(d) - {"train", "ablation", "align", "model", "data"}
        if unknown:
            raise ConfigError(f"unknown config section(s): {sorted(unknown)}")
        try:
            train = _section(d, "train", _TRAIN_KEYS)
            abl = _section(d, "ablation", ("attn_pool", "eal", "fal"))
            align = AlignmentConfig(**_section(d, "align", _names(AlignmentConfig)))
            model = ModelDims(**_section(d, "model", _names(ModelDims)))
            data_raw = _section(d, "data", ("n_train", "n_test", "seed") + _names(GenConfig))
            gen_kw = {k: v for k, v in data_raw.items() if k in _names(GenConfig)}
            if "image_size" in gen_kw and "image_size" not in d.get("model", {}):
                model = replace(model, image_size=gen_kw["image_size"])
            if "patch_size" in gen_kw and "patch_size" not in d.get("model", {}):
                model = replace(model, patch_size=gen_kw["patch_size"])
            data = DataConfig(**{k: v for k, v in data_raw.items() if k not in gen_kw},
                              gen=GenConfig(**gen_kw))
            cfg = cls(**train, **abl, align=align, model=model, data=data)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        _check_types(cfg)
        return cfg

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


_TRAIN_KEYS = ("epochs", "batch_size", "lr0", "lr_min", "weight_decay",
               "beta1", "beta2", "eps", "seed")


def _names(cls) -> tuple[str, ...]:
    return tuple(f.name for f in fields(cls))


def _section(d: dict, name: str, allowed) -> dict:
    sec = d.get(name, {}) or {}
    if not isinstance(sec, dict):
        raise ConfigError(f"section {name!r} must be a mapping")
    unknown = set(sec) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in section {name!r}: {sorted(unknown)}")
    return dict(sec)


def _check_types(cfg: TrainConfig) -> None:
    def check(obj, prefix):
        for f in fields(obj):
            value = getattr(obj, f.name)
            default = f.default
            if hasattr(value, "__dataclass_fields__"):
                check(value, f"{prefix}{f.name}.")
                continue
            if isinstance(default, bool) and not isinstance(value, bool):
                raise ConfigError(f"{prefix}{f.name} must be a boolean")
            if isinstance(default, int) and not isinstance(default, bool) and (
                    isinstance(value, bool) or not isinstance(value, int)):
                raise ConfigError(f"{prefix}{f.name} must be an integer")
            if isinstance(default, float) and (
                    isinstance(value, bool) or not isinstance(value, (int, float))):
                raise ConfigError(f"{prefix}{f.name} must be a number")
    check(cfg, "")


def parse_override(item: str) -> tuple[list[str], object]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    path = [p for p in key.strip().split(".") if p]
    if not path:
        raise ConfigError(f"empty key in override {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return path, value


def apply_overrides(d: dict, overrides) -> dict:
    """Return a copy of the nested dict with ``section.key=value`` items applied."""
    out = copy.deepcopy(d)
    for item in overrides or ():
        path, value = parse_override(item)
        node = out
        for p in path[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {item!r} descends into a non-section")
        node[path[-1]] = value
    return out


def load_config(path=None, overrides=()) -> TrainConfig:
    raw: dict = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise OSError(f"cannot read config {path}: {exc.strerror or exc}") from exc
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    cfg = TrainConfig.from_dict(apply_overrides(raw, overrides))
    cfg.validate()
    return cfg


def benchmark_config() -> TrainConfig:
    """The bundled desk-scale benchmark (M=256, r=8, 2000/500 samples, 20 epochs)."""
    text = resources.files("d2s").joinpath("configs/benchmark.json").read_text(encoding="utf-8")
    cfg = TrainConfig.from_dict(json.loads(text))
    cfg.validate()
    return cfg
