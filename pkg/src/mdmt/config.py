"""Experiment configuration: strict JSON loading, presets and hashing."""
from __future__ import annotations

import copy
import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass
from pathlib import Path

from .datagen import DomainSpec
from .exceptions import ConfigError
from .network import ArchConfig
from .trainer import STRATEGY_ORDER, Strategy, TrainConfig

CONFIG_VERSION = 1

# TrainConfig fields that come from elsewhere in the experiment config
_TRAIN_EXCLUDED = {"strategy", "arch", "seed"}


@dataclass(frozen=True)
class SplitConfig:
    fractions: tuple[float, float, float] = (0.6, 0.15, 0.25)
    seed: int = 0
    stratify: bool = False

    def __post_init__(self):
        object.__setattr__(self, "fractions", tuple(float(f) for f in self.fractions))
        if len(self.fractions) != 3 or min(self.fractions) < 0 or abs(sum(self.fractions) - 1) > 1e-9:
            raise ConfigError(f"fractions {self.fractions} must be three non-negatives summing to 1")


@dataclass(frozen=True)
class ExperimentConfig:
    domain1: DomainSpec
    domain2: DomainSpec
    split1: SplitConfig
    split2: SplitConfig
    arch: ArchConfig
    train: dict
    strategies: tuple[Strategy, ...] = STRATEGY_ORDER
    seeds: tuple[int, ...] = (0,)
    output_dir: str = "mdmt-out"
    jobs: int = 1

    def __post_init__(self):
        if self.domain1.domain_id != 1 or self.domain2.domain_id != 2:
            raise ConfigError("domains.domain1/domain2 must have domain_id 1 and 2")
        if self.domain1.shape != self.arch.input_shape or self.domain2.shape != self.arch.input_shape:
            raise ConfigError(
                f"domain shapes {self.domain1.shape}/{self.domain2.shape} must equal "
                f"arch.input_shape {self.arch.input_shape}")
        if not self.seeds:
            raise ConfigError("seeds must be a non-empty list")
        if not self.strategies:
            raise ConfigError("strategies must be a non-empty list")
        if self.jobs < 1:
            raise ConfigError("jobs must be >= 1")
        self.train_config(self.strategies[0], self.seeds[0])

    def train_config(self, strategy, seed: int) -> TrainConfig:
        try:
            return TrainConfig(strategy=Strategy(strategy), arch=self.arch, seed=int(seed), **self.train)
        except ConfigError:
            raise
        except ValueError as exc:
            raise ConfigError(f"train: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "format_version": CONFIG_VERSION,
            "domains": {"domain1": self.domain1.to_dict(), "domain2": self.domain2.to_dict()},
            "splits": {"domain1": _split_dict(self.split1), "domain2": _split_dict(self.split2)},
            "arch": self.arch.to_dict(),
            "train": _jsonable(self.train),
            "strategies": [Strategy(s).value for s in self.strategies],
            "seeds": list(self.seeds),
            "output_dir": self.output_dir,
            "jobs": self.jobs,
        }

    def data_hash(self) -> str:
        d = self.to_dict()
        return _hash({"domains": d["domains"], "splits": d["splits"]})

    def config_hash(self) -> str:
        """Hash of everything that affects a single run (not seeds, strategies or paths)."""
        d = self.to_dict()
        return _hash({k: d[k] for k in ("format_version", "domains", "splits", "arch", "train")})


def _split_dict(s: SplitConfig) -> dict:
    return {"fractions": list(s.fractions), "seed": s.seed, "stratify": s.stratify}


def _jsonable(value):
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    return value


def _hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# -- presets ----------------------------------------------------------------

def _desk_default() -> dict:
    return {
        "format_version": CONFIG_VERSION,
        "domains": {
            "domain1": {
                "domain_id": 1, "n_patients": 120, "shape": [16, 16, 8],
                "noise_mean": 0.0, "noise_std": 1.0, "intensity_offset": 0.0,
                "blob_count": [1, 3], "blob_radius": [1.5, 2.5],
                "blob_delta": 1.0, "metastatic_delta": 2.0, "metastatic_count": [1, 1],
                "positive_fraction": 0.5, "seed": 11,
            },
            "domain2": {
                "domain_id": 2, "n_patients": 100, "shape": [16, 16, 8],
                "noise_mean": 0.0, "noise_std": 1.0, "intensity_offset": 0.5,
                "blob_count": [2, 4], "blob_radius": [1.5, 2.5],
                "blob_delta": 1.0, "metastatic_delta": 2.0, "metastatic_count": [1, 1],
                "positive_fraction": 0.5, "seed": 12,
            },
        },
        "splits": {
            "domain1": {"fractions": [0.3, 0.25, 0.45], "seed": 1, "stratify": True},
            "domain2": {"fractions": [0.6, 0.15, 0.25], "seed": 2, "stratify": False},
        },
        "arch": ArchConfig().to_dict(),
        "train": {
            "epochs": 25, "learning_rate": 3e-3, "batch_size": 4, "zeta": 0.8,
            "warmup_epochs": 10, "pseudo_weight": 1.0, "propagation_period": 1,
            "domain2_splits": ["train", "val"],
        },
        "strategies": [s.value for s in STRATEGY_ORDER],
        "seeds": [0, 1, 2, 3, 4],
        "output_dir": "mdmt-out/desk_default",
        "jobs": 1,
    }


def _paper_scale_reference() -> dict:
    # 512x512x256 volumes, 5 dense blocks -> 16x16x8 embedding; expressible, not exercised
    cfg = _desk_default()
    shape = [512, 512, 256]
    for key, n in (("domain1", 123), ("domain2", 85)):
        d = cfg["domains"][key]
        d.update({"n_patients": n, "shape": shape, "blob_radius": [4.0, 8.0]})
    cfg["domains"]["domain1"]["positive_fraction"] = 57 / 123
    cfg["domains"]["domain2"]["blob_count"] = [3, 11]
    cfg["splits"]["domain1"]["fractions"] = [90 / 123, 10 / 123, 23 / 123]
    cfg["splits"]["domain2"]["fractions"] = [62 / 85, 7 / 85, 16 / 85]
    cfg["arch"].update({"input_shape": shape, "num_blocks": 5, "base_channels": 8,
                        "growth": 8, "fc_hidden": 64})
    cfg["train"].update({"epochs": 500, "learning_rate": 0.05, "warmup_epochs": 10,
                         "domain2_splits": ["train", "val", "test"]})
    cfg["seeds"] = [0]
    cfg["output_dir"] = "mdmt-out/paper_scale_reference"
    return cfg


PRESETS = {
    "desk_default": _desk_default,
    "paper_scale_reference": _paper_scale_reference,
}


def preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[name]()


# -- strict loading -----------------------------------------------------------

def _deep_merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _check_type(value, hint, path: str):
    origin = typing.get_origin(hint)
    if hint is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string, got {value!r}")
        return value
    if origin is tuple:
        args = typing.get_args(hint)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path}: expected a list, got {value!r}")
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_check_type(v, args[0], f"{path}[{i}]") for i, v in enumerate(value))
        if len(value) != len(args):
            raise ConfigError(f"{path}: expected {len(args)} entries, got {len(value)}")
        return tuple(_check_type(v, a, f"{path}[{i}]") for i, (v, a) in enumerate(zip(value, args)))
    if isinstance(hint, type) and issubclass(hint, Strategy):
        try:
            return Strategy(value)
        except ValueError:
            raise ConfigError(
                f"{path}: unknown strategy {value!r}; choose from {[s.value for s in Strategy]}") from None
    return value


def _build(cls, data, path: str, skip: set[str] = frozenset(), partial: bool = False):
    """Construct dataclass ``cls`` from ``data``, rejecting unknown or mistyped keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected an object")
    fields = {f.name: f for f in dataclasses.fields(cls) if f.name not in skip}
    hints = typing.get_type_hints(cls)
    for key in data:
        if key not in fields:
            raise ConfigError(f"{path}.{key}: unknown key")
    kwargs = {}
    for name, f in fields.items():
        if name in data:
            kwargs[name] = _check_type(data[name], hints[name], f"{path}.{name}")
        elif f.default is dataclasses.MISSING and f.default_factory is dataclasses.MISSING:
            raise ConfigError(f"{path}.{name}: missing required field")
    if partial:
        return kwargs
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


_TOP_LEVEL = {"format_version", "preset", "domains", "splits", "arch", "train",
              "strategies", "seeds", "output_dir", "jobs"}
_REQUIRED = ("domains", "splits", "arch", "train")


def from_dict(data: dict) -> ExperimentConfig:
    """Validate a raw config mapping; a ``preset`` key supplies defaults."""
    if not isinstance(data, dict):
        raise ConfigError("config must be a JSON object")
    if "preset" in data:
        data = _deep_merge(preset(data["preset"]), {k: v for k, v in data.items() if k != "preset"})
    for key in data:
        if key not in _TOP_LEVEL:
            raise ConfigError(f"{key}: unknown key")
    for key in _REQUIRED:
        if key not in data:
            raise ConfigError(f"{key}: missing required field")
    version = data.get("format_version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"format_version: {version} is not supported (expected {CONFIG_VERSION})")
    for section, names in (("domains", ("domain1", "domain2")), ("splits", ("domain1", "domain2"))):
        if not isinstance(data[section], dict):
            raise ConfigError(f"{section}: expected an object")
        for key in data[section]:
            if key not in names:
                raise ConfigError(f"{section}.{key}: unknown key")
        for key in names:
            if key not in data[section]:
                raise ConfigError(f"{section}.{key}: missing required field")
    d1 = _build(DomainSpec, data["domains"]["domain1"], "domains.domain1")
    d2 = _build(DomainSpec, data["domains"]["domain2"], "domains.domain2")
    s1 = _build(SplitConfig, data["splits"]["domain1"], "splits.domain1")
    s2 = _build(SplitConfig, data["splits"]["domain2"], "splits.domain2")
    arch = _build(ArchConfig, data["arch"], "arch")
    train = _build(TrainConfig, data["train"], "train", skip=_TRAIN_EXCLUDED, partial=True)
    strategies = _check_type(data.get("strategies", [s.value for s in STRATEGY_ORDER]),
                             tuple[Strategy, ...], "strategies")
    seeds = _check_type(data.get("seeds", [0]), tuple[int, ...], "seeds")
    output_dir = _check_type(data.get("output_dir", "mdmt-out"), str, "output_dir")
    jobs = _check_type(data.get("jobs", 1), int, "jobs")
    return ExperimentConfig(domain1=d1, domain2=d2, split1=s1, split2=s2, arch=arch, train=train,
                            strategies=strategies, seeds=seeds, output_dir=output_dir, jobs=jobs)


def load_config(path) -> dict:
    """Read a JSON config file into a raw mapping (validated later by :func:`from_dict`)."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def apply_override(data: dict, assignment: str) -> dict:
    """Apply ``dotted.key=value``; ``value`` is parsed as JSON, falling back to a string."""
    key, sep, raw = assignment.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {assignment!r} must look like key.path=value")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    out = copy.deepcopy(data)
    node = out
    parts = key.split(".")
    for p in parts[:-1]:
        nxt = node.get(p)
        if not isinstance(nxt, dict):
            nxt = {}
            node[p] = nxt
        node = nxt
    node[parts[-1]] = value
    return out
