"""Run configuration: YAML file plus ``--section.key value`` overrides."""

from __future__ import annotations

import copy
from dataclasses import replace
from pathlib import Path

import yaml

from .data import Dataset, load_jsonl, make_synthetic_task
from .errors import ConfigError, DataError
from .harness import BenchSettings
from .model import ModelConfig
from .suite import HELDOUT_SPECS, PRETRAIN_SPECS, spec_by_name
from .training import OptimizerConfig
from .tuning import TuneConfig
from .vocab import Vocabulary

SECTIONS = ("model", "optim", "tune", "bench", "data", "run")


def default_config():
    optim = OptimizerConfig().to_dict()
    optim["warmup_steps"] = None  # 5% of whatever total_steps ends up being
    return {
        "model": ModelConfig().to_dict(),
        "optim": optim,
        "tune": TuneConfig().to_dict(),
        "bench": BenchSettings().to_dict(),
        "data": {
            "pretrain": [{"task": s.task_id, "train": f"synthetic:{s.task_id}:train_pool",
                          "target": n} for s, n in PRETRAIN_SPECS],
            "heldout": [{"task": s.task_id, "train": f"synthetic:{s.task_id}:train_pool",
                         "test": f"synthetic:{s.task_id}:test"} for s in HELDOUT_SPECS],
        },
        "run": {"seed": 0, "log_level": "INFO"},
    }


def flat_keys(cfg=None):
    cfg = default_config() if cfg is None else cfg
    return [f"{section}.{key}" for section in SECTIONS for key in cfg[section]]


def load_config(path=None, overrides=None):
    """Defaults, then the YAML file at ``path``, then ``{"section.key": value}``.

    Unknown sections or keys are configuration errors, so a typo never
    silently falls back to a default.
    """
    cfg = default_config()
    if path is not None:
        try:
            loaded = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"{path}: not valid YAML ({err})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        for section, values in loaded.items():
            if section not in cfg:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"section {section!r} must be a mapping")
            for key, value in values.items():
                _set(cfg, section, key, value)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        if section not in cfg:
            raise ConfigError(f"unknown config section {section!r}")
        _set(cfg, section, key, value)
    return cfg


def _set(cfg, section, key, value):
    if key not in cfg[section]:
        raise ConfigError(f"unknown config key {section}.{key}")
    cfg[section][key] = _coerce(cfg[section][key], value, f"{section}.{key}")


def _number(text):
    # YAML 1.1 reads "1e-3" as a string; accept it as a float
    try:
        return int(text)
    except ValueError:
        return float(text)


def _coerce(default, value, name):
    """Match ``value`` to the type of the default it replaces."""
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError
            return value
        if isinstance(default, float) and isinstance(value, (int, float, str)):
            return float(_number(value) if isinstance(value, str) else value)
        if isinstance(default, int) and isinstance(value, (int, str)):
            out = _number(value) if isinstance(value, str) else value
            if out != int(out):
                raise ValueError
            return int(out)
        if default is None and isinstance(value, str):
            try:
                return _number(value)
            except ValueError:
                return value
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot use {value!r} where "
                          f"{type(default).__name__} is expected") from None
    return value


def parse_value(text):
    """Command-line values are YAML: ``1e-3``, ``true``, ``[10, 100]``."""
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def model_config(cfg):
    return ModelConfig.from_dict(cfg["model"])


def optimizer_config(cfg):
    return OptimizerConfig.from_dict(cfg["optim"])


def tune_config(cfg, **changes):
    d = dict(cfg["tune"])
    d.update(changes)
    from .tuning import InitStrategy
    d["init"] = InitStrategy.parse(d["init"])
    return TuneConfig(**d).validate()


def bench_settings(cfg):
    return BenchSettings.from_dict(cfg["bench"])


def load_dataset(source, task_id, split):
    """``synthetic:<task>:<split>`` or a JSONL path."""
    if isinstance(source, str) and source.startswith("synthetic:"):
        _, name, which = (source.split(":") + [split])[:3]
        try:
            spec = spec_by_name(name)
        except KeyError as err:
            raise DataError(str(err)) from None
        train, test = make_synthetic_task(spec)
        ds = train if which == "train_pool" else test
        return Dataset(task_id, ds.split, ds.examples)
    return load_jsonl(source, task_id=task_id, split=split)


def data_files(cfg):
    """JSONL paths referenced by the data section (synthetic sources excluded)."""
    sources = [e["train"] for e in cfg["data"]["pretrain"]]
    sources += [e[k] for e in cfg["data"]["heldout"] for k in ("train", "test")]
    return [s for s in sources if not str(s).startswith("synthetic:")]


def pretrain_datasets(cfg):
    out = []
    for entry in cfg["data"]["pretrain"]:
        ds = load_dataset(entry["train"], entry["task"], "train_pool")
        out.append((entry["task"], ds, entry.get("target")))
    return out


def heldout_datasets(cfg):
    return [(load_dataset(e["train"], e["task"], "train_pool"),
             load_dataset(e["test"], e["task"], "test")) for e in cfg["data"]["heldout"]]


def build_vocabulary(cfg):
    """Every token in the configured training pools, pre-training and held-out."""
    texts = []
    for _, ds, _ in pretrain_datasets(cfg):
        texts += [t for ex in ds for t in (ex.source_text, *ex.summary)]
    for train, _ in heldout_datasets(cfg):
        texts += [t for ex in train for t in (ex.source_text, *ex.summary)]
    return Vocabulary.build(texts)


def resolved(cfg, vocab):
    """Copy of ``cfg`` with ``model.vocab_size`` pinned to the vocabulary."""
    out = copy.deepcopy(cfg)
    out["model"] = replace(model_config(cfg), vocab_size=len(vocab)).to_dict()
    return out
