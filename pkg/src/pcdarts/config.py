"""TOML run configuration.

Sections map onto the package modules::

    [tensor]        dtype
    [ops]           ops, bn_affine
    [search_space]  K, nodes, layers, C0, stem_multiplier, partial_channel,
                    edge_normalization, mask_mode
    [engine]        epochs, warm_up_epochs, batch_size, seed, w_lr, w_momentum,
                    w_weight_decay, a_lr, a_betas, a_weight_decay
    [genotype]      keep_zero, score
    [data]          source, classes, resolution, count, noise, seed,
                    cifar_dir, limit, mean, std, augment, augment_pad

Unknown sections or keys are rejected so typos never pass silently.
"""
from __future__ import annotations

import hashlib
import json
import sys
from dataclasses import asdict, dataclass, fields

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from . import data as data_mod
from .engine import SearchConfig


class ConfigError(ValueError):
    pass


# section -> {toml key: SearchConfig field}
_SEARCH_KEYS = {
    "tensor": {"dtype": "dtype"},
    "ops": {"ops": "ops", "bn_affine": "bn_affine"},
    "search_space": {k: k for k in ("K", "nodes", "layers", "C0", "stem_multiplier", "partial_channel",
                                    "edge_normalization", "mask_mode")},
    "engine": {k: k for k in ("epochs", "warm_up_epochs", "batch_size", "seed", "w_lr", "w_momentum",
                              "w_weight_decay", "a_lr", "a_betas", "a_weight_decay")},
    "genotype": {"keep_zero": "keep_zero", "score": "derive_score"},
    "data": {"augment": "augment", "augment_pad": "augment_pad"},
}


@dataclass
class DataConfig:
    source: str = "synthetic"
    classes: int = 2
    resolution: int = 8
    count: int = 2000
    noise: float = 1.0
    seed: int = 0
    cifar_dir: str = ""
    limit: int = 0
    mean: tuple = data_mod.CIFAR_MEAN
    std: tuple = data_mod.CIFAR_STD

    def __post_init__(self):
        self.mean, self.std = tuple(self.mean), tuple(self.std)
        if self.source not in ("synthetic", "cifar10"):
            raise ConfigError(f"[data] source must be 'synthetic' or 'cifar10', got {self.source!r}")
        if self.source == "cifar10" and not self.cifar_dir:
            raise ConfigError("[data] source 'cifar10' needs cifar_dir")


_DATA_ONLY = {f.name for f in fields(DataConfig)}


@dataclass
class RunConfig:
    search: SearchConfig
    data: DataConfig

    def snapshot(self) -> dict:
        d = asdict(self.data)
        d["mean"], d["std"] = list(self.data.mean), list(self.data.std)
        return {"search": self.search.to_dict(), "data": d}

    def content_hash(self) -> str:
        """Git blob hash of the canonical JSON snapshot."""
        body = json.dumps(self.snapshot(), sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha1(b"blob %d\0" % len(body) + body).hexdigest()

    def load_dataset(self):
        d = self.data
        if d.source == "synthetic":
            return data_mod.make_synthetic(d.classes, d.resolution, d.count, d.seed, d.noise)
        return data_mod.read_cifar10(d.cifar_dir, mean=d.mean, std=d.std, limit=d.limit or None)


def parse_config(doc: dict) -> RunConfig:
    search, data = {}, {}
    for section, body in doc.items():
        if section not in _SEARCH_KEYS:
            raise ConfigError(f"unknown config section [{section}]")
        if not isinstance(body, dict):
            raise ConfigError(f"[{section}] must be a table")
        for key, value in body.items():
            if key in _SEARCH_KEYS[section]:
                search[_SEARCH_KEYS[section][key]] = value
            elif section == "data" and key in _DATA_ONLY:
                data[key] = value
            else:
                raise ConfigError(f"unknown key {key!r} in [{section}]")
    try:
        return RunConfig(SearchConfig.from_dict(search), DataConfig(**data))
    except (TypeError, KeyError) as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path) -> RunConfig:
    try:
        with open(path, "rb") as fh:
            doc = tomllib.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config {path} is not valid TOML: {exc}") from None
    return parse_config(doc)
