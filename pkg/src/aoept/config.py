"""Run configuration: a flat dataclass read from and written to a strict sectioned INI file."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Callable

from .backbone import BackboneConfig
from .dataset import GenConfig
from .errors import ConfigError
from .mcp import METHODS
from .tuner import TrainConfig

AUTO = "auto"


@dataclass(frozen=True)
class RunConfig:
    # [data]
    n_train: int = 480
    n_val: int = 160
    n_test: int = 400
    num_classes: int = 4
    n_subtypes: int = 4
    tokens_per_concept: int = 2
    noise_tokens: int = 8
    seq_len: int = 8
    rho: float = 0.9
    noise: float = 0.3
    modalities: tuple = ("text", "image")
    data_seed: int = 0
    # [backbone]
    layers: int = 4
    d_model: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    backbone_seed: int = 0
    pretrain_epochs: int = 10
    pretrain_lr: float = 3e-3
    pretrain_wd: float = 1e-2
    # [missing]
    kind: str = "text"
    eta_train: float = 70.0
    eta_test: float = 70.0
    table_seeds: tuple = (0, 1, 2)
    # [train]
    method: str = "attention"
    refine: str = "kmeans"
    n_proto: int = 64
    pool_window: int = 4
    kmeans_iters: int = 300
    M: int = 16
    N: Any = AUTO
    reduction: int = 4
    lr: float = 1e-2
    wd: float = 2e-2
    epochs: int = 20
    batch_size: int = 32
    tau: float = 0.1
    lambda_cr: float = 1.0
    prompt_seed: int = 0
    # [sweep]
    sweep_etas: tuple = (90.0, 70.0, 50.0, 30.0, 10.0)
    sweep_eta_test: float = 90.0
    sweep_seeds: tuple = (0, 1, 2)

    @property
    def depth(self) -> int:
        return min(6, self.layers - 1) if self.N == AUTO else int(self.N)

    def gen_config(self, seed: int | None = None) -> GenConfig:
        return GenConfig(n_train=self.n_train, n_val=self.n_val, n_test=self.n_test, num_classes=self.num_classes,
                         n_subtypes=self.n_subtypes, tokens_per_concept=self.tokens_per_concept,
                         noise_tokens=self.noise_tokens, seq_len=self.seq_len, rho=self.rho, noise=self.noise,
                         modalities=tuple(self.modalities), seed=self.data_seed if seed is None else seed)

    def backbone_config(self) -> BackboneConfig:
        g = self.gen_config()
        k = len(self.modalities)
        return BackboneConfig(L=self.layers, d=self.d_model, heads=self.heads, mlp_ratio=self.mlp_ratio,
                              num_classes=self.num_classes, modalities=tuple(self.modalities),
                              seq_lens=(self.seq_len,) * k, vocab_sizes=(g.vocab_size,) * k)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return TrainConfig(lr=self.lr, wd=self.wd, epochs=self.epochs, batch_size=self.batch_size, tau=self.tau,
                           lambda_cr=self.lambda_cr, M=self.M, N=self.depth, n_proto=self.n_proto,
                           method=self.method, refine=self.refine, pool_window=self.pool_window,
                           kmeans_iters=self.kmeans_iters, reduction=self.reduction,
                           seed=self.prompt_seed if seed is None else seed)

    def with_seed(self, seed: int) -> "RunConfig":
        """Point every non-table seed at ``seed``."""
        return dataclasses.replace(self, data_seed=seed, backbone_seed=seed, prompt_seed=seed)

    def to_dict(self) -> dict:
        return {f.name: list(v) if isinstance(v := getattr(self, f.name), tuple) else v for f in fields(self)}


SECTIONS: dict[str, tuple[str, ...]] = {
    "data": ("n_train", "n_val", "n_test", "num_classes", "n_subtypes", "tokens_per_concept", "noise_tokens",
             "seq_len", "rho", "noise", "modalities", "data_seed"),
    "backbone": ("layers", "d_model", "heads", "mlp_ratio", "backbone_seed", "pretrain_epochs", "pretrain_lr",
                 "pretrain_wd"),
    "missing": ("kind", "eta_train", "eta_test", "table_seeds"),
    "train": ("method", "refine", "n_proto", "pool_window", "kmeans_iters", "M", "N", "reduction", "lr", "wd",
              "epochs", "batch_size", "tau", "lambda_cr", "prompt_seed"),
    "sweep": ("sweep_etas", "sweep_eta_test", "sweep_seeds"),
}
_SECTION_OF = {key: sec for sec, keys in SECTIONS.items() for key in keys}


# -- value codecs ----------------------------------------------------------

def _int(text: str) -> int:
    return int(text)


def _float(text: str) -> float:
    v = float(text)
    if not math.isfinite(v):
        raise ValueError("not finite")
    return v


def _word(text: str) -> str:
    if not text or any(c.isspace() or c == "," for c in text):
        raise ValueError("expected a single word")
    return text


def _list(item: Callable) -> Callable:
    def parse(text: str) -> tuple:
        parts = [p.strip() for p in text.split(",")]
        if not text.strip() or any(not p for p in parts):
            raise ValueError("expected a comma-separated list")
        return tuple(item(p) for p in parts)
    return parse


def _int_or_auto(text: str):
    return AUTO if text == AUTO else int(text)


def _positive(v):
    return v > 0


def _nonneg(v):
    return v >= 0


def _percent(v):
    return 0 <= v <= 100


def _unit(v):
    return 0 <= v <= 1


# key -> (parser, check, description of the valid range)
_SPEC: dict[str, tuple[Callable, Callable | None, str]] = {
    "n_train": (_int, _positive, "> 0"),
    "n_val": (_int, _positive, "> 0"),
    "n_test": (_int, _positive, "> 0"),
    "num_classes": (_int, lambda v: v >= 2, ">= 2"),
    "n_subtypes": (_int, _positive, "> 0"),
    "tokens_per_concept": (_int, _positive, "> 0"),
    "noise_tokens": (_int, _nonneg, ">= 0"),
    "seq_len": (_int, _positive, "> 0"),
    "rho": (_float, _unit, "in [0, 1]"),
    "noise": (_float, lambda v: 0 <= v < 1, "in [0, 1)"),
    "modalities": (_list(_word), lambda v: len(v) >= 2 and len(set(v)) == len(v), "at least two distinct names"),
    "data_seed": (_int, _nonneg, ">= 0"),
    "layers": (_int, _positive, "> 0"),
    "d_model": (_int, _positive, "> 0"),
    "heads": (_int, _positive, "> 0"),
    "mlp_ratio": (_int, _positive, "> 0"),
    "backbone_seed": (_int, _nonneg, ">= 0"),
    "pretrain_epochs": (_int, _positive, "> 0"),
    "pretrain_lr": (_float, _positive, "> 0"),
    "pretrain_wd": (_float, _nonneg, ">= 0"),
    "kind": (_word, None, ""),
    "eta_train": (_float, _percent, "in [0, 100]"),
    "eta_test": (_float, _percent, "in [0, 100]"),
    "table_seeds": (_list(_int), lambda v: len(v) == 3 and min(v) >= 0, "three seeds >= 0"),
    "method": (_word, lambda v: v in METHODS, f"one of {', '.join(METHODS)}"),
    "refine": (_word, lambda v: v in ("kmeans", "pooling"), "kmeans or pooling"),
    "n_proto": (_int, _positive, "> 0"),
    "pool_window": (_int, _positive, "> 0"),
    "kmeans_iters": (_int, _positive, "> 0"),
    "M": (_int, _positive, "> 0"),
    "N": (_int_or_auto, lambda v: v == AUTO or v > 0, "> 0 or auto"),
    "reduction": (_int, _positive, "> 0"),
    "lr": (_float, _positive, "> 0"),
    "wd": (_float, _nonneg, ">= 0"),
    "epochs": (_int, _positive, "> 0"),
    "batch_size": (_int, _positive, "> 0"),
    "tau": (_float, _positive, "> 0"),
    "lambda_cr": (_float, _nonneg, ">= 0"),
    "prompt_seed": (_int, _nonneg, ">= 0"),
    "sweep_etas": (_list(_float), lambda v: all(_percent(x) for x in v), "values in [0, 100]"),
    "sweep_eta_test": (_float, _percent, "in [0, 100]"),
    "sweep_seeds": (_list(_int), lambda v: min(v) >= 0, "seeds >= 0"),
}


def _format(value) -> str:
    if isinstance(value, tuple):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_value(key: str, text: str, line: int | None = None):
    parser, check, rule = _SPEC[key]
    try:
        value = parser(text)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {text!r} as {_type_name(key)}", line) from None
    if check is not None and not check(value):
        raise ConfigError(f"{key} = {text} out of range (must be {rule})", line)
    return value


def _type_name(key: str) -> str:
    default = RunConfig.__dataclass_fields__[key].default
    if isinstance(default, tuple):
        return "a list"
    if key == "N":
        return "an integer or 'auto'"
    return {int: "an integer", float: "a number", str: "a word"}[type(default)]


def parse_text(text: str) -> RunConfig:
    """Parse INI text.  Unknown sections or keys, duplicates and bad values are errors."""
    values: dict[str, Any] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {line!r}", lineno)
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"unknown section [{section}]; expected one of {', '.join(SECTIONS)}", lineno)
            continue
        if "=" not in line:
            raise ConfigError(f"expected 'key = value', got {line!r}", lineno)
        key, _, val = (part.strip() for part in line.partition("="))
        if section is None:
            raise ConfigError(f"key {key!r} appears before any section header", lineno)
        if key not in _SPEC:
            raise ConfigError(f"unknown key {key!r}", lineno)
        if _SECTION_OF[key] != section:
            raise ConfigError(f"key {key!r} belongs in [{_SECTION_OF[key]}], not [{section}]", lineno)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", lineno)
        values[key] = parse_value(key, val, lineno)
    cfg = RunConfig(**values)
    validate(cfg)
    return cfg


def validate(cfg: RunConfig) -> None:
    """Cross-field checks that no single key can express."""
    if cfg.d_model % cfg.heads:
        raise ConfigError(f"d_model={cfg.d_model} is not divisible by heads={cfg.heads}")
    if cfg.depth > cfg.layers:
        raise ConfigError(f"prompt depth N={cfg.depth} exceeds layers={cfg.layers}")
    if cfg.depth < 1:
        raise ConfigError("prompt depth must be at least 1; set N explicitly for a one-layer backbone")
    valid_kinds = set(cfg.modalities) | {"both", "single"} | ({"double"} if len(cfg.modalities) >= 3 else set())
    if cfg.kind not in valid_kinds:
        raise ConfigError(f"kind={cfg.kind!r} must be one of {sorted(valid_kinds)}")


def parse_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    return parse_text(path.read_text())


def serialize(cfg: RunConfig) -> str:
    out = []
    for section, keys in SECTIONS.items():
        out.append(f"[{section}]")
        out += [f"{k} = {_format(getattr(cfg, k))}" for k in keys]
        out.append("")
    return "\n".join(out)


def override(cfg: RunConfig, **changes) -> RunConfig:
    """Apply validated overrides (e.g. from command-line flags); ``None`` values are ignored."""
    changes = {k: v for k, v in changes.items() if v is not None}
    for k, v in changes.items():
        if k not in _SPEC:
            raise ConfigError(f"unknown key {k!r}")
        parse_value(k, _format(v))
    new = dataclasses.replace(cfg, **{k: parse_value(k, _format(v)) for k, v in changes.items()})
    validate(new)
    return new
