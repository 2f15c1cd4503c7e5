"""Synthetic multimodal token data and the missing-modality protocol.

Each sample belongs to a class ``y`` and a fine-grained subtype ``s`` shared
by all of its modalities.  Every token position independently carries

* with probability ``rho``: one of the signature tokens of concept ``(y, s)``
  in that modality (so each modality alone identifies the class), or
* otherwise a code token: the first modality holds a random key ``k`` and the
  others hold ``(y + k) mod C`` (only the joint identifies the class).

A fraction ``noise`` of positions is then overwritten with uniform noise
tokens.  Because subtypes are shared across modalities, the observed
modality tells which prototypes of a missing modality are relevant.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import InputError

COMPLETE: frozenset = frozenset()


@dataclass(frozen=True)
class Sample:
    id: int
    tokens: Mapping[str, tuple[int, ...]]
    label: int
    pattern: frozenset = COMPLETE

    @property
    def text_tokens(self) -> tuple[int, ...]:
        return self.tokens["text"]

    @property
    def image_tokens(self) -> tuple[int, ...]:
        return self.tokens["image"]

    @property
    def observed(self) -> tuple[str, ...]:
        return tuple(m for m in self.tokens if m not in self.pattern)

    def to_json(self) -> dict:
        row = {"id": self.id}
        row.update({m: list(t) for m, t in self.tokens.items()})
        row["label"] = self.label
        return row


def pattern_name(pattern: Iterable[str]) -> str:
    pattern = sorted(pattern)
    return "complete" if not pattern else "+".join(pattern) + "_missing"


def parse_pattern(name: str) -> frozenset:
    if name == "complete":
        return COMPLETE
    if not name.endswith("_missing"):
        raise InputError(f"unknown missing pattern {name!r}")
    return frozenset(name[: -len("_missing")].split("+"))


@dataclass(frozen=True)
class GenConfig:
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
    modalities: tuple[str, ...] = ("text", "image")
    seed: int = 0

    @property
    def vocab_size(self) -> int:
        """Token ids per modality, excluding the reserved placeholder id."""
        return self.num_classes * self.n_subtypes * self.tokens_per_concept + self.num_classes + self.noise_tokens

    @property
    def placeholder_id(self) -> int:
        return self.vocab_size

    def validate(self) -> None:
        if min(self.n_train, self.n_val, self.n_test) < 1:
            raise InputError("split sizes must be positive")
        if not 0.0 <= self.rho <= 1.0 or not 0.0 <= self.noise <= 1.0:
            raise InputError("rho and noise must lie in [0, 1]")
        if len(self.modalities) < 2 or len(set(self.modalities)) != len(self.modalities):
            raise InputError("need at least two distinct modalities")
        if self.num_classes < 2 or self.seq_len < 1:
            raise InputError("need num_classes >= 2 and seq_len >= 1")


@dataclass
class SyntheticData:
    config: GenConfig
    splits: dict[str, list[Sample]] = field(default_factory=dict)

    @property
    def modalities(self) -> tuple[str, ...]:
        return self.config.modalities

    def __getitem__(self, split: str) -> list[Sample]:
        return self.splits[split]


def _draw_split(cfg: GenConfig, n: int, rng: np.random.Generator, signatures) -> list[Sample]:
    C, S = cfg.num_classes, cfg.n_subtypes
    code_base = C * S * cfg.tokens_per_concept
    noise_base = code_base + C
    labels = rng.permutation(np.arange(n) % C)
    subtypes = rng.integers(0, S, size=n)
    keys = rng.integers(0, C, size=n)
    samples = []
    for i in range(n):
        y, s, k = int(labels[i]), int(subtypes[i]), int(keys[i])
        tokens = {}
        for mi, m in enumerate(cfg.modalities):
            sig = signatures[m][y * S + s]
            use_sig = rng.random(cfg.seq_len) < cfg.rho
            code = code_base + (k if mi == 0 else (y + k) % C)
            toks = np.where(use_sig, rng.choice(sig, size=cfg.seq_len), code)
            if cfg.noise_tokens:
                noisy = rng.random(cfg.seq_len) < cfg.noise
                toks = np.where(noisy, noise_base + rng.integers(0, cfg.noise_tokens, size=cfg.seq_len), toks)
            tokens[m] = tuple(int(t) for t in toks)
        samples.append(Sample(id=i, tokens=tokens, label=y))
    return samples


def generate_synthetic(cfg: GenConfig) -> SyntheticData:
    """Draw train/val/test splits; fully determined by ``cfg.seed``."""
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    n_concepts = cfg.num_classes * cfg.n_subtypes
    signatures = {}
    for m in cfg.modalities:
        perm = rng.permutation(n_concepts * cfg.tokens_per_concept)
        signatures[m] = perm.reshape(n_concepts, cfg.tokens_per_concept)
    splits = {}
    for split, n in (("train", cfg.n_train), ("val", cfg.n_val), ("test", cfg.n_test)):
        splits[split] = _draw_split(cfg, n, rng, signatures)
    return SyntheticData(config=cfg, splits=splits)


# -- missing tables --------------------------------------------------------

@dataclass(frozen=True)
class MissingTable:
    assignments: Mapping[int, frozenset]
    eta: float
    kind: str
    seed: int

    def __getitem__(self, sample_id: int) -> frozenset:
        return self.assignments[sample_id]

    def __len__(self) -> int:
        return len(self.assignments)

    def count(self, pattern: Iterable[str]) -> int:
        pattern = frozenset(pattern)
        return sum(1 for p in self.assignments.values() if p == pattern)

    def to_json(self) -> str:
        body = {
            "eta": self.eta,
            "kind": self.kind,
            "seed": self.seed,
            "assignments": {str(i): pattern_name(p) for i, p in sorted(self.assignments.items())},
        }
        return json.dumps(body, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MissingTable":
        body = json.loads(text)
        return cls(
            assignments={int(i): parse_pattern(p) for i, p in body["assignments"].items()},
            eta=body["eta"],
            kind=body["kind"],
            seed=body["seed"],
        )


def missing_groups(kind: str, modalities: Sequence[str]) -> list[frozenset]:
    """Missing patterns that share the missing rate for a given table kind."""
    if kind in modalities:
        return [frozenset([kind])]
    if kind in ("both", "single"):
        return [frozenset([m]) for m in modalities]
    if kind == "double" and len(modalities) >= 3:
        return [frozenset(modalities) - {m} for m in modalities]
    raise InputError(f"unknown missing kind {kind!r} for modalities {tuple(modalities)}")


def build_missing_table(n: int, eta: float, kind: str, seed: int,
                        modalities: Sequence[str] = ("text", "image")) -> MissingTable:
    """Assign a missing pattern to sample ids ``0..n-1`` by a seeded shuffle.

    Each missing group receives ``floor(n * eta / (100 * groups))`` samples;
    the rest stay complete.
    """
    if not 0 <= eta <= 100:
        raise InputError(f"missing rate must lie in [0, 100], got {eta}")
    if n < 0:
        raise InputError("n must be non-negative")
    groups = missing_groups(kind, modalities)
    per_group = math.floor(n * eta / (100 * len(groups)) + 1e-9)
    order = np.random.default_rng(seed).permutation(n)
    assignments = {int(i): COMPLETE for i in range(n)}
    for g, pattern in enumerate(groups):
        for i in order[g * per_group:(g + 1) * per_group]:
            assignments[int(i)] = pattern
    return MissingTable(assignments=assignments, eta=eta, kind=kind, seed=seed)


def apply_missing(sample: Sample, pattern: Iterable[str], placeholder: int | Mapping[str, int]) -> Sample:
    """Replace every token of each missing modality by its placeholder id."""
    pattern = frozenset(pattern)
    unknown = pattern - set(sample.tokens)
    if unknown:
        raise InputError(f"pattern names unknown modalities {sorted(unknown)}")
    if len(pattern) == len(sample.tokens):
        raise InputError("a sample must keep at least one observed modality")
    tokens = {}
    for m, toks in sample.tokens.items():
        if m in pattern:
            pid = placeholder[m] if isinstance(placeholder, Mapping) else placeholder
            toks = (pid,) * len(toks)
        tokens[m] = toks
    return replace(sample, tokens=tokens, pattern=pattern | sample.pattern)


def mask_split(samples: Sequence[Sample], table: MissingTable, placeholder) -> list[Sample]:
    return [apply_missing(s, table[s.id], placeholder) for s in samples]


# -- files -----------------------------------------------------------------

def write_jsonl(path, samples: Iterable[Sample]) -> None:
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_json()) + "\n")


def read_jsonl(path, modalities: Sequence[str]) -> list[Sample]:
    out = []
    with open(path) as fh:
        for line in fh:
            if not line.strip():
                continue
            row = json.loads(line)
            out.append(Sample(id=row["id"], tokens={m: tuple(row[m]) for m in modalities}, label=row["label"]))
    return out


def save_data(directory, data: SyntheticData) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split, samples in data.splits.items():
        write_jsonl(directory / f"{split}.jsonl", samples)
    meta = {k: (list(v) if isinstance(v, tuple) else v) for k, v in data.config.__dict__.items()}
    (directory / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True))


def load_data(directory) -> SyntheticData:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text())
    meta["modalities"] = tuple(meta["modalities"])
    cfg = GenConfig(**meta)
    splits = {split: read_jsonl(directory / f"{split}.jsonl", cfg.modalities)
              for split in ("train", "val", "test")}
    return SyntheticData(config=cfg, splits=splits)
