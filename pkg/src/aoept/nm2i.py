"""Normalized mutual information between prompt tokens and missing-modality latents.

Every function works on the last two axes (``[..., K, J]`` joints), so a
batch of samples is scored in one call with the same arithmetic as a single
pair.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backbone import stack_tokens
from .dataset import MissingTable, Sample, mask_split
from .errors import InputError, ShapeError
from .tensor import _sigmoid, no_grad
from .tuner import prompt_forward


def _as_tokens(x) -> np.ndarray:
    x = np.asarray(getattr(x, "data", x), dtype=np.float64)
    if x.ndim < 2 or x.shape[-2] < 1:
        raise ShapeError(f"expected [..., tokens, d] with at least one token, got {x.shape}")
    return x


def joint_distribution(P, M) -> np.ndarray:
    """``sigmoid(<p_k, m_j>)`` normalized to sum to one over ``(k, j)``."""
    P, M = _as_tokens(P), _as_tokens(M)
    if P.shape[-1] != M.shape[-1]:
        raise ShapeError("prompt and modality tokens differ in width")
    phi = _sigmoid(P @ np.swapaxes(M, -1, -2))
    return phi / phi.sum(axis=(-2, -1), keepdims=True)


def marginals(joint) -> tuple[np.ndarray, np.ndarray]:
    joint = np.asarray(joint, dtype=np.float64)
    return joint.sum(axis=-1), joint.sum(axis=-2)


def entropy(dist, axis=-1) -> np.ndarray | float:
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    dist = np.asarray(dist, dtype=np.float64)
    if (dist < 0).any():
        raise InputError("probabilities must be non-negative")
    terms = np.where(dist > 0, -dist * np.log(np.where(dist > 0, dist, 1.0)), 0.0)
    out = terms.sum(axis=axis)
    return float(out) if np.ndim(out) == 0 else out


def mutual_information(joint) -> np.ndarray | float:
    joint = np.asarray(joint, dtype=np.float64)
    pp, pm = marginals(joint)
    outer = pp[..., :, None] * pm[..., None, :]
    pos = joint > 0
    ratio = np.where(pos, joint, 1.0) / np.where(pos, outer, 1.0)
    out = np.where(pos, joint * np.log(ratio), 0.0).sum(axis=(-2, -1))
    # MI is non-negative; clip round-off below zero
    out = np.maximum(out, 0.0)
    return float(out) if np.ndim(out) == 0 else out


def nm2i_from_joint(joint) -> np.ndarray | float:
    joint = np.asarray(joint, dtype=np.float64)
    pp, pm = marginals(joint)
    hp, hm = np.asarray(entropy(pp)), np.asarray(entropy(pm))
    mi = np.asarray(mutual_information(joint))
    denom = 0.5 * (hp + hm)
    out = np.where(denom > 0, mi / np.where(denom > 0, denom, 1.0), 0.0)
    out = np.clip(out, 0.0, 1.0)
    return float(out) if out.ndim == 0 else out


def nm2i(P, M) -> float:
    """NM²I of prompt tokens ``P [K, d]`` against modality tokens ``M [J, d]``."""
    return nm2i_from_joint(joint_distribution(P, M))


# -- report ----------------------------------------------------------------

@dataclass
class LayerStats:
    layer: int
    nm2i: float
    mi: float
    h_p: float
    h_m: float
    count: int

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Nm2iReport:
    model_tag: str
    eta: float
    kind: str
    per_layer: list[LayerStats]
    per_modality: dict[str, list[LayerStats]] = field(default_factory=dict)
    skipped_count: int = 0

    @property
    def mean(self) -> float:
        return float(np.mean([s.nm2i for s in self.per_layer])) if self.per_layer else 0.0

    def to_json(self) -> dict:
        return {
            "model_tag": self.model_tag,
            "eta": self.eta,
            "kind": self.kind,
            "per_layer": [s.to_json() for s in self.per_layer],
            "per_modality": {m: {"per_layer": [s.to_json() for s in v],
                                 "mean": float(np.mean([s.nm2i for s in v]))}
                             for m, v in self.per_modality.items()},
            "mean": self.mean,
            "skipped_count": self.skipped_count,
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))


def _summarize(layer: int, rows: list[np.ndarray]) -> LayerStats:
    # rows: [n, 4] columns nm2i, mi, h_p, h_m
    arr = np.concatenate(rows) if rows else np.zeros((0, 4))
    means = arr.mean(axis=0) if len(arr) else np.zeros(4)
    return LayerStats(layer, float(means[0]), float(means[1]), float(means[2]), float(means[3]), len(arr))


def nm2i_report(model, test_set: Sequence[Sample], table: MissingTable, batch_size: int = 128,
                model_tag: str | None = None) -> Nm2iReport:
    """Per-layer NM²I averaged over the modality-missing test samples.

    ``P_l`` is the prompt block of the missing modality entering layer ``l``
    (inherited slots past the prompt depth); ``M_l`` are the tokens of that
    modality entering layer ``l`` in a prompt-free pass over the complete
    sample.  Samples whose raw record lacks the modality are skipped.
    """
    if model.bank is None:
        raise InputError("NM²I needs a prompted model; the frozen lower bound has no prompts")
    backbone = model.backbone
    cfg = backbone.cfg
    M = model.bank.M
    placeholders = dict(zip(cfg.modalities, cfg.vocab_sizes))
    raw = [s for s in test_set if table[s.id]]
    masked_all = mask_split(raw, table, placeholders)
    rows = {m: [[] for _ in range(cfg.L)] for m in cfg.modalities}
    skipped = 0
    with no_grad():
        for start in range(0, len(raw), batch_size):
            raw_b = raw[start:start + batch_size]
            masked = masked_all[start:start + batch_size]
            fwd = prompt_forward(backbone, masked, model.bank)
            clean = backbone.hidden_states(stack_tokens(raw_b, cfg.modalities))
            for mi, m in enumerate(cfg.modalities):
                sel = np.array([m in s.pattern and m not in r.pattern for s, r in zip(masked, raw_b)])
                skipped += sum(1 for s, r in zip(masked, raw_b) if m in s.pattern and m in r.pattern)
                if not sel.any():
                    continue
                for l in range(1, cfg.L + 1):
                    P = fwd.prompts_in[l - 1].data[sel, mi * M:(mi + 1) * M]
                    toks = clean[l - 1].data[sel][:, cfg.span(m)]
                    joint = joint_distribution(P, toks)
                    pp, pm = marginals(joint)
                    stats = np.stack([nm2i_from_joint(joint), mutual_information(joint), entropy(pp),
                                      entropy(pm)], axis=1)
                    rows[m][l - 1].append(stats)
    per_modality = {m: [_summarize(l + 1, rows[m][l]) for l in range(cfg.L)]
                    for m in cfg.modalities if rows[m][0]}
    pooled = [_summarize(l + 1, [r for m in cfg.modalities for r in rows[m][l]]) for l in range(cfg.L)]
    return Nm2iReport(model_tag or model.variant, table.eta, table.kind, pooled, per_modality, skipped)
