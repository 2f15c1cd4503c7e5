"""Instance-aware prompt instantiation and the intra-modal consistency loss."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError
from .tensor import Tensor


class GatingMlp:
    """Bottleneck MLP ``d -> d/r -> d`` (GELU in between); the sigmoid is applied by the caller."""

    def __init__(self, d: int, reduction: int = 4, rng: np.random.Generator | None = None, params=None):
        hidden = max(1, d // reduction)
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = {
                "w1": rng.normal(0, 1 / math.sqrt(d), (d, hidden)),
                "b1": np.zeros(hidden),
                "w2": rng.normal(0, 1 / math.sqrt(hidden), (hidden, d)),
                "b2": np.zeros(d),
            }
        self.params = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        self.d = d
        self.reduction = reduction

    def __call__(self, x) -> Tensor:
        p = self.params
        return T.gelu(T.as_tensor(x) @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]

    def gate(self, cond) -> Tensor:
        """``sigmoid(MLP(cond))``; ``cond`` may be ``[d]`` or ``[B, d]``."""
        cond = T.as_tensor(cond)
        if cond.ndim == 1:
            return T.sigmoid(self(T.reshape(cond, (1, -1))))[0]
        return T.sigmoid(self(cond))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_(self) -> "GatingMlp":
        for p in self.params.values():
            p.data[...] = 0.0
        return self


@dataclass
class InstancePrompt:
    sample_id: int | None
    layer: int
    tensor: Tensor  # [M, d]
    gate: Tensor  # [d]


def _apply_gate(prompt: Tensor, gate: Tensor) -> Tensor:
    # [M, d] * [d] or [M, d] * [B, 1, d] -> row-broadcast product
    if gate.ndim == 2:
        gate = T.reshape(gate, (gate.shape[0], 1, gate.shape[1]))
    return T.mul(prompt, gate)


def instantiate(prompt, cond, gmlp: GatingMlp, layer: int = 0, sample_id=None) -> InstancePrompt:
    """Scale every row of a global prompt ``[M, d]`` by ``sigmoid(MLP(cond))``."""
    gate = gmlp.gate(cond)
    return InstancePrompt(sample_id, layer, _apply_gate(T.as_tensor(prompt), gate), gate)


def aggregate_gates(conds: Sequence, gmlps: Sequence[GatingMlp]) -> Tensor:
    if len(conds) == 0:
        raise ContractError("instantiation needs at least one observed modality")
    if len(conds) != len(gmlps):
        raise ContractError("one gating MLP per conditioning modality is required")
    gates = [g.gate(c) for c, g in zip(conds, gmlps)]
    if len(gates) == 1:
        return gates[0]
    total = gates[0]
    for g in gates[1:]:
        total = total + g
    return T.scale(total, 1.0 / len(gates))


def instantiate_multi(prompt, conds: Sequence, gmlps: Sequence[GatingMlp], layer: int = 0,
                      sample_id=None) -> InstancePrompt:
    """Gate a global prompt by the average of per-modality gates over the observed modalities."""
    gate = aggregate_gates(conds, gmlps)
    return InstancePrompt(sample_id, layer, _apply_gate(T.as_tensor(prompt), gate), gate)


def consistency_loss(prompt_pooled, target_reps, tau: float = 0.1) -> Tensor:
    """InfoNCE between pooled prompts and same-sample modality representations.

    Row ``j`` of ``prompt_pooled`` is the positive of row ``j`` of
    ``target_reps``; the other rows of ``target_reps`` are negatives.
    Similarity is cosine.  Returns the mean over rows, or 0 for an empty batch.
    """
    if tau <= 0:
        raise InputError(f"temperature must be positive, got {tau}")
    p, t = T.as_tensor(prompt_pooled), T.as_tensor(target_reps)
    if p.shape != t.shape or p.ndim != 2:
        raise ContractError(f"expected matching [B, d] inputs, got {p.shape} and {t.shape}")
    B = p.shape[0]
    if B == 0:
        return Tensor(0.0)
    logits = T.scale(T.cosine_similarity_matrix(p, t), 1.0 / tau)
    logp = T.log_softmax(logits, axis=1)
    diag = T.getitem(logp, (np.arange(B), np.arange(B)))
    return T.scale(T.tsum(diag), -1.0 / B)
