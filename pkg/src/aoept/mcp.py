"""Modal-contextualized prompt construction and the random-prompt baseline bank."""

from __future__ import annotations

import itertools
import json
import math
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T
from .collection import RefinedCollection
from .dataset import pattern_name, parse_pattern
from .errors import ContractError, InputError
from .instantiation import GatingMlp
from .serialize import load_checkpoint, save_checkpoint
from .tensor import Tensor

METHODS = ("attention", "mlp", "init")
PROMPT_STD = 0.02


def _protos(protos) -> np.ndarray:
    arr = protos.prototypes if isinstance(protos, RefinedCollection) else np.asarray(
        protos.data if isinstance(protos, Tensor) else protos, dtype=np.float64)
    if arr.ndim != 2 or len(arr) == 0:
        raise ContractError("prototype set must be a non-empty [N', d] array")
    return arr


def pooling_matrix(S: int, M: int) -> np.ndarray:
    """Row ``i`` averages window ``i`` of a balanced partition of ``S`` items into ``M`` windows.

    The first ``S mod M`` windows hold ``ceil(S/M)`` items, the rest ``floor(S/M)``.
    """
    if M < 1 or S < M:
        raise InputError(f"adaptive pooling needs S >= M >= 1, got S={S}, M={M}")
    base, extra = divmod(S, M)
    A = np.zeros((M, S))
    start = 0
    for i in range(M):
        size = base + (1 if i < extra else 0)
        A[i, start:start + size] = 1.0 / size
        start += size
    return A


def adaptive_pool(seq, M: int) -> Tensor:
    seq = T.as_tensor(seq)
    return T.matmul(Tensor(pooling_matrix(seq.shape[0], M)), seq)


def construct_attention(p_base, protos) -> Tensor:
    """``softmax(P K^T / sqrt(d)) K + P`` with the prototypes as keys and values."""
    k = Tensor(_protos(protos))
    p_base = T.as_tensor(p_base)
    if p_base.shape[-1] != k.shape[1]:
        raise ContractError("prompt and prototype widths differ")
    att = T.softmax(T.scale(p_base @ k.T, 1.0 / math.sqrt(k.shape[1])), axis=-1)
    return att @ k + p_base


class Mlp:
    """``d -> d -> d`` with GELU, used by the MLP construction method."""

    def __init__(self, d: int, rng: np.random.Generator | None = None, params=None):
        if params is None:
            rng = rng if rng is not None else np.random.default_rng(0)
            params = {
                "w1": rng.normal(0, 1 / math.sqrt(d), (d, d)),
                "b1": np.zeros(d),
                "w2": rng.normal(0, 1 / math.sqrt(d), (d, d)),
                "b2": np.zeros(d),
            }
        self.params = {k: Tensor(v, requires_grad=True) for k, v in params.items()}

    def __call__(self, x) -> Tensor:
        p = self.params
        return T.gelu(T.as_tensor(x) @ p["w1"] + p["b1"]) @ p["w2"] + p["b2"]


def construct_mlp(protos, M: int, mlp: Callable) -> Tensor:
    return adaptive_pool(mlp(Tensor(_protos(protos))), M)


def construct_init(protos, M: int) -> Tensor:
    """Pooled prototypes as a fresh learnable leaf; it is never rebuilt afterwards."""
    return Tensor(pooling_matrix(len(_protos(protos)), M) @ _protos(protos), requires_grad=True)


def init_random_prompts(M: int, d: int, seed: int) -> Tensor:
    return Tensor(np.random.default_rng(seed).normal(0.0, PROMPT_STD, (M, d)), requires_grad=True)


class McpBank:
    """Per-modality, per-layer prompts for layers ``1..depth`` plus the gating MLPs.

    Prompts for layer ``l`` are built from the layer ``l-1`` prototypes.
    Gating MLPs are keyed ``(target, condition, l)``: the prompt of modality
    ``target`` at layer ``l`` is gated from the pooled representation of
    ``condition``.
    """

    def __init__(self, method: str, M: int, depth: int, modalities: Sequence[str], d: int,
                 protos: Mapping[tuple[str, int], np.ndarray], reduction: int = 4,
                 instantiate: bool = True, seed: int = 0):
        if method not in METHODS:
            raise InputError(f"unknown construction method {method!r}")
        if M < 1 or depth < 1:
            raise InputError("need M >= 1 and depth >= 1")
        self.method, self.M, self.depth, self.d = method, M, depth, d
        self.modalities = tuple(modalities)
        self.reduction = reduction
        self.instantiate = instantiate
        self.seed = seed
        self.protos = {k: np.asarray(v, dtype=np.float64) for k, v in protos.items()}
        for m in self.modalities:
            for l in range(1, depth + 1):
                if (m, l - 1) not in self.protos:
                    raise ContractError(f"missing layer-{l - 1} prototypes for {m}")
        rng = np.random.default_rng(seed)
        self.base: dict[tuple[str, int], Tensor] = {}
        self.mlps: dict[tuple[str, int], Mlp] = {}
        self.free: dict[tuple[str, int], Tensor] = {}
        for m in self.modalities:
            for l in range(1, depth + 1):
                key = (m, l)
                if method == "attention":
                    self.base[key] = Tensor(rng.normal(0, PROMPT_STD, (M, d)), requires_grad=True)
                elif method == "mlp":
                    self.mlps[key] = Mlp(d, rng)
                else:
                    self.free[key] = construct_init(self.protos[(m, l - 1)], M)
        self.gates: dict[tuple[str, str, int], GatingMlp] = {}
        if instantiate:
            for m, j in itertools.product(self.modalities, repeat=2):
                for l in range(1, depth + 1):
                    self.gates[(m, j, l)] = GatingMlp(d, reduction, rng)

    @classmethod
    def from_refined(cls, refined: Mapping[str, Sequence[RefinedCollection]], method: str, M: int,
                     depth: int, d: int, **kw) -> "McpBank":
        protos = {(m, r.layer): r.prototypes for m, layers in refined.items() for r in layers
                  if r.layer < depth}
        return cls(method, M, depth, tuple(refined), d, protos, **kw)

    def global_prompt(self, modality: str, layer: int) -> Tensor:
        """The constructed ``[M, d]`` prompt of ``modality`` for layer ``layer`` (1-based)."""
        if not 1 <= layer <= self.depth:
            raise InputError(f"bank has prompts for layers 1..{self.depth}, not {layer}")
        key = (modality, layer)
        protos = self.protos[(modality, layer - 1)]
        if self.method == "attention":
            return construct_attention(self.base[key], protos)
        if self.method == "mlp":
            return construct_mlp(protos, self.M, self.mlps[key])
        return self.free[key]

    def named_parameters(self) -> dict[str, Tensor]:
        out = {}
        for (m, l), p in self.base.items():
            out[f"base/{m}/{l}"] = p
        for (m, l), mlp in self.mlps.items():
            for k, p in mlp.params.items():
                out[f"mlp/{m}/{l}/{k}"] = p
        for (m, l), p in self.free.items():
            out[f"init/{m}/{l}"] = p
        for (m, j, l), g in self.gates.items():
            for k, p in g.params.items():
                out[f"gate/{m}/{j}/{l}/{k}"] = p
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named_parameters().values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.named_parameters().items():
            p.data[...] = state[k]

    def save(self, directory) -> None:
        arrays = {k: p.data for k, p in self.named_parameters().items()}
        arrays.update({f"proto/{m}/{n}": v for (m, n), v in self.protos.items()})
        manifest = {"kind": "mcp", "method": self.method, "M": self.M, "N": self.depth, "d": self.d,
                    "modalities": list(self.modalities), "reduction": self.reduction,
                    "instantiate": self.instantiate, "seed": self.seed}
        save_checkpoint(directory, arrays, manifest)

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray], manifest: dict) -> "McpBank":
        protos = {}
        for k, v in arrays.items():
            if k.startswith("proto/"):
                _, m, n = k.split("/")
                protos[(m, int(n))] = v
        bank = cls(manifest["method"], manifest["M"], manifest["N"], manifest["modalities"], manifest["d"],
                   protos, manifest["reduction"], manifest["instantiate"], manifest["seed"])
        bank.load_state(arrays)
        return bank


class RandomPromptBank:
    """Missing-aware random prompts: one ``[M, d]`` prompt per (pattern, modality, layer).

    Nothing here depends on training data, so two samples with the same
    missing pattern always receive identical prompts.
    """

    def __init__(self, M: int, depth: int, modalities: Sequence[str], d: int, patterns: Sequence[frozenset],
                 seed: int = 0):
        self.M, self.depth, self.d, self.seed = M, depth, d, seed
        self.modalities = tuple(modalities)
        self.patterns = tuple(patterns)
        self.prompts: dict[tuple[str, str, int], Tensor] = {}
        ss = np.random.SeedSequence(seed)
        keys = [(pattern_name(p), m, l) for p in self.patterns for m in self.modalities
                for l in range(1, depth + 1)]
        for key, child in zip(keys, ss.spawn(len(keys))):
            self.prompts[key] = init_random_prompts(M, d, int(child.generate_state(1)[0]))

    def prompt(self, pattern: frozenset, modality: str, layer: int) -> Tensor:
        return self.prompts[(pattern_name(pattern), modality, layer)]

    def named_parameters(self) -> dict[str, Tensor]:
        return {f"rand/{p}/{m}/{l}": t for (p, m, l), t in self.prompts.items()}

    def parameters(self) -> list[Tensor]:
        return list(self.prompts.values())

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data.copy() for k, p in self.named_parameters().items()}

    def load_state(self, state: Mapping[str, np.ndarray]) -> None:
        for k, p in self.named_parameters().items():
            p.data[...] = state[k]

    def save(self, directory) -> None:
        manifest = {"kind": "random", "M": self.M, "N": self.depth, "d": self.d,
                    "modalities": list(self.modalities), "seed": self.seed,
                    "patterns": [pattern_name(p) for p in self.patterns]}
        save_checkpoint(directory, {k: p.data for k, p in self.named_parameters().items()}, manifest)

    @classmethod
    def from_arrays(cls, arrays, manifest) -> "RandomPromptBank":
        bank = cls(manifest["M"], manifest["N"], manifest["modalities"], manifest["d"],
                   [parse_pattern(p) for p in manifest["patterns"]], manifest["seed"])
        bank.load_state(arrays)
        return bank


def load_bank(directory):
    arrays, manifest = load_checkpoint(directory)
    if manifest["kind"] == "mcp":
        return McpBank.from_arrays(arrays, manifest)
    if manifest["kind"] == "random":
        return RandomPromptBank.from_arrays(arrays, manifest)
    raise InputError(f"unknown bank kind {manifest['kind']!r}")
