"""A tiny single-stream multimodal transformer used as the frozen backbone."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import tensor as T
from .errors import ContractError, InputError, NumericError, ShapeError
from .optim import AdamW
from .serialize import checksum, load_checkpoint, save_checkpoint
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

PROMPT = "prompt"


@dataclass(frozen=True)
class BackboneConfig:
    L: int = 4
    d: int = 32
    heads: int = 4
    mlp_ratio: int = 2
    num_classes: int = 4
    modalities: tuple[str, ...] = ("text", "image")
    seq_lens: tuple[int, ...] = (8, 8)
    vocab_sizes: tuple[int, ...] = (48, 48)

    def __post_init__(self):
        if self.d % self.heads:
            raise InputError(f"d={self.d} is not divisible by heads={self.heads}")
        if self.L < 2:
            raise InputError("need at least two encoder layers")
        if len(self.seq_lens) != len(self.modalities) or len(self.vocab_sizes) != len(self.modalities):
            raise InputError("seq_lens and vocab_sizes need one entry per modality")
        if min(self.seq_lens) < 1:
            raise InputError("every modality needs at least one token")

    @property
    def seq_len(self) -> int:
        return sum(self.seq_lens)

    def span(self, modality: str) -> slice:
        """Token positions of ``modality`` within the content sequence."""
        start = 0
        for m, n in zip(self.modalities, self.seq_lens):
            if m == modality:
                return slice(start, start + n)
            start += n
        raise InputError(f"unknown modality {modality!r}")

    # seq_t / seq_v / vocab_t / vocab_v for the dual-modal case
    @property
    def seq_t(self) -> int:
        return self.seq_lens[self.modalities.index("text")]

    @property
    def seq_v(self) -> int:
        return self.seq_lens[self.modalities.index("image")]

    @property
    def vocab_t(self) -> int:
        return self.vocab_sizes[self.modalities.index("text")]

    @property
    def vocab_v(self) -> int:
        return self.vocab_sizes[self.modalities.index("image")]


@dataclass
class TokenBatch:
    """Hidden states ``[B, S, d]`` with leading prompt slots then content tokens."""

    tokens: Tensor
    tags: tuple[str, ...]
    prompt_count: int = 0

    def __post_init__(self):
        if len(self.tags) != self.tokens.shape[1]:
            raise ShapeError("one modality tag per token position is required")
        if any(t == PROMPT for t in self.tags[self.prompt_count:]) or \
                any(t != PROMPT for t in self.tags[: self.prompt_count]):
            raise ShapeError("prompt tokens must occupy the leading positions")


def init_params(cfg: BackboneConfig, rng: np.random.Generator) -> dict[str, np.ndarray]:
    d, h = cfg.d, cfg.d * cfg.mlp_ratio
    p = {}
    for m, n, v in zip(cfg.modalities, cfg.seq_lens, cfg.vocab_sizes):
        p[f"embed/{m}/tokens"] = rng.normal(0, 1.0, (v + 1, d))  # last row: placeholder
        p[f"embed/{m}/type"] = rng.normal(0, 0.1, (d,))
        p[f"embed/{m}/pos"] = rng.normal(0, 0.1, (n, d))
    for i in range(cfg.L):
        pre = f"layer{i}/"
        p[pre + "ln1_g"] = np.ones(d)
        p[pre + "ln1_b"] = np.zeros(d)
        p[pre + "w_qkv"] = rng.normal(0, 1 / math.sqrt(d), (d, 3 * d))
        p[pre + "b_qkv"] = np.zeros(3 * d)
        p[pre + "w_o"] = rng.normal(0, 1 / math.sqrt(d) / math.sqrt(2 * cfg.L), (d, d))
        p[pre + "b_o"] = np.zeros(d)
        p[pre + "ln2_g"] = np.ones(d)
        p[pre + "ln2_b"] = np.zeros(d)
        p[pre + "w_1"] = rng.normal(0, 1 / math.sqrt(d), (d, h))
        p[pre + "b_1"] = np.zeros(h)
        p[pre + "w_2"] = rng.normal(0, 1 / math.sqrt(h) / math.sqrt(2 * cfg.L), (h, d))
        p[pre + "b_2"] = np.zeros(d)
    return p


class Backbone:
    """Parameters plus the forward pieces: ``embed``, ``layer_forward``, ``pool_modality``.

    Once :meth:`freeze` is called no parameter requires gradients, so
    gradients flow *through* the backbone to prompts but never land on it.
    """

    def __init__(self, cfg: BackboneConfig, params: Mapping[str, np.ndarray]):
        self.cfg = cfg
        self.params = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
        self.frozen = False
        self.saved_checksum: str | None = None
        self.pretrain_accuracy: float | None = None

    def freeze(self) -> "Backbone":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        self.saved_checksum = self.checksum()
        return self

    def checksum(self) -> str:
        return checksum({k: v.data for k, v in self.params.items()})

    def num_parameters(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward -----------------------------------------------------------
    def embed(self, tokens: Mapping[str, np.ndarray]) -> TokenBatch:
        """Token + modality-type + position embeddings for ids ``[B, seq_m]`` per modality."""
        parts, tags = [], []
        for m, n, v in zip(self.cfg.modalities, self.cfg.seq_lens, self.cfg.vocab_sizes):
            ids = np.asarray(tokens[m], dtype=np.int64)
            if ids.ndim == 1:
                ids = ids[None, :]
            if ids.shape[1] != n:
                raise ShapeError(f"{m}: expected {n} tokens, got {ids.shape[1]}")
            if ids.min() < 0 or ids.max() > v:
                raise InputError(f"{m}: token id outside vocabulary [0, {v}]")
            table = self.params[f"embed/{m}/tokens"]
            e = T.getitem(table, ids) + self.params[f"embed/{m}/type"] + self.params[f"embed/{m}/pos"]
            parts.append(e)
            tags += [m] * n
        return TokenBatch(T.concat(parts, axis=1), tuple(tags), 0)

    def attention(self, l: int, x: Tensor) -> tuple[Tensor, Tensor]:
        """Multi-head self-attention of layer ``l`` (0-based) on normalised ``x``.

        Returns the projected output and the attention probabilities ``[B, H, S, S]``.
        """
        p = self._layer(l)
        B, S, d = x.shape
        H = self.cfg.heads
        dh = d // H
        qkv = x @ p["w_qkv"] + p["b_qkv"]
        qkv = T.transpose(qkv.reshape(B, S, 3, H, dh), (2, 0, 3, 1, 4))
        q, k, v = qkv[0], qkv[1], qkv[2]
        att = T.softmax(T.scale(q @ T.transpose(k, (0, 1, 3, 2)), 1.0 / math.sqrt(dh)), axis=-1)
        o = T.transpose(att @ v, (0, 2, 1, 3)).reshape(B, S, d)
        return o @ p["w_o"] + p["b_o"], att

    def layer_forward(self, l: int, x: Tensor) -> Tensor:
        """Pre-norm encoder layer ``l`` (0-based) applied to hidden states ``[B, S, d]``."""
        if not 0 <= l < self.cfg.L:
            raise InputError(f"layer index {l} outside [0, {self.cfg.L})")
        p = self._layer(l)
        a, _ = self.attention(l, T.layer_norm(x, p["ln1_g"], p["ln1_b"]))
        x = x + a
        h = T.layer_norm(x, p["ln2_g"], p["ln2_b"])
        return x + T.gelu(h @ p["w_1"] + p["b_1"]) @ p["w_2"] + p["b_2"]

    def forward_batch(self, batch: TokenBatch, l: int) -> TokenBatch:
        return TokenBatch(self.layer_forward(l, batch.tokens), batch.tags, batch.prompt_count)

    def hidden_states(self, tokens: Mapping[str, np.ndarray]) -> list[Tensor]:
        """``[H^0, ..., H^L]`` for a prompt-free forward pass."""
        h = self.embed(tokens).tokens
        out = [h]
        for l in range(self.cfg.L):
            h = self.layer_forward(l, h)
            out.append(h)
        return out

    def _layer(self, l: int) -> dict[str, Tensor]:
        pre = f"layer{l}/"
        return {k[len(pre):]: v for k, v in self.params.items() if k.startswith(pre)}

    # -- persistence -------------------------------------------------------
    def save(self, directory) -> None:
        manifest = {"config": _cfg_to_json(self.cfg), "frozen": self.frozen}
        save_checkpoint(directory, {k: v.data for k, v in self.params.items()}, manifest)

    @classmethod
    def load(cls, directory) -> "Backbone":
        arrays, manifest = load_checkpoint(directory)
        bb = cls(_cfg_from_json(manifest["config"]), arrays)
        if manifest.get("frozen"):
            bb.freeze()
        return bb


FrozenBackbone = Backbone


def pool_modality(batch: TokenBatch, modality: str) -> Tensor:
    """Mean over the token positions tagged ``modality`` -> ``[B, d]``."""
    idx = [i for i, t in enumerate(batch.tags) if t == modality]
    if not idx:
        raise ContractError(f"batch has no {modality!r} tokens")
    lo, hi = idx[0], idx[-1] + 1
    if hi - lo == len(idx):
        return T.mean(batch.tokens[:, lo:hi], axis=1)
    return T.mean(batch.tokens[:, np.asarray(idx)], axis=1)


def content_mean(h: Tensor, prompt_count: int) -> Tensor:
    return T.mean(h[:, prompt_count:], axis=1)


def _cfg_to_json(cfg: BackboneConfig) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in cfg.__dict__.items()}


def _cfg_from_json(d: dict) -> BackboneConfig:
    d = dict(d)
    for k in ("modalities", "seq_lens", "vocab_sizes"):
        d[k] = tuple(d[k])
    return BackboneConfig(**d)


def stack_tokens(samples: Sequence, modalities: Sequence[str]) -> dict[str, np.ndarray]:
    return {m: np.array([s.tokens[m] for s in samples], dtype=np.int64) for m in modalities}


def pretrain_backbone(cfg: BackboneConfig, complete_set: Sequence, epochs: int = 10, seed: int = 0,
                      lr: float = 3e-3, wd: float = 1e-2, batch_size: int = 32) -> Backbone:
    """Train every backbone parameter plus a throwaway linear head, then freeze.

    ``complete_set`` must hold modality-complete samples.
    """
    if any(s.pattern for s in complete_set):
        raise InputError("pretraining data must be modality-complete")
    rng = np.random.default_rng(seed)
    bb = Backbone(cfg, init_params(cfg, rng))
    head_w = Tensor(rng.normal(0, 1 / math.sqrt(cfg.d), (cfg.d, cfg.num_classes)), requires_grad=True)
    head_b = Tensor(np.zeros(cfg.num_classes), requires_grad=True)
    opt = AdamW(list(bb.params.values()) + [head_w, head_b], lr=lr, wd=wd)
    tokens = stack_tokens(complete_set, cfg.modalities)
    labels = np.array([s.label for s in complete_set])
    n = len(labels)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for step, start in enumerate(range(0, n, batch_size)):
            idx = order[start:start + batch_size]
            with T.Graph() as g:
                h = bb.hidden_states({m: t[idx] for m, t in tokens.items()})[-1]
                logits = content_mean(h, 0) @ head_w + head_b
                loss = T.cross_entropy(logits, labels[idx])
                if not np.isfinite(loss.item()):
                    raise NumericError(f"pretraining loss is {loss.item()} at epoch {epoch}, step {step}")
                opt.zero_grad()
                g.backward(loss)
            opt.step()
        log.debug("pretrain epoch %d loss %.4f", epoch, loss.item())
    bb.pretrain_accuracy = _accuracy(bb, tokens, labels, head_w, head_b)
    return bb.freeze()


def _accuracy(bb: Backbone, tokens, labels, head_w, head_b) -> float:
    with no_grad():
        h = bb.hidden_states(tokens)[-1]
        pred = (content_mean(h, 0) @ head_w + head_b).data.argmax(axis=1)
    return float((pred == labels).mean())
