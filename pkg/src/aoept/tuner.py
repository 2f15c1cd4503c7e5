"""Missing-adaptive prompt tuning: forward pass, training loops and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np
from sklearn.metrics import f1_score

from . import tensor as T
from .backbone import Backbone, stack_tokens
from .collection import build_collections, refine_all
from .dataset import COMPLETE, MissingTable, Sample, mask_split, missing_groups, pattern_name
from .errors import ContractError, InputError, NumericError
from .instantiation import consistency_loss
from .mcp import McpBank, RandomPromptBank
from .optim import AdamW
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

VARIANTS = ("aoept", "no_inst", "baseline", "frozen")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-2
    wd: float = 2e-2
    epochs: int = 20
    batch_size: int = 32
    tau: float = 0.1
    lambda_cr: float = 1.0
    M: int = 16
    N: int = 3
    n_proto: int = 64
    method: str = "attention"
    refine: str = "kmeans"
    pool_window: int = 4
    kmeans_iters: int = 300
    reduction: int = 4
    seed: int = 0

    def validate(self, L: int | None = None) -> None:
        if self.M < 1:
            raise InputError("prompt length M must be >= 1")
        if self.N < 1 or (L is not None and self.N > L):
            raise InputError(f"prompt depth N={self.N} must lie in [1, {L}]")
        if self.tau <= 0:
            raise InputError("tau must be positive")


@dataclass
class PromptModel:
    backbone: Backbone
    bank: McpBank | RandomPromptBank | None
    head: dict[str, Tensor]
    variant: str = "aoept"

    def parameters(self) -> list[Tensor]:
        bank = self.bank.parameters() if self.bank is not None else []
        return bank + list(self.head.values())

    def num_trainable(self) -> int:
        return sum(p.data.size for p in self.parameters())

    def state(self) -> dict[str, np.ndarray]:
        out = self.bank.state() if self.bank is not None else {}
        out.update({f"head/{k}": v.data.copy() for k, v in self.head.items()})
        return out

    def load_state(self, state) -> None:
        if self.bank is not None:
            self.bank.load_state(state)
        for k, v in self.head.items():
            v.data[...] = state[f"head/{k}"]

    def predict(self, samples: Sequence[Sample], batch_size: int = 256) -> np.ndarray:
        preds = []
        with no_grad():
            for start in range(0, len(samples), batch_size):
                out = prompt_forward(self.backbone, samples[start:start + batch_size], self.bank)
                preds.append(classify(out.hidden, self.head).data.argmax(axis=1))
        return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


@dataclass
class ForwardResult:
    hidden: Tensor  # content tokens of H^L, [B, S, d]
    prompts_in: list[Tensor | None]  # prompt slots entering layer l (index l-1), [B, K*M, d]
    gates: list[dict[str, Tensor]]  # per instantiated layer: modality -> [B, d]
    cr: Tensor | None  # consistency loss averaged over layers 1..N
    modalities: tuple[str, ...] = ()
    M: int = 0


def _cond_weights(samples: Sequence[Sample], target: str, modalities: Sequence[str]) -> np.ndarray:
    """``[B, K]`` averaging weights over the conditioning modalities of each sample.

    The condition set is the observed modalities other than ``target``; when
    that is empty (the target is the only observed modality) the observed
    modalities themselves are used.
    """
    w = np.zeros((len(samples), len(modalities)))
    for b, s in enumerate(samples):
        observed = [m for m in modalities if m not in s.pattern]
        cond = [m for m in observed if m != target] or observed
        for m in cond:
            w[b, modalities.index(m)] = 1.0 / len(cond)
    return w


def _mcp_prompts(bank: McpBank, l: int, samples, pooled: Mapping[str, Tensor], tau: float, want_cr: bool):
    modalities = bank.modalities
    B = len(samples)
    slots, gates, cr_terms = [], {}, []
    for m in modalities:
        P = bank.global_prompt(m, l)
        if bank.instantiate:
            w = _cond_weights(samples, m, modalities)
            gate = None
            for j, cond_m in enumerate(modalities):
                col = w[:, j]
                if not col.any():
                    continue
                g = T.mul(bank.gates[(m, cond_m, l)].gate(pooled[cond_m]), Tensor(col[:, None]))
                gate = g if gate is None else gate + g
            gates[m] = gate
            inst = T.mul(P, T.reshape(gate, (B, 1, bank.d)))
        else:
            inst = T.mul(P, Tensor(np.ones((B, 1, 1))))
        slots.append(inst)
        if want_cr:
            avail = np.array([m not in s.pattern for s in samples])
            if avail.any():
                rows = np.flatnonzero(avail)
                p_bar = T.mean(inst[rows], axis=1)
                target = Tensor(pooled[m].data[rows])
                cr_terms.append(consistency_loss(p_bar, target, tau))
    return slots, gates, cr_terms


def _random_prompts(bank: RandomPromptBank, l: int, samples):
    B = len(samples)
    names = sorted({pattern_name(s.pattern) for s in samples})
    index = np.array([names.index(pattern_name(s.pattern)) for s in samples])
    slots = []
    for m in bank.modalities:
        table = T.stack([bank.prompts[(p, m, l)] for p in names], axis=0)
        slots.append(table[index])
    return slots


def prompt_forward(backbone: Backbone, samples: Sequence[Sample], bank=None, tau: float = 0.1,
                   with_cr: bool = False) -> ForwardResult:
    """Run the frozen backbone with prompts on a batch of (already masked) samples.

    Layers ``1..N`` receive freshly built prompts and discard the prompt
    outputs of the previous layer; layers ``N+1..L`` carry forward the prompt
    slots produced by layer ``N`` (and later layers).  All modality prompts are
    inserted for every sample, ordered as the backbone's modalities.
    """
    cfg = backbone.cfg
    samples = list(samples)
    if bank is not None and bank.depth > cfg.L:
        raise InputError(f"prompt depth N={bank.depth} exceeds backbone depth L={cfg.L}")
    batch = backbone.embed(stack_tokens(samples, cfg.modalities))
    h = batch.tokens
    prompts_in: list[Tensor | None] = []
    gates_per_layer = []
    cr_layers = []
    carried = None
    for l in range(1, cfg.L + 1):
        if bank is None:
            prompts = None
        elif l <= bank.depth:
            if isinstance(bank, McpBank):
                pooled = {m: T.mean(h[:, cfg.span(m)], axis=1) for m in cfg.modalities}
                slots, gates, terms = _mcp_prompts(bank, l, samples, pooled, tau, with_cr)
                gates_per_layer.append(gates)
                if terms:
                    total = terms[0]
                    for t in terms[1:]:
                        total = total + t
                    cr_layers.append(total)
            else:
                slots = _random_prompts(bank, l, samples)
            prompts = T.concat(slots, axis=1)
        else:
            prompts = carried
        prompts_in.append(prompts)
        if prompts is None:
            h = backbone.layer_forward(l - 1, h)
        else:
            k = prompts.shape[1]
            out = backbone.layer_forward(l - 1, T.concat([prompts, h], axis=1))
            carried, h = out[:, :k], out[:, k:]
    cr = None
    if cr_layers:
        cr = cr_layers[0]
        for t in cr_layers[1:]:
            cr = cr + t
        cr = T.scale(cr, 1.0 / len(cr_layers))
    M = bank.M if bank is not None else 0
    return ForwardResult(h, prompts_in, gates_per_layer, cr, cfg.modalities, M)


def classify(hidden: Tensor, head: Mapping[str, Tensor]) -> Tensor:
    """Linear head on the mean of the content tokens; ``hidden`` excludes prompt slots."""
    return T.mean(hidden, axis=1) @ head["w"] + head["b"]


def init_head(d: int, num_classes: int, rng: np.random.Generator) -> dict[str, Tensor]:
    return {"w": Tensor(rng.normal(0, 1 / math.sqrt(d), (d, num_classes)), requires_grad=True),
            "b": Tensor(np.zeros(num_classes), requires_grad=True)}


# -- training --------------------------------------------------------------

@dataclass
class TrainResult:
    model: PromptModel
    history: list[dict] = field(default_factory=list)
    best_epoch: int = 0


def build_prototypes(backbone: Backbone, train_masked: Sequence[Sample], cfg: TrainConfig):
    raw = build_collections(backbone, train_masked)
    refined = refine_all(raw, cfg.refine, cfg.n_proto, cfg.pool_window, cfg.kmeans_iters, cfg.seed)
    return raw, refined


def make_model(backbone: Backbone, variant: str, cfg: TrainConfig, refined=None,
               patterns: Sequence[frozenset] | None = None) -> PromptModel:
    if variant not in VARIANTS:
        raise InputError(f"unknown variant {variant!r}; choose from {VARIANTS}")
    bc = backbone.cfg
    cfg.validate(bc.L)
    rng = np.random.default_rng(cfg.seed)
    head = init_head(bc.d, bc.num_classes, rng)
    if variant in ("aoept", "no_inst"):
        if refined is None:
            raise ContractError("MCP construction needs refined collections; run build-collections first")
        bank = McpBank.from_refined(refined, cfg.method, cfg.M, cfg.N, bc.d, reduction=cfg.reduction,
                                    instantiate=variant == "aoept", seed=cfg.seed + 1)
    elif variant == "baseline":
        if patterns is None:
            patterns = [COMPLETE] + [frozenset([m]) for m in bc.modalities]
        bank = RandomPromptBank(cfg.M, cfg.N, bc.modalities, bc.d, patterns, seed=cfg.seed + 1)
    else:
        bank = None
    return PromptModel(backbone, bank, head, variant)


def fit(model: PromptModel, train_set: Sequence[Sample], val_set: Sequence[Sample], cfg: TrainConfig) -> TrainResult:
    """AdamW over the prompt bank and head; the best-validation state is restored at the end."""
    backbone = model.backbone
    if not backbone.frozen:
        raise ContractError("prompt tuning needs a frozen backbone")
    before = backbone.checksum()
    use_cr = model.variant in ("aoept", "no_inst") and cfg.lambda_cr > 0
    rng = np.random.default_rng(cfg.seed + 7)
    opt = AdamW(model.parameters(), lr=cfg.lr, wd=cfg.wd)
    labels = np.array([s.label for s in train_set])
    history = []
    best_acc, best_state, best_epoch = -1.0, model.state(), 0
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(train_set))
        ce_sum = cr_sum = 0.0
        steps = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = [train_set[i] for i in idx]
            with T.Graph() as g:
                out = prompt_forward(backbone, batch, model.bank, cfg.tau, with_cr=use_cr)
                ce = T.cross_entropy(classify(out.hidden, model.head), labels[idx])
                loss = ce
                if use_cr and out.cr is not None:
                    loss = ce + T.scale(out.cr, cfg.lambda_cr)
                    cr_sum += out.cr.item()
                if not np.isfinite(loss.item()):
                    raise NumericError(f"{model.variant}: loss {loss.item()} at epoch {epoch}, step {steps}")
                opt.zero_grad()
                g.backward(loss)
            opt.step()
            ce_sum += ce.item()
            steps += 1
        val_acc = accuracy(model, val_set)
        history.append({"epoch": epoch, "L_CE": ce_sum / steps, "L_CR": cr_sum / steps, "val_acc": val_acc})
        if val_acc > best_acc:
            best_acc, best_state, best_epoch = val_acc, model.state(), epoch
        log.debug("%s epoch %d ce %.4f cr %.4f val %.4f", model.variant, epoch, ce_sum / steps,
                  cr_sum / steps, val_acc)
    model.load_state(best_state)
    if backbone.checksum() != before:
        raise ContractError("backbone parameters changed during prompt tuning")
    return TrainResult(model, history, best_epoch)


def _masked(data, tables: Mapping[str, MissingTable], split: str, placeholder) -> list[Sample]:
    return mask_split(data[split], tables[split], placeholder)


def train(backbone: Backbone, data, tables: Mapping[str, MissingTable], cfg: TrainConfig,
          refined=None, variant: str = "aoept") -> TrainResult:
    """Prompt-tune ``variant`` on the masked train split, selecting on the masked val split.

    ``refined`` defaults to collections built from the masked train split.
    """
    ph = _placeholders(backbone)
    train_set = _masked(data, tables, "train", ph)
    val_set = _masked(data, tables, "val", ph)
    if variant in ("aoept", "no_inst") and refined is None:
        _, refined = build_prototypes(backbone, train_set, cfg)
    patterns = [COMPLETE] + missing_groups(tables["train"].kind, backbone.cfg.modalities)
    model = make_model(backbone, variant, cfg, refined, patterns)
    return fit(model, train_set, val_set, cfg)


def train_baseline(backbone: Backbone, data, tables, cfg: TrainConfig) -> TrainResult:
    return train(backbone, data, tables, cfg, variant="baseline")


def _placeholders(backbone: Backbone) -> dict[str, int]:
    return dict(zip(backbone.cfg.modalities, backbone.cfg.vocab_sizes))


# -- evaluation ------------------------------------------------------------

def accuracy(model: PromptModel, samples: Sequence[Sample]) -> float:
    labels = np.array([s.label for s in samples])
    return float((model.predict(samples) == labels).mean())


@dataclass
class EvalReport:
    accuracy: float
    macro_f1: float
    per_table: list[dict]
    per_pattern: dict[str, float]
    accuracy_range: tuple[float, float]

    def to_json(self) -> dict:
        return {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "per_table": self.per_table,
                "per_pattern": self.per_pattern, "accuracy_range": list(self.accuracy_range)}


def score(labels: np.ndarray, preds: np.ndarray, patterns: Sequence[str]) -> dict:
    labels, preds = np.asarray(labels), np.asarray(preds)
    per_pattern = {}
    for name in sorted(set(patterns)):
        sel = np.array([p == name for p in patterns])
        per_pattern[name] = float((preds[sel] == labels[sel]).mean())
    return {
        "accuracy": float((preds == labels).mean()),
        "macro_f1": float(f1_score(labels, preds, average="macro", zero_division=0)),
        "per_pattern": per_pattern,
    }


def evaluate(models, test_set: Sequence[Sample], tables: Sequence[MissingTable]) -> EvalReport:
    """Score on the test split once per missing table.

    ``models`` is one model (reused for every table) or one model per table.
    """
    if isinstance(models, PromptModel):
        models = [models] * len(tables)
    if len(models) != len(tables):
        raise ContractError("need one model per missing table")
    rows = []
    for model, table in zip(models, tables):
        masked = mask_split(test_set, table, _placeholders(model.backbone))
        res = score([s.label for s in masked], model.predict(masked), [pattern_name(s.pattern) for s in masked])
        res["table_seed"] = table.seed
        rows.append(res)
    accs = [r["accuracy"] for r in rows]
    names = sorted({k for r in rows for k in r["per_pattern"]})
    per_pattern = {k: float(np.mean([r["per_pattern"][k] for r in rows if k in r["per_pattern"]])) for k in names}
    return EvalReport(float(np.mean(accs)), float(np.mean([r["macro_f1"] for r in rows])), rows, per_pattern,
                      (float(min(accs)), float(max(accs))))
