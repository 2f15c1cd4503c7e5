import math

import numpy as np
import pytest

from aoept import tensor as T
from aoept.backbone import Backbone, BackboneConfig, init_params
from aoept.dataset import COMPLETE, GenConfig, build_missing_table, generate_synthetic, mask_split
from aoept.errors import ContractError, InputError
from aoept.mcp import McpBank, RandomPromptBank
from aoept.tuner import (TrainConfig, classify, evaluate, fit, make_model, prompt_forward, score, train)

TEXT = frozenset({"text"})


@pytest.fixture(scope="module")
def setup():
    g = GenConfig(n_train=48, n_val=16, n_test=24, seq_len=4, seed=0)
    data = generate_synthetic(g)
    cfg = BackboneConfig(L=3, d=8, heads=2, seq_lens=(4, 4), vocab_sizes=(g.vocab_size,) * 2)
    bb = Backbone(cfg, init_params(cfg, np.random.default_rng(0))).freeze()
    tables = {s: build_missing_table(len(data[s]), 50, "text", seed=i) for i, s in enumerate(("train", "val"))}
    ph = dict(zip(cfg.modalities, cfg.vocab_sizes))
    return g, data, bb, tables, ph


def _bank(bb, depth, instantiate=True, M=2):
    rng = np.random.default_rng(5)
    protos = {(m, l): rng.normal(size=(6, bb.cfg.d)) for m in bb.cfg.modalities for l in range(bb.cfg.L)}
    return McpBank("attention", M, depth, bb.cfg.modalities, bb.cfg.d, protos, instantiate=instantiate, seed=1)


def test_sequence_length_and_prompt_regimes(setup):
    _, data, bb, _, _ = setup
    batch = data["train"][:5]
    bank = _bank(bb, depth=2, M=3)
    out = prompt_forward(bb, batch, bank)
    assert out.hidden.shape == (5, 8, bb.cfg.d)
    assert [p.shape for p in out.prompts_in] == [(5, 6, bb.cfg.d)] * 3
    # past the prompt depth the prompt slots are the previous layer's outputs, not new prompts
    assert not np.allclose(out.prompts_in[2].data, out.prompts_in[1].data)
    assert len(out.gates) == 2


def test_depth_equal_to_layers_and_too_deep(setup):
    _, data, bb, _, _ = setup
    out = prompt_forward(bb, data["train"][:2], _bank(bb, depth=3))
    assert len(out.gates) == 3
    with pytest.raises(ContractError):
        _bank(bb, depth=4)


def test_zeroed_gates_give_half_prompts(setup):
    _, data, bb, tables, ph = setup
    bank = _bank(bb, depth=2)
    for g in bank.gates.values():
        g.zero_()
    batch = mask_split(data["train"][:4], tables["train"], ph)
    out = prompt_forward(bb, batch, bank)
    half = np.concatenate([0.5 * bank.global_prompt(m, 1).data for m in bb.cfg.modalities])
    for b in range(4):
        np.testing.assert_array_equal(out.prompts_in[0].data[b], half)


def test_random_prompts_are_shared_within_a_pattern(setup):
    _, data, bb, tables, ph = setup
    bank = RandomPromptBank(2, 2, bb.cfg.modalities, bb.cfg.d, [COMPLETE, TEXT], seed=0)
    batch = mask_split(data["train"][:12], tables["train"], ph)
    out = prompt_forward(bb, batch, bank)
    for pat in (COMPLETE, TEXT):
        rows = out.prompts_in[0].data[[s.pattern == pat for s in batch]]
        assert len(rows) > 1 and np.ptp(rows, axis=0).max() == 0.0


def test_zero_head_gives_uniform_cross_entropy(setup):
    _, data, bb, _, _ = setup
    out = prompt_forward(bb, data["train"][:6], None)
    head = {"w": T.Tensor(np.zeros((bb.cfg.d, 4))), "b": T.Tensor(np.zeros(4))}
    ce = T.cross_entropy(classify(out.hidden, head), np.arange(6) % 4).item()
    assert abs(ce - math.log(4)) < 1e-12


def test_batch_order_does_not_change_predictions(setup):
    _, data, bb, _, _ = setup
    batch = data["test"][:10]
    bank = _bank(bb, depth=2)
    a = prompt_forward(bb, batch, bank).hidden.data
    perm = np.random.default_rng(0).permutation(10)
    b = prompt_forward(bb, [batch[i] for i in perm], bank).hidden.data
    np.testing.assert_allclose(b, a[perm], rtol=0, atol=1e-12)


def test_training_is_deterministic_and_keeps_backbone_frozen(setup):
    _, data, bb, tables, _ = setup
    cfg = TrainConfig(epochs=2, M=2, N=2, n_proto=4, seed=3)
    before = bb.checksum()
    r1 = train(bb, data, tables, cfg, variant="aoept")
    r2 = train(bb, data, tables, cfg, variant="aoept")
    assert bb.checksum() == before
    assert [h["L_CE"] for h in r1.history] == [h["L_CE"] for h in r2.history]
    assert all(h["L_CR"] > 0 for h in r1.history)
    assert 1 <= r1.best_epoch <= 2


def test_fit_requires_a_frozen_backbone(setup):
    _, data, bb, _, _ = setup
    live = Backbone(bb.cfg, {k: v.data for k, v in bb.params.items()})
    model = make_model(live, "frozen", TrainConfig(N=2))
    with pytest.raises(ContractError):
        fit(model, data["train"][:4], data["val"][:4], TrainConfig(epochs=1, N=2))
    with pytest.raises(ContractError):
        make_model(bb, "aoept", TrainConfig(N=2))
    with pytest.raises(InputError):
        make_model(bb, "magic", TrainConfig(N=2))
    with pytest.raises(InputError):
        make_model(bb, "frozen", TrainConfig(N=4))


def test_scores_of_degenerate_predictors():
    y = np.array([0, 1, 2, 3, 0, 1, 2, 3])
    perfect = score(y, y, ["complete"] * 8)
    assert perfect["accuracy"] == 1.0 and perfect["macro_f1"] == 1.0
    const = score(y, np.zeros(8, dtype=int), ["complete"] * 4 + ["text_missing"] * 4)
    assert const["accuracy"] == 0.25
    # F1 is 2*0.25*1/(1.25) = 0.4 for class 0 and 0 elsewhere
    assert const["macro_f1"] == pytest.approx(0.1)
    assert const["per_pattern"] == {"complete": 0.25, "text_missing": 0.25}


def test_evaluate_reports_each_table(setup):
    _, data, bb, _, _ = setup
    model = make_model(bb, "frozen", TrainConfig(N=2))
    tables = [build_missing_table(len(data["test"]), 70, "text", seed=s) for s in (20, 21, 22)]
    rep = evaluate(model, data["test"], tables)
    assert [r["table_seed"] for r in rep.per_table] == [20, 21, 22]
    accs = [r["accuracy"] for r in rep.per_table]
    assert rep.accuracy == pytest.approx(np.mean(accs))
    assert rep.accuracy_range == (min(accs), max(accs))
    with pytest.raises(ContractError):
        evaluate([model], data["test"], tables)
