import math

import numpy as np
import pytest

from aoept import tensor as T
from aoept.dataset import COMPLETE
from aoept.errors import ContractError, InputError
from aoept.mcp import (McpBank, RandomPromptBank, adaptive_pool, construct_attention, construct_init,
                       load_bank, pooling_matrix)
from aoept.tensor import Tensor


def test_pooling_matrix_examples():
    np.testing.assert_array_equal(pooling_matrix(4, 2), [[0.5, 0.5, 0, 0], [0, 0, 0.5, 0.5]])
    np.testing.assert_allclose(pooling_matrix(5, 2), [[1 / 3] * 3 + [0, 0], [0, 0, 0, 0.5, 0.5]], rtol=0, atol=1e-15)
    np.testing.assert_array_equal(pooling_matrix(3, 3), np.eye(3))


@pytest.mark.parametrize("S,M", [(7, 3), (64, 16), (16, 16), (17, 16), (5, 1)])
def test_pooling_matrix_is_a_balanced_partition(S, M):
    A = pooling_matrix(S, M)
    np.testing.assert_allclose(A.sum(axis=1), 1.0)
    assert np.all((A > 0).sum(axis=0) == 1)
    sizes = (A > 0).sum(axis=1)
    assert sizes.max() - sizes.min() <= 1


def test_pooling_rejects_too_few_items():
    with pytest.raises(InputError):
        pooling_matrix(3, 4)
    np.testing.assert_array_equal(adaptive_pool(np.arange(8.0).reshape(4, 2), 2).data, [[1, 2], [5, 6]])


def test_attention_construction_matches_formula():
    rng = np.random.default_rng(0)
    P, K = rng.normal(size=(3, 4)), rng.normal(size=(6, 4))
    s = P @ K.T / 2.0
    w = np.exp(s - s.max(1, keepdims=True))
    w /= w.sum(1, keepdims=True)
    np.testing.assert_allclose(construct_attention(Tensor(P), K).data, w @ K + P, rtol=0, atol=1e-13)
    with pytest.raises(ContractError):
        construct_attention(Tensor(P), rng.normal(size=(6, 5)))


def test_init_construction_is_a_learnable_pooled_copy():
    K = np.arange(12.0).reshape(6, 2)
    p = construct_init(K, 3)
    assert p.requires_grad
    np.testing.assert_array_equal(p.data, [[1, 2], [5, 6], [9, 10]])


def _protos(d=8, layers=3, mods=("text", "image")):
    rng = np.random.default_rng(1)
    return {(m, l): rng.normal(size=(10, d)) for m in mods for l in range(layers)}


@pytest.mark.parametrize("method", ["attention", "mlp", "init"])
def test_bank_shapes_and_round_trip(tmp_path, method):
    bank = McpBank(method, 4, 3, ("text", "image"), 8, _protos(), seed=3)
    assert bank.global_prompt("text", 2).shape == (4, 8)
    with pytest.raises(InputError):
        bank.global_prompt("text", 4)
    bank.save(tmp_path / method)
    back = load_bank(tmp_path / method)
    for l in (1, 2, 3):
        np.testing.assert_array_equal(back.global_prompt("image", l).data, bank.global_prompt("image", l).data)
    assert back.num_parameters() == bank.num_parameters()


def test_bank_requires_prototypes_for_every_prompted_layer():
    with pytest.raises(ContractError):
        McpBank("attention", 4, 4, ("text", "image"), 8, _protos(layers=3))
    with pytest.raises(InputError):
        McpBank("bogus", 4, 1, ("text", "image"), 8, _protos())


def test_instantiation_switch_controls_gating_parameters():
    with_gates = McpBank("attention", 4, 2, ("text", "image"), 8, _protos())
    without = McpBank("attention", 4, 2, ("text", "image"), 8, _protos(), instantiate=False)
    assert len(with_gates.gates) == 2 * 2 * 2 and not without.gates
    assert with_gates.num_parameters() > without.num_parameters()


def test_random_bank_is_per_pattern_and_round_trips(tmp_path):
    pats = [COMPLETE, frozenset({"text"})]
    bank = RandomPromptBank(4, 2, ("text", "image"), 8, pats, seed=5)
    a, b = bank.prompt(COMPLETE, "text", 1).data, bank.prompt(frozenset({"text"}), "text", 1).data
    assert not np.array_equal(a, b)
    assert abs(a.std() - 0.02) < 0.01
    bank.save(tmp_path)
    back = load_bank(tmp_path)
    np.testing.assert_array_equal(back.prompt(COMPLETE, "text", 1).data, a)
    assert back.num_parameters() == len(pats) * 2 * 2 * 4 * 8
