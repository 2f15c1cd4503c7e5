import numpy as np
import pytest

from aoept.collection import (LayerCollection, build_collections, load_refined, refine_all, refine_kmeans,
                              refine_pooling, save_collections)
from aoept.backbone import Backbone, BackboneConfig, init_params
from aoept.dataset import GenConfig, build_missing_table, generate_synthetic, mask_split
from aoept.errors import InputError

from oracles import brute_force_bipartition


def coll(x):
    return LayerCollection("text", 0, np.asarray(x, dtype=float), list(range(len(x))))


def test_objective_never_increases_on_random_instances():
    for seed in range(50):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(int(rng.integers(10, 60)), int(rng.integers(1, 5))))
        r = refine_kmeans(coll(x), int(rng.integers(1, 8)), seed=seed)
        assert np.all(np.diff(r.history) <= 1e-9), seed
        assert r.objective <= r.history[0] + 1e-9


def test_single_prototype_is_the_mean():
    x = np.random.default_rng(0).normal(size=(37, 3))
    r = refine_kmeans(coll(x), 1)
    np.testing.assert_allclose(r.prototypes[0], x.mean(axis=0), rtol=0, atol=1e-12)


def test_planted_two_clusters_reach_the_bipartition_optimum():
    for seed in range(5):
        rng = np.random.default_rng(seed)
        x = np.concatenate([rng.normal(-4, 0.5, (6, 2)), rng.normal(4, 0.5, (6, 2))])
        r = refine_kmeans(coll(x), 2, seed=seed)
        assert abs(r.objective - brute_force_bipartition(x)) <= 1e-6


def test_kmeans_with_as_many_prototypes_as_points_has_zero_objective():
    x = np.random.default_rng(1).normal(size=(9, 2))
    assert refine_kmeans(coll(x), 9).objective == pytest.approx(0.0, abs=1e-12)


def test_kmeans_input_errors():
    with pytest.raises(InputError):
        refine_kmeans(coll(np.ones((3, 2))), 4)
    with pytest.raises(InputError):
        refine_kmeans(coll(np.ones((3, 2))), 0)


def test_pooling_refinement_examples():
    x = np.arange(10.0).reshape(5, 2)
    r = refine_pooling(coll(x), 2)
    np.testing.assert_array_equal(r.prototypes, [[1, 2], [5, 6], [8, 9]])
    np.testing.assert_array_equal(refine_pooling(coll(x), 1).prototypes, x)
    with pytest.raises(InputError):
        refine_pooling(coll(x), 0)


def test_collections_use_only_available_samples_and_cache(tmp_path):
    g = GenConfig(n_train=40, n_val=4, n_test=4, seed=0)
    data = generate_synthetic(g)
    cfg = BackboneConfig(vocab_sizes=(g.vocab_size,) * 2)
    bb = Backbone(cfg, init_params(cfg, np.random.default_rng(0))).freeze()
    table = build_missing_table(40, 50, "text", seed=0)
    masked = mask_split(data["train"], table, g.placeholder_id)
    raw = build_collections(bb, masked)
    assert len(raw["text"]) == cfg.L and len(raw["text"][0]) == 20 and len(raw["image"][0]) == 40
    assert set(raw["text"][0].source_ids) == {s.id for s in masked if not s.pattern}
    refined = refine_all(raw, n_proto=8)
    assert [len(r) for r in refined["text"]] == [8] * cfg.L
    save_collections(tmp_path, raw, refined, {"n_proto": 8})
    back = load_refined(tmp_path)
    for m in refined:
        for a, b in zip(refined[m], back[m]):
            np.testing.assert_array_equal(a.prototypes, b.prototypes)
