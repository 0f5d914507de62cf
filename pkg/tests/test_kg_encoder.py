import numpy as np
import pytest

from dcgl import diffkit as dk
from dcgl.corpus import KnowledgeGraph
from dcgl.kg_encoder import (
    AdapterParams,
    adapt_semantic,
    default_mid_dim,
    rgat_attention,
    rgat_encode,
    rgat_layer,
)


def make_kg(num_items, num_entities, num_relations, triplets):
    return KnowledgeGraph(
        num_items=num_items,
        num_entities=num_entities,
        num_relations=num_relations,
        triplets=np.asarray(triplets, dtype=np.int64).reshape(-1, 3),
    )


def test_adapter_constant_map():
    adapter = AdapterParams(
        W1=np.zeros((2, 3)), b1=np.zeros(2), W2=np.zeros((4, 2)), b2=np.array([1.0, 2.0, 3.0, 4.0])
    )
    out = adapt_semantic(np.array([5.0, 6.0, 7.0]), adapter)
    assert np.allclose(out, [1.0, 2.0, 3.0, 4.0])


def test_adapter_identity_with_leaky_slope():
    adapter = AdapterParams(W1=np.eye(2), b1=np.zeros(2), W2=np.eye(2), b2=np.zeros(2))
    out = adapt_semantic(np.array([1.0, -1.0]), adapter)
    assert np.allclose(out, [1.0, -0.2])


def test_adapter_dimension_mismatch():
    adapter = AdapterParams(W1=np.eye(2), b1=np.zeros(2), W2=np.eye(2), b2=np.zeros(2))
    with pytest.raises(ValueError):
        adapt_semantic(np.ones(3), adapter)


def test_adapter_gradients():
    rng = np.random.default_rng(0)
    raw = rng.normal(size=(3, 4))
    up = rng.normal(size=(3, 2))
    params = {
        "W1": rng.normal(size=(3, 4)) * 0.5,
        "b1": rng.normal(size=3) * 0.3,
        "W2": rng.normal(size=(2, 3)) * 0.5,
        "b2": rng.normal(size=2) * 0.3,
    }

    def fn(p):
        return dk.reduce_sum(dk.mul(adapt_semantic(raw, AdapterParams(**p)), up))

    assert dk.check_scalar_function(fn, params, tol=1e-4).passed


def test_default_mid_dim():
    assert default_mid_dim(1536, 64) == 800


def test_attention_single_neighbor():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(4, 8))
    out = rgat_attention(rng.normal(size=4), [rng.normal(size=4)], [rng.normal(size=4)], W)
    assert np.allclose(out, [1.0])


def test_attention_identical_neighbors_split_evenly():
    rng = np.random.default_rng(2)
    W = rng.normal(size=(4, 8))
    item = rng.normal(size=4)
    nb = rng.normal(size=4)
    rel = rng.normal(size=4)
    out = rgat_attention(item, [nb, nb], [rel, rel], W)
    assert np.allclose(out, [0.5, 0.5])


def test_attention_softmax_of_logits():
    # W and inputs chosen so the two logits are exactly 0 and ln 3
    item = np.array([1.0])
    W = np.array([[0.0, 1.0]])  # phi = r * x_i (LeakyReLU of r*1)
    rels = [np.array([0.0]), np.array([np.log(3.0)])]
    nbs = [np.array([9.9]), np.array([-3.3])]
    out = rgat_attention(item, nbs, rels, W)
    assert np.allclose(out, [0.25, 0.75])


def test_attention_empty_neighbors_rejected():
    with pytest.raises(ValueError):
        rgat_attention(np.ones(2), [], [], np.ones((2, 4)))


def test_attention_permutation_equivariance():
    rng = np.random.default_rng(3)
    W = rng.normal(size=(5, 10))
    item = rng.normal(size=5)
    nbs = [rng.normal(size=5) for _ in range(4)]
    rels = [rng.normal(size=5) for _ in range(4)]
    base = dk.value_of(rgat_attention(item, nbs, rels, W))
    perm = [2, 0, 3, 1]
    permuted = dk.value_of(rgat_attention(item, [nbs[p] for p in perm], [rels[p] for p in perm], W))
    assert np.allclose(permuted, base[perm])


def test_rgat_layer_no_neighbors_passthrough():
    kg = make_kg(2, 4, 1, [])
    rng = np.random.default_rng(4)
    entity = rng.normal(size=(4, 3))
    out = rgat_layer(entity, rng.normal(size=(1, 3)), kg, rng.normal(size=(3, 6)))
    assert np.allclose(dk.value_of(out), entity[:2])


def test_rgat_layer_single_neighbor_residual():
    kg = make_kg(1, 3, 1, [(0, 0, 2)])
    rng = np.random.default_rng(5)
    entity = rng.normal(size=(3, 4))
    out = rgat_layer(entity, rng.normal(size=(1, 4)), kg, rng.normal(size=(4, 8)))
    assert np.allclose(dk.value_of(out)[0], entity[0] + entity[2])


def test_rgat_layer_symmetric_neighbors():
    # two neighbors with identical embeddings and relations: a = 1/2 each
    kg = make_kg(1, 3, 1, [(0, 0, 1), (0, 0, 2)])
    rng = np.random.default_rng(6)
    entity = rng.normal(size=(3, 4))
    entity[2] = entity[1]
    out = rgat_layer(entity, rng.normal(size=(1, 4)), kg, rng.normal(size=(4, 8)))
    assert np.allclose(dk.value_of(out)[0], entity[0] + 0.5 * (entity[1] + entity[2]))


def test_rgat_encode_zero_layers():
    kg = make_kg(2, 4, 1, [(0, 0, 3)])
    rng = np.random.default_rng(7)
    entity = rng.normal(size=(4, 3))
    out = rgat_encode(entity, rng.normal(size=(1, 3)), kg, rng.normal(size=(3, 6)), 0)
    assert np.allclose(dk.value_of(out), entity[:2])


def test_rgat_encode_empty_kg_any_depth():
    kg = make_kg(3, 5, 1, [])
    rng = np.random.default_rng(8)
    entity = rng.normal(size=(5, 3))
    out = rgat_encode(entity, rng.normal(size=(1, 3)), kg, rng.normal(size=(3, 6)), 3)
    assert np.allclose(dk.value_of(out), entity[:3])


def test_rgat_encode_one_layer_equals_layer_call():
    kg = make_kg(3, 6, 2, [(0, 0, 4), (0, 1, 5), (2, 1, 1)])
    rng = np.random.default_rng(9)
    entity = rng.normal(size=(6, 4))
    rel = rng.normal(size=(2, 4))
    W = rng.normal(size=(4, 8))
    assert np.allclose(
        dk.value_of(rgat_encode(entity, rel, kg, W, 1)),
        dk.value_of(rgat_layer(entity, rel, kg, W)),
    )


def test_attention_rows_sum_to_one():
    kg = make_kg(4, 8, 3, [(0, 0, 5), (0, 1, 6), (1, 2, 7), (1, 0, 2), (3, 1, 0)])
    rng = np.random.default_rng(10)
    entity = rng.normal(size=(8, 4))
    rel = rng.normal(size=(3, 4))
    W = rng.normal(size=(4, 8))
    for item in (0, 1, 3):
        nbs = kg.item_neighbors(item)
        attn = dk.value_of(
            rgat_attention(entity[item], [entity[e] for _, e in nbs], [rel[r] for r, _ in nbs], W)
        )
        assert abs(attn.sum() - 1.0) <= 1e-9


def test_rgat_encode_gradients_toy():
    kg = make_kg(3, 6, 2, [(0, 0, 4), (0, 1, 5), (2, 1, 1), (1, 0, 3)])
    rng = np.random.default_rng(11)
    d = 8
    up = rng.normal(size=(3, d))
    params = {
        "entity": rng.normal(size=(6, d)) * 0.5,
        "rel": rng.normal(size=(2, d)) * 0.5,
        "attn": rng.normal(size=(d, 2 * d)) * 0.3,
    }

    def fn(p):
        return dk.reduce_sum(dk.mul(rgat_encode(p["entity"], p["rel"], kg, p["attn"], 2), up))

    assert dk.check_scalar_function(fn, params, tol=1e-4).passed


def test_llm_layer0_independent_of_id_table(toy_bundle):
    # LLM-channel layer-0 item embeddings depend only on semantic vectors and
    # adapter parameters: perturbing the ID table must not change them
    from dcgl.model import DualChannelModel
    from dcgl.trainer import TrainConfig

    config = TrainConfig(embed_dim=8, kg_layers=1, cf_layers=1, seed=0)
    model = DualChannelModel(config, toy_bundle)
    params = model.init_params(0)
    base = dk.value_of(model.entity_layer0(params, "llm"))
    params["id.entity"] = params["id.entity"] + 99.0
    assert np.array_equal(dk.value_of(model.entity_layer0(params, "llm")), base)
