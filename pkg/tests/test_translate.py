import numpy as np
import pytest

from dcgl import diffkit as dk
from dcgl.corpus import KnowledgeGraph
from dcgl.translate import CorruptedBatch, sample_corrupted, transe_distance, transe_loss


def make_kg(num_items, num_entities, triplets):
    return KnowledgeGraph(
        num_items=num_items,
        num_entities=num_entities,
        num_relations=max((t[1] for t in triplets), default=0) + 1,
        triplets=np.asarray(triplets, dtype=np.int64).reshape(-1, 3),
    )


def test_distance_exact_translation():
    h = np.array([0.5, -1.0])
    r = np.array([0.25, 1.5])
    assert float(transe_distance(h, r, h + r)) == 0.0


def test_distance_derived_value():
    d = transe_distance(np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.0, 0.0]))
    assert float(d) == 2.0


def test_distance_translation_invariant():
    rng = np.random.default_rng(0)
    h, r, t, v = (rng.normal(size=5) for _ in range(4))
    base = float(transe_distance(h, r, t))
    shifted = float(transe_distance(h + v, r, t + v))
    assert shifted == pytest.approx(base, abs=1e-12)


def batch_of(rows):
    rows = np.asarray(rows)
    return CorruptedBatch(rows[:, 0], rows[:, 1], rows[:, 2], rows[:, 3])


def test_loss_equal_distances_ln2():
    # entity layout: h=0, t=1, t'=2 with embeddings making f(pos) == f(neg)
    entity = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
    rel = np.zeros((1, 2))
    loss = transe_loss(batch_of([[0, 0, 1, 2]]), entity, rel)
    assert float(loss) == pytest.approx(np.log(2.0))


def test_loss_derived_value():
    # f(pos) = 0, f(neg) = 2
    entity = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    rel = np.zeros((1, 2))
    loss = transe_loss(batch_of([[0, 0, 1, 2]]), entity, rel)
    assert float(loss) == pytest.approx(np.log(1.0 + np.exp(-2.0)))


def test_loss_monotone_in_margin():
    rel = np.zeros((1, 1))
    values = []
    for neg_pos in (0.5, 1.0, 2.0, 4.0):
        entity = np.array([[0.0], [0.0], [neg_pos]])
        values.append(float(transe_loss(batch_of([[0, 0, 1, 2]]), entity, rel)))
    assert all(a > b for a, b in zip(values, values[1:]))


def test_loss_empty_batch_rejected():
    with pytest.raises(ValueError):
        transe_loss(batch_of(np.zeros((0, 4))), np.ones((2, 2)), np.ones((1, 2)))


def test_sample_two_entity_kg():
    kg = make_kg(1, 2, [(0, 0, 1)])
    rng = np.random.default_rng(0)
    batch = sample_corrupted(kg, 32, rng)
    assert np.all(batch.corrupt_tails == 0)  # only other entity


def test_sample_deterministic():
    kg = make_kg(2, 6, [(0, 0, 3), (1, 0, 4), (0, 1, 5)])
    b1 = sample_corrupted(kg, 16, np.random.default_rng(7))
    b2 = sample_corrupted(kg, 16, np.random.default_rng(7))
    assert np.array_equal(b1.heads, b2.heads)
    assert np.array_equal(b1.corrupt_tails, b2.corrupt_tails)


def test_sample_never_equal_tail():
    kg = make_kg(2, 5, [(0, 0, 3), (1, 0, 4)])
    batch = sample_corrupted(kg, 500, np.random.default_rng(1))
    assert np.all(batch.corrupt_tails != batch.tails)


def test_sample_single_entity_error():
    kg = make_kg(1, 1, [(0, 0, 0)])
    with pytest.raises(ValueError):
        sample_corrupted(kg, 4, np.random.default_rng(0))


def test_sample_uniform_over_triplets():
    kg = make_kg(3, 8, [(0, 0, 4), (1, 0, 5), (2, 0, 6), (0, 0, 7)])
    n = 10_000
    batch = sample_corrupted(kg, n, np.random.default_rng(3))
    key = batch.heads * 100 + batch.tails
    _, counts = np.unique(key, return_counts=True)
    p = 1.0 / 4.0
    sigma = np.sqrt(n * p * (1 - p))
    assert np.all(np.abs(counts - n * p) <= 3 * sigma)


def test_loss_gradients_with_jitter():
    rng = np.random.default_rng(4)
    kg = make_kg(3, 8, [(0, 0, 4), (1, 1, 5), (2, 0, 6), (0, 1, 7), (1, 0, 3)])
    batch = sample_corrupted(kg, 5, rng)
    params = {
        "entity": rng.normal(size=(8, 8)),
        "rel": rng.normal(size=(2, 8)),
    }

    def fn(p):
        return transe_loss(batch, p["entity"], p["rel"])

    # the batch keeps |h+r-t| coordinates clear of the L1 kink's FD window
    with dk.track_kinks() as tracker:
        fn(params)
    assert tracker.min_abs > 1e-4
    assert dk.check_scalar_function(fn, params, tol=1e-4).passed


def test_descent_step_reduces_loss():
    rng = np.random.default_rng(5)
    kg = make_kg(2, 6, [(0, 0, 3), (1, 0, 4)])
    batch = sample_corrupted(kg, 8, rng)
    entity = rng.normal(size=(6, 4))
    rel = rng.normal(size=(2, 4))
    e_var, r_var = dk.Var(entity.copy()), dk.Var(rel.copy())
    loss = transe_loss(batch, e_var, r_var)
    dk.backward(loss)
    lr = 1e-3
    entity2 = entity - lr * e_var.grad
    rel2 = rel - lr * r_var.grad
    assert float(dk.value_of(transe_loss(batch, entity2, rel2))) < float(loss.value)
