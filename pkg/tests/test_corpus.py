import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcgl import corpus
from dcgl.corpus import (
    InteractionGraph,
    ParseError,
    SynthConfig,
    filter_low_frequency,
    frequency_features,
    gen_synthetic,
    parse_interactions,
    parse_kg,
    split_interactions,
)


def test_parse_interactions_counts():
    graph = parse_interactions(io.StringIO("a\t x\na\t y\nb\t x\n"))
    assert graph.num_users == 2
    assert graph.num_items == 2
    assert graph.num_edges == 3


def test_parse_interactions_dedup():
    graph = parse_interactions(io.StringIO("a\tx\na\tx\n"))
    assert graph.num_edges == 1


def test_parse_interactions_first_occurrence_ids():
    graph = parse_interactions(io.StringIO("bob\tz\nann\tz\nbob\ty\n"))
    assert graph.user_tokens == ["bob", "ann"]
    assert graph.item_tokens == ["z", "y"]


def test_parse_interactions_comments_and_blank_lines():
    graph = parse_interactions(io.StringIO("# header\n\na\tx\n"))
    assert graph.num_edges == 1


def test_parse_interactions_malformed_line():
    with pytest.raises(ParseError) as err:
        parse_interactions(io.StringIO("a\tx\nbad line without tab\n"))
    assert err.value.line_no == 2


def test_parse_interactions_bookcrossing_scale():
    # Book-Crossing-format stream with the published rating count
    n_users, per_user = 2382, 47  # 2382*47 = 111,954 >= 110,662
    def lines():
        yield "# synthetic book-crossing-format fixture\n"
        count = 0
        for u in range(n_users):
            for k in range(per_user):
                if count == 110_662:
                    return
                yield f"u{u}\ti{(u * 13 + k * 29) % 9000}_{k}\n"
                count += 1
    graph = parse_interactions(lines())
    assert graph.num_edges == 110_662


def test_transpose_consistency():
    graph = parse_interactions(io.StringIO("a\tx\na\ty\nb\tx\n"))
    for u, i in graph.edges:
        assert i in graph.user_adj[u]
        assert u in graph.item_adj[i]
    assert sum(len(a) for a in graph.user_adj) == graph.num_edges
    assert sum(len(a) for a in graph.item_adj) == graph.num_edges


def test_parse_kg_empty_stream():
    graph = parse_interactions(io.StringIO("a\tx\n"))
    kg = parse_kg(io.StringIO(""), graph)
    assert kg.num_triplets == 0
    assert kg.num_entities == graph.num_items


def test_parse_kg_single_triplet():
    graph = parse_interactions(io.StringIO("a\tx\n"))
    kg = parse_kg(io.StringIO("x\tgenre\te1\n"), graph)
    assert kg.item_neighbors(0) == [(0, 1)]  # relation 'genre'=0, entity e1=1
    assert kg.num_entities == 2  # item x plus e1


def test_parse_kg_item_prefix_invariant():
    graph = parse_interactions(io.StringIO("a\tx\na\ty\n"))
    kg = parse_kg(io.StringIO("e9\trel\tx\ny\trel\te9\n"), graph)
    # non-item entity ids start at num_items even when seen first as a head
    assert kg.num_entities == 3
    assert kg.entity_tokens[:2] == ["x", "y"]
    assert kg.entity_tokens[2] == "e9"


def test_parse_kg_strict_linking():
    graph = parse_interactions(io.StringIO("a\tx\n"))
    with pytest.raises(corpus.LinkError):
        parse_kg(io.StringIO("unknown\trel\te1\n"), graph, strict_linking=True)


def test_parse_kg_bookcrossing_scale():
    graph = parse_interactions(io.StringIO("a\tx\n"))
    def lines():
        for n in range(1137):
            yield f"e{n % 50}\tr{n % 4}\te{(n + 7) % 60}\n"
    kg = parse_kg(lines(), graph)
    assert kg.num_relations == 4
    assert kg.num_triplets == 1137


def test_filter_removes_low_frequency_user():
    edges = np.array([[0, i] for i in range(4)] + [[1, i] for i in range(5)])
    kept = filter_low_frequency(edges, 5)
    assert set(kept[:, 0]) == {1}


def test_filter_min_zero_identity():
    edges = np.array([[0, 0], [1, 1]])
    assert np.array_equal(filter_low_frequency(edges, 0), edges)


def test_filter_fixed_point():
    rng = np.random.default_rng(0)
    edges = np.unique(rng.integers(0, 30, size=(200, 2)), axis=0)
    kept = filter_low_frequency(edges, 10)
    if kept.size:
        _, counts = np.unique(kept[:, 0], return_counts=True)
        assert counts.min() >= 10


def test_split_7_1_2():
    edges = np.array([[0, i] for i in range(10)])
    split = split_interactions(edges, rng_seed=1)
    assert len(split.train) == 7
    assert len(split.validation) == 1
    assert len(split.test) == 2


def test_split_degenerate_user():
    edges = np.array([[0, 0], [0, 1]])
    split = split_interactions(edges, rng_seed=1)
    assert len(split.train) == 2
    assert len(split.validation) == 0
    assert len(split.test) == 0


def test_split_deterministic():
    rng = np.random.default_rng(5)
    edges = np.unique(rng.integers(0, 40, size=(300, 2)), axis=0)
    s1 = split_interactions(edges, rng_seed=9)
    s2 = split_interactions(edges, rng_seed=9)
    assert np.array_equal(s1.train, s2.train)
    assert np.array_equal(s1.validation, s2.validation)
    assert np.array_equal(s1.test, s2.test)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_split_partition_property(seed):
    rng = np.random.default_rng(seed)
    n_users = int(rng.integers(2, 15))
    n_items = int(rng.integers(3, 25))
    edges = np.unique(rng.integers(0, [n_users, n_items], size=(120, 2)), axis=0)
    split = split_interactions(edges, rng_seed=seed)
    combined = np.vstack([split.train, split.validation, split.test])
    assert len(combined) == len(edges)
    as_set = {tuple(e) for e in combined}
    assert as_set == {tuple(e) for e in edges}
    # every user with any edges keeps at least one training edge
    train_users = set(split.train[:, 0].tolist())
    assert train_users == set(edges[:, 0].tolist())


def test_phi_formula():
    graph = InteractionGraph.from_edges(2, 8, [(0, i) for i in range(3)] + [(1, i) for i in range(7)])
    feats = frequency_features(graph, graph.edges)
    # freq=3, max=7 -> log(4)/log(8) = 2/3
    assert feats.user_phi[0] == pytest.approx(np.log(4) / np.log(8))
    assert feats.user_phi[0] == pytest.approx(2.0 / 3.0)
    assert feats.user_phi[1] == 1.0


def test_phi_zero_guard():
    graph = InteractionGraph.from_edges(2, 2, [(0, 0)])
    feats = frequency_features(graph, np.zeros((0, 2), dtype=np.int64))
    assert np.all(feats.user_phi == 0.0)
    assert np.all(feats.item_phi == 0.0)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.integers(min_value=0, max_value=50), min_size=2, max_size=30))
def test_phi_monotone_bounded(counts):
    graph = InteractionGraph.from_edges(len(counts), 1, [])
    feats = frequency_features(graph, np.zeros((0, 2), dtype=np.int64))
    phi = corpus._phi(np.asarray(counts))
    assert np.all(phi >= 0) and np.all(phi <= 1)
    order = np.argsort(counts)
    assert np.all(np.diff(phi[order]) >= -1e-15)


def test_gen_synthetic_deterministic():
    cfg = SynthConfig(num_users=30, num_items=40, num_entities=50, seed=11)
    g1, kg1, sem1, sp1 = gen_synthetic(cfg)
    g2, kg2, sem2, sp2 = gen_synthetic(cfg)
    assert np.array_equal(g1.edges, g2.edges)
    assert np.array_equal(kg1.triplets, kg2.triplets)
    assert np.array_equal(sem1, sem2)
    assert np.array_equal(sp1.train, sp2.train)


def test_gen_synthetic_popularity_skew():
    cfg = SynthConfig(num_users=200, num_items=300, num_entities=360, popularity_exponent=1.2, seed=0)
    graph, _, _, _ = gen_synthetic(cfg)
    deg = np.sort(graph.item_degrees())[::-1]
    share = deg[:30].sum() / deg.sum()
    assert share > 0.35


def test_gen_synthetic_semantic_fidelity():
    cfg = SynthConfig(num_users=80, num_items=120, num_entities=150, semantic_noise_by_frequency=False, seed=2)
    _, _, semantic, _, factors = corpus.gen_synthetic_with_factors(cfg)
    assert semantic.shape == (150, cfg.latent_dim)
    cos = (semantic * factors).sum(axis=1) / (
        np.linalg.norm(semantic, axis=1) * np.linalg.norm(factors, axis=1)
    )
    assert cos.mean() >= 0.9


def test_gen_synthetic_noise_by_frequency_degrades_head_items():
    cfg = SynthConfig(num_users=120, num_items=150, num_entities=190, semantic_noise_by_frequency=True, seed=3)
    graph, _, semantic, _, factors = corpus.gen_synthetic_with_factors(cfg)
    deg = graph.item_degrees()
    cos = (semantic * factors).sum(axis=1)[: cfg.num_items] / (
        np.linalg.norm(semantic[: cfg.num_items], axis=1) * np.linalg.norm(factors[: cfg.num_items], axis=1)
    )
    head = deg >= np.quantile(deg, 0.9)
    tail = deg <= np.quantile(deg, 0.1)
    assert cos[tail].mean() - cos[head].mean() > 0.3


def test_file_roundtrip(tmp_path):
    cfg = SynthConfig(num_users=25, num_items=30, num_entities=40, seed=4)
    graph, kg, semantic, split = gen_synthetic(cfg)
    ipath = tmp_path / "interactions.tsv"
    kpath = tmp_path / "kg.tsv"
    spath = tmp_path / "split.txt"
    epath = tmp_path / "semantic.emb"
    corpus.write_interactions_file(ipath, graph)
    corpus.write_kg_file(kpath, kg)
    corpus.write_split_manifest(spath, split, graph.edges)
    corpus.write_embedding_file(epath, np.arange(kg.num_entities), semantic)

    with open(ipath, encoding="utf-8") as fh:
        graph2 = parse_interactions(fh)
    assert graph2.num_users == graph.num_users
    assert graph2.num_items == graph.num_items
    assert np.array_equal(graph2.edges, graph.edges)

    with open(kpath, encoding="utf-8") as fh:
        kg2 = parse_kg(fh, graph2)
    assert kg2.num_triplets == kg.num_triplets
    assert kg2.num_entities == kg.num_entities

    split2 = corpus.read_split_manifest(spath, graph2.edges)
    assert np.array_equal(split2.train, split.train)
    assert np.array_equal(split2.test, split.test)
    assert split2.seed == split.seed

    ids, vecs = corpus.read_embedding_file(epath)
    assert np.array_equal(ids, np.arange(kg.num_entities))
    assert np.allclose(vecs, semantic, atol=1e-7)  # f32 payload


def test_embedding_file_bit_exact(tmp_path):
    vecs = np.random.default_rng(0).normal(size=(5, 8)).astype(np.float32).astype(np.float64)
    path = tmp_path / "a.emb"
    corpus.write_embedding_file(path, [3, 1, 4, 1, 5], vecs)
    ids, out = corpus.read_embedding_file(path)
    assert out.dtype == np.float64
    assert np.array_equal(out, vecs)  # values chosen representable in f32
