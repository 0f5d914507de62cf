"""Interaction/knowledge-graph corpus handling.

Parsing, low-frequency filtering, per-user splitting, frequency statistics and
a seeded synthetic generator for desk-scale experiments. All products are
immutable after construction and safe to share across evaluation workers.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

Array = np.ndarray


class ParseError(ValueError):
    """Malformed input line; carries the 1-based line number."""

    def __init__(self, message: str, line_no: int):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


class LinkError(ValueError):
    """KG triplet references an unknown item token under strict linking."""


def _sorted_adjacency(edges: Array, num_src: int, key: int, val: int) -> list[Array]:
    adj: list[list[int]] = [[] for _ in range(num_src)]
    for row in edges:
        adj[row[key]].append(int(row[val]))
    return [np.array(sorted(a), dtype=np.int64) for a in adj]


@dataclass
class InteractionGraph:
    """Bipartite user-item graph with per-node adjacency."""

    num_users: int
    num_items: int
    edges: Array  # [E, 2] int64, deduplicated (user, item) pairs
    user_adj: list[Array] = field(repr=False)
    item_adj: list[Array] = field(repr=False)
    user_tokens: list[str] | None = field(default=None, repr=False)
    item_tokens: list[str] | None = field(default=None, repr=False)

    @classmethod
    def from_edges(
        cls,
        num_users: int,
        num_items: int,
        edges: Iterable[tuple[int, int]] | Array,
        user_tokens: list[str] | None = None,
        item_tokens: list[str] | None = None,
    ) -> "InteractionGraph":
        arr = np.asarray(list(edges) if not isinstance(edges, np.ndarray) else edges, dtype=np.int64)
        arr = arr.reshape(-1, 2)
        if arr.size:
            if arr.min() < 0 or arr[:, 0].max() >= num_users or arr[:, 1].max() >= num_items:
                raise ValueError("edge ids out of range")
            if len(np.unique(arr, axis=0)) != len(arr):
                raise ValueError("duplicate (user, item) pairs")
        return cls(
            num_users=num_users,
            num_items=num_items,
            edges=arr,
            user_adj=_sorted_adjacency(arr, num_users, 0, 1),
            item_adj=_sorted_adjacency(arr, num_items, 1, 0),
            user_tokens=user_tokens,
            item_tokens=item_tokens,
        )

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    def user_degrees(self) -> Array:
        return np.array([len(a) for a in self.user_adj], dtype=np.int64)

    def item_degrees(self) -> Array:
        return np.array([len(a) for a in self.item_adj], dtype=np.int64)


@dataclass
class KnowledgeGraph:
    """Entity/relation/triplet store; items occupy the id prefix [0, num_items)."""

    num_items: int
    num_entities: int
    num_relations: int
    triplets: Array  # [T, 3] int64 (head, relation, tail)
    entity_tokens: list[str] | None = field(default=None, repr=False)
    relation_tokens: list[str] | None = field(default=None, repr=False)

    def __post_init__(self):
        t = self.triplets
        if t.size:
            if t.min() < 0:
                raise ValueError("negative ids in triplets")
            if max(t[:, 0].max(), t[:, 2].max()) >= self.num_entities:
                raise ValueError("entity id out of range")
            if t[:, 1].max() >= self.num_relations:
                raise ValueError("relation id out of range")
        self._item_edges_cache: tuple | None = None

    @property
    def num_triplets(self) -> int:
        return len(self.triplets)

    def item_neighbors(self, item: int) -> list[tuple[int, int]]:
        """(relation, entity) pairs for triplets headed by ``item``."""
        mask = self.triplets[:, 0] == item
        return [(int(r), int(t)) for r, t in self.triplets[mask][:, 1:]]

    def item_edge_arrays(self) -> tuple[Array, Array, Array, Array, Array]:
        """Flattened item-headed edges grouped by head for segment ops.

        Returns (active_items, indptr, heads, rels, tails) where segment s of
        the edge arrays [indptr[s]:indptr[s+1]] holds the KG neighbors of
        active_items[s]. Items without KG neighbors do not appear.
        """
        if self._item_edges_cache is not None:
            return self._item_edges_cache
        mask = self.triplets[:, 0] < self.num_items
        edges = self.triplets[mask]
        order = np.argsort(edges[:, 0], kind="stable")
        edges = edges[order]
        heads = edges[:, 0]
        active_items, counts = np.unique(heads, return_counts=True)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        self._item_edges_cache = (active_items, indptr, heads, edges[:, 1], edges[:, 2])
        return self._item_edges_cache


@dataclass
class SplitDataset:
    """Disjoint train/validation/test edge lists plus membership indexes."""

    train: Array
    validation: Array
    test: Array
    seed: int

    def __post_init__(self):
        self._observed: list[set[int]] | None = None

    def user_items(self, part: str) -> dict[int, set[int]]:
        arr = getattr(self, part)
        out: dict[int, set[int]] = {}
        for u, i in arr:
            out.setdefault(int(u), set()).add(int(i))
        return out

    def observed_by_user(self, num_users: int) -> list[set[int]]:
        """All interactions of each user across every split (for negative masking)."""
        if self._observed is None or len(self._observed) != num_users:
            obs: list[set[int]] = [set() for _ in range(num_users)]
            for part in (self.train, self.validation, self.test):
                for u, i in part:
                    obs[int(u)].add(int(i))
            self._observed = obs
        return self._observed


@dataclass
class FrequencyFeatures:
    """Log-normalized interaction frequencies, phi = log(1+f)/log(1+max f)."""

    user_phi: Array
    item_phi: Array
    user_counts: Array
    item_counts: Array


@dataclass
class SynthConfig:
    num_users: int = 200
    num_items: int = 300
    num_entities: int = 360
    num_relations: int = 4
    popularity_exponent: float = 1.2
    latent_dim: int = 16
    semantic_noise_by_frequency: bool = False
    avg_user_degree: int = 14
    seed: int = 0

    def __post_init__(self):
        if min(self.num_users, self.num_items, self.num_relations) < 2:
            raise ValueError("counts must be >= 2")
        if self.num_entities < self.num_items:
            raise ValueError("num_entities must cover the item prefix")
        if self.popularity_exponent <= 0:
            raise ValueError("popularity_exponent must be positive")


# ---------------------------------------------------------------------------
# parsing


def _iter_data_lines(text: Iterable[str]):
    for line_no, raw in enumerate(text, start=1):
        line = raw.rstrip("\n").rstrip("\r")
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        yield line_no, line


def parse_interactions(text: Iterable[str]) -> InteractionGraph:
    """Parse "user<TAB>item" lines into dense first-occurrence ids, deduplicated."""
    user_ids: dict[str, int] = {}
    item_ids: dict[str, int] = {}
    seen: set[tuple[int, int]] = set()
    edges: list[tuple[int, int]] = []
    for line_no, line in _iter_data_lines(text):
        parts = line.split("\t")
        if len(parts) != 2:
            raise ParseError(f"expected 2 tab-separated fields, got {len(parts)}", line_no)
        u_tok, i_tok = parts[0].strip(), parts[1].strip()
        if not u_tok or not i_tok:
            raise ParseError("empty token", line_no)
        u = user_ids.setdefault(u_tok, len(user_ids))
        i = item_ids.setdefault(i_tok, len(item_ids))
        if (u, i) not in seen:
            seen.add((u, i))
            edges.append((u, i))
    return InteractionGraph.from_edges(
        num_users=len(user_ids),
        num_items=len(item_ids),
        edges=edges,
        user_tokens=list(user_ids),
        item_tokens=list(item_ids),
    )


def parse_kg(text: Iterable[str], graph: InteractionGraph, strict_linking: bool = False) -> KnowledgeGraph:
    """Parse "head<TAB>relation<TAB>tail" triples against an interaction graph.

    Heads/tails matching item tokens reuse item ids; other entities get fresh
    ids starting at num_items. With ``strict_linking``, a head token that is
    not a known item raises :class:`LinkError`.
    """
    item_ids = {tok: idx for idx, tok in enumerate(graph.item_tokens or [])}
    entity_ids: dict[str, int] = dict(item_ids)
    entity_tokens: list[str] = list(graph.item_tokens or [])
    # The item prefix is reserved even for items never mentioned in the KG.
    next_id = graph.num_items
    relation_ids: dict[str, int] = {}
    triplets: list[tuple[int, int, int]] = []

    def entity_id(tok: str) -> int:
        nonlocal next_id
        if tok in entity_ids:
            return entity_ids[tok]
        entity_ids[tok] = next_id
        entity_tokens.append(tok)
        next_id += 1
        return entity_ids[tok]

    for line_no, line in _iter_data_lines(text):
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", line_no)
        h_tok, r_tok, t_tok = (p.strip() for p in parts)
        if strict_linking and h_tok not in item_ids:
            raise LinkError(f"line {line_no}: head {h_tok!r} is not a known item token")
        h = entity_id(h_tok)
        r = relation_ids.setdefault(r_tok, len(relation_ids))
        t = entity_id(t_tok)
        triplets.append((h, r, t))

    return KnowledgeGraph(
        num_items=graph.num_items,
        num_entities=max(next_id, graph.num_items),
        num_relations=max(len(relation_ids), 1),
        triplets=np.asarray(triplets, dtype=np.int64).reshape(-1, 3),
        entity_tokens=entity_tokens,
        relation_tokens=list(relation_ids),
    )


# ---------------------------------------------------------------------------
# filtering / splitting / statistics


def filter_low_frequency(edges: Array, min_interactions: int) -> Array:
    """Drop users with fewer than ``min_interactions`` edges, to fixed point.

    Items are never removed. Removing a user cannot change another user's
    degree, but the loop runs until no change for faithfulness.
    """
    if min_interactions < 0:
        raise ValueError("min_interactions must be >= 0")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    while True:
        if not edges.size:
            return edges
        users, counts = np.unique(edges[:, 0], return_counts=True)
        bad = set(users[counts < min_interactions].tolist())
        if not bad:
            return edges
        keep = np.array([u not in bad for u in edges[:, 0]])
        edges = edges[keep]


def split_interactions(edges: Array, ratios: tuple[float, float, float] = (7, 1, 2), rng_seed: int = 0) -> SplitDataset:
    """Seeded per-user split; floor counts per part, remainder goes to train.

    Users with fewer than 3 edges send everything to train.
    """
    if min(ratios) < 0 or sum(ratios) <= 0:
        raise ValueError("ratios must be positive")
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0x5B17]))
    total = float(sum(ratios))
    train, val, test = [], [], []
    users = np.unique(edges[:, 0]) if edges.size else np.array([], dtype=np.int64)
    for u in users:
        user_edges = edges[edges[:, 0] == u]
        n = len(user_edges)
        perm = rng.permutation(n)
        if n < 3:
            train.extend(user_edges.tolist())
            continue
        n_val = int(n * ratios[1] / total)
        n_test = int(n * ratios[2] / total)
        n_train = n - n_val - n_test
        shuffled = user_edges[perm]
        train.extend(shuffled[:n_train].tolist())
        val.extend(shuffled[n_train:n_train + n_val].tolist())
        test.extend(shuffled[n_train + n_val:].tolist())
    to_arr = lambda rows: np.asarray(rows, dtype=np.int64).reshape(-1, 2)
    return SplitDataset(train=to_arr(train), validation=to_arr(val), test=to_arr(test), seed=rng_seed)


def _phi(counts: Array) -> Array:
    counts = counts.astype(np.float64)
    max_count = counts.max() if counts.size else 0.0
    if max_count <= 0:
        return np.zeros_like(counts)
    return np.log1p(counts) / np.log1p(max_count)


def frequency_features(graph: InteractionGraph, train_edges: Array) -> FrequencyFeatures:
    """Per-node phi computed from training edges only (no test leakage)."""
    train_edges = np.asarray(train_edges, dtype=np.int64).reshape(-1, 2)
    user_counts = np.bincount(train_edges[:, 0], minlength=graph.num_users).astype(np.int64)
    item_counts = np.bincount(train_edges[:, 1], minlength=graph.num_items).astype(np.int64)
    return FrequencyFeatures(
        user_phi=_phi(user_counts),
        item_phi=_phi(item_counts),
        user_counts=user_counts,
        item_counts=item_counts,
    )


# ---------------------------------------------------------------------------
# synthetic corpus


def _unit_rows(m: Array) -> Array:
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return m / norms


def gen_synthetic(config: SynthConfig) -> tuple[InteractionGraph, KnowledgeGraph, Array, SplitDataset]:
    """Seeded synthetic corpus with power-law popularity and latent clusters.

    Returns (graph, kg, semantic_vectors, split) where semantic vectors are
    one row per entity in latent space: the entity's latent factor plus noise.
    With ``semantic_noise_by_frequency`` the noise scale grows with an item's
    interaction count, so popular items get unreliable semantics while rare
    items stay clean (the regime the frequency gate is meant to resolve).
    """
    graph, kg, semantic, split, _ = gen_synthetic_with_factors(config)
    return graph, kg, semantic, split


def gen_synthetic_with_factors(
    config: SynthConfig,
) -> tuple[InteractionGraph, KnowledgeGraph, Array, SplitDataset, Array]:
    """:func:`gen_synthetic` plus the true per-entity latent factors, so tests
    can verify the semantic vectors against what generated them."""
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD0C5]))
    k = config.latent_dim
    n_clusters = max(2, config.num_relations)

    centers = _unit_rows(rng.normal(size=(n_clusters, k)))
    item_cluster = rng.integers(0, n_clusters, size=config.num_items)
    item_factors = _unit_rows(centers[item_cluster] + 0.35 * rng.normal(size=(config.num_items, k)))
    user_cluster = rng.integers(0, n_clusters, size=config.num_users)
    user_factors = _unit_rows(centers[user_cluster] + 0.35 * rng.normal(size=(config.num_users, k)))

    # popularity: zipf weights over a seeded random item order
    ranks = rng.permutation(config.num_items)
    pop_weight = (ranks + 1.0) ** (-config.popularity_exponent)

    # user activity: power law, floor of 4 so splits stay non-degenerate
    act = (rng.permutation(config.num_users) + 1.0) ** (-0.85)
    degrees = np.maximum(4, np.round(act / act.mean() * config.avg_user_degree)).astype(np.int64)
    degrees = np.minimum(degrees, max(4, config.num_items // 3))

    # active users skew mainstream (stronger popularity tilt), sparse users
    # niche; this couples user activity to item frequency the way real
    # catalogs do, while keeping the aggregate power law intact
    act_norm = (degrees - degrees.min()) / max(1, degrees.max() - degrees.min())
    tilts = 0.45 + 1.2 * act_norm
    tilts = tilts * (degrees.sum() / float((degrees * tilts).sum()))  # edge-weighted mean 1
    edge_set: set[tuple[int, int]] = set()
    for u in range(config.num_users):
        affinity = item_factors @ user_factors[u]
        p = pop_weight ** tilts[u] * np.exp(3.0 * affinity)
        p = p / p.sum()
        chosen = rng.choice(config.num_items, size=int(degrees[u]), replace=False, p=p)
        edge_set.update((u, int(i)) for i in chosen)
    # every item appears at least once so written files round-trip losslessly
    covered = {i for _, i in edge_set}
    for i in range(config.num_items):
        if i not in covered:
            edge_set.add((int(rng.integers(0, config.num_users)), i))
    edges = sorted(edge_set)
    graph = InteractionGraph.from_edges(
        config.num_users,
        config.num_items,
        edges,
        user_tokens=[f"u{n}" for n in range(config.num_users)],
        item_tokens=[f"i{n}" for n in range(config.num_items)],
    )

    # attribute entities beyond the item prefix, each tied to a cluster
    n_attr = config.num_entities - config.num_items
    attr_cluster = rng.integers(0, n_clusters, size=n_attr) if n_attr else np.array([], dtype=np.int64)
    attr_factors = _unit_rows(centers[attr_cluster] + 0.2 * rng.normal(size=(n_attr, k))) if n_attr else np.zeros((0, k))

    triplets: list[tuple[int, int, int]] = []
    cluster_items = [np.flatnonzero(item_cluster == c) for c in range(n_clusters)]
    cluster_attrs = [np.flatnonzero(attr_cluster == c) + config.num_items for c in range(n_clusters)]
    for i in range(config.num_items):
        c = item_cluster[i]
        attrs = cluster_attrs[c]
        if len(attrs):
            for e in rng.choice(attrs, size=min(2, len(attrs)), replace=False):
                triplets.append((i, int(rng.integers(0, config.num_relations)), int(e)))
        siblings = cluster_items[c][cluster_items[c] != i]
        if len(siblings):
            e = int(rng.choice(siblings))
            triplets.append((i, int(rng.integers(0, config.num_relations)), e))
    kg = KnowledgeGraph(
        num_items=config.num_items,
        num_entities=config.num_entities,
        num_relations=config.num_relations,
        triplets=np.asarray(triplets, dtype=np.int64).reshape(-1, 3),
        entity_tokens=[f"i{n}" for n in range(config.num_items)] + [f"e{n}" for n in range(n_attr)],
        relation_tokens=[f"r{n}" for n in range(config.num_relations)],
    )

    # semantic vectors: latent factor plus noise. Frequency-scaled mode gives
    # popular items structured noise drifting toward a wrong cluster's factor,
    # so their semantics actively mislead (the dilution regime the frequency
    # gate must detect); rare items keep clean, discriminative vectors.
    item_counts = graph.item_degrees().astype(np.float64)
    phi_items = _phi(item_counts)
    base_noise = 0.08
    factors = np.vstack([item_factors, attr_factors])
    targets = factors.copy()
    if config.semantic_noise_by_frequency:
        decoy_cluster = (item_cluster + 1 + rng.integers(0, n_clusters - 1, size=config.num_items)) % n_clusters
        decoy = _unit_rows(centers[decoy_cluster] + 0.35 * rng.normal(size=(config.num_items, k)))
        blend = np.clip(1.35 * phi_items**1.5, 0.0, 1.0)[:, None]
        targets[: config.num_items] = (1.0 - blend) * item_factors + blend * decoy
    semantic = _unit_rows(targets + base_noise * rng.normal(size=targets.shape))

    # relabel so that ids equal first-occurrence parse order: written files
    # then re-parse to bitwise-identical graphs and split manifests line up
    graph, kg, semantic, factors = _canonicalize_ids(graph, kg, semantic, factors)
    split = split_interactions(graph.edges, rng_seed=config.seed)
    return graph, kg, semantic, split, factors


def _canonicalize_ids(
    graph: InteractionGraph, kg: KnowledgeGraph, semantic: Array, factors: Array
) -> tuple[InteractionGraph, KnowledgeGraph, Array, Array]:
    perm_u = np.full(graph.num_users, -1, dtype=np.int64)
    perm_i = np.full(graph.num_items, -1, dtype=np.int64)
    next_u = next_i = 0
    for u, i in graph.edges:
        if perm_u[u] < 0:
            perm_u[u] = next_u
            next_u += 1
        if perm_i[i] < 0:
            perm_i[i] = next_i
            next_i += 1
    # nodes without edges keep their relative order after the used prefix
    for old in range(graph.num_users):
        if perm_u[old] < 0:
            perm_u[old] = next_u
            next_u += 1
    for old in range(graph.num_items):
        if perm_i[old] < 0:
            perm_i[old] = next_i
            next_i += 1

    edges = np.column_stack([perm_u[graph.edges[:, 0]], perm_i[graph.edges[:, 1]]])
    inv_u = np.argsort(perm_u)
    inv_i = np.argsort(perm_i)
    tokens_u = [graph.user_tokens[o] for o in inv_u] if graph.user_tokens else None
    tokens_i = [graph.item_tokens[o] for o in inv_i] if graph.item_tokens else None
    graph2 = InteractionGraph.from_edges(graph.num_users, graph.num_items, edges, tokens_u, tokens_i)

    perm_e = np.arange(kg.num_entities)
    perm_e[: kg.num_items] = perm_i
    triplets = kg.triplets.copy()
    if triplets.size:
        triplets[:, 0] = perm_e[triplets[:, 0]]
        triplets[:, 2] = perm_e[triplets[:, 2]]
    ent_tokens = None
    if kg.entity_tokens:
        ent_tokens = list(kg.entity_tokens)
        for old in range(kg.num_items):
            ent_tokens[perm_i[old]] = kg.entity_tokens[old]
    kg2 = KnowledgeGraph(
        num_items=kg.num_items,
        num_entities=kg.num_entities,
        num_relations=kg.num_relations,
        triplets=triplets,
        entity_tokens=ent_tokens,
        relation_tokens=kg.relation_tokens,
    )
    inv_e = np.argsort(perm_e)
    return graph2, kg2, semantic[inv_e], factors[inv_e]


# ---------------------------------------------------------------------------
# file formats


def write_interactions_file(path, graph: InteractionGraph) -> None:
    tokens_u = graph.user_tokens or [str(u) for u in range(graph.num_users)]
    tokens_i = graph.item_tokens or [str(i) for i in range(graph.num_items)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# user\titem\n")
        for u, i in graph.edges:
            fh.write(f"{tokens_u[u]}\t{tokens_i[i]}\n")


def write_kg_file(path, kg: KnowledgeGraph) -> None:
    ent = kg.entity_tokens or [str(e) for e in range(kg.num_entities)]
    rel = kg.relation_tokens or [str(r) for r in range(kg.num_relations)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# head\trelation\ttail\n")
        for h, r, t in kg.triplets:
            fh.write(f"{ent[h]}\t{rel[r]}\t{ent[t]}\n")


def write_split_manifest(path, split: SplitDataset, edges: Array) -> None:
    """Persist a split as row indices into the given (filtered) edge list."""
    index = {(int(u), int(i)): n for n, (u, i) in enumerate(edges)}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("#dcgl-split v1\n")
        fh.write(f"seed={split.seed}\n")
        for name in ("train", "validation", "test"):
            rows = getattr(split, name)
            idx = " ".join(str(index[(int(u), int(i))]) for u, i in rows)
            fh.write(f"{name}={idx}\n")


def read_split_manifest(path, edges: Array) -> SplitDataset:
    parts: dict[str, Array] = {}
    seed = 0
    edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            if key == "seed":
                seed = int(value)
            elif key in ("train", "validation", "test"):
                idx = np.array([int(x) for x in value.split()] if value else [], dtype=np.int64)
                parts[key] = edges[idx]
            else:
                raise ValueError(f"unknown split manifest key: {key}")
    return SplitDataset(
        train=parts.get("train", np.zeros((0, 2), dtype=np.int64)),
        validation=parts.get("validation", np.zeros((0, 2), dtype=np.int64)),
        test=parts.get("test", np.zeros((0, 2), dtype=np.int64)),
        seed=seed,
    )


EMBEDDING_MAGIC = b"DCGLEMB1"


def write_embedding_file(path, entity_ids: Sequence[int], vectors: Array) -> None:
    """Binary semantic-embedding file: magic, u32 count, u32 dim, then
    (u32 entity id, dim little-endian f32) records."""
    vectors = np.asarray(vectors)
    if vectors.ndim != 2 or len(entity_ids) != len(vectors):
        raise ValueError("vectors must be [n, dim] aligned with entity_ids")
    with open(path, "wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<II", len(entity_ids), vectors.shape[1]))
        for eid, vec in zip(entity_ids, vectors):
            fh.write(struct.pack("<I", int(eid)))
            fh.write(vec.astype("<f4").tobytes())


def read_embedding_file(path) -> tuple[Array, Array]:
    """Returns (entity_ids [n], vectors [n, dim] float64)."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != EMBEDDING_MAGIC:
            raise ValueError(f"bad embedding file magic: {magic!r}")
        count, dim = struct.unpack("<II", fh.read(8))
        ids = np.empty(count, dtype=np.int64)
        vecs = np.empty((count, dim), dtype=np.float64)
        for n in range(count):
            (ids[n],) = struct.unpack("<I", fh.read(4))
            buf = fh.read(4 * dim)
            if len(buf) != 4 * dim:
                raise ValueError("truncated embedding file")
            vecs[n] = np.frombuffer(buf, dtype="<f4").astype(np.float64)
    return ids, vecs


def write_id_map(path, tokens: Sequence[str]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for idx, tok in enumerate(tokens):
            fh.write(f"{tok}\t{idx}\n")


def read_id_map(path) -> dict[str, int]:
    out: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for raw in fh:
            line = raw.rstrip("\n")
            if not line:
                continue
            tok, _, idx = line.partition("\t")
            out[tok] = int(idx)
    return out


def semantic_matrix_for(kg: KnowledgeGraph, entity_ids: Array, vectors: Array) -> Array:
    """Arrange file records into a dense [num_entities, dim] float64 matrix.

    Entities absent from the file get zero vectors; their count is the
    caller's to log.
    """
    out = np.zeros((kg.num_entities, vectors.shape[1]), dtype=np.float64)
    for eid, vec in zip(entity_ids, vectors):
        if 0 <= eid < kg.num_entities:
            out[eid] = vec
    return out
