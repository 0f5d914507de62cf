"""Multi-level contrastive learning: KG edge dropout, stability-guided
interaction dropout, intra-view InfoNCE and inter-view user alignment."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkit as dk
from .corpus import InteractionGraph, KnowledgeGraph

Array = np.ndarray

# instrumentation used by ablation isolation tests: incremented on every
# evaluation of the corresponding loss
call_counts = {"intra_view": 0, "align": 0}


def reset_call_counts() -> None:
    for key in call_counts:
        call_counts[key] = 0


@dataclass
class ProjectionParams:
    """Two dimension-preserving projections (linear + LeakyReLU), one per channel."""

    W1: object
    b1: object
    W2: object
    b2: object


def drop_edges_kg(kg: KnowledgeGraph, rho: float, rng: np.random.Generator) -> KnowledgeGraph:
    """Keep each triplet independently with probability 1 - rho."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [0, 1]")
    keep = rng.random(kg.num_triplets) >= rho
    return KnowledgeGraph(
        num_items=kg.num_items,
        num_entities=kg.num_entities,
        num_relations=kg.num_relations,
        triplets=kg.triplets[keep],
        entity_tokens=kg.entity_tokens,
        relation_tokens=kg.relation_tokens,
    )


def stability_scores(item_orig: Array, item_aug: Array) -> Array:
    """Per-item agreement between original and KG-perturbed encodings.

    Cosine agreement mapped to [0,1] then min-max rescaled over items; if all
    raw scores coincide the rescale is skipped and every item scores 1.
    Zero rows follow the cosine-of-zero-is-0 rule.
    """
    a = np.asarray(item_orig, dtype=np.float64)
    b = np.asarray(item_aug, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("item matrices must have equal shapes")
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    denom = na * nb
    cos = np.zeros(len(a))
    ok = denom > 0
    cos[ok] = (a[ok] * b[ok]).sum(axis=1) / denom[ok]
    raw = (cos + 1.0) / 2.0
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 1e-12:
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def stab_adaptive_drop(
    graph: InteractionGraph, scores: Array, mu: float, rng: np.random.Generator
) -> InteractionGraph:
    """Keep edge (u, i) with probability mu * S_i (drop prob 1 - mu*S_i)."""
    if not 0.0 < mu <= 1.0:
        raise ValueError("mu must lie in (0, 1]")
    scores = np.asarray(scores, dtype=np.float64)
    keep_p = mu * scores[graph.edges[:, 1]]
    keep = rng.random(graph.num_edges) < keep_p
    return InteractionGraph.from_edges(
        graph.num_users,
        graph.num_items,
        graph.edges[keep],
        user_tokens=graph.user_tokens,
        item_tokens=graph.item_tokens,
    )


def _diag(x):
    xv = dk.value_of(x)
    out = np.diag(xv).copy()
    if not isinstance(x, dk.Var):
        return out

    def vjp(g):
        dx = np.zeros_like(xv)
        np.fill_diagonal(dx, g)
        return (dx,)

    return dk.Var(out, (x,), vjp)


def _masked_row_logsumexp(scores, mask: Array):
    """log sum over masked entries of exp(scores), rows with >=1 unmasked entry."""
    sv = dk.value_of(scores)
    shifted = np.where(mask > 0, sv, -np.inf)
    shift = shifted.max(axis=1, keepdims=True)  # constant shift, no gradient
    e = dk.mul(dk.exp(dk.sub(scores, shift)), mask)
    return dk.add(dk.log(dk.reduce_sum(e, axis=1)), shift.reshape(-1))


def info_nce(z1, z2, tau: float, denominator: str = "exclusive"):
    """Contrastive loss over row-aligned views with cosine similarity.

    Positives sit on the diagonal. ``denominator`` picks which pairs the
    normalizer sums over: "exclusive" uses only m != n (the printed form,
    which can go negative); "inclusive" adds the positive back in (the
    conventional variant).
    """
    if tau <= 0:
        raise ValueError("tau must be positive")
    if denominator not in ("exclusive", "inclusive"):
        raise ValueError(f"unknown denominator mode: {denominator}")
    n = dk.value_of(z1).shape[0]
    if n < 2 or dk.value_of(z2).shape[0] != n:
        raise ValueError("info_nce needs two row-aligned matrices with N >= 2")
    z1n = dk.rows_l2_normalize(z1)
    z2n = dk.rows_l2_normalize(z2)
    sims = dk.mul(dk.matmul(z1n, dk.transpose(z2n)), 1.0 / tau)
    pos = _diag(sims)
    if denominator == "exclusive":
        mask = 1.0 - np.eye(n)
    else:
        mask = np.ones((n, n))
    lse = _masked_row_logsumexp(sims, mask)
    return dk.reduce_sum(dk.sub(lse, pos))


def intra_view_loss(
    orig: dict,
    aug: dict,
    tau: float,
    user_idx: Array | None = None,
    item_idx: Array | None = None,
    denominator: str = "exclusive",
):
    """Sum of InfoNCE(aug, orig) terms over users and items of every channel.

    ``orig``/``aug`` map channel tag -> (user matrix, item matrix); the index
    arrays restrict the loss to the current mini-batch's distinct users/items
    (None means the full set).
    """
    call_counts["intra_view"] += 1
    total = None
    for channel, (u_orig, i_orig) in orig.items():
        u_aug, i_aug = aug[channel]
        term = dk.add(
            info_nce(_take(u_aug, user_idx), _take(u_orig, user_idx), tau, denominator),
            info_nce(_take(i_aug, item_idx), _take(i_orig, item_idx), tau, denominator),
        )
        total = term if total is None else dk.add(total, term)
    if total is None:
        raise ValueError("intra_view_loss needs at least one channel")
    return total


def _take(x, idx):
    return x if idx is None else dk.gather_rows(x, idx)


def project_users(users, W, b):
    """Dimension-preserving projection: LeakyReLU(users @ W.T + b)."""
    return dk.leaky_relu(dk.add(dk.matmul(users, dk.transpose(W)), b))


def align_loss(
    u_id,
    u_llm,
    proj: ProjectionParams,
    tau: float,
    denominator: str = "exclusive",
):
    """InfoNCE between projected user views; same-user rows are positives."""
    call_counts["align"] += 1
    p_id = project_users(u_id, proj.W1, proj.b1)
    p_llm = project_users(u_llm, proj.W2, proj.b2)
    return info_nce(p_id, p_llm, tau, denominator)


def info_nce_reference(z1: Array, z2: Array, tau: float, denominator: str = "exclusive") -> float:
    """Brute-force double-loop oracle for info_nce (kept independent of it)."""
    z1 = np.asarray(z1, dtype=np.float64)
    z2 = np.asarray(z2, dtype=np.float64)
    n = len(z1)

    def cos(a, b):
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            return 0.0
        return float(a @ b) / (na * nb)

    total = 0.0
    for i in range(n):
        pos = np.exp(cos(z1[i], z2[i]) / tau)
        denom = 0.0
        for j in range(n):
            if denominator == "exclusive" and j == i:
                continue
            denom += np.exp(cos(z1[i], z2[j]) / tau)
        total += -np.log(pos / denom)
    return total
