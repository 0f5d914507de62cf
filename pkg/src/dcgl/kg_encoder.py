"""Relation-aware graph attention over the knowledge graph, per channel,
plus the adapter that maps raw semantic vectors into model space.

All functions are polymorphic over plain arrays and :mod:`dcgl.diffkit` Vars,
so the same code serves inference, training, and the finite-difference
oracles.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkit as dk
from .corpus import KnowledgeGraph

Array = np.ndarray


@dataclass
class AdapterParams:
    """Two-layer projection from raw semantic space (d_llm) to model space (d)."""

    W1: object  # [d_mid, d_llm]
    b1: object  # [d_mid]
    W2: object  # [d, d_mid]
    b2: object  # [d]


def default_mid_dim(d_llm: int, d: int) -> int:
    return (d_llm + d) // 2


def adapt_semantic(raw, adapter: AdapterParams):
    """W2 . LeakyReLU(W1 . raw + b1) + b2, for one vector or a row matrix."""
    raw_v = dk.value_of(raw)
    single = raw_v.ndim == 1
    x = raw if not single else _as_row(raw)
    w1_in = dk.value_of(adapter.W1).shape[1]
    if raw_v.shape[-1] != w1_in:
        raise ValueError(f"raw dim {raw_v.shape[-1]} does not match adapter input {w1_in}")
    hidden = dk.leaky_relu(dk.add(dk.matmul(x, dk.transpose(adapter.W1)), adapter.b1))
    out = dk.add(dk.matmul(hidden, dk.transpose(adapter.W2)), adapter.b2)
    if single:
        return _as_vector(out)
    return out


def _as_row(x):
    if isinstance(x, dk.Var):
        return dk.Var(x.value.reshape(1, -1), (x,), lambda g: (g.reshape(x.value.shape),))
    return dk.value_of(x).reshape(1, -1)


def _as_vector(x):
    if isinstance(x, dk.Var):
        return dk.Var(x.value.reshape(-1), (x,), lambda g: (g.reshape(x.value.shape),))
    return dk.value_of(x).reshape(-1)


def attention_logits(item_rows, tail_rows, rel_rows, W):
    """LeakyReLU(r^T W [x_e || x_i]) per edge row."""
    feats = dk.concat_cols([tail_rows, item_rows])  # [E, 2d]
    proj = dk.matmul(feats, dk.transpose(W))  # [E, d]
    return dk.leaky_relu(dk.reduce_sum(dk.mul(rel_rows, proj), axis=1))


def rgat_attention(item_emb, neighbor_embs, rel_embs, W):
    """Attention distribution over one item's KG neighbors."""
    neighbor_embs = list(neighbor_embs)
    rel_embs = list(rel_embs)
    if not neighbor_embs or len(neighbor_embs) != len(rel_embs):
        raise ValueError("neighbor and relation lists must be non-empty and equal length")
    tails = _stack_rows(neighbor_embs)
    rels = _stack_rows(rel_embs)
    items = _stack_rows([item_emb] * len(neighbor_embs))
    logits = attention_logits(items, tails, rels, W)
    return dk.softmax_row(logits)


def _stack_rows(rows):
    if any(isinstance(r, dk.Var) for r in rows):
        vars_rows = [r if isinstance(r, dk.Var) else dk.Var(r) for r in rows]
        value = np.stack([r.value for r in vars_rows])

        def vjp(g):
            return tuple(g[k] for k in range(len(vars_rows)))

        return dk.Var(value, tuple(vars_rows), vjp)
    return np.stack([dk.value_of(r) for r in rows])


def _segment_softmax(logits, indptr: Array):
    """Row softmax within contiguous segments; the per-segment max shift is a
    constant (softmax is shift-invariant, so it carries no gradient)."""
    values = dk.value_of(logits)
    seg_max = np.maximum.reduceat(values, indptr[:-1])
    shift = np.repeat(seg_max, np.diff(indptr))
    e = dk.exp(dk.sub(logits, shift))
    sums = dk.segment_sum(_col(e), indptr)
    denom = _flat(dk.gather_rows(sums, np.repeat(np.arange(len(indptr) - 1), np.diff(indptr))))
    return dk.div(e, denom)


def _col(x):
    if isinstance(x, dk.Var):
        return dk.Var(x.value.reshape(-1, 1), (x,), lambda g: (g.reshape(x.value.shape),))
    return dk.value_of(x).reshape(-1, 1)


def _flat(x):
    if isinstance(x, dk.Var):
        return dk.Var(x.value.reshape(-1), (x,), lambda g: (g.reshape(x.value.shape),))
    return dk.value_of(x).reshape(-1)


def rgat_layer(entity_emb, rel_emb, kg: KnowledgeGraph, W):
    """One residual attention layer over item-headed KG edges.

    ``entity_emb`` is the full [num_entities, d] table whose item prefix holds
    the current layer's item embeddings. Items without KG neighbors pass
    through unchanged; non-item entities are only read, never updated.
    Returns the next layer's [num_items, d] item block.
    """
    item_block = _row_slice(entity_emb, 0, kg.num_items)
    active_items, indptr, heads, rels, tails = kg.item_edge_arrays()
    if len(heads) == 0:
        return item_block
    tail_rows = dk.gather_rows(entity_emb, tails)
    rel_rows = dk.gather_rows(rel_emb, rels)
    head_rows = dk.gather_rows(entity_emb, heads)
    logits = attention_logits(head_rows, tail_rows, rel_rows, W)
    attn = _segment_softmax(logits, indptr)
    weighted = dk.mul(tail_rows, _col(attn))
    agg = dk.segment_sum(weighted, indptr)  # [num_active, d]
    return dk.scatter_add_rows(item_block, agg, active_items)


def _row_slice(x, lo: int, hi: int):
    if isinstance(x, dk.Var):
        def vjp(g):
            dx = np.zeros_like(x.value)
            dx[lo:hi] = g
            return (dx,)

        return dk.Var(x.value[lo:hi], (x,), vjp)
    return dk.value_of(x)[lo:hi]


def rgat_encode(entity_emb, rel_emb, kg: KnowledgeGraph, W, num_layers: int):
    """Stack ``num_layers`` attention layers; returns the final item block.

    Layer-0 inputs are the given entity table (ID channel: the free table;
    LLM channel: adapter outputs). Non-item entities stay at their layer-0
    values throughout; item rows are refreshed between layers so that tails
    which are themselves items contribute their current-layer values.
    """
    if num_layers < 0:
        raise ValueError("num_layers must be >= 0")
    current = entity_emb
    items = _row_slice(entity_emb, 0, kg.num_items)
    for _ in range(num_layers):
        items = rgat_layer(current, rel_emb, kg, W)
        current = _replace_item_rows(current, items, kg.num_items)
    return items


def _replace_item_rows(entity_emb, item_block, num_items: int):
    ev = dk.value_of(entity_emb)
    out_val = ev.copy()
    out_val[:num_items] = dk.value_of(item_block)
    parents = []
    if isinstance(entity_emb, dk.Var):
        parents.append(("e", entity_emb))
    if isinstance(item_block, dk.Var):
        parents.append(("i", item_block))
    if not parents:
        return out_val

    def vjp(g):
        grads = []
        for tag, _ in parents:
            if tag == "e":
                de = g.copy()
                de[:num_items] = 0.0
                grads.append(de)
            else:
                grads.append(g[:num_items])
        return tuple(grads)

    return dk.Var(out_val, tuple(p for _, p in parents), vjp)
