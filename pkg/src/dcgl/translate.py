"""Translation-based regularization over KG triplets (head + relation = tail).

Trained in alternation with the main ranking objective so its gradients never
mix into the collaborative-filtering pass.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkit as dk
from .corpus import KnowledgeGraph

Array = np.ndarray


@dataclass
class CorruptedBatch:
    """(h, r, t, t') rows where t' is a uniformly resampled corrupted tail."""

    heads: Array
    rels: Array
    tails: Array
    corrupt_tails: Array

    def __len__(self) -> int:
        return len(self.heads)


def transe_distance(h, r, t):
    """L1 translation distance |h + r - t|_1 for vectors or row batches."""
    diff = dk.sub(dk.add(h, r), t)
    axis = None if dk.value_of(diff).ndim == 1 else 1
    return dk.reduce_sum(dk.absolute(diff), axis=axis)


def transe_loss(batch: CorruptedBatch, entity_emb, rel_emb):
    """Sum over the batch of -ln sigmoid(d(h,r,t') - d(h,r,t)).

    Valid triplets are pushed to smaller distances than corrupted ones.
    Implemented as softplus(-(d_neg - d_pos)) for numerical stability.
    """
    if len(batch) == 0:
        raise ValueError("transe_loss requires a non-empty batch")
    h = dk.gather_rows(entity_emb, batch.heads)
    r = dk.gather_rows(rel_emb, batch.rels)
    t = dk.gather_rows(entity_emb, batch.tails)
    t_neg = dk.gather_rows(entity_emb, batch.corrupt_tails)
    d_pos = transe_distance(h, r, t)
    d_neg = transe_distance(h, r, t_neg)
    return dk.reduce_sum(dk.softplus(dk.sub(d_pos, d_neg)))


def sample_corrupted(kg: KnowledgeGraph, batch_size: int, rng: np.random.Generator) -> CorruptedBatch:
    """Uniform triplet sample; tails resampled uniformly until t' != t."""
    if kg.num_triplets < 1:
        raise ValueError("cannot sample from an empty knowledge graph")
    if kg.num_entities < 2:
        raise ValueError("corruption needs at least 2 entities")
    idx = rng.integers(0, kg.num_triplets, size=batch_size)
    rows = kg.triplets[idx]
    corrupt = rng.integers(0, kg.num_entities, size=batch_size)
    while True:
        clash = corrupt == rows[:, 2]
        if not clash.any():
            break
        corrupt[clash] = rng.integers(0, kg.num_entities, size=int(clash.sum()))
    return CorruptedBatch(
        heads=rows[:, 0].copy(),
        rels=rows[:, 1].copy(),
        tails=rows[:, 2].copy(),
        corrupt_tails=corrupt,
    )
