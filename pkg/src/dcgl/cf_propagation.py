"""LightGCN-style collaborative propagation over the interaction graph."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from . import diffkit as dk

Array = np.ndarray


@dataclass
class NormalizedAdjacency:
    """Degree-normalized bipartite adjacency, stored in both directions.

    Coefficient of edge (u, i) is 1/sqrt(|N_u| * |N_i|); built from training
    edges only so evaluation splits never leak into propagation.
    """

    user_to_item: sp.csr_matrix  # [num_users, num_items]
    item_to_user: sp.csr_matrix  # [num_items, num_users]

    @classmethod
    def from_edges(cls, edges: Array, num_users: int, num_items: int) -> "NormalizedAdjacency":
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        user_deg = np.bincount(edges[:, 0], minlength=num_users).astype(np.float64)
        item_deg = np.bincount(edges[:, 1], minlength=num_items).astype(np.float64)
        if edges.size:
            coef = 1.0 / np.sqrt(user_deg[edges[:, 0]] * item_deg[edges[:, 1]])
        else:
            coef = np.zeros(0)
        ui = sp.csr_matrix((coef, (edges[:, 0], edges[:, 1])), shape=(num_users, num_items))
        return cls(user_to_item=ui, item_to_user=ui.T.tocsr())


def lightgcn_layer(user_emb, item_emb, adj: NormalizedAdjacency):
    """One synchronous propagation step: both outputs read layer-l inputs."""
    next_user = dk.sparse_matmul(adj.user_to_item, item_emb)
    next_item = dk.sparse_matmul(adj.item_to_user, user_emb)
    return next_user, next_item


def propagate(user_emb, item_emb, adj: NormalizedAdjacency, num_layers: int, combine: str = "mean"):
    """Stack ``num_layers`` propagation steps.

    ``combine`` selects the final representation: "mean" averages layers
    0..num_layers (the LightGCN lineage convention, scale-stable); "last"
    returns the deepest layer only.
    """
    if combine not in ("mean", "last"):
        raise ValueError(f"unknown layer combination: {combine}")
    users = [user_emb]
    items = [item_emb]
    for _ in range(num_layers):
        u_next, i_next = lightgcn_layer(users[-1], items[-1], adj)
        users.append(u_next)
        items.append(i_next)
    if combine == "last":
        return users[-1], items[-1]
    scale = 1.0 / (num_layers + 1)
    u_sum = users[0]
    i_sum = items[0]
    for u_l, i_l in zip(users[1:], items[1:]):
        u_sum = dk.add(u_sum, u_l)
        i_sum = dk.add(i_sum, i_l)
    return dk.mul(u_sum, scale), dk.mul(i_sum, scale)
