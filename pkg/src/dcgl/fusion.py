"""Frequency-aware gating, weighted-concatenation fusion and normalized
convex-combination scoring."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import diffkit as dk

Array = np.ndarray


@dataclass
class GateParams:
    """Separate user/item gating weights over [x_id || x_llm || phi]."""

    item_W: object  # [2d+1]
    item_b: object  # scalar
    user_W: object  # [2d+1]
    user_b: object  # scalar


@dataclass
class FusedRepresentation:
    vector: Array  # [2d] = [g*x_id || (1-g)*x_llm]
    gate: float


def gate_logit(x_id, x_llm, phi, W, b):
    """Pre-sigmoid gate activation W . [x_id || x_llm || phi] + b."""
    x_id_v = dk.value_of(x_id)
    single = x_id_v.ndim == 1
    if single:
        x_id, x_llm = _row(x_id), _row(x_llm)
        phi = np.asarray([dk.value_of(phi)], dtype=np.float64).reshape(1)
    feats = dk.concat_cols([x_id, x_llm, _col(phi)])
    z = dk.add(dk.reduce_sum(dk.mul(feats, W), axis=1), b)
    return _scalar(z) if single else z


def gate_weight(x_id, x_llm, phi, W, b):
    """sigmoid(W . [x_id || x_llm || phi] + b); strictly interior in (0,1)."""
    return dk.sigmoid(gate_logit(x_id, x_llm, phi, W, b))


def _row(x):
    if isinstance(x, dk.Var):
        return dk.Var(x.value.reshape(1, -1), (x,), lambda g: (g.reshape(x.value.shape),))
    return dk.value_of(x).reshape(1, -1)


def _col(x):
    if isinstance(x, dk.Var):
        return dk.Var(x.value.reshape(-1, 1), (x,), lambda g: (g.reshape(x.value.shape),))
    return dk.value_of(x).reshape(-1, 1)


def _scalar(x):
    if isinstance(x, dk.Var):
        return dk.Var(x.value.reshape(()), (x,), lambda g: (g.reshape(x.value.shape),))
    return dk.value_of(x).reshape(())


def fuse(x_id: Array, x_llm: Array, g: float) -> FusedRepresentation:
    """Weighted concatenation [g*x_id || (1-g)*x_llm]."""
    x_id = np.asarray(x_id, dtype=np.float64)
    x_llm = np.asarray(x_llm, dtype=np.float64)
    return FusedRepresentation(vector=np.concatenate([g * x_id, (1.0 - g) * x_llm]), gate=float(g))


def score_pairs(u_id, i_id, u_llm, i_llm, g_u, g_i):
    """Normalized convex-combination preference score for aligned row pairs.

    Returns (y_hat, alpha): y = (g_u g_i s_id + (1-g_u)(1-g_i) s_llm) / alpha
    with alpha = g_u g_i + (1-g_u)(1-g_i). Alpha doubles as the dynamic BPR
    weight for its (user, positive item) pair.
    """
    axis = None if dk.value_of(u_id).ndim == 1 else 1
    s_id = dk.reduce_sum(dk.mul(u_id, i_id), axis=axis)
    s_llm = dk.reduce_sum(dk.mul(u_llm, i_llm), axis=axis)
    w_id = dk.mul(g_u, g_i)
    w_llm = dk.mul(dk.sub(1.0, g_u), dk.sub(1.0, g_i))
    alpha = dk.add(w_id, w_llm)
    y = dk.div(dk.add(dk.mul(w_id, s_id), dk.mul(w_llm, s_llm)), alpha)
    return y, alpha


def predict_score(u_id, i_id, u_llm, i_llm, g_u: float, g_i: float) -> tuple[float, float]:
    """Single-pair convenience wrapper around :func:`score_pairs`."""
    y, alpha = score_pairs(
        np.asarray(u_id, dtype=np.float64),
        np.asarray(i_id, dtype=np.float64),
        np.asarray(u_llm, dtype=np.float64),
        np.asarray(i_llm, dtype=np.float64),
        float(g_u),
        float(g_i),
    )
    return float(y), float(alpha)


def gate_regularization(user_gates, pos_gates, neg_gates):
    """Mean over triples of sum_{x in {u,i,i'}} (-log g_x - log(1-g_x)).

    Minimized at g = 0.5; diverges as any gate saturates.
    """
    n = dk.value_of(user_gates).shape[0]
    if n == 0:
        raise ValueError("gate_regularization requires a non-empty triple list")
    total = None
    for g in (user_gates, pos_gates, neg_gates):
        term = dk.reduce_sum(dk.sub(0.0, dk.add(dk.log(g), dk.log(dk.sub(1.0, g)))))
        total = term if total is None else dk.add(total, term)
    return dk.mul(total, 1.0 / n)


def gate_regularization_from_logits(user_logits, pos_logits, neg_logits):
    """Saturation-proof form of :func:`gate_regularization`.

    With g = sigmoid(z): -log g - log(1-g) = softplus(-z) + softplus(z), which
    stays finite even when g rounds to 0 or 1 in floating point.
    """
    n = dk.value_of(user_logits).shape[0]
    if n == 0:
        raise ValueError("gate_regularization requires a non-empty triple list")
    total = None
    for z in (user_logits, pos_logits, neg_logits):
        term = dk.reduce_sum(dk.add(dk.softplus(z), dk.softplus(dk.sub(0.0, z))))
        total = term if total is None else dk.add(total, term)
    return dk.mul(total, 1.0 / n)
