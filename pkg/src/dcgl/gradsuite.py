"""Finite-difference verification of every differentiable operation in the
engine, from the primitive kernels up to the assembled training objective.

Each composite check builds a d=8 toy corpus, wraps the operation as a scalar
function of its parameter arrays, and compares recorded gradients against
central differences. Trial inputs that land within the FD window of a
piecewise-linear kink (LeakyReLU, |.|) are resampled: the subgradient
convention there is fixed by design and not a finite-difference target.
The CI entry point is ``dcgl gradcheck``.
"""
from __future__ import annotations

import numpy as np

from . import diffkit as dk, fusion, kg_encoder, ssl, translate, trainer
from .cf_propagation import NormalizedAdjacency, propagate
from .corpus import SynthConfig, gen_synthetic
from .model import DataBundle, DualChannelModel
from .trainer import TrainConfig

KINK_MARGIN = 5e-4  # comfortably above eps times any co-input scale here


def _toy_bundle(seed: int) -> DataBundle:
    graph, kg, semantic, split = gen_synthetic(
        SynthConfig(
            num_users=5,
            num_items=6,
            num_entities=9,
            num_relations=3,
            latent_dim=5,
            avg_user_degree=4,
            seed=seed,
        )
    )
    return DataBundle(graph=graph, kg=kg, semantic=semantic, split=split)


def _toy_model(seed: int, **config_kwargs) -> tuple[DualChannelModel, dict]:
    config = TrainConfig(
        embed_dim=8,
        kg_layers=2,
        cf_layers=2,
        batch_size=8,
        seed=seed,
        **config_kwargs,
    )
    bundle = _toy_bundle(seed)
    model = DualChannelModel(config, bundle)
    params = model.init_params(seed)
    # move off the zero init so gate gradients are generic
    rng = np.random.default_rng(seed + 17)
    for name in params:
        if name.startswith("gate."):
            params[name] = rng.normal(scale=0.3, size=params[name].shape)
    return model, params


def _fd_safe_check(make_case, rng, eps, tol, name, attempts: int = 60):
    """Resample the case until no kink sits inside the FD window, then check."""
    fn = params = None
    for _ in range(attempts):
        fn, params = make_case(rng)
        with dk.track_kinks() as tracker:
            fn({k: np.asarray(v, dtype=np.float64) for k, v in params.items()})
        if tracker.min_abs > KINK_MARGIN:
            break
    return dk.check_scalar_function(fn, params, eps=eps, tol=tol, name=name)


def _case_adapter(rng):
    d_llm, d_mid, d = 6, 7, 8
    raw = rng.normal(size=(4, d_llm))
    up = rng.normal(size=(4, d))
    params = {
        "W1": rng.normal(size=(d_mid, d_llm)) * 0.4,
        "b1": rng.normal(size=d_mid) * 0.1,
        "W2": rng.normal(size=(d, d_mid)) * 0.4,
        "b2": rng.normal(size=d) * 0.1,
    }

    def fn(p):
        out = kg_encoder.adapt_semantic(raw, kg_encoder.AdapterParams(**p))
        return dk.reduce_sum(dk.mul(out, up))

    return fn, params


def _case_rgat(rng):
    bundle = _toy_bundle(int(rng.integers(1 << 30)))
    kg = bundle.kg
    d = 8
    up = rng.normal(size=(kg.num_items, d))
    params = {
        "entity": rng.normal(size=(kg.num_entities, d)) * 0.5,
        "rel": rng.normal(size=(kg.num_relations, d)) * 0.5,
        "attn": rng.normal(size=(d, 2 * d)) * 0.3,
    }

    def fn(p):
        items = kg_encoder.rgat_encode(p["entity"], p["rel"], kg, p["attn"], 2)
        return dk.reduce_sum(dk.mul(items, up))

    return fn, params


def _case_lightgcn(rng):
    bundle = _toy_bundle(int(rng.integers(1 << 30)))
    adj = bundle.adjacency
    d = 8
    g = bundle.graph
    up_u = rng.normal(size=(g.num_users, d))
    up_i = rng.normal(size=(g.num_items, d))
    params = {
        "users": rng.normal(size=(g.num_users, d)),
        "items": rng.normal(size=(g.num_items, d)),
    }

    def fn(p):
        u, i = propagate(p["users"], p["items"], adj, 2, combine="mean")
        return dk.add(dk.reduce_sum(dk.mul(u, up_u)), dk.reduce_sum(dk.mul(i, up_i)))

    return fn, params


def _case_transe(rng):
    bundle = _toy_bundle(int(rng.integers(1 << 30)))
    kg = bundle.kg
    d = 8
    batch = translate.sample_corrupted(kg, 5, rng)
    params = {
        "entity": rng.normal(size=(kg.num_entities, d)),
        "rel": rng.normal(size=(kg.num_relations, d)),
    }

    def fn(p):
        return translate.transe_loss(batch, p["entity"], p["rel"])

    return fn, params


def _case_infonce(denominator):
    def make(rng):
        params = {
            "z1": rng.normal(size=(6, 8)),
            "z2": rng.normal(size=(6, 8)),
        }

        def fn(p):
            return ssl.info_nce(p["z1"], p["z2"], tau=0.4, denominator=denominator)

        return fn, params

    return make


def _case_align(rng):
    d = 8
    params = {
        "u_id": rng.normal(size=(5, d)),
        "u_llm": rng.normal(size=(5, d)),
        "W1": rng.normal(size=(d, d)) * 0.4,
        "b1": rng.normal(size=d) * 0.1,
        "W2": rng.normal(size=(d, d)) * 0.4,
        "b2": rng.normal(size=d) * 0.1,
    }

    def fn(p):
        proj = ssl.ProjectionParams(W1=p["W1"], b1=p["b1"], W2=p["W2"], b2=p["b2"])
        return ssl.align_loss(p["u_id"], p["u_llm"], proj, tau=0.4)

    return fn, params


def _case_gate_score(rng):
    d = 8
    n = 5
    phi_u = rng.uniform(0, 1, size=n)
    phi_i = rng.uniform(0, 1, size=n)
    params = {
        "u_id": rng.normal(size=(n, d)),
        "i_id": rng.normal(size=(n, d)),
        "u_llm": rng.normal(size=(n, d)),
        "i_llm": rng.normal(size=(n, d)),
        "Wu": rng.normal(size=2 * d + 1) * 0.3,
        "bu": rng.normal(size=()) * 0.3,
        "Wi": rng.normal(size=2 * d + 1) * 0.3,
        "bi": rng.normal(size=()) * 0.3,
    }

    def fn(p):
        zu = fusion.gate_logit(p["u_id"], p["u_llm"], phi_u, p["Wu"], p["bu"])
        zi = fusion.gate_logit(p["i_id"], p["i_llm"], phi_i, p["Wi"], p["bi"])
        g_u = dk.sigmoid(zu)
        g_i = dk.sigmoid(zi)
        y, alpha = fusion.score_pairs(p["u_id"], p["i_id"], p["u_llm"], p["i_llm"], g_u, g_i)
        reg = fusion.gate_regularization(g_u, g_i, g_i)
        return dk.add(dk.reduce_sum(dk.mul(y, alpha)), reg)

    return fn, params


def _case_total(rng):
    seed = int(rng.integers(1 << 30))
    model, params = _toy_model(seed, lambda_reg=1e-3)
    bundle = model.bundle
    triples = trainer.sample_bpr_triples(bundle.split, bundle.graph, 6, rng)
    kg_aug = ssl.drop_edges_kg(bundle.kg, 0.4, rng)
    stability = np.clip(rng.uniform(0.3, 1.0, size=bundle.graph.num_items), 0, 1)
    graph_aug = ssl.stab_adaptive_drop(bundle.graph, stability, 0.9, rng)
    adj_aug = NormalizedAdjacency.from_edges(
        graph_aug.edges, bundle.graph.num_users, bundle.graph.num_items
    )
    # the dynamic BPR weight is data, not a differentiation path: freeze it at
    # the unperturbed parameters so FD and the tape see the same function
    outputs = model.encode(params)
    _, alpha = model.pair_scores(params, outputs, triples.users, triples.pos_items)
    weights = np.asarray(alpha, dtype=np.float64)

    def fn(p):
        loss, _ = trainer.total_loss(model, p, triples, model.config, (kg_aug, adj_aug),
                                     bpr_weights=weights)
        return loss

    return fn, params


COMPOSITE_CASES = {
    "adapter": _case_adapter,
    "rgat_stack": _case_rgat,
    "lightgcn_stack": _case_lightgcn,
    "transe_loss": _case_transe,
    "info_nce_exclusive": _case_infonce("exclusive"),
    "info_nce_inclusive": _case_infonce("inclusive"),
    "align_loss": _case_align,
    "gate_score_regularizer": _case_gate_score,
    "total_loss": _case_total,
}


def composite_checks(seed: int = 0, trials: int = 20, eps: float = 1e-5, tol: float = 1e-4):
    """GradReports for the assembled operations, ``trials`` runs each."""
    reports = []
    for index, (name, make_case) in enumerate(COMPOSITE_CASES.items()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xC0, index]))
        worst = 0.0
        ok = True
        for _ in range(trials):
            rep = _fd_safe_check(make_case, rng, eps, tol, name)
            worst = max(worst, rep.max_rel_error)
            ok = ok and rep.passed
        reports.append(dk.GradReport(name, worst, trials, ok))
    return reports


def run_all(seed: int = 0, trials: int = 20) -> list[dk.GradReport]:
    """Kernel suite plus composite checks; the full gradient oracle run."""
    reports = dk.run_gradient_suite(seed=seed, trials=trials)
    reports.extend(composite_checks(seed=seed, trials=trials))
    return reports
