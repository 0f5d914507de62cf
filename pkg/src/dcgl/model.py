"""Dual-channel model assembly: parameter store, encoder composition over
both graphs, gating and scoring, with ablation switches resolved up front."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cf_propagation, diffkit as dk, fusion, kg_encoder
from .corpus import (
    FrequencyFeatures,
    InteractionGraph,
    KnowledgeGraph,
    SplitDataset,
    frequency_features,
)

Array = np.ndarray

ABLATIONS = ("none", "no_llm", "no_id", "cat", "no_freq", "no_aug", "no_align")


class ConfigError(ValueError):
    """Invalid configuration value or file."""


@dataclass
class AblationPlan:
    """Behavior switches derived from the ablation tag."""

    tag: str
    channels: tuple[str, ...]
    use_gates: bool  # learned frequency-aware gates
    fixed_gate: float | None  # constant gate when gating is disabled but dual
    use_aug: bool
    use_align: bool

    @property
    def dual(self) -> bool:
        return len(self.channels) == 2


def resolve_ablation(tag: str) -> AblationPlan:
    if tag == "none":
        return AblationPlan(tag, ("id", "llm"), True, None, True, True)
    if tag == "no_llm":
        return AblationPlan(tag, ("id",), False, None, True, False)
    if tag == "no_id":
        return AblationPlan(tag, ("llm",), False, None, True, False)
    if tag == "cat":
        return AblationPlan(tag, ("cat",), False, None, True, False)
    if tag == "no_freq":
        return AblationPlan(tag, ("id", "llm"), False, 0.5, True, True)
    if tag == "no_aug":
        return AblationPlan(tag, ("id", "llm"), True, None, False, True)
    if tag == "no_align":
        return AblationPlan(tag, ("id", "llm"), True, None, True, False)
    raise ConfigError(f"unknown ablation tag: {tag!r} (expected one of {ABLATIONS})")


@dataclass
class DataBundle:
    """Immutable training inputs plus derived training-split statistics."""

    graph: InteractionGraph
    kg: KnowledgeGraph
    semantic: Array | None  # [num_entities, d_llm] raw semantic vectors
    split: SplitDataset
    features: FrequencyFeatures = field(init=False)
    adjacency: cf_propagation.NormalizedAdjacency = field(init=False)

    def __post_init__(self):
        self.features = frequency_features(self.graph, self.split.train)
        self.adjacency = cf_propagation.NormalizedAdjacency.from_edges(
            self.split.train, self.graph.num_users, self.graph.num_items
        )


def _uniform(rng: np.random.Generator, shape, fan: int) -> Array:
    bound = 1.0 / np.sqrt(fan)
    return rng.uniform(-bound, bound, size=shape)


class DualChannelModel:
    """Parameter layout + forward passes for one ablation variant.

    Parameters are named float64 arrays; every forward method accepts either
    the plain dict (inference, FD oracles) or a dict of Vars (training).
    """

    def __init__(self, config, bundle: DataBundle):
        self.config = config
        self.bundle = bundle
        self.plan = resolve_ablation(config.ablation)
        if "llm" in self.plan.channels or self.plan.tag == "cat":
            if bundle.semantic is None:
                raise ConfigError("this ablation needs semantic embeddings but none were supplied")
            self.d_llm = bundle.semantic.shape[1]
            self.d_mid = kg_encoder.default_mid_dim(self.d_llm, config.embed_dim)
        else:
            self.d_llm = 0
            self.d_mid = 0

    # -- parameters ---------------------------------------------------------

    def init_params(self, seed: int) -> dict[str, Array]:
        """Seeded init: tables uniform on [-1/sqrt(d), 1/sqrt(d)], weight
        matrices fan-in scaled, gates zero so training starts at g = 0.5."""
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1417]))
        cfg = self.config
        d = cfg.embed_dim
        g = self.bundle.graph
        kg = self.bundle.kg
        params: dict[str, Array] = {}

        def add_channel_tables(tag: str):
            params[f"{tag}.rel"] = _uniform(rng, (kg.num_relations, d), d)
            params[f"{tag}.attn"] = _uniform(rng, (d, 2 * d), 2 * d)

        if self.plan.tag == "cat":
            params["id.entity"] = _uniform(rng, (kg.num_entities, d), d)
            params["id.user"] = _uniform(rng, (g.num_users, d), d)
            params["llm.user"] = _uniform(rng, (g.num_users, d), d)
            self._add_adapter(params, rng)
            params["cat.entity_map"] = _uniform(rng, (d, 2 * d), 2 * d)
            params["cat.user_map"] = _uniform(rng, (d, 2 * d), 2 * d)
            add_channel_tables("cat")
            return params

        if "id" in self.plan.channels:
            params["id.entity"] = _uniform(rng, (kg.num_entities, d), d)
            params["id.user"] = _uniform(rng, (g.num_users, d), d)
            add_channel_tables("id")
        if "llm" in self.plan.channels:
            self._add_adapter(params, rng)
            params["llm.user"] = _uniform(rng, (g.num_users, d), d)
            add_channel_tables("llm")
        if self.plan.use_gates:
            params["gate.item_W"] = np.zeros(2 * d + 1)
            params["gate.item_b"] = np.zeros(())
            params["gate.user_W"] = np.zeros(2 * d + 1)
            params["gate.user_b"] = np.zeros(())
        if self.plan.use_align and self.plan.dual:
            params["proj.id.W"] = _uniform(rng, (d, d), d)
            params["proj.id.b"] = np.zeros(d)
            params["proj.llm.W"] = _uniform(rng, (d, d), d)
            params["proj.llm.b"] = np.zeros(d)
        return params

    def _add_adapter(self, params: dict[str, Array], rng: np.random.Generator) -> None:
        d = self.config.embed_dim
        params["adapter.W1"] = _uniform(rng, (self.d_mid, self.d_llm), self.d_llm)
        params["adapter.b1"] = np.zeros(self.d_mid)
        params["adapter.W2"] = _uniform(rng, (d, self.d_mid), self.d_mid)
        params["adapter.b2"] = np.zeros(d)

    def adapter_of(self, params) -> kg_encoder.AdapterParams:
        return kg_encoder.AdapterParams(
            W1=params["adapter.W1"], b1=params["adapter.b1"],
            W2=params["adapter.W2"], b2=params["adapter.b2"],
        )

    # -- encoding -----------------------------------------------------------

    def entity_layer0(self, params, channel: str):
        """Layer-0 entity table for a channel; the LLM side never reads the
        ID table (semantic vectors and adapter parameters only)."""
        if channel == "id":
            return params["id.entity"]
        if channel == "llm":
            return kg_encoder.adapt_semantic(self.bundle.semantic, self.adapter_of(params))
        if channel == "cat":
            adapted = kg_encoder.adapt_semantic(self.bundle.semantic, self.adapter_of(params))
            both = dk.concat_cols([params["id.entity"], adapted])
            return dk.matmul(both, dk.transpose(params["cat.entity_map"]))
        raise ValueError(f"unknown channel {channel}")

    def user_layer0(self, params, channel: str):
        if channel == "cat":
            both = dk.concat_cols([params["id.user"], params["llm.user"]])
            return dk.matmul(both, dk.transpose(params["cat.user_map"]))
        return params[f"{channel}.user"]

    def encode(self, params, kg: KnowledgeGraph | None = None, adjacency=None) -> dict[str, tuple]:
        """Full encoder: RGAT over the KG then collaborative propagation.

        ``kg``/``adjacency`` default to the bundle's originals; augmented
        views pass their perturbed graphs here with the same parameters.
        """
        kg = kg if kg is not None else self.bundle.kg
        adjacency = adjacency if adjacency is not None else self.bundle.adjacency
        cfg = self.config
        out = {}
        for channel in self.plan.channels:
            entity0 = self.entity_layer0(params, channel)
            item0 = kg_encoder.rgat_encode(
                entity0, params[f"{channel}.rel"], kg, params[f"{channel}.attn"], cfg.kg_layers
            )
            user0 = self.user_layer0(params, channel)
            users, items = cf_propagation.propagate(
                user0, item0, adjacency, cfg.cf_layers, combine=cfg.layer_combine
            )
            out[channel] = (users, items)
        return out

    # -- gating / scoring ---------------------------------------------------

    def gate_logits(self, params, outputs, side: str, ids: Array | None = None):
        """Pre-sigmoid gate activations for users or items (None ids = all)."""
        if not self.plan.dual:
            raise ValueError("gates are only defined for dual-channel variants")
        u_or_i = 0 if side == "user" else 1
        x_id = outputs["id"][u_or_i]
        x_llm = outputs["llm"][u_or_i]
        phi = self.bundle.features.user_phi if side == "user" else self.bundle.features.item_phi
        if ids is not None:
            x_id = dk.gather_rows(x_id, ids)
            x_llm = dk.gather_rows(x_llm, ids)
            phi = phi[ids]
        return fusion.gate_logit(
            x_id, x_llm, phi, params[f"gate.{side}_W"], params[f"gate.{side}_b"]
        )

    def gate_tables(self, params, outputs) -> tuple[Array, Array]:
        """(user gates, item gates) as plain arrays; constant 0.5 when the
        gate is fixed by the ablation."""
        if not self.plan.dual:
            raise ValueError("gates are only defined for dual-channel variants")
        if self.plan.fixed_gate is not None:
            return (
                np.full(self.bundle.graph.num_users, self.plan.fixed_gate),
                np.full(self.bundle.graph.num_items, self.plan.fixed_gate),
            )
        g_user = dk.value_of(dk.sigmoid(self.gate_logits(params, outputs, "user")))
        g_item = dk.value_of(dk.sigmoid(self.gate_logits(params, outputs, "item")))
        return g_user, g_item

    def pair_scores(self, params, outputs, users: Array, items: Array):
        """(y_hat, alpha) for aligned (user, item) id arrays, tape-friendly."""
        if not self.plan.dual:
            u, i = outputs[self.plan.channels[0]]
            y = dk.reduce_sum(dk.mul(dk.gather_rows(u, users), dk.gather_rows(i, items)), axis=1)
            return y, np.ones(len(users))
        u_id = dk.gather_rows(outputs["id"][0], users)
        i_id = dk.gather_rows(outputs["id"][1], items)
        u_llm = dk.gather_rows(outputs["llm"][0], users)
        i_llm = dk.gather_rows(outputs["llm"][1], items)
        if self.plan.fixed_gate is not None:
            g = self.plan.fixed_gate
            g_u = np.full(len(users), g)
            g_i = np.full(len(items), g)
        else:
            g_u = dk.sigmoid(self.gate_logits(params, outputs, "user", users))
            g_i = dk.sigmoid(self.gate_logits(params, outputs, "item", items))
        return fusion.score_pairs(u_id, i_id, u_llm, i_llm, g_u, g_i)

    def score_matrix(self, params, outputs, user_ids: Array) -> Array:
        """[len(user_ids), num_items] preference scores, inference only."""
        user_ids = np.asarray(user_ids, dtype=np.int64)
        if not self.plan.dual:
            u, i = outputs[self.plan.channels[0]]
            return dk.value_of(u)[user_ids] @ dk.value_of(i).T
        u_id = dk.value_of(outputs["id"][0])[user_ids]
        i_id = dk.value_of(outputs["id"][1])
        u_llm = dk.value_of(outputs["llm"][0])[user_ids]
        i_llm = dk.value_of(outputs["llm"][1])
        g_user, g_item = self.gate_tables(params, outputs)
        g_u = g_user[user_ids][:, None]
        g_i = g_item[None, :]
        w_id = g_u * g_i
        alpha = w_id + (1.0 - g_u) * (1.0 - g_i)
        w = w_id / alpha
        return w * (u_id @ i_id.T) + (1.0 - w) * (u_llm @ i_llm.T)
