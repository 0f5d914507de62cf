"""Composite-loss training: BPR sampling, loss assembly, alternating
translation steps, Adam/SGD, early stopping, checkpoints and ablations."""
from __future__ import annotations

import hashlib
import json
import struct
import warnings
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from . import cf_propagation, diffkit as dk, evalkit, fusion, kg_encoder, ssl, translate
from .corpus import InteractionGraph, KnowledgeGraph
from .model import ABLATIONS, ConfigError, DataBundle, DualChannelModel

Array = np.ndarray


class NumericAbort(RuntimeError):
    """Training hit a non-finite loss; carries diagnostics."""

    def __init__(self, epoch: int, batch: int, components: dict):
        parts = ", ".join(f"{k}={v}" for k, v in components.items())
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}: {parts}")
        self.epoch = epoch
        self.batch = batch
        self.components = components


@dataclass
class TrainConfig:
    embed_dim: int = 64
    kg_layers: int = 3
    cf_layers: int = 3
    learning_rate: float = 0.001
    lambda_aug: float = 0.05
    lambda_align: float = 0.05
    lambda_gate: float = 0.05
    lambda_reg: float = 1e-5
    kg_dropout: float = 0.5
    stability_mu: float = 0.5
    temperature: float = 0.2
    batch_size: int = 1024
    max_epochs: int = 2000
    patience: int = 50
    seed: int = 42
    ablation: str = "none"
    layer_combine: str = "mean"
    infonce_denominator: str = "exclusive"
    infonce_scope: str = "batch"
    optimizer: str = "adam"
    transe_learning_rate: float = 0.0  # 0 means reuse learning_rate
    num_negatives: int = 1
    early_stop_k: int = 50

    def __post_init__(self):
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        for name in ("lambda_aug", "lambda_align", "lambda_gate", "lambda_reg"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if not 0.0 <= self.kg_dropout <= 1.0:
            raise ConfigError("kg_dropout must lie in [0, 1]")
        if not 0.0 < self.stability_mu <= 1.0:
            raise ConfigError("stability_mu must lie in (0, 1]")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"unknown ablation {self.ablation!r} (expected one of {ABLATIONS})")
        if self.layer_combine not in ("mean", "last"):
            raise ConfigError("layer_combine must be 'mean' or 'last'")
        if self.infonce_denominator not in ("exclusive", "inclusive"):
            raise ConfigError("infonce_denominator must be 'exclusive' or 'inclusive'")
        if self.infonce_scope not in ("batch", "full"):
            raise ConfigError("infonce_scope must be 'batch' or 'full'")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError("optimizer must be 'adam' or 'sgd'")
        if self.num_negatives < 1:
            raise ConfigError("num_negatives must be >= 1")
        if min(self.kg_layers, self.cf_layers) < 0:
            raise ConfigError("layer counts must be >= 0")

    def to_text(self) -> str:
        lines = []
        for f in dc_fields(self):
            value = getattr(self, f.name)
            lines.append(f"{f.name}={value}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        known = {f.name: f.type for f in dc_fields(cls)}
        kwargs = {}
        for line_no, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if not sep or key not in known:
                raise ConfigError(f"config line {line_no}: unknown key {key!r}")
            kwargs[key] = value
        return cls(**_coerce_config(kwargs))

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_text(fh.read())

    def config_hash(self) -> bytes:
        return hashlib.sha256(self.to_text().encode("utf-8")).digest()


def _coerce_config(kwargs: dict[str, str]) -> dict:
    defaults = TrainConfig.__dataclass_fields__
    out = {}
    for key, value in kwargs.items():
        default = defaults[key].default
        if isinstance(default, bool):
            out[key] = value.lower() in ("1", "true", "yes")
        elif isinstance(default, int):
            try:
                out[key] = int(value)
            except ValueError as exc:
                raise ConfigError(f"config key {key}: expected integer, got {value!r}") from exc
        elif isinstance(default, float):
            try:
                out[key] = float(value)
            except ValueError as exc:
                raise ConfigError(f"config key {key}: expected number, got {value!r}") from exc
        else:
            out[key] = value
    return out


# ---------------------------------------------------------------------------
# sampling


@dataclass
class TrainTriples:
    users: Array
    pos_items: Array
    neg_items: Array

    def __len__(self) -> int:
        return len(self.users)


def sample_bpr_triples(
    split,
    graph: InteractionGraph,
    batch_size: int,
    rng: np.random.Generator,
    num_negatives: int = 1,
) -> TrainTriples:
    """Uniform positives from train edges; negatives resampled until unobserved.

    Users who interacted with every item are skipped with a warning.
    """
    train = split.train
    if not len(train):
        raise ValueError("train split is empty")
    observed = split.observed_by_user(graph.num_users)
    users, pos, neg = [], [], []
    idx = rng.integers(0, len(train), size=batch_size)
    for row in train[idx]:
        u, i = int(row[0]), int(row[1])
        if len(observed[u]) >= graph.num_items:
            warnings.warn(f"user {u} interacted with every item; skipped", RuntimeWarning)
            continue
        for _ in range(num_negatives):
            j = int(rng.integers(0, graph.num_items))
            while j in observed[u]:
                j = int(rng.integers(0, graph.num_items))
            users.append(u)
            pos.append(i)
            neg.append(j)
    return TrainTriples(
        users=np.asarray(users, dtype=np.int64),
        pos_items=np.asarray(pos, dtype=np.int64),
        neg_items=np.asarray(neg, dtype=np.int64),
    )


def bpr_loss(pos_scores, neg_scores, alphas):
    """Sum over triples of -alpha_ui * ln sigmoid(y_pos - y_neg)."""
    margin = dk.sub(pos_scores, neg_scores)
    return dk.reduce_sum(dk.mul(alphas, dk.softplus(dk.sub(0.0, margin))))


# ---------------------------------------------------------------------------
# optimizer


class Optimizer:
    """Adam-style adaptive moments (default) or plain SGD.

    Moments and step counts are kept per parameter name so the alternated
    translation objective keeps its own bias correction per table.
    """

    def __init__(self, kind: str = "adam", beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.kind = kind
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m: dict[str, Array] = {}
        self.v: dict[str, Array] = {}
        self.t: dict[str, int] = {}

    def step(self, params: dict[str, Array], grads: dict[str, Array], lr: float) -> None:
        for name, g in grads.items():
            if g is None:
                continue
            p = params[name]
            if self.kind == "sgd":
                p -= lr * g
                continue
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
                self.t[name] = 0
            self.t[name] += 1
            t = self.t[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * np.square(g)
            m_hat = m / (1 - self.beta1**t)
            v_hat = v / (1 - self.beta2**t)
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def state_tensors(self) -> dict[str, Array]:
        out: dict[str, Array] = {}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
            out[f"opt.t.{name}"] = np.asarray(float(self.t[name]))
        return out

    def load_state_tensors(self, tensors: dict[str, Array]) -> None:
        self.m.clear()
        self.v.clear()
        self.t.clear()
        for key, value in tensors.items():
            if key.startswith("opt.m."):
                self.m[key[6:]] = value.copy()
            elif key.startswith("opt.v."):
                self.v[key[6:]] = value.copy()
            elif key.startswith("opt.t."):
                self.t[key[6:]] = int(value)


# ---------------------------------------------------------------------------
# loss assembly


def l2_penalty(leaves: dict) -> object:
    total = None
    for leaf in leaves.values():
        term = dk.reduce_sum(dk.square(leaf))
        total = term if total is None else dk.add(total, term)
    return total if total is not None else 0.0


def total_loss(
    model: DualChannelModel,
    leaves: dict,
    triples: TrainTriples,
    config: TrainConfig,
    aug_view: tuple[KnowledgeGraph, object] | None,
    bpr_weights: Array | None = None,
):
    """Main objective on one batch: weighted BPR plus contrastive, alignment,
    gate-regularization and L2 terms. The translation loss is alternated
    separately and never enters this sum.

    The dynamic BPR weight alpha_ui is a normalization factor: it is applied
    as per-triple data (no gradient flows through the weight itself, only
    through the scores it multiplies). Otherwise the optimizer can drive the
    loss down by collapsing alpha toward 0, saturating both gates, instead of
    learning to rank. ``bpr_weights`` overrides the freshly computed weights,
    which gradient checks use to make the loss a fixed-weight function.
    """
    plan = model.plan
    outputs = model.encode(leaves)
    pos_y, pos_alpha = model.pair_scores(leaves, outputs, triples.users, triples.pos_items)
    neg_y, _ = model.pair_scores(leaves, outputs, triples.users, triples.neg_items)
    weights = dk.value_of(pos_alpha) if bpr_weights is None else bpr_weights
    loss = bpr_loss(pos_y, neg_y, weights)
    components = {"bpr": float(dk.value_of(loss))}

    if plan.use_aug and config.lambda_aug > 0 and aug_view is not None:
        kg_aug, adj_aug = aug_view
        aug_outputs = model.encode(leaves, kg=kg_aug, adjacency=adj_aug)
        if config.infonce_scope == "batch":
            user_idx = np.unique(triples.users)
            item_idx = np.unique(triples.pos_items)
        else:
            user_idx = item_idx = None
        n_users = len(user_idx) if user_idx is not None else model.bundle.graph.num_users
        n_items = len(item_idx) if item_idx is not None else model.bundle.graph.num_items
        if n_users >= 2 and n_items >= 2:
            aug_term = ssl.intra_view_loss(
                outputs, aug_outputs, config.temperature,
                user_idx=user_idx, item_idx=item_idx,
                denominator=config.infonce_denominator,
            )
            components["aug"] = float(dk.value_of(aug_term))
            loss = dk.add(loss, dk.mul(aug_term, config.lambda_aug))

    if plan.use_align and config.lambda_align > 0:
        user_idx = np.unique(triples.users) if config.infonce_scope == "batch" else None
        n_users = len(user_idx) if user_idx is not None else model.bundle.graph.num_users
        if n_users >= 2:
            proj = ssl.ProjectionParams(
                W1=leaves["proj.id.W"], b1=leaves["proj.id.b"],
                W2=leaves["proj.llm.W"], b2=leaves["proj.llm.b"],
            )
            u_id = ssl._take(outputs["id"][0], user_idx)
            u_llm = ssl._take(outputs["llm"][0], user_idx)
            align_term = ssl.align_loss(
                u_id, u_llm, proj, config.temperature, denominator=config.infonce_denominator
            )
            components["align"] = float(dk.value_of(align_term))
            loss = dk.add(loss, dk.mul(align_term, config.lambda_align))

    if plan.dual and config.lambda_gate > 0:
        if plan.fixed_gate is not None:
            # constant gates: the regularizer is a constant with zero gradient
            g = plan.fixed_gate
            gate_term = 3.0 * (-np.log(g) - np.log(1.0 - g))
            components["gate"] = gate_term
            loss = dk.add(loss, config.lambda_gate * gate_term)
        else:
            outputs_t = outputs
            z_u = model.gate_logits(leaves, outputs_t, "user", triples.users)
            z_i = model.gate_logits(leaves, outputs_t, "item", triples.pos_items)
            z_n = model.gate_logits(leaves, outputs_t, "item", triples.neg_items)
            gate_term = fusion.gate_regularization_from_logits(z_u, z_i, z_n)
            components["gate"] = float(dk.value_of(gate_term))
            loss = dk.add(loss, dk.mul(gate_term, config.lambda_gate))

    if config.lambda_reg > 0:
        reg = l2_penalty(leaves)
        components["l2"] = float(dk.value_of(reg))
        loss = dk.add(loss, dk.mul(reg, config.lambda_reg))

    components["total"] = float(dk.value_of(loss))
    return loss, components


def transe_epoch_loss(model: DualChannelModel, leaves: dict, channel: str, batch) -> object:
    """Translation loss of one corrupted batch in one channel."""
    if channel == "id":
        entity = leaves["id.entity"]
    elif channel == "llm":
        entity = model.entity_layer0(leaves, "llm")
    else:
        entity = model.entity_layer0(leaves, "cat")
    return translate.transe_loss(batch, entity, leaves[f"{channel}.rel"])


# ---------------------------------------------------------------------------
# training loop


RNG_STREAMS = ("bpr", "kg-drop", "ui-drop", "transe")


def _make_rngs(seed: int) -> dict[str, np.random.Generator]:
    return {
        name: np.random.default_rng(np.random.SeedSequence([seed, 0xABCD, idx]))
        for idx, name in enumerate(RNG_STREAMS)
    }


@dataclass
class FitResult:
    params: dict[str, Array]  # best validation snapshot (the checkpoint)
    final_params: dict[str, Array]  # last-epoch state, for overfit analyses
    history: list[dict]
    best_epoch: int
    best_metric: float
    config: TrainConfig
    optimizer: Optimizer
    rng_states: dict[str, dict]
    counters: dict[str, int] = field(default_factory=dict)


def _leaves(params: dict[str, Array]) -> dict[str, dk.Var]:
    return {k: dk.Var(v) for k, v in params.items()}


def _grads_from(leaves: dict[str, dk.Var]) -> dict[str, Array]:
    return {
        k: (leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value))
        for k, leaf in leaves.items()
    }


def fit(config: TrainConfig, bundle: DataBundle, quiet: bool = True) -> FitResult:
    """Train to early stopping on validation recall; returns the best state.

    Per epoch: draw augmented graphs, run every BPR batch through the main
    objective, then one translation pass per channel over |triplets| sampled
    pairs, then evaluate validation Recall@early_stop_k.
    """
    model = DualChannelModel(config, bundle)
    params = model.init_params(config.seed)
    optimizer = Optimizer(config.optimizer)
    rngs = _make_rngs(config.seed)
    plan = model.plan

    val_by_user = bundle.split.user_items("validation")
    train_by_user = bundle.split.user_items("train")
    n_train = len(bundle.split.train)
    batches_per_epoch = max(1, -(-n_train // config.batch_size))
    transe_lr = config.transe_learning_rate or config.learning_rate
    use_aug = plan.use_aug and config.lambda_aug > 0

    ssl.reset_call_counts()
    history: list[dict] = []
    best_metric = -1.0
    best_epoch = -1
    best_params = {k: v.copy() for k, v in params.items()}
    evals_since_best = 0

    for epoch in range(1, config.max_epochs + 1):
        aug_view = None
        if use_aug:
            kg_aug = ssl.drop_edges_kg(bundle.kg, config.kg_dropout, rngs["kg-drop"])
            stability = _stability(model, params, kg_aug)
            graph_aug = ssl.stab_adaptive_drop(
                bundle.graph, stability, config.stability_mu, rngs["ui-drop"]
            )
            adj_aug = cf_propagation.NormalizedAdjacency.from_edges(
                graph_aug.edges, bundle.graph.num_users, bundle.graph.num_items
            )
            aug_view = (kg_aug, adj_aug)

        epoch_components: dict[str, float] = {}
        for batch_no in range(batches_per_epoch):
            triples = sample_bpr_triples(
                bundle.split, bundle.graph, config.batch_size, rngs["bpr"], config.num_negatives
            )
            if not len(triples):
                continue
            leaves = _leaves(params)
            loss, components = total_loss(model, leaves, triples, config, aug_view)
            if not np.isfinite(components["total"]):
                raise NumericAbort(epoch, batch_no, components)
            dk.backward(loss)
            optimizer.step(params, _grads_from(leaves), config.learning_rate)
            for key, value in components.items():
                epoch_components[key] = epoch_components.get(key, 0.0) + value

        transe_total = 0.0
        if bundle.kg.num_triplets > 0:
            remaining = bundle.kg.num_triplets
            while remaining > 0:
                size = min(config.batch_size, remaining)
                remaining -= size
                batch = translate.sample_corrupted(bundle.kg, size, rngs["transe"])
                for channel in plan.channels:
                    leaves = _leaves(params)
                    t_loss = transe_epoch_loss(model, leaves, channel, batch)
                    value = float(dk.value_of(t_loss))
                    if not np.isfinite(value):
                        raise NumericAbort(epoch, -1, {"transe": value})
                    transe_total += value
                    dk.backward(t_loss)
                    grads = {
                        k: leaf.grad for k, leaf in leaves.items() if leaf.grad is not None
                    }
                    optimizer.step(params, grads, transe_lr)

        outputs = model.encode(params)
        val_metric = _validation_recall(model, params, outputs, val_by_user, train_by_user, config.early_stop_k)
        record = {
            "epoch": epoch,
            **{f"loss_{k}": v for k, v in sorted(epoch_components.items())},
            "loss_transe": transe_total,
            f"val_recall@{config.early_stop_k}": val_metric,
        }
        if plan.dual:
            g_user, g_item = model.gate_tables(params, outputs)
            record["gate_user_mean"] = float(g_user.mean())
            record["gate_item_mean"] = float(g_item.mean())
        history.append(record)
        if not quiet:
            print(json.dumps(record))

        if val_metric > best_metric:
            best_metric = val_metric
            best_epoch = epoch
            best_params = {k: v.copy() for k, v in params.items()}
            evals_since_best = 0
        else:
            evals_since_best += 1
            if evals_since_best >= config.patience:
                break

    return FitResult(
        params=best_params,
        final_params=params,
        history=history,
        best_epoch=best_epoch,
        best_metric=best_metric,
        config=config,
        optimizer=optimizer,
        rng_states={name: rng.bit_generator.state for name, rng in rngs.items()},
        counters=dict(ssl.call_counts),
    )


def _stability(model: DualChannelModel, params: dict[str, Array], kg_aug: KnowledgeGraph) -> Array:
    """Per-item stability from original-vs-perturbed RGAT encodings, averaged
    over channels; no gradients flow through augmentation sampling."""
    cfg = model.config
    scores = []
    for channel in model.plan.channels:
        entity0 = dk.value_of(model.entity_layer0(params, channel))
        rel = params[f"{channel}.rel"]
        attn = params[f"{channel}.attn"]
        items_orig = dk.value_of(kg_encoder.rgat_encode(entity0, rel, model.bundle.kg, attn, cfg.kg_layers))
        items_aug = dk.value_of(kg_encoder.rgat_encode(entity0, rel, kg_aug, attn, cfg.kg_layers))
        scores.append(ssl.stability_scores(items_orig, items_aug))
    return np.mean(scores, axis=0)


def _validation_recall(model, params, outputs, val_by_user, train_by_user, k: int) -> float:
    users = sorted(u for u, items in val_by_user.items() if items)
    if not users:
        return 0.0
    user_arr = np.asarray(users, dtype=np.int64)
    scores = model.score_matrix(params, outputs, user_arr)
    total = 0.0
    for row, u in enumerate(users):
        ranked = evalkit.rank_items(scores[row], train_by_user.get(u, set()))
        total += evalkit.recall_at_k(ranked, val_by_user[u], k)
    return total / len(users)


# ---------------------------------------------------------------------------
# checkpoint format


CHECKPOINT_MAGIC = b"DCGLCKPT"
CHECKPOINT_VERSION = 1


def save_checkpoint(
    path,
    params: dict[str, Array],
    optimizer: Optimizer,
    epoch: int,
    rng_states: dict[str, dict],
    config_hash: bytes,
) -> None:
    """Binary checkpoint: magic, u16 version, 32-byte config hash, u32 record
    count, named tensor records (u16 name length, name, u8 rank, u32 dims,
    little-endian f64 payload), u32 RNG-blob length, RNG state blob."""
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    tensors: dict[str, Array] = {}
    for name, value in params.items():
        tensors[f"param.{name}"] = value
    tensors.update(optimizer.state_tensors())
    tensors["meta.epoch"] = np.asarray(float(epoch))
    blob = json.dumps(rng_states, sort_keys=True, default=_json_rng).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<H", CHECKPOINT_VERSION))
        fh.write(config_hash)
        fh.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            arr = np.asarray(tensors[name], dtype=np.float64)
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<H", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.astype("<f8").tobytes())
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)


def _json_rng(obj):
    if isinstance(obj, np.integer):
        return int(obj)
    raise TypeError(f"not JSON serializable: {type(obj)}")


@dataclass
class Checkpoint:
    params: dict[str, Array]
    optimizer_tensors: dict[str, Array]
    epoch: int
    rng_states: dict[str, dict]
    config_hash: bytes


def load_checkpoint(path, expected_config_hash: bytes | None = None) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"bad checkpoint magic: {magic!r}")
        (version,) = struct.unpack("<H", fh.read(2))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        config_hash = fh.read(32)
        if expected_config_hash is not None and config_hash != expected_config_hash:
            raise ConfigError("checkpoint config hash does not match the supplied config")
        (count,) = struct.unpack("<I", fh.read(4))
        tensors: dict[str, Array] = {}
        for _ in range(count):
            (name_len,) = struct.unpack("<H", fh.read(2))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<B", fh.read(1))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            size = int(np.prod(dims)) if dims else 1
            payload = fh.read(8 * size)
            tensors[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).copy()
        (blob_len,) = struct.unpack("<I", fh.read(4))
        rng_states = json.loads(fh.read(blob_len).decode("utf-8"))
    params = {k[6:]: v for k, v in tensors.items() if k.startswith("param.")}
    opt = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    epoch = int(tensors.get("meta.epoch", np.asarray(0.0)))
    return Checkpoint(
        params=params,
        optimizer_tensors=opt,
        epoch=epoch,
        rng_states=rng_states,
        config_hash=config_hash,
    )
