"""Batch command-line entry point: synth | train | eval | gradcheck.

Every run writes a manifest recording inputs by digest, the seed and the
build id, so results are reconstructable. Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric abort.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import subprocess
import sys
import time
from dataclasses import fields as dc_fields
from pathlib import Path

import numpy as np

from . import __version__, corpus, evalkit, gradsuite, trainer
from .corpus import ParseError, SynthConfig
from .model import ConfigError, DataBundle, DualChannelModel
from .trainer import NumericAbort, TrainConfig


class DataError(ValueError):
    """Missing or inconsistent input data."""


EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _build_id() -> str:
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty"],
            capture_output=True, text=True, timeout=5,
            cwd=Path(__file__).resolve().parent,
        )
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except OSError:
        pass
    return f"dcgl-{__version__}"


class Manifest:
    def __init__(self, command: str, out_dir: Path, argv: list[str], seed: int):
        self.path = out_dir / "manifest.json"
        self.data = {
            "command": command,
            "argv": argv,
            "seed": seed,
            "build": _build_id(),
            "inputs": {},
            "outputs": [],
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "finished_at": None,
            "status": "running",
        }

    def add_input(self, path) -> None:
        if path is not None:
            self.data["inputs"][str(path)] = _sha256(Path(path))

    def add_output(self, path) -> None:
        self.data["outputs"].append(str(path))

    def write(self) -> None:
        with open(self.path, "w", encoding="utf-8") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")

    def finalize(self, status: str = "complete") -> None:
        self.data["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())
        self.data["status"] = status
        self.write()


def _prepare_out_dir(path_str: str, force: bool) -> Path:
    out = Path(path_str)
    if out.exists() and any(out.iterdir()) and not force:
        raise ConfigError(f"output directory {out} is not empty (use --force to overwrite)")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# synth


def cmd_synth(args, argv) -> int:
    config = SynthConfig(
        num_users=args.users,
        num_items=args.items,
        num_entities=args.entities,
        num_relations=args.relations,
        popularity_exponent=args.popularity_exponent,
        latent_dim=args.latent_dim,
        semantic_noise_by_frequency=args.semantic_noise_by_frequency,
        avg_user_degree=args.avg_user_degree,
        seed=args.seed,
    )
    out = _prepare_out_dir(args.out, args.force)
    manifest = Manifest("synth", out, argv, config.seed)
    manifest.write()
    graph, kg, semantic, split = corpus.gen_synthetic(config)
    paths = {
        "interactions": out / "interactions.tsv",
        "kg": out / "kg.tsv",
        "embeddings": out / "semantic.emb",
        "id_map": out / "id_map.tsv",
        "split": out / "split.txt",
    }
    corpus.write_interactions_file(paths["interactions"], graph)
    corpus.write_kg_file(paths["kg"], kg)
    corpus.write_embedding_file(paths["embeddings"], np.arange(kg.num_entities), semantic)
    corpus.write_id_map(paths["id_map"], kg.entity_tokens)
    corpus.write_split_manifest(paths["split"], split, graph.edges)
    for p in paths.values():
        manifest.add_output(p)
    manifest.finalize()
    print(f"wrote synthetic corpus ({graph.num_users} users, {graph.num_items} items, "
          f"{graph.num_edges} edges, {kg.num_triplets} triplets) to {out}")
    return 0


# ---------------------------------------------------------------------------
# shared data loading


def load_bundle(interactions, kg_path, embeddings, split_path, seed, needs_semantic: bool):
    for label, p in (("interactions", interactions), ("kg", kg_path)):
        if p is None or not Path(p).exists():
            raise DataError(f"{label} file not found: {p}")
    with open(interactions, encoding="utf-8") as fh:
        graph = corpus.parse_interactions(fh)
    with open(kg_path, encoding="utf-8") as fh:
        kg = corpus.parse_kg(fh, graph)
    semantic = None
    if needs_semantic:
        if embeddings is None or not Path(embeddings).exists():
            raise DataError(f"semantic embedding file not found: {embeddings}")
        ids, vecs = corpus.read_embedding_file(embeddings)
        semantic = corpus.semantic_matrix_for(kg, ids, vecs)
        missing = kg.num_entities - len(set(ids.tolist()) & set(range(kg.num_entities)))
        if missing:
            print(f"note: {missing} entities have no semantic vector (zero-filled)", file=sys.stderr)
    if split_path is not None:
        if not Path(split_path).exists():
            raise DataError(f"split manifest not found: {split_path}")
        split = corpus.read_split_manifest(split_path, graph.edges)
    else:
        split = corpus.split_interactions(graph.edges, rng_seed=seed)
    if not len(split.train):
        raise DataError("empty training split")
    return DataBundle(graph=graph, kg=kg, semantic=semantic, split=split)


def _config_from_args(args) -> TrainConfig:
    if args.config:
        base = TrainConfig.from_file(args.config)
    else:
        base = TrainConfig()
    overrides = {}
    for f in dc_fields(TrainConfig):
        value = getattr(args, f.name, None)
        if value is not None:
            overrides[f.name] = value
    merged = {f.name: getattr(base, f.name) for f in dc_fields(TrainConfig)}
    merged.update(overrides)
    env_seed = os.environ.get("DCGL_SEED")
    if env_seed is not None:
        try:
            merged["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"DCGL_SEED must be an integer, got {env_seed!r}") from exc
    return TrainConfig(**merged)


# ---------------------------------------------------------------------------
# train


def cmd_train(args, argv) -> int:
    config = _config_from_args(args)
    needs_semantic = config.ablation != "no_llm"
    if needs_semantic and args.embeddings is None:
        raise DataError(
            f"ablation {config.ablation!r} needs a semantic embedding file; pass --embeddings"
        )
    out = _prepare_out_dir(args.out, args.force)
    manifest = Manifest("train", out, argv, config.seed)
    for p in (args.interactions, args.kg, args.embeddings, args.split, args.config):
        if p:
            manifest.add_input(p)
    manifest.write()

    bundle = load_bundle(args.interactions, args.kg, args.embeddings, args.split,
                         config.seed, needs_semantic)
    result = trainer.fit(config, bundle, quiet=args.quiet)

    ckpt_path = out / "checkpoint.dcgl"
    history_path = out / "history.jsonl"
    config_path = out / "config.txt"
    trainer.save_checkpoint(ckpt_path, result.params, result.optimizer, result.best_epoch,
                            result.rng_states, config.config_hash())
    with open(history_path, "w", encoding="utf-8") as fh:
        for record in result.history:
            fh.write(json.dumps(record) + "\n")
    with open(config_path, "w", encoding="utf-8") as fh:
        fh.write(config.to_text())
    for p in (ckpt_path, history_path, config_path):
        manifest.add_output(p)
    manifest.finalize()
    print(f"best epoch {result.best_epoch} "
          f"val_recall@{config.early_stop_k}={result.best_metric:.4f} -> {ckpt_path}")
    return 0


# ---------------------------------------------------------------------------
# eval


def _parse_groups(spec_str: str) -> evalkit.GroupSpec:
    side, _, edges = spec_str.partition(":")
    try:
        boundaries = [int(x) for x in edges.split(",")]
    except ValueError as exc:
        raise ConfigError(f"bad group spec {spec_str!r}") from exc
    return evalkit.GroupSpec(boundaries, side)


def cmd_eval(args, argv) -> int:
    config = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    checkpoint = trainer.load_checkpoint(args.checkpoint, config.config_hash())
    needs_semantic = config.ablation != "no_llm"
    out = _prepare_out_dir(args.out, args.force)
    manifest = Manifest("eval", out, argv, config.seed)
    for p in (args.interactions, args.kg, args.embeddings, args.split, args.config, args.checkpoint):
        if p:
            manifest.add_input(p)
    manifest.write()

    bundle = load_bundle(args.interactions, args.kg, args.embeddings, args.split,
                         config.seed, needs_semantic)
    model = DualChannelModel(config, bundle)
    params = checkpoint.params
    outputs = model.encode(params)

    ks = [int(k) for k in args.ks.split(",")]
    test_by_user = bundle.split.user_items("test")
    train_by_user = bundle.split.user_items("train")
    val_by_user = bundle.split.user_items("validation")
    exclude = {
        u: train_by_user.get(u, set()) | val_by_user.get(u, set())
        for u in range(bundle.graph.num_users)
    }
    users = np.arange(bundle.graph.num_users)
    scores = model.score_matrix(params, outputs, users)
    report = evalkit.evaluate_rankings(scores, users, test_by_user, exclude, ks)

    group_specs = [_parse_groups(s) for s in args.groups.split(";")] if args.groups else [
        evalkit.GroupSpec(evalkit.PAPER_USER_BINS, "user"),
        evalkit.GroupSpec(evalkit.PAPER_ITEM_BINS, "item"),
    ]
    groups_out = {}
    for spec in group_specs:
        counts = bundle.features.user_counts if spec.side == "user" else bundle.features.item_counts
        groups_out[spec.side] = {
            str(k): evalkit.group_report(report, counts, spec, k) for k in ks
        }

    metrics_path = out / "metrics.json"
    payload = {
        "config_hash": config.config_hash().hex(),
        **report.as_dict(),
        "groups": groups_out,
    }

    gates_path = None
    if model.plan.dual:
        g_user, g_item = model.gate_tables(params, outputs)
        export = evalkit.export_gates(g_user, g_item, bundle.features)
        gates_path = out / "gates.tsv"
        export.write_tsv(gates_path)
        payload["gate_spearman"] = {
            "user": export.user_spearman,
            "user_defined": export.user_spearman_defined,
            "item": export.item_spearman,
            "item_defined": export.item_spearman_defined,
        }

    with open(metrics_path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    manifest.add_output(metrics_path)
    if gates_path:
        manifest.add_output(gates_path)
    manifest.finalize()
    for k in ks:
        print(f"recall@{k}={report.recall[k]:.4f} ndcg@{k}={report.ndcg[k]:.4f}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck


def cmd_gradcheck(args, argv) -> int:
    reports = gradsuite.run_all(seed=args.seed, trials=args.trials)
    failed = False
    for report in reports:
        print(report)
        failed = failed or not report.passed
    return 1 if failed else 0


# ---------------------------------------------------------------------------
# argument wiring


def _add_train_config_flags(parser: argparse.ArgumentParser) -> None:
    """One kebab-case flag per TrainConfig field; None means 'not supplied'."""
    for f in dc_fields(TrainConfig):
        flag = "--" + f.name.replace("_", "-")
        if isinstance(f.default, bool):
            parser.add_argument(flag, type=lambda v: v.lower() in ("1", "true", "yes"), default=None)
        elif isinstance(f.default, int):
            parser.add_argument(flag, type=int, default=None)
        elif isinstance(f.default, float):
            parser.add_argument(flag, type=float, default=None)
        else:
            parser.add_argument(flag, type=str, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dcgl", description=__doc__)
    parser.add_argument("--threads", type=int, default=0, help="cap numeric worker threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="generate a synthetic corpus")
    p_synth.add_argument("--users", type=int, default=200)
    p_synth.add_argument("--items", type=int, default=300)
    p_synth.add_argument("--entities", type=int, default=360)
    p_synth.add_argument("--relations", type=int, default=4)
    p_synth.add_argument("--popularity-exponent", type=float, default=1.2)
    p_synth.add_argument("--latent-dim", type=int, default=16)
    p_synth.add_argument("--semantic-noise-by-frequency", action="store_true")
    p_synth.add_argument("--avg-user-degree", type=int, default=14)
    p_synth.add_argument("--seed", type=int, default=0)
    p_synth.add_argument("--out", required=True)
    p_synth.add_argument("--force", action="store_true")

    p_train = sub.add_parser("train", help="train a model")
    p_train.add_argument("--interactions", required=True)
    p_train.add_argument("--kg", required=True)
    p_train.add_argument("--embeddings")
    p_train.add_argument("--split")
    p_train.add_argument("--config", help="key=value config file")
    p_train.add_argument("--out", required=True)
    p_train.add_argument("--force", action="store_true")
    p_train.add_argument("--quiet", action="store_true", default=True)
    p_train.add_argument("--progress", dest="quiet", action="store_false")
    _add_train_config_flags(p_train)

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--config", required=True)
    p_eval.add_argument("--interactions", required=True)
    p_eval.add_argument("--kg", required=True)
    p_eval.add_argument("--embeddings")
    p_eval.add_argument("--split")
    p_eval.add_argument("--ks", default="50,100")
    p_eval.add_argument("--groups", help='e.g. "user:0,18,36,72;item:0,12,24,48"')
    p_eval.add_argument("--out", required=True)
    p_eval.add_argument("--force", action="store_true")

    p_grad = sub.add_parser("gradcheck", help="run the gradient verification suite")
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument("--trials", type=int, default=20)
    return parser


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.threads:
        os.environ.setdefault("OMP_NUM_THREADS", str(args.threads))
        os.environ.setdefault("OPENBLAS_NUM_THREADS", str(args.threads))
    try:
        return COMMANDS[args.command](args, argv)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ParseError, corpus.LinkError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
