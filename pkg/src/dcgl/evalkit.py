"""Ranking metrics, group-wise analysis and gate-interpretability export."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Array = np.ndarray


def rank_items(scores: Array, exclude: set[int]) -> Array:
    """All non-excluded items sorted by score descending, ties by id ascending."""
    scores = np.asarray(scores, dtype=np.float64)
    ids = np.arange(len(scores))
    if exclude:
        mask = np.ones(len(scores), dtype=bool)
        mask[list(exclude)] = False
        ids = ids[mask]
        scores = scores[mask]
    order = np.lexsort((ids, -scores))
    return ids[order]


def recall_at_k(ranked: Array, relevant: set[int], k: int) -> float | None:
    """|top-k hits| / |relevant|; None when there is nothing relevant."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        return None
    top = ranked[:k]
    hits = sum(1 for item in top if int(item) in relevant)
    return hits / len(relevant)


def ndcg_at_k(ranked: Array, relevant: set[int], k: int) -> float | None:
    """Binary-relevance NDCG with 1/log2(pos+1) discounting."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if not relevant:
        return None
    dcg = 0.0
    for pos, item in enumerate(ranked[:k], start=1):
        if int(item) in relevant:
            dcg += 1.0 / np.log2(pos + 1)
    ideal = sum(1.0 / np.log2(p + 1) for p in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


@dataclass
class MetricsReport:
    ks: list[int]
    recall: dict[int, float]
    ndcg: dict[int, float]
    num_users_evaluated: int
    user_ids: Array
    per_user_recall: dict[int, Array]
    per_user_ndcg: dict[int, Array]
    # (user, item, 1-based rank of the item in the user's candidate list)
    edge_ranks: list[tuple[int, int, int]] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "num_users_evaluated": self.num_users_evaluated,
            "metrics": {
                str(k): {"recall": self.recall[k], "ndcg": self.ndcg[k]} for k in self.ks
            },
        }


def evaluate_rankings(
    score_rows: Array,
    user_ids: Array,
    relevant: dict[int, set[int]],
    exclude: dict[int, set[int]],
    ks: list[int],
) -> MetricsReport:
    """Metrics over users with non-empty relevant sets.

    ``score_rows[r]`` holds full-catalog scores for ``user_ids[r]``; items in
    ``exclude[u]`` are removed from the candidate list before ranking.
    """
    eval_users = [u for u in user_ids if relevant.get(int(u))]
    rec: dict[int, list[float]] = {k: [] for k in ks}
    ndg: dict[int, list[float]] = {k: [] for k in ks}
    edge_ranks: list[tuple[int, int, int]] = []
    row_of = {int(u): r for r, u in enumerate(user_ids)}
    for u in eval_users:
        u = int(u)
        ranked = rank_items(score_rows[row_of[u]], exclude.get(u, set()))
        rel = relevant[u]
        for k in ks:
            rec[k].append(recall_at_k(ranked, rel, k))
            ndg[k].append(ndcg_at_k(ranked, rel, k))
        pos_of = {int(item): p for p, item in enumerate(ranked, start=1)}
        for item in sorted(rel):
            if item in pos_of:
                edge_ranks.append((u, item, pos_of[item]))
    n = len(eval_users)
    return MetricsReport(
        ks=list(ks),
        recall={k: (float(np.mean(rec[k])) if n else 0.0) for k in ks},
        ndcg={k: (float(np.mean(ndg[k])) if n else 0.0) for k in ks},
        num_users_evaluated=n,
        user_ids=np.asarray(eval_users, dtype=np.int64),
        per_user_recall={k: np.asarray(rec[k]) for k in ks},
        per_user_ndcg={k: np.asarray(ndg[k]) for k in ks},
        edge_ranks=edge_ranks,
    )


@dataclass
class GroupSpec:
    """Half-open interaction-count intervals covering [0, inf)."""

    boundaries: list[int]  # e.g. [0, 18, 36, 72] -> [0,18),[18,36),[36,72),[72,inf)
    side: str  # "user" | "item"

    def __post_init__(self):
        if self.side not in ("user", "item"):
            raise ValueError("side must be 'user' or 'item'")
        if not self.boundaries or self.boundaries[0] != 0:
            raise ValueError("boundaries must start at 0")
        if any(b >= c for b, c in zip(self.boundaries, self.boundaries[1:])):
            raise ValueError("boundaries must be strictly increasing")

    def labels(self) -> list[str]:
        out = []
        for lo, hi in zip(self.boundaries, self.boundaries[1:]):
            out.append(f"[{lo},{hi})")
        out.append(f"[{self.boundaries[-1]}+)")
        return out

    def bin_of(self, count: int) -> int:
        for idx in range(len(self.boundaries) - 1, -1, -1):
            if count >= self.boundaries[idx]:
                return idx
        return 0


PAPER_USER_BINS = [0, 18, 36, 72]
PAPER_ITEM_BINS = [0, 12, 24, 48]


def group_report(report: MetricsReport, counts: Array, spec: GroupSpec, k: int) -> list[dict]:
    """Per-bin averaged metrics.

    User side averages each user's metrics within the user's count bin. Item
    side scores each test interaction by whether its item landed in the
    user's top-k (and its discounted gain), bucketed by the item's training
    count: per-item recall is undefined under a user-oriented split.
    """
    labels = spec.labels()
    rows = [
        {"interval": label, "count": 0, "recall": 0.0, "ndcg": 0.0}
        for label in labels
    ]
    if spec.side == "user":
        for idx, u in enumerate(report.user_ids):
            b = spec.bin_of(int(counts[int(u)]))
            rows[b]["count"] += 1
            rows[b]["recall"] += report.per_user_recall[k][idx]
            rows[b]["ndcg"] += report.per_user_ndcg[k][idx]
    else:
        for _, item, rank in report.edge_ranks:
            b = spec.bin_of(int(counts[item]))
            rows[b]["count"] += 1
            if rank <= k:
                rows[b]["recall"] += 1.0
                rows[b]["ndcg"] += 1.0 / np.log2(rank + 1)
    for row in rows:
        if row["count"]:
            row["recall"] = float(row["recall"] / row["count"])
            row["ndcg"] = float(row["ndcg"] / row["count"])
    return rows


# ---------------------------------------------------------------------------
# gate interpretability


def _rankdata(values: Array) -> Array:
    """Average ranks (1-based) with ties sharing their mean rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def spearman(x: Array, y: Array) -> tuple[float, bool]:
    """Spearman rank correlation; (0.0, False) when undefined (constant input)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y) or len(x) < 2:
        return 0.0, False
    rx, ry = _rankdata(x), _rankdata(y)
    sx, sy = rx.std(), ry.std()
    if sx == 0.0 or sy == 0.0:
        return 0.0, False
    rho = float(((rx - rx.mean()) * (ry - ry.mean())).mean() / (sx * sy))
    return rho, True


@dataclass
class GateExport:
    rows: list[tuple[str, int, int, float, float]]  # (kind, id, freq, phi, gate)
    user_spearman: float
    user_spearman_defined: bool
    item_spearman: float
    item_spearman_defined: bool

    def write_tsv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("kind\tid\tfreq\tphi\tgate\n")
            for kind, ident, freq, phi, gate in self.rows:
                fh.write(f"{kind}\t{ident}\t{freq}\t{phi!r}\t{gate!r}\n")


def export_gates(user_gates: Array, item_gates: Array, features) -> GateExport:
    """Tabulate (kind, id, freq, phi, g) plus freq-gate Spearman per side."""
    rows: list[tuple[str, int, int, float, float]] = []
    for uid, gate in enumerate(user_gates):
        rows.append(("user", uid, int(features.user_counts[uid]), float(features.user_phi[uid]), float(gate)))
    for iid, gate in enumerate(item_gates):
        rows.append(("item", iid, int(features.item_counts[iid]), float(features.item_phi[iid]), float(gate)))
    u_rho, u_def = spearman(features.user_counts, user_gates)
    i_rho, i_def = spearman(features.item_counts, item_gates)
    return GateExport(
        rows=rows,
        user_spearman=u_rho,
        user_spearman_defined=u_def,
        item_spearman=i_rho,
        item_spearman_defined=i_def,
    )
