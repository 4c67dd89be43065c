"""Ranking metrics (AUC, UAUC, NDCG), ensembling, and warm/cold reports."""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import AlignmentError, UndefinedMetricError


@dataclass(frozen=True)
class Prediction:
    user_id: int
    item_id: int
    score: float
    label: int


def auc(predictions) -> float:
    """Probability that a random positive outscores a random negative.

    Rank-sum formulation with average ranks, so score ties contribute 0.5.
    """
    scores = np.asarray([p.score for p in predictions], dtype=np.float64)
    labels = np.asarray([p.label for p in predictions], dtype=np.int64)
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUC undefined: {n_pos} positives, {n_neg} negatives"
        )
    ranks = _average_ranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return float((pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _average_ranks(scores):
    """1-based ranks with ties assigned the mean rank of their group."""
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i : j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _group_by_user(predictions):
    groups = defaultdict(list)
    for p in predictions:
        groups[p.user_id].append(p)
    return groups


def uauc(predictions) -> float:
    """Unweighted mean of per-user AUC over users with both classes."""
    value, _ = uauc_with_counts(predictions)
    return value


def uauc_with_counts(predictions):
    groups = _group_by_user(predictions)
    per_user = []
    skipped = 0
    for rows in groups.values():
        labels = {p.label for p in rows}
        if labels == {0, 1}:
            per_user.append(auc(rows))
        else:
            skipped += 1
    if not per_user:
        raise UndefinedMetricError("UAUC undefined: no user has both classes")
    return float(np.mean(per_user)), skipped


def ndcg(predictions, cutoff: int | None = None) -> float:
    """Mean per-user NDCG with binary gains and log2(rank+1) discounts.

    Each eligible user's exposed test items are ranked by score descending
    (ties broken by item_id for determinism); ``cutoff=None`` scores the full
    list. Users without both classes are skipped, mirroring UAUC.
    """
    value, _ = ndcg_with_counts(predictions, cutoff)
    return value


def ndcg_with_counts(predictions, cutoff: int | None = None):
    groups = _group_by_user(predictions)
    per_user = []
    skipped = 0
    for rows in groups.values():
        labels = {p.label for p in rows}
        if labels != {0, 1}:
            skipped += 1
            continue
        ranked = sorted(rows, key=lambda p: (-p.score, p.item_id))
        k = len(ranked) if cutoff is None else min(cutoff, len(ranked))
        dcg = sum(p.label / math.log2(j + 2) for j, p in enumerate(ranked[:k]))
        n_pos = sum(p.label for p in rows)
        ideal = sum(1.0 / math.log2(j + 2) for j in range(min(n_pos, k)))
        per_user.append(dcg / ideal)
    if not per_user:
        raise UndefinedMetricError("NDCG undefined: no user has both classes")
    return float(np.mean(per_user)), skipped


def ensemble_average(preds_a, preds_b):
    """Row-wise mean of two aligned prediction sets."""
    if len(preds_a) != len(preds_b):
        raise AlignmentError(
            f"prediction sets differ in size: {len(preds_a)} vs {len(preds_b)}"
        )
    key = lambda p: (p.user_id, p.item_id, p.label)
    a_sorted = sorted(preds_a, key=key)
    b_sorted = sorted(preds_b, key=key)
    out = []
    for pa, pb in zip(a_sorted, b_sorted):
        if key(pa) != key(pb):
            raise AlignmentError(
                f"row mismatch: {key(pa)} vs {key(pb)}"
            )
        out.append(Prediction(pa.user_id, pa.item_id, (pa.score + pb.score) / 2.0, pa.label))
    return out


@dataclass
class MetricsReport:
    blocks: dict = field(default_factory=dict)  # subset name -> metric dict

    def to_json(self) -> str:
        return json.dumps(self.blocks, indent=2, sort_keys=True)

    def to_table(self) -> str:
        cols = ["subset", "n", "auc", "uauc", "ndcg", "skipped_users"]
        rows = [cols]
        for name in ("all", "warm", "cold"):
            if name not in self.blocks:
                continue
            b = self.blocks[name]
            fmt = lambda v: f"{v:.4f}" if isinstance(v, float) else str(v)
            rows.append([name] + [fmt(b.get(c, "-")) for c in cols[1:]])
        widths = [max(len(r[i]) for r in rows) for i in range(len(cols))]
        lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)) for row in rows]
        return "\n".join(lines)


def _metrics_block(rows, ndcg_cutoff=None):
    if not rows:
        return {"n": 0, "undefined": True}
    block = {"n": len(rows)}
    try:
        block["auc"] = auc(rows)
    except UndefinedMetricError:
        block["auc"] = None
        block["undefined"] = True
    try:
        u, skipped = uauc_with_counts(rows)
        n, _ = ndcg_with_counts(rows, ndcg_cutoff)
        block["uauc"] = u
        block["ndcg"] = n
        block["skipped_users"] = skipped
    except UndefinedMetricError:
        block["uauc"] = None
        block["ndcg"] = None
        block["undefined"] = True
    return block


def report(predictions, partition=None, ndcg_cutoff=None) -> MetricsReport:
    """Metrics over all rows and, when a partition is given, warm/cold subsets.

    The partition must cover the prediction rows; rows are matched to subsets
    by (user_id, item_id) occurrence counts.
    """
    rep = MetricsReport()
    rep.blocks["all"] = _metrics_block(list(predictions), ndcg_cutoff)
    if partition is not None:
        warm_keys = _key_multiset(partition.warm)
        cold_keys = _key_multiset(partition.cold)
        warm_rows, cold_rows = [], []
        for p in predictions:
            k = (p.user_id, p.item_id)
            if warm_keys.get(k, 0) > 0:
                warm_keys[k] -= 1
                warm_rows.append(p)
            elif cold_keys.get(k, 0) > 0:
                cold_keys[k] -= 1
                cold_rows.append(p)
            else:
                raise AlignmentError(f"prediction row {k} not covered by partition")
        rep.blocks["warm"] = _metrics_block(warm_rows, ndcg_cutoff)
        rep.blocks["cold"] = _metrics_block(cold_rows, ndcg_cutoff)
    return rep


def _key_multiset(rows):
    counts = defaultdict(int)
    for it in rows:
        counts[(it.user_id, it.item_id)] += 1
    return counts


# --- prediction file io ------------------------------------------------------


def save_predictions(predictions, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for p in predictions:
            f.write(f"{p.user_id}\t{p.item_id}\t{p.score:.10g}\t{p.label}\n")


def load_predictions(path):
    out = []
    with open(path) as f:
        for line in f:
            u, i, s, y = line.rstrip("\n").split("\t")
            out.append(Prediction(int(u), int(i), float(s), int(y)))
    return out
