"""Interaction logs: binarization, k-core filtering, temporal splits, histories.

All functions here are pure over immutable inputs. Interactions carry dense
integer indices after :func:`reindex`; raw logs are parsed with their
original ids and densified once filtering is done.
"""

from __future__ import annotations

import bisect
import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

from .errors import DataError, InputDomainError


@dataclass(frozen=True)
class Interaction:
    """One (user, item, rating, timestamp, label) record."""

    user_id: int
    item_id: int
    rating: float
    timestamp: int
    label: int


@dataclass
class TemporalSplit:
    train: list
    valid: list
    test: list
    boundaries: tuple  # (t1, t2)


@dataclass
class WarmColdPartition:
    warm: list
    cold: list
    min_count: int = 3


@dataclass
class History:
    """A user's most recent positively-rated items, oldest first."""

    user_id: int
    items: list = field(default_factory=list)  # [(item_id, timestamp), ...]
    max_len: int = 10


def binarize(rating: float, threshold: float) -> int:
    """Label 1 iff rating is strictly greater than the threshold."""
    if not (1.0 <= rating <= 5.0):
        raise InputDomainError(f"rating {rating} outside [1, 5]")
    return 1 if rating > threshold else 0


def kcore_filter(interactions, k: int):
    """Iteratively drop interactions of users/items with fewer than k rows.

    Peeling repeats until a fixpoint: every surviving user and item has at
    least k interactions in the returned list. k=1 keeps everything with at
    least one row (i.e. everything).
    """
    if k < 1:
        raise InputDomainError(f"k must be >= 1, got {k}")
    current = list(interactions)
    while True:
        user_counts = Counter(it.user_id for it in current)
        item_counts = Counter(it.item_id for it in current)
        kept = [
            it
            for it in current
            if user_counts[it.user_id] >= k and item_counts[it.item_id] >= k
        ]
        if len(kept) == len(current):
            return kept
        current = kept


def reindex(interactions):
    """Densify user/item ids to contiguous 0-based indices.

    Returns (interactions, user_map, item_map) where the maps take raw id to
    dense index. Index order follows first appearance in the input.
    """
    user_map, item_map = {}, {}
    out = []
    for it in interactions:
        u = user_map.setdefault(it.user_id, len(user_map))
        i = item_map.setdefault(it.item_id, len(item_map))
        out.append(Interaction(u, i, it.rating, it.timestamp, it.label))
    return out, user_map, item_map


def temporal_split(interactions, t1: int, t2: int) -> TemporalSplit:
    """Partition by timestamp: train ts <= t1, valid t1 < ts <= t2, test ts > t2.

    Boundary ties go to the earlier split.
    """
    if not t1 < t2:
        raise InputDomainError(f"require t1 < t2, got {t1} >= {t2}")
    train, valid, test = [], [], []
    for it in interactions:
        if it.timestamp <= t1:
            train.append(it)
        elif it.timestamp <= t2:
            valid.append(it)
        else:
            test.append(it)
    return TemporalSplit(train, valid, test, (t1, t2))


def warm_cold_partition(split: TemporalSplit, min_count: int = 3, mode: str = "both") -> WarmColdPartition:
    """Split test interactions into warm and cold by training-set frequency.

    ``mode="both"`` (default): warm iff user AND item each occur >= min_count
    times in train. ``mode="either"``: warm iff at least one side does.
    """
    if min_count < 1:
        raise InputDomainError(f"min_count must be >= 1, got {min_count}")
    if mode not in ("both", "either"):
        raise InputDomainError(f"unknown warm/cold mode {mode!r}")
    user_counts = Counter(it.user_id for it in split.train)
    item_counts = Counter(it.item_id for it in split.train)
    warm, cold = [], []
    for it in split.test:
        u_ok = user_counts[it.user_id] >= min_count
        i_ok = item_counts[it.item_id] >= min_count
        is_warm = (u_ok and i_ok) if mode == "both" else (u_ok or i_ok)
        (warm if is_warm else cold).append(it)
    return WarmColdPartition(warm, cold, min_count)


def build_history(user_id: int, target_timestamp: int, train, max_len: int = 10) -> History:
    """Most recent <= max_len positive train interactions of the user strictly
    before target_timestamp, returned oldest first.

    Only positively labeled rows qualify (the prompt describes items the user
    rated highly). A user with no qualifying rows gets an empty history.
    """
    if max_len < 1:
        raise InputDomainError(f"max_len must be >= 1, got {max_len}")
    rows = [
        it
        for it in train
        if it.user_id == user_id and it.label == 1 and it.timestamp < target_timestamp
    ]
    rows.sort(key=lambda it: (it.timestamp, it.item_id))
    rows = rows[-max_len:]
    return History(user_id, [(it.item_id, it.timestamp) for it in rows], max_len)


class HistoryIndex:
    """Per-user sorted positive-interaction index for fast history lookups.

    Produces the same result as :func:`build_history` (verified by tests) but
    amortizes the per-user sort across many targets.
    """

    def __init__(self, train, max_len: int = 10):
        self.max_len = max_len
        self._by_user = defaultdict(list)
        for it in train:
            if it.label == 1:
                self._by_user[it.user_id].append(it)
        for rows in self._by_user.values():
            rows.sort(key=lambda it: (it.timestamp, it.item_id))
        self._keys = {
            u: [it.timestamp for it in rows] for u, rows in self._by_user.items()
        }

    def history(self, user_id: int, target_timestamp: int) -> History:
        rows = self._by_user.get(user_id, [])
        hi = bisect.bisect_left(self._keys.get(user_id, []), target_timestamp)
        window = rows[max(0, hi - self.max_len) : hi]
        return History(user_id, [(it.item_id, it.timestamp) for it in window], self.max_len)


# --- raw log ingestion -------------------------------------------------------


def parse_ratings(path, threshold: float, sep: str | None = None):
    """Read a `user item rating timestamp` log into Interactions (raw ids).

    Accepts tab-separated files and the MovieLens-1M ``::`` convention; the
    separator is sniffed from the first line unless given.
    """
    path = Path(path)
    out = []
    with open(path) as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            if sep is None:
                sep = "::" if "::" in line else "\t"
            parts = line.split(sep)
            if len(parts) < 4:
                raise DataError(f"{path}:{line_no}: expected 4 fields, got {len(parts)}")
            u, i, r, ts = parts[:4]
            rating = float(r)
            out.append(
                Interaction(int(u), int(i), rating, int(ts), binarize(rating, threshold))
            )
    if not out:
        raise DataError(f"{path}: no interactions parsed")
    return out


def parse_titles(path, sep: str | None = None) -> dict:
    """Read an `item_id <sep> title` file into a raw-id catalog."""
    path = Path(path)
    catalog = {}
    with open(path, encoding="utf-8", errors="replace") as f:
        for line_no, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if sep is None:
                sep = "::" if "::" in line else "\t"
            parts = line.split(sep)
            if len(parts) < 2:
                raise DataError(f"{path}:{line_no}: expected id and title")
            catalog[int(parts[0])] = parts[1]
    return catalog


def remap_catalog(catalog: dict, item_map: dict) -> dict:
    """Restrict a raw-id catalog to mapped items, keyed by dense index."""
    out = {}
    for raw_id, idx in item_map.items():
        title = catalog.get(raw_id, "")
        if not title:
            raise DataError(f"item raw id {raw_id} has no title")
        out[idx] = title
    return out


def month_window_boundaries(timestamps, total_months: int, train_months: int, valid_months: int):
    """Derive (window_start, t1, t2) for a trailing calendar-month protocol.

    The window covers the ``total_months`` most recent calendar months ending
    at the month of the latest timestamp; the first ``train_months`` of the
    window are train, the next ``valid_months`` valid, the rest test.
    Returned boundaries are inclusive-upper unix timestamps for train/valid.
    """
    if train_months + valid_months >= total_months:
        raise InputDomainError("train + valid months must leave room for test")
    latest = max(timestamps)
    end = datetime.fromtimestamp(latest, tz=timezone.utc)
    # first day of the month following the latest interaction
    end_month = (end.year * 12 + end.month - 1) + 1

    def month_start_ts(month_index):
        year, month = divmod(month_index, 12)
        return int(datetime(year, month + 1, 1, tzinfo=timezone.utc).timestamp())

    start_month = end_month - total_months
    window_start = month_start_ts(start_month)
    t1 = month_start_ts(start_month + train_months) - 1
    t2 = month_start_ts(start_month + train_months + valid_months) - 1
    return window_start, t1, t2


# --- on-disk split format ----------------------------------------------------

SPLIT_FILES = ("train.tsv", "valid.tsv", "test.tsv")


def save_split(split: TemporalSplit, catalog: dict, out_dir, user_map=None, item_map=None, extra_stats=None):
    """Write split TSVs, the index-space catalog, id maps, and a stats report."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, rows in zip(SPLIT_FILES, (split.train, split.valid, split.test)):
        with open(out_dir / name, "w") as f:
            for it in rows:
                f.write(f"{it.user_id}\t{it.item_id}\t{it.rating}\t{it.timestamp}\t{it.label}\n")
    with open(out_dir / "catalog.tsv", "w", encoding="utf-8") as f:
        for item_id in sorted(catalog):
            f.write(f"{item_id}\t{catalog[item_id]}\n")
    if user_map is not None:
        with open(out_dir / "id_maps.json", "w") as f:
            json.dump(
                {"users": {str(k): v for k, v in user_map.items()},
                 "items": {str(k): v for k, v in item_map.items()}},
                f,
            )
    all_rows = split.train + split.valid + split.test
    stats = {
        "train": len(split.train),
        "valid": len(split.valid),
        "test": len(split.test),
        "users": len({it.user_id for it in all_rows}),
        "items": len({it.item_id for it in all_rows}),
        "boundaries": list(split.boundaries),
    }
    if extra_stats:
        stats.update(extra_stats)
    with open(out_dir / "stats.json", "w") as f:
        json.dump(stats, f, indent=2, sort_keys=True)
    return stats


def load_split(split_dir) -> tuple:
    """Read (TemporalSplit, catalog) from a prepare-data output directory."""
    split_dir = Path(split_dir)
    parts = []
    for name in SPLIT_FILES:
        rows = []
        with open(split_dir / name) as f:
            for line in f:
                u, i, r, ts, y = line.rstrip("\n").split("\t")
                rows.append(Interaction(int(u), int(i), float(r), int(ts), int(y)))
        parts.append(rows)
    with open(split_dir / "stats.json") as f:
        stats = json.load(f)
    catalog = {}
    with open(split_dir / "catalog.tsv", encoding="utf-8") as f:
        for line in f:
            idx, title = line.rstrip("\n").split("\t", 1)
            catalog[int(idx)] = title
    t1, t2 = stats["boundaries"]
    return TemporalSplit(parts[0], parts[1], parts[2], (t1, t2)), catalog


def count_entities(interactions):
    users = {it.user_id for it in interactions}
    items = {it.item_id for it in interactions}
    return len(users), len(items)


def prepare_dataset(ratings_path, titles_path, threshold, kcore, t1, t2, out_dir, window_start=None):
    """Full ingestion pipeline: parse, binarize, window, k-core, reindex, split, save.

    ``window_start`` drops interactions older than the evaluation window
    before filtering (the trailing-months protocol); None keeps everything.
    """
    raw = parse_ratings(ratings_path, threshold)
    if window_start is not None:
        raw = [it for it in raw if it.timestamp >= window_start]
    filtered = kcore_filter(raw, kcore)
    if not filtered:
        raise DataError(f"k-core filtering with k={kcore} removed every interaction")
    dense, user_map, item_map = reindex(filtered)
    catalog = remap_catalog(parse_titles(titles_path), item_map)
    split = temporal_split(dense, t1, t2)
    stats = save_split(
        split,
        catalog,
        out_dir,
        user_map,
        item_map,
        extra_stats={
            "threshold": threshold,
            "kcore": kcore,
            "window_start": window_start,
        },
    )
    return split, catalog, stats
