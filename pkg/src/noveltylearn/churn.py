"""Taste-profile similarity between consecutive sessions and quitting-user labels."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .assignment import TasteTrajectory
from .errors import EmptyGroup, TrajectoryTooShort

YEAR_DAYS = 365
DAY = 86400
METRICS = ("cosine", "one_minus_tv")


class ChurnClass(str, Enum):
    QUITTING = "quitting"
    CONTINUING = "continuing"
    EXCLUDED = "excluded"


@dataclass(frozen=True)
class SimilaritySeries:
    user_id: str
    values: np.ndarray
    mean: float
    std: float


@dataclass(frozen=True)
class ChurnLabel:
    user_id: str
    label: ChurnClass
    activity_span_days: float
    days_since_last: float


@dataclass(frozen=True)
class GroupSummary:
    label: str
    mean: float
    std: float
    n: int


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    if np.array_equal(a, b):
        return 1.0
    return float(np.clip(np.dot(a, b) / (na * nb), 0.0, 1.0))


def one_minus_tv(a: np.ndarray, b: np.ndarray) -> float:
    return float(1.0 - 0.5 * np.abs(np.asarray(a) - np.asarray(b)).sum())


def similarity_series(traj: TasteTrajectory, metric: str = "cosine") -> SimilaritySeries:
    """Similarity of each session's posterior to the previous session's."""
    if len(traj) < 2:
        raise TrajectoryTooShort(f"user {traj.user_id!r}: need >= 2 sessions")
    fn = {"cosine": cosine, "one_minus_tv": one_minus_tv}[metric]
    P = traj.posteriors
    vals = np.array([fn(P[i - 1], P[i]) for i in range(1, len(P))])
    return SimilaritySeries(traj.user_id, vals, float(vals.mean()), float(vals.std()))


def classify_quitting(timestamps: Sequence[int], dataset_end: int, year_days: int = YEAR_DAYS) -> ChurnClass:
    first, last = int(min(timestamps)), int(max(timestamps))
    year = year_days * DAY
    if last - first < year and dataset_end - last >= year:
        return ChurnClass.QUITTING
    if dataset_end - last < year:
        return ChurnClass.CONTINUING
    return ChurnClass.EXCLUDED


def churn_label(user: str, timestamps: Sequence[int], dataset_end: int, year_days: int = YEAR_DAYS) -> ChurnLabel:
    first, last = int(min(timestamps)), int(max(timestamps))
    return ChurnLabel(
        user, classify_quitting(timestamps, dataset_end, year_days), (last - first) / DAY, (dataset_end - last) / DAY
    )


def _month(ts: int) -> tuple[int, int]:
    d = datetime.fromtimestamp(int(ts), tz=timezone.utc)
    return d.year, d.month


def monthly_activity(timestamps: Sequence[int]) -> list[tuple[str, int]]:
    """Track counts per UTC calendar month, zero-filled across the active span."""
    counts: dict[tuple[int, int], int] = defaultdict(int)
    for ts in timestamps:
        counts[_month(ts)] += 1
    (y, m), end = min(counts), max(counts)
    out = []
    while (y, m) <= end:
        out.append((f"{y:04d}-{m:02d}", counts.get((y, m), 0)))
        y, m = (y + 1, 1) if m == 12 else (y, m + 1)
    return out


def activity_slope(monthly: Sequence[tuple[str, int]]) -> float:
    """Least-squares slope of monthly counts against month index."""
    y = np.array([c for _, c in monthly], dtype=float)
    if len(y) < 2:
        return 0.0
    return float(np.polyfit(np.arange(len(y)), y, 1)[0])


def subgroup_report(
    labels: Mapping[str, ChurnClass],
    series: Mapping[str, SimilaritySeries],
    required: Sequence[ChurnClass] = (ChurnClass.QUITTING, ChurnClass.CONTINUING),
) -> dict[str, GroupSummary]:
    """Mean and population std of per-user mean similarity within each label group."""
    groups: dict[str, list[float]] = defaultdict(list)
    for user in sorted(series):
        if user in labels:
            groups[ChurnClass(labels[user]).value].append(series[user].mean)
    for g in required:
        if not groups.get(g.value):
            raise EmptyGroup(f"no users labelled {g.value}")
    return {
        g: GroupSummary(g, float(np.mean(v)), float(np.std(v)), len(v)) for g, v in sorted(groups.items())
    }


def write_user_csv(series: Mapping[str, SimilaritySeries], labels: Mapping[str, ChurnLabel], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "mean_similarity", "std_similarity", "n_pairs", "label", "activity_span_days", "days_since_last"])
        for u, s in series.items():
            lab = labels.get(u)
            w.writerow(
                [
                    u,
                    repr(s.mean),
                    repr(s.std),
                    len(s.values),
                    lab.label.value if lab else "",
                    lab.activity_span_days if lab else "",
                    lab.days_since_last if lab else "",
                ]
            )


def write_monthly_csv(monthly: Mapping[str, list[tuple[str, int]]], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "month", "tracks"])
        for u, rows in monthly.items():
            for month, n in rows:
                w.writerow([u, month, n])


def write_group_csv(groups: Mapping[str, GroupSummary], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["label", "mean_similarity", "std", "n"])
        for g in groups.values():
            w.writerow([g.label, repr(g.mean), repr(g.std), g.n])
