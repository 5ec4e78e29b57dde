"""Held-out scoring: confusion counts, F1/accuracy, value of personalization.

Positive class is *novel*.  Precision and recall with a zero denominator take
the value ``zero_division`` (0 by default), and F1 is 0 whenever precision
plus recall is 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .agent import Action, Episode, Policy, majority_action, predict
from .errors import NoHeldout, TooFewUsers


@dataclass(frozen=True)
class Confusion:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "Confusion") -> "Confusion":
        return Confusion(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)


@dataclass(frozen=True)
class Scores:
    confusion: Confusion
    precision: float
    recall: float
    f1: float
    accuracy: float

    def as_dict(self) -> dict:
        d = asdict(self.confusion)
        d.update(precision=self.precision, recall=self.recall, f1=self.f1, accuracy=self.accuracy)
        return d


def confusion(predicted: Sequence[int], observed: Sequence[int]) -> Confusion:
    pred = np.asarray(predicted) == Action.NOVEL
    obs = np.asarray(observed) == Action.NOVEL
    return Confusion(
        tp=int(np.sum(pred & obs)),
        fp=int(np.sum(pred & ~obs)),
        fn=int(np.sum(~pred & obs)),
        tn=int(np.sum(~pred & ~obs)),
    )


def metrics(c: Confusion, zero_division: float = 0.0) -> Scores:
    if c.total == 0:
        raise NoHeldout("no held-out episodes to score")
    precision = c.tp / (c.tp + c.fp) if c.tp + c.fp else zero_division
    recall = c.tp / (c.tp + c.fn) if c.tp + c.fn else zero_division
    if c.tp:
        f1 = 2 * c.tp / (2 * c.tp + c.fp + c.fn)  # == 2PR/(P+R), without the rounding of P and R
    elif precision + recall:
        f1 = 2 * precision * recall / (precision + recall)
    else:
        f1 = 0.0
    accuracy = (c.tp + c.tn) / c.total
    return Scores(c, precision, recall, f1, accuracy)


def score(
    policy: Policy, heldout: Sequence[Episode], fallback: str = "majority", zero_division: float = 0.0
) -> Scores:
    if not heldout:
        raise NoHeldout(f"user {policy.user_id!r} has no held-out episodes")
    preds = [predict(policy, e.state, fallback) for e in heldout]
    return metrics(confusion(preds, [e.observed for e in heldout]), zero_division)


def majority_baseline(
    train: Sequence[Episode], heldout: Sequence[Episode], zero_division: float = 0.0
) -> Scores:
    """Predict the user's majority training action everywhere."""
    if not heldout:
        raise NoHeldout("no held-out episodes")
    guess = majority_action(train)
    return metrics(confusion([guess] * len(heldout), [e.observed for e in heldout]), zero_division)


@dataclass
class VopMatrix:
    users: list[str]
    f1: np.ndarray  # f1[i, j]: user i's held-out episodes under user j's policy
    delta: np.ndarray

    @property
    def mean_delta(self) -> float:
        return float(self.delta.mean())

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", "delta", *self.users])
            for i, u in enumerate(self.users):
                w.writerow([u, repr(float(self.delta[i])), *(repr(float(x)) for x in self.f1[i])])


def value_of_personalization(
    policies: Mapping[str, Policy], heldout: Mapping[str, Sequence[Episode]], zero_division: float = 0.0
) -> VopMatrix:
    """Cross-policy F1 matrix and the per-user gain of the own policy over the others' average.

    Foreign policies fall back to *familiar* on states they never visited; the
    diagonal uses the owner's majority fallback, as :func:`score` does.
    """
    users = [u for u in policies if heldout.get(u)]
    if len(users) < 2:
        raise TooFewUsers(f"need >= 2 users with policies and held-out data, got {len(users)}")
    M = len(users)
    f1 = np.zeros((M, M))
    for i, ui in enumerate(users):
        for j, uj in enumerate(users):
            fallback = "majority" if i == j else "familiar"
            f1[i, j] = score(policies[uj], heldout[ui], fallback, zero_division).f1
    # mean of (own - foreign) rather than own - mean(foreign): exact zero for identical rows
    gaps = np.diag(f1)[:, None] - f1
    delta = gaps[~np.eye(M, dtype=bool)].reshape(M, M - 1).mean(axis=1)
    return VopMatrix(users, f1, delta)


@dataclass
class EvaluationReport:
    per_user: dict[str, dict]
    zero_division: float

    def summary(self) -> dict:
        pol = [r["policy"] for r in self.per_user.values()]
        base = [r["baseline"] for r in self.per_user.values()]
        pooled = sum((Confusion(p["tp"], p["fp"], p["fn"], p["tn"]) for p in pol), Confusion())
        micro = metrics(pooled, self.zero_division)
        return {
            "n_users": len(pol),
            "policy_f1": float(np.mean([p["f1"] for p in pol])),
            "policy_accuracy": float(np.mean([p["accuracy"] for p in pol])),
            "policy_micro_f1": micro.f1,
            "policy_micro_accuracy": micro.accuracy,
            "baseline_f1": float(np.mean([b["f1"] for b in base])),
            "baseline_accuracy": float(np.mean([b["accuracy"] for b in base])),
            "zero_division": self.zero_division,
        }

    def to_json(self) -> dict:
        return {"summary": self.summary(), "users": self.per_user}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n", encoding="utf-8")

    def write_csv(self, path: str | Path) -> None:
        cols = ["tp", "fp", "fn", "tn", "precision", "recall", "f1", "accuracy"]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["user", *cols, "baseline_f1", "baseline_accuracy", "converged", "sweeps"])
            for u, r in self.per_user.items():
                p, b = r["policy"], r["baseline"]
                w.writerow([u, *(p[c] for c in cols), b["f1"], b["accuracy"], r.get("converged"), r.get("sweeps")])


def evaluate_users(
    policies: Mapping[str, Policy],
    train: Mapping[str, Sequence[Episode]],
    heldout: Mapping[str, Sequence[Episode]],
    zero_division: float = 0.0,
    extra: Mapping[str, dict] | None = None,
) -> EvaluationReport:
    per_user = {}
    for u, pol in policies.items():
        if not heldout.get(u):
            continue
        rec = {
            "policy": score(pol, heldout[u], "majority", zero_division).as_dict(),
            "baseline": majority_baseline(train[u], heldout[u], zero_division).as_dict(),
        }
        if extra and u in extra:
            rec.update(extra[u])
        per_user[u] = rec
    if not per_user:
        raise NoHeldout("no user has held-out episodes")
    return EvaluationReport(per_user, zero_division)
