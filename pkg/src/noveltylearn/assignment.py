"""Map sessions into taste space.

For a session ``h = [s_1 .. s_n]`` of user ``m`` the taste posterior is::

    P(k | h)  proportional to  P(k | m) * prod_i P(s_i | k)

normalised over tastes and evaluated in log space.  The assigned taste is the
posterior argmax, lowest index on ties.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import EmptySession
from .lda import TasteModel
from .sessions import Session

PROB_FLOOR = 1e-9


@dataclass(frozen=True)
class Step:
    session_index: int
    posterior: np.ndarray
    assigned: int
    start: int = 0


@dataclass(frozen=True)
class TasteTrajectory:
    user_id: str
    steps: tuple[Step, ...]

    def __len__(self) -> int:
        return len(self.steps)

    @property
    def assigned(self) -> list[int]:
        return [s.assigned for s in self.steps]

    @property
    def posteriors(self) -> np.ndarray:
        return np.array([s.posterior for s in self.steps])


def session_posterior(
    model: TasteModel, user: str | None, tokens: Sequence[int], floor: float = PROB_FLOOR
) -> tuple[np.ndarray, bool]:
    """Return ``(posterior, all_oov)``.

    Out-of-vocabulary tokens are skipped; zero track probabilities are floored
    at ``floor``.  When every token is out of vocabulary the posterior is the
    prior and the flag is set.
    """
    if len(tokens) == 0:
        raise EmptySession("session has no tokens")
    toks = np.asarray(tokens, dtype=np.int64)
    toks = toks[(toks >= 0) & (toks < model.V)]
    prior = np.asarray(model.prior(user), dtype=float)
    with np.errstate(divide="ignore"):
        score = np.log(prior)
    all_oov = len(toks) == 0
    if not all_oov:
        score = score + np.log(np.maximum(model.taste_track[:, toks], floor)).sum(axis=1)
    return normalise_log(score), all_oov


def normalise_log(score: np.ndarray) -> np.ndarray:
    """exp-normalise log scores; -inf entries get exactly zero mass."""
    finite = np.isfinite(score)
    if not finite.any():
        raise ValueError("all taste scores are -inf")
    out = np.zeros_like(score, dtype=float)
    shifted = score[finite] - score[finite].max()
    w = np.exp(shifted)
    out[finite] = w / w.sum()
    return out


def assign_taste(posterior: Sequence[float]) -> int:
    return int(np.argmax(posterior))  # first maximum wins ties


def build_trajectory(model: TasteModel, user: str, sessions: Iterable[Session]) -> TasteTrajectory:
    ordered = sorted(sessions, key=lambda s: s.start)
    steps = []
    for s in ordered:
        post, _ = session_posterior(model, user, s.tokens)
        steps.append(Step(s.index, post, assign_taste(post), s.start))
    return TasteTrajectory(user, tuple(steps))


def build_trajectories(model: TasteModel, sessions: Mapping[str, Sequence[Session]]) -> dict[str, TasteTrajectory]:
    return {u: build_trajectory(model, u, ss) for u, ss in sessions.items() if ss}


def write_trajectories(trajs: Mapping[str, TasteTrajectory], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user, traj in trajs.items():
            for step in traj.steps:
                rec = {
                    "user": user,
                    "session_index": step.session_index,
                    "start": step.start,
                    "assigned": step.assigned,
                    "posterior": step.posterior.tolist(),
                }
                fh.write(json.dumps(rec) + "\n")


def read_trajectories(path: str | Path) -> dict[str, TasteTrajectory]:
    steps: dict[str, list[Step]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                r = json.loads(line)
                steps.setdefault(r["user"], []).append(
                    Step(r["session_index"], np.asarray(r["posterior"]), r["assigned"], r.get("start", 0))
                )
    return {u: TasteTrajectory(u, tuple(s)) for u, s in steps.items()}
