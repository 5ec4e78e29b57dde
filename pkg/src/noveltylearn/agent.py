"""NoveltyLearn: per-user tabular Q-learning over taste states.

States are assigned tastes; the two actions are *novel* (the next session
changes taste) and *familiar* (it keeps the taste).  Training replays the
user's logged transitions sweep after sweep.  At each step the agent picks an
action epsilon-greedily, earns ``reward_correct`` when it agrees with the
observed transition and ``reward_wrong`` otherwise (less ``action_cost`` for
choosing novel), and applies::

    Q(s, a) += alpha_t * (r + gamma * max_a' Q(s', a') - Q(s, a))

with ``alpha_t = t ** -lr_exponent``.  By default ``t`` counts visits to the
updated (state, action) pair, the polynomial schedule of Even-Dar and Mansour;
``lr_counter`` switches to a per-state or a global step count.
"""

from __future__ import annotations

import csv
import json
import zlib
from dataclasses import asdict, dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
from numba import njit

from .assignment import TasteTrajectory
from .errors import NoEpisodes, NoveltyError, TrajectoryTooShort

POLICY_FORMAT = "noveltylearn.policies"
POLICY_VERSION = 1
SWEEP_BLOCK = 64
LR_COUNTERS = ("global", "state", "state_action")


class Action(IntEnum):
    NOVEL = 0
    FAMILIAR = 1

    @property
    def label(self) -> str:
        return self.name.lower()


UNVISITED = -1
_LABELS = {Action.NOVEL: "novel", Action.FAMILIAR: "familiar", UNVISITED: "unvisited"}


@dataclass(frozen=True)
class Episode:
    state: int
    observed: Action
    next_state: int

    def __post_init__(self) -> None:
        if (self.observed == Action.NOVEL) != (self.next_state != self.state):
            raise ValueError(f"inconsistent episode {self}")


@dataclass
class AgentParams:
    gamma: float = 0.9
    lr_exponent: float = 0.65
    epsilon_start: float = 0.2
    epsilon_end: float = 0.01
    reward_correct: float = 1.0
    reward_wrong: float = -1.0
    action_cost: float = 0.01
    convergence_tol: float = 1e-4
    max_sweeps: int = 10000
    seed: int = 0
    lr_counter: str = "state_action"  # global | state | state_action
    # per-user reward overrides, each "user:reward_correct:reward_wrong"
    user_rewards: list[str] = field(default_factory=list)

    def reward_overrides(self) -> dict[str, tuple[float, float]]:
        out = {}
        for item in self.user_rewards:
            user, *parts = item.strip().rsplit(":", 2)  # user ids may contain ':'
            if not user or len(parts) != 2:
                raise NoveltyError(f"bad user_rewards entry {item!r}, want user:correct:wrong")
            try:
                out[user] = (float(parts[0]), float(parts[1]))
            except ValueError:
                raise NoveltyError(f"bad user_rewards entry {item!r}, want user:correct:wrong") from None
        return out

    def for_user(self, user_id: str) -> AgentParams:
        """These params with ``user_id``'s reward override applied, if any."""
        hit = self.reward_overrides().get(user_id)
        if hit is None:
            return self
        return replace(self, reward_correct=hit[0], reward_wrong=hit[1], user_rewards=[])

    def validate(self) -> None:
        if not 0 <= self.gamma < 1:
            raise NoveltyError("gamma must lie in [0, 1)")
        if self.lr_exponent <= 0:
            raise NoveltyError("lr_exponent must be positive")
        if not 0 <= self.epsilon_end <= self.epsilon_start <= 1:
            raise NoveltyError("need 0 <= epsilon_end <= epsilon_start <= 1")
        if not -1 <= self.reward_wrong <= 0 <= self.reward_correct <= 1:
            raise NoveltyError("need -1 <= reward_wrong <= 0 <= reward_correct <= 1")
        if self.action_cost < 0:
            raise NoveltyError("action_cost must be non-negative")
        if self.lr_counter not in LR_COUNTERS:
            raise NoveltyError(f"lr_counter must be one of {LR_COUNTERS}")
        if self.convergence_tol <= 0 or self.max_sweeps < 1:
            raise NoveltyError("convergence_tol must be positive and max_sweeps >= 1")
        for correct, wrong in self.reward_overrides().values():
            if not -1 <= wrong <= 0 <= correct <= 1:
                raise NoveltyError("need -1 <= reward_wrong <= 0 <= reward_correct <= 1 in user_rewards")

    def epsilon(self, sweep: int) -> float:
        """Exploration rate for 1-based ``sweep``, linear from start to end over max_sweeps."""
        if self.max_sweeps == 1:
            return self.epsilon_start
        frac = (sweep - 1) / (self.max_sweeps - 1)
        return self.epsilon_start + (self.epsilon_end - self.epsilon_start) * frac


@dataclass
class QTable:
    user_id: str
    q: np.ndarray  # K x 2, columns (novel, familiar)
    visits: np.ndarray  # K x 2 action counts
    sweeps_run: int
    converged: bool
    majority: Action
    trace: list[float] = field(default_factory=list)  # max |dQ| per sweep

    @property
    def K(self) -> int:
        return self.q.shape[0]


@dataclass(frozen=True)
class Policy:
    user_id: str
    actions: tuple[int, ...]  # Action value per state, or UNVISITED
    majority: Action = Action.FAMILIAR

    @property
    def K(self) -> int:
        return len(self.actions)

    def labels(self) -> list[str]:
        return [_LABELS[a] for a in self.actions]


def label_transitions(traj: TasteTrajectory | Sequence[int]) -> list[Episode]:
    tastes = traj.assigned if isinstance(traj, TasteTrajectory) else list(traj)
    if len(tastes) < 2:
        raise TrajectoryTooShort(f"need >= 2 steps, got {len(tastes)}")
    return [
        Episode(int(a), Action.NOVEL if b != a else Action.FAMILIAR, int(b)) for a, b in zip(tastes[:-1], tastes[1:])
    ]


def q_update(q: np.ndarray, s: int, a: int, r: float, s_next: int, alpha: float, gamma: float) -> float:
    """Apply one Q-learning update to ``q[s, a]`` in place and return the new value."""
    q[s, a] = q[s, a] + alpha * (r + gamma * q[s_next].max() - q[s, a])
    return float(q[s, a])


def reward(action: int, observed: int, params: AgentParams) -> float:
    r = params.reward_correct if action == observed else params.reward_wrong
    if action == Action.NOVEL:
        r -= params.action_cost
    return r


@njit(cache=True, nogil=True)
def _sweep_block(
    states, observed, next_states, q, visits, state_steps, t, epsilons, u_explore, u_action,
    gamma, lr_exponent, r_correct, r_wrong, cost, counter, tol, deltas,
):  # fmt: skip
    """Run up to len(epsilons) sweeps; returns (sweeps run, global step, converged)."""
    n = states.shape[0]
    for b in range(epsilons.shape[0]):
        eps = epsilons[b]
        max_delta = 0.0
        for i in range(n):
            s = states[i]
            if u_explore[b, i] < eps:
                a = 0 if u_action[b, i] < 0.5 else 1
            else:
                a = 0 if q[s, 0] > q[s, 1] else 1
            r = r_correct if a == observed[i] else r_wrong
            if a == 0:
                r -= cost
            t += 1
            state_steps[s] += 1
            visits[s, a] += 1
            if counter == 0:
                step = t
            elif counter == 1:
                step = state_steps[s]
            else:
                step = visits[s, a]
            alpha = step ** (-lr_exponent)
            sn = next_states[i]
            best_next = q[sn, 0] if q[sn, 0] > q[sn, 1] else q[sn, 1]
            old = q[s, a]
            q[s, a] = old + alpha * (r + gamma * best_next - old)
            d = abs(q[s, a] - old)
            if d > max_delta:
                max_delta = d
        deltas[b] = max_delta
        if max_delta < tol:
            return b + 1, t, True
    return epsilons.shape[0], t, False


def user_seed(seed: int, user_id: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), zlib.crc32(user_id.encode("utf-8"))])


def majority_action(episodes: Iterable[Episode]) -> Action:
    eps = list(episodes)
    novel = sum(1 for e in eps if e.observed == Action.NOVEL)
    return Action.NOVEL if novel > len(eps) - novel else Action.FAMILIAR


def episode_arrays(episodes: Sequence[Episode]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    states = np.array([e.state for e in episodes], dtype=np.int64)
    observed = np.array([int(e.observed) for e in episodes], dtype=np.int64)
    nxt = np.array([e.next_state for e in episodes], dtype=np.int64)
    return states, observed, nxt


def train_policy(
    episodes: Sequence[Episode], params: AgentParams | None = None, n_states: int | None = None, user_id: str = ""
) -> tuple[QTable, Policy]:
    """Learn one user's Q-table by replaying ``episodes`` until convergence or ``max_sweeps``."""
    params = params or AgentParams()
    params.validate()
    if not episodes:
        raise NoEpisodes(f"user {user_id!r} has no training episodes")
    states, observed, nxt = episode_arrays(episodes)
    K = int(max(states.max(), nxt.max()) + 1) if n_states is None else int(n_states)
    q = np.zeros((K, 2))
    visits = np.zeros((K, 2), dtype=np.int64)
    state_steps = np.zeros(K, dtype=np.int64)
    rng = np.random.default_rng(user_seed(params.seed, user_id))
    trace: list[float] = []
    t, done, converged, n = 0, 0, False, len(states)
    while done < params.max_sweeps and not converged:
        block = min(SWEEP_BLOCK, params.max_sweeps - done)
        eps = np.array([params.epsilon(done + 1 + b) for b in range(block)])
        u_explore = rng.random((block, n))
        u_action = rng.random((block, n))
        deltas = np.zeros(block)
        ran, t, converged = _sweep_block(
            states, observed, nxt, q, visits, state_steps, t, eps, u_explore, u_action,
            params.gamma, params.lr_exponent, params.reward_correct, params.reward_wrong,
            params.action_cost, LR_COUNTERS.index(params.lr_counter), params.convergence_tol, deltas,
        )  # fmt: skip
        trace.extend(deltas[:ran].tolist())
        done += ran
    table = QTable(user_id, q, visits, done, bool(converged), majority_action(episodes), trace)
    return table, extract_policy(table)


def extract_policy(table: QTable) -> Policy:
    """Greedy policy; ties go to familiar and never-visited states are marked unvisited."""
    actions = []
    for s in range(table.K):
        if table.visits[s].sum() == 0:
            actions.append(UNVISITED)
        elif table.q[s, Action.NOVEL] > table.q[s, Action.FAMILIAR]:
            actions.append(int(Action.NOVEL))
        else:
            actions.append(int(Action.FAMILIAR))
    return Policy(table.user_id, tuple(actions), table.majority)


def predict(policy: Policy, state: int, fallback: str = "majority") -> Action:
    """Policy action for ``state``; unvisited states use ``fallback`` ("majority" or "familiar")."""
    a = policy.actions[state] if 0 <= state < policy.K else UNVISITED
    if a != UNVISITED:
        return Action(a)
    if fallback == "majority":
        return policy.majority
    if fallback == "familiar":
        return Action.FAMILIAR
    raise ValueError(f"unknown fallback {fallback!r}")


# -- persistence ----------------------------------------------------------------


def save_policies(tables: Mapping[str, QTable], path: str | Path, params: AgentParams | None = None) -> None:
    users = []
    for user, qt in tables.items():
        pol = extract_policy(qt)
        users.append(
            {
                "user": user,
                "K": qt.K,
                "actions": pol.labels(),
                "q": qt.q.tolist(),
                "visits": qt.visits.tolist(),
                "sweeps": qt.sweeps_run,
                "converged": qt.converged,
                "majority": qt.majority.label,
            }
        )
    rec = {"format": POLICY_FORMAT, "version": POLICY_VERSION, "params": asdict(params) if params else None, "users": users}
    Path(path).write_text(json.dumps(rec, sort_keys=True) + "\n", encoding="utf-8")


def load_policies(path: str | Path) -> dict[str, QTable]:
    rec = json.loads(Path(path).read_text(encoding="utf-8"))
    if rec.get("format") != POLICY_FORMAT or rec.get("version") != POLICY_VERSION:
        raise NoveltyError(f"{path}: not a version-{POLICY_VERSION} policy file")
    out = {}
    for u in rec["users"]:
        out[u["user"]] = QTable(
            u["user"],
            np.asarray(u["q"], dtype=float).reshape(u["K"], 2),
            np.asarray(u["visits"], dtype=np.int64).reshape(u["K"], 2),
            u["sweeps"],
            u["converged"],
            Action.NOVEL if u["majority"] == "novel" else Action.FAMILIAR,
        )
    return out


def write_traces(tables: Mapping[str, QTable], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user", "sweep", "max_abs_delta_q"])
        for user, qt in tables.items():
            for i, d in enumerate(qt.trace, start=1):
                w.writerow([user, i, repr(d)])
