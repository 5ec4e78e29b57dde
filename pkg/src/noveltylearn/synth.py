"""Synthetic listening logs with planted ground truth.

Every user walks a chain over planted tastes.  At each session boundary the
user switches, uniformly to one of the other tastes, with a per-taste switch
probability; otherwise the taste is kept.  Session tokens are drawn i.i.d.
from the current taste.  Timestamps keep intra-session gaps at a few minutes
and inter-session gaps well above the sessionizer threshold, so sessions
survive :func:`noveltylearn.sessions.sessionize` exactly as emitted.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import BadConfig
from .ingest import Event, EventLog, _build
from .sessions import Corpus

DAY = 86400
DATASET_START = 1108339200  # 2005-02-14T00:00:00Z
POLICY_MODES = ("persistence", "state", "novel", "familiar", "mixed")
SEPARATIONS = ("disjoint", "dirichlet")


@dataclass
class SynthConfig:
    n_tastes: int = 5
    vocab_size: int = 200
    n_users: int = 50
    sessions_per_user: int = 200
    min_session_length: int = 10
    max_session_length: int = 30
    separation: str = "disjoint"
    concentration: float = 0.1  # Dirichlet concentration for "dirichlet" separation
    zipf: bool = False
    policy: str = "state"
    p_stay_continuing: float = 0.9
    p_stay_quitting: float = 0.4
    quitter_fraction: float = 0.0
    dataset_days: int = 1500
    quitter_span_days: int = 300
    min_session_gap: int = 6 * 3600
    seed: int = 0

    def validate(self) -> None:
        if self.n_tastes < 2:
            raise BadConfig("n_tastes must be >= 2")
        if self.vocab_size < self.n_tastes:
            raise BadConfig("vocab_size must be >= n_tastes")
        if self.n_users < 1 or self.sessions_per_user < 1:
            raise BadConfig("n_users and sessions_per_user must be >= 1")
        if not 1 <= self.min_session_length <= self.max_session_length:
            raise BadConfig("need 1 <= min_session_length <= max_session_length")
        if self.separation not in SEPARATIONS:
            raise BadConfig(f"separation must be one of {SEPARATIONS}")
        if self.policy not in POLICY_MODES:
            raise BadConfig(f"policy must be one of {POLICY_MODES}")
        for p in (self.p_stay_continuing, self.p_stay_quitting, self.quitter_fraction):
            if not 0.0 <= p <= 1.0:
                raise BadConfig("probabilities must lie in [0, 1]")
        if self.policy == "state" and self.n_tastes < 2:
            raise BadConfig("state policies need >= 2 tastes")
        if self.quitter_fraction > 0 and self.dataset_days < self.quitter_span_days + 400:
            raise BadConfig("dataset_days too short to place quitters a year before the end")


@dataclass
class GroundTruth:
    taste_track: np.ndarray  # K x V over planted track indices
    track_ids: list[str]  # planted index -> track_id
    mixtures: dict[str, np.ndarray]
    switch_prob: dict[str, np.ndarray]  # per user, per taste
    archetype: dict[str, str]
    session_tastes: dict[str, list[int]]
    dataset_end: int
    config: SynthConfig = field(default_factory=SynthConfig)

    def planted_policy(self, user: str) -> list[str | None]:
        """Deterministic per-taste action, or None where the switch is stochastic."""
        out: list[str | None] = []
        for p in self.switch_prob[user]:
            out.append("novel" if p == 1.0 else "familiar" if p == 0.0 else None)
        return out

    def p_stay(self, user: str) -> float:
        return float(1.0 - np.mean(self.switch_prob[user]))

    def taste_track_for(self, log: EventLog) -> np.ndarray:
        """Planted taste_track re-indexed to the log's token ids (pruned tracks dropped, rows renormalised).

        A taste none of whose tracks occur in the log keeps an all-zero row.
        """
        out = np.zeros((self.taste_track.shape[0], log.vocab_size))
        for planted, tid in enumerate(self.track_ids):
            try:
                out[:, log.token_of(tid)] = self.taste_track[:, planted]
            except KeyError:
                continue
        total = out.sum(axis=1, keepdims=True)
        return np.divide(out, total, out=np.zeros_like(out), where=total > 0)

    def to_json(self) -> dict:
        return {
            "config": asdict(self.config),
            "dataset_end": self.dataset_end,
            "track_ids": self.track_ids,
            "taste_track": self.taste_track.tolist(),
            "users": {
                u: {
                    "mixture": self.mixtures[u].tolist(),
                    "switch_prob": self.switch_prob[u].tolist(),
                    "archetype": self.archetype[u],
                    "session_tastes": self.session_tastes[u],
                }
                for u in self.mixtures
            },
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "GroundTruth":
        d = json.loads(Path(path).read_text(encoding="utf-8"))
        users = d["users"]
        return cls(
            taste_track=np.asarray(d["taste_track"]),
            track_ids=d["track_ids"],
            mixtures={u: np.asarray(v["mixture"]) for u, v in users.items()},
            switch_prob={u: np.asarray(v["switch_prob"]) for u, v in users.items()},
            archetype={u: v["archetype"] for u, v in users.items()},
            session_tastes={u: v["session_tastes"] for u, v in users.items()},
            dataset_end=d["dataset_end"],
            config=SynthConfig(**d["config"]),
        )


def plant_tastes(
    n_tastes: int,
    vocab_size: int,
    rng: np.random.Generator,
    separation: str = "disjoint",
    concentration: float = 0.1,
    zipf: bool = False,
) -> np.ndarray:
    """Return a K x V row-stochastic taste_track matrix.

    ``disjoint`` gives each taste its own contiguous block of tracks (pairwise
    total variation 1); ``dirichlet`` draws every row over the full vocabulary,
    with lower ``concentration`` giving sparser, better separated rows.
    """
    if separation == "disjoint":
        tt = np.zeros((n_tastes, vocab_size))
        blocks = np.array_split(np.arange(vocab_size), n_tastes)
        for k, idx in enumerate(blocks):
            if zipf:
                w = 1.0 / np.arange(1, len(idx) + 1)
                w = w[rng.permutation(len(idx))]
            else:
                w = rng.dirichlet(np.full(len(idx), 5.0))
            tt[k, idx] = w / w.sum()
        return tt
    if separation == "dirichlet":
        tt = rng.dirichlet(np.full(vocab_size, concentration), size=n_tastes)
        if zipf:
            tt = tt / np.arange(1, vocab_size + 1)
            tt /= tt.sum(axis=1, keepdims=True)
        return tt
    raise BadConfig(f"unknown separation {separation!r}")


def sample_lda_corpus(
    taste_track: np.ndarray,
    n_docs: int,
    doc_length: int,
    rng: np.random.Generator,
    doc_concentration: float = 0.5,
) -> tuple[Corpus, np.ndarray]:
    """Draw documents from the LDA generative process; returns the corpus and the doc mixtures."""
    K, V = taste_track.shape
    mixtures = rng.dirichlet(np.full(K, doc_concentration), size=n_docs)
    docs, meta = [], []
    for d in range(n_docs):
        z = rng.choice(K, size=doc_length, p=mixtures[d])
        words = np.empty(doc_length, dtype=np.int64)
        for k in np.unique(z):
            sel = z == k
            words[sel] = rng.choice(V, size=int(sel.sum()), p=taste_track[k])
        docs.append(dict(Counter(words.tolist())))
        meta.append((f"doc_{d:05d}", None))
    return Corpus(tuple(docs), tuple(meta), V, "user"), mixtures


def match_tastes(recovered: np.ndarray, planted: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Best one-to-one matching of recovered to planted taste rows by total variation.

    Returns ``(perm, tv)`` where recovered row ``perm[k]`` is matched to planted
    row ``k`` at distance ``tv[k]``.
    """
    cost = 0.5 * np.abs(planted[:, None, :] - recovered[None, :, :]).sum(axis=2)
    rows, cols = linear_sum_assignment(cost)
    perm = np.empty(planted.shape[0], dtype=int)
    perm[rows] = cols
    return perm, cost[rows, cols]


def _switch_probs(cfg: SynthConfig, rng: np.random.Generator, user_index: int, archetype: str) -> np.ndarray:
    K = cfg.n_tastes
    if cfg.policy == "persistence":
        p_stay = cfg.p_stay_quitting if archetype == "quitting" else cfg.p_stay_continuing
        return np.full(K, 1.0 - p_stay)
    if cfg.policy == "novel":
        return np.ones(K)
    if cfg.policy == "familiar":
        return np.zeros(K)
    if cfg.policy == "mixed":
        return np.ones(K) if user_index % 2 == 0 else np.zeros(K)
    # "state": deterministic per-taste actions with both actions present
    while True:
        acts = rng.integers(0, 2, size=K).astype(float)
        if 0 < acts.sum() < K:
            return acts


def _session_starts(cfg: SynthConfig, rng: np.random.Generator, archetype: str, durations: np.ndarray) -> np.ndarray:
    n = len(durations)
    total = cfg.dataset_days * DAY
    if archetype == "quitting":
        span = cfg.quitter_span_days * DAY
        latest_start = total - 400 * DAY - span
        first = int(rng.integers(0, max(latest_start // 3, 1)))
        weights = 1.0 + 2.0 * np.arange(n) / max(n - 1, 1)  # widening gaps: activity declines
    else:
        first = int(rng.integers(0, max(total // 10, 1)))
        span = total - first - 2 * DAY
        weights = np.ones(n)
    weights = weights * rng.uniform(0.8, 1.2, size=n)
    gaps = weights[:-1] / weights[:-1].sum() * span if n > 1 else np.zeros(0)
    starts = np.empty(n, dtype=np.int64)
    t = DATASET_START + first
    for i in range(n):
        starts[i] = t
        if i < n - 1:
            t = t + max(int(gaps[i]), int(durations[i]) + cfg.min_session_gap)
    return starts


def generate(cfg: SynthConfig | None = None) -> tuple[EventLog, GroundTruth]:
    """Generate an event log and its planted ground truth; deterministic in ``cfg.seed``."""
    cfg = cfg or SynthConfig()
    cfg.validate()
    root = np.random.SeedSequence(cfg.seed)
    taste_seq, *user_seqs = root.spawn(cfg.n_users + 1)
    taste_track = plant_tastes(
        cfg.n_tastes, cfg.vocab_size, np.random.default_rng(taste_seq), cfg.separation, cfg.concentration, cfg.zipf
    )
    K, V = taste_track.shape
    track_ids = [f"trk-{i:05d}" for i in range(V)]
    owner = taste_track.argmax(axis=0)
    artist_of = [f"artist-{int(owner[i]):03d}" for i in range(V)]

    n_quit = int(round(cfg.quitter_fraction * cfg.n_users))
    per_user: dict[str, list[Event]] = {}
    mixtures, switch, archetypes, session_tastes = {}, {}, {}, {}
    for u, seq in enumerate(user_seqs):
        rng = np.random.default_rng(seq)
        user = f"user_{u:06d}"
        archetype = "quitting" if u < n_quit else "continuing"
        mixture = rng.dirichlet(np.ones(K))
        sw = _switch_probs(cfg, rng, u, archetype)
        taste = int(rng.choice(K, p=mixture))
        tastes = []
        for _ in range(cfg.sessions_per_user):
            tastes.append(taste)
            if rng.random() < sw[taste]:
                others = [k for k in range(K) if k != taste]
                taste = int(others[rng.integers(len(others))])
        lengths = rng.integers(cfg.min_session_length, cfg.max_session_length + 1, size=cfg.sessions_per_user)
        intra = [rng.integers(120, 301, size=int(n - 1)) for n in lengths]
        durations = np.array([int(g.sum()) for g in intra])
        starts = _session_starts(cfg, rng, archetype, durations)
        events = []
        for k, n, t0, gaps in zip(tastes, lengths, starts, intra):
            words = rng.choice(V, size=int(n), p=taste_track[k])
            ts = t0 + np.concatenate(([0], np.cumsum(gaps)))
            for w, t in zip(words, ts):
                w = int(w)
                events.append(Event(user, int(t), None, artist_of[w], track_ids[w], f"Track {w}"))
        per_user[user] = events
        mixtures[user] = mixture
        switch[user] = sw
        archetypes[user] = archetype
        session_tastes[user] = tastes

    last = max(ev.timestamp for evs in per_user.values() for ev in evs)
    dataset_end = max(DATASET_START + cfg.dataset_days * DAY, last + 1)
    log = _build(per_user)
    gt = GroundTruth(taste_track, track_ids, mixtures, switch, archetypes, session_tastes, dataset_end, cfg)
    return log, gt

