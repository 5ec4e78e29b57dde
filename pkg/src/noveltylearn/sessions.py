"""Sessionization, bag-of-words corpora and the chronological train/test split."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import UserTooSparse
from .ingest import EventLog, format_timestamp, parse_timestamp

DEFAULT_MAX_GAP = 3600
MIN_SESSIONS = 5
GRANULARITIES = ("user", "session")


@dataclass(frozen=True)
class Session:
    user_id: str
    index: int
    start: int
    end: int
    tokens: tuple[int, ...]
    timestamps: tuple[int, ...] = ()

    def __len__(self) -> int:
        return len(self.tokens)


@dataclass(frozen=True)
class Corpus:
    """Bags of track tokens.

    ``doc_meta[d]`` is ``(user_id, session_index)``; the session index is
    ``None`` for user-level documents.
    """

    documents: tuple[dict[int, int], ...]
    doc_meta: tuple[tuple[str, int | None], ...]
    vocab_size: int
    granularity: str = "user"

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def n_tokens(self) -> int:
        return sum(sum(d.values()) for d in self.documents)

    @property
    def is_valid(self) -> bool:
        return len(self.documents) > 0

    def subset(self, indices: Iterable[int]) -> "Corpus":
        idx = list(indices)
        return Corpus(
            tuple(self.documents[i] for i in idx),
            tuple(self.doc_meta[i] for i in idx),
            self.vocab_size,
            self.granularity,
        )


def sessionize(log: EventLog, max_gap: int = DEFAULT_MAX_GAP) -> dict[str, list[Session]]:
    """Split every user's stream wherever the inter-event gap exceeds ``max_gap`` seconds."""
    if max_gap <= 0:
        raise ValueError("max_gap must be positive")
    out: dict[str, list[Session]] = {}
    for user in log.user_ids:
        ts = log.timestamps[user]
        toks = log.tokens[user]
        if len(ts) == 0:
            out[user] = []
            continue
        breaks = np.flatnonzero(np.diff(ts) > max_gap) + 1
        bounds = np.concatenate(([0], breaks, [len(ts)]))
        sessions = []
        for i, (a, b) in enumerate(zip(bounds[:-1], bounds[1:])):
            sessions.append(
                Session(user, i, int(ts[a]), int(ts[b - 1]), tuple(toks[a:b].tolist()), tuple(ts[a:b].tolist()))
            )
        out[user] = sessions
    return out


def build_corpus(
    sessions: Mapping[str, Sequence[Session]], vocab_size: int, granularity: str = "user"
) -> Corpus:
    if granularity not in GRANULARITIES:
        raise ValueError(f"granularity must be one of {GRANULARITIES}")
    docs: list[dict[int, int]] = []
    meta: list[tuple[str, int | None]] = []
    for user, user_sessions in sessions.items():
        if granularity == "session":
            for s in user_sessions:
                if s.tokens:
                    docs.append(dict(Counter(s.tokens)))
                    meta.append((user, s.index))
        else:
            bag: Counter = Counter()
            for s in user_sessions:
                bag.update(s.tokens)
            if bag:
                docs.append(dict(bag))
                meta.append((user, None))
    return Corpus(tuple(docs), tuple(meta), vocab_size, granularity)


def train_count(n: int, train_fraction: float = 0.8) -> int:
    """Number of leading sessions that go to training: ceil(f*n), leaving at least one held out."""
    # round before ceil so that 0.8 * 10 does not become 9
    return min(math.ceil(round(train_fraction * n, 9)), n - 1)


def temporal_split(
    sessions: Sequence[Session], train_fraction: float = 0.8, min_sessions: int = MIN_SESSIONS
) -> tuple[list[Session], list[Session]]:
    """Chronological split of one user's sessions; the first ceil(f*n) go to training."""
    if not 0 < train_fraction < 1:
        raise ValueError("train_fraction must lie in (0, 1)")
    n = len(sessions)
    if n < min_sessions:
        user = sessions[0].user_id if sessions else "?"
        raise UserTooSparse(user, n, min_sessions)
    n_train = train_count(n, train_fraction)
    ordered = sorted(sessions, key=lambda s: s.start)
    return ordered[:n_train], ordered[n_train:]


def split_all(
    sessions: Mapping[str, Sequence[Session]], train_fraction: float = 0.8, min_sessions: int = MIN_SESSIONS
) -> tuple[dict[str, tuple[list[Session], list[Session]]], list[str]]:
    """Split every user; sparse users are collected instead of raising."""
    splits, sparse = {}, []
    for user, ss in sessions.items():
        try:
            splits[user] = temporal_split(ss, train_fraction, min_sessions)
        except UserTooSparse:
            sparse.append(user)
    return splits, sparse


def write_sessions(sessions: Mapping[str, Sequence[Session]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for user, ss in sessions.items():
            for s in ss:
                rec = {
                    "user": user,
                    "index": s.index,
                    "start": format_timestamp(s.start),
                    "end": format_timestamp(s.end),
                    "tokens": list(s.tokens),
                    "timestamps": list(s.timestamps),
                }
                fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def read_sessions(path: str | Path) -> dict[str, list[Session]]:
    out: dict[str, list[Session]] = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out.setdefault(rec["user"], []).append(
                Session(
                    rec["user"],
                    rec["index"],
                    parse_timestamp(rec["start"]),
                    parse_timestamp(rec["end"]),
                    tuple(rec["tokens"]),
                    tuple(rec.get("timestamps", ())),
                )
            )
    return out
