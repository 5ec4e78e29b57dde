"""Parse, index and summarise last.fm-style listening logs.

Input lines carry six tab-separated columns::

    userid  timestamp  artist-mbid  artist-name  track-mbid  track-name

The parsed :class:`EventLog` is columnar: one int64 timestamp array and one
token array per user, plus a track table indexed by token.  Token ids are
dense and assigned by first appearance when the log is traversed in its
canonical order (users by first appearance, each user's events by time).
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import IO, Iterable, Iterator

import numpy as np

from .errors import EmptyInput, MalformedLine, NoveltyError

log = logging.getLogger(__name__)

N_COLUMNS = 6
CACHE_FORMAT = "noveltylearn.eventlog"
CACHE_VERSION = 1
SYNTH_SEPARATOR = "||"


@dataclass(frozen=True)
class Event:
    user_id: str
    timestamp: int  # UTC seconds since epoch
    artist_id: str | None
    artist_name: str
    track_id: str
    track_name: str


@dataclass(frozen=True)
class TrackInfo:
    track_id: str
    artist_id: str | None
    artist_name: str
    track_name: str
    synthesized: bool = False

    @property
    def artist_key(self) -> str:
        return self.artist_id if self.artist_id else "name:" + self.artist_name


@dataclass(frozen=True)
class DatasetStats:
    record_count: int
    user_count: int
    artist_count: int
    unique_track_count: int


@dataclass(frozen=True, eq=False)
class EventLog:
    """Immutable, time-sorted listening history for a set of users."""

    user_ids: tuple[str, ...]
    timestamps: dict[str, np.ndarray]
    tokens: dict[str, np.ndarray]
    tracks: tuple[TrackInfo, ...]
    skipped: int = 0
    _index: dict[str, int] = field(default=None, repr=False, compare=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        for arr in (*self.timestamps.values(), *self.tokens.values()):
            arr.setflags(write=False)
        object.__setattr__(self, "_index", {t.track_id: i for i, t in enumerate(self.tracks)})

    @property
    def vocab_size(self) -> int:
        return len(self.tracks)

    @property
    def n_events(self) -> int:
        return sum(len(v) for v in self.tokens.values())

    def token_of(self, track_id: str) -> int:
        return self._index[track_id]

    def events(self, user_id: str) -> Iterator[Event]:
        for ts, tok in zip(self.timestamps[user_id], self.tokens[user_id]):
            info = self.tracks[tok]
            yield Event(user_id, int(ts), info.artist_id, info.artist_name, info.track_id, info.track_name)

    def __iter__(self) -> Iterator[Event]:
        for user in self.user_ids:
            yield from self.events(user)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventLog):
            return NotImplemented
        if self.user_ids != other.user_ids or self.tracks != other.tracks:
            return False
        return all(
            np.array_equal(self.timestamps[u], other.timestamps[u])
            and np.array_equal(self.tokens[u], other.tokens[u])
            for u in self.user_ids
        )

    __hash__ = None  # type: ignore[assignment]


def parse_timestamp(raw: str) -> int:
    value = raw.strip()
    if value.endswith("Z"):
        value = value[:-1] + "+00:00"
    dt = datetime.fromisoformat(value)
    if dt.tzinfo is None:
        dt = dt.replace(tzinfo=timezone.utc)
    return int(dt.timestamp())


def format_timestamp(ts: int) -> str:
    return datetime.fromtimestamp(int(ts), tz=timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def _parse_line(line: str, line_no: int) -> Event:
    fields = line.split("\t")
    if len(fields) != N_COLUMNS:
        raise MalformedLine(line_no, f"expected {N_COLUMNS} fields, got {len(fields)}")
    user_id, raw_ts, artist_id, artist_name, track_id, track_name = fields
    if not user_id:
        raise MalformedLine(line_no, "empty user id")
    try:
        ts = parse_timestamp(raw_ts)
    except ValueError as exc:
        raise MalformedLine(line_no, f"bad timestamp {raw_ts!r}") from exc
    if not track_id:
        if not artist_name and not track_name:
            raise MalformedLine(line_no, "no track id and no names to synthesize one")
        track_id = artist_name + SYNTH_SEPARATOR + track_name
    return Event(user_id, ts, artist_id or None, artist_name, track_id, track_name)


def parse_events(lines: Iterable[str], strict: bool = True) -> EventLog:
    """Parse TSV lines into an :class:`EventLog`.

    Blank lines are ignored.  In strict mode the first malformed line raises
    :class:`MalformedLine`; otherwise it is skipped and counted in
    ``EventLog.skipped``.
    """
    skipped = 0
    per_user: dict[str, list[Event]] = {}
    for line_no, line in enumerate(lines, start=1):
        line = line.rstrip("\r\n")
        if not line.strip():
            continue
        try:
            ev = _parse_line(line, line_no)
        except MalformedLine:
            if strict:
                raise
            skipped += 1
            continue
        per_user.setdefault(ev.user_id, []).append(ev)
    if skipped:
        log.info("skipped %d malformed lines", skipped)
    if not per_user:
        raise EmptyInput("no valid events in input")
    return _build(per_user, skipped)


def _build(per_user: dict[str, list[Event]], skipped: int = 0) -> EventLog:
    tracks: list[TrackInfo] = []
    index: dict[str, int] = {}
    timestamps: dict[str, np.ndarray] = {}
    tokens: dict[str, np.ndarray] = {}
    for user, events in per_user.items():
        events = sorted(events, key=lambda e: e.timestamp)  # stable: ties keep input order
        toks = np.empty(len(events), dtype=np.int64)
        for i, ev in enumerate(events):
            tok = index.get(ev.track_id)
            if tok is None:
                tok = index[ev.track_id] = len(tracks)
                synthesized = ev.track_id == ev.artist_name + SYNTH_SEPARATOR + ev.track_name
                tracks.append(TrackInfo(ev.track_id, ev.artist_id, ev.artist_name, ev.track_name, synthesized))
            toks[i] = tok
        timestamps[user] = np.array([e.timestamp for e in events], dtype=np.int64)
        tokens[user] = toks
    return EventLog(tuple(per_user), timestamps, tokens, tuple(tracks), skipped)


def read_tsv(path: str | Path, strict: bool = True) -> EventLog:
    with open(path, encoding="utf-8", newline="") as fh:
        return parse_events(fh, strict=strict)


def write_tsv(log_: EventLog, out: IO[str]) -> None:
    for ev in log_:
        info = log_.tracks[log_.token_of(ev.track_id)]
        track_col = "" if info.synthesized else ev.track_id
        out.write(
            "\t".join(
                (ev.user_id, format_timestamp(ev.timestamp), ev.artist_id or "", ev.artist_name, track_col, ev.track_name)
            )
            + "\n"
        )


def dataset_stats(log_: EventLog) -> DatasetStats:
    used = set()
    for toks in log_.tokens.values():
        used.update(np.unique(toks).tolist())
    artists = {log_.tracks[t].artist_key for t in used}
    return DatasetStats(
        record_count=log_.n_events,
        user_count=len(log_.user_ids),
        artist_count=len(artists),
        unique_track_count=len(used),
    )


def track_counts(log_: EventLog) -> np.ndarray:
    counts = np.zeros(log_.vocab_size, dtype=np.int64)
    for toks in log_.tokens.values():
        counts += np.bincount(toks, minlength=log_.vocab_size)
    return counts


def prune_vocabulary(log_: EventLog, min_count: int = 10) -> EventLog:
    """Drop events whose track occurs fewer than ``min_count`` times overall."""
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    counts = track_counts(log_)
    keep = counts >= min_count
    if not keep.any():
        raise EmptyInput(f"no track reaches min_count={min_count}")
    remap = np.full(log_.vocab_size, -1, dtype=np.int64)
    remap[keep] = np.arange(int(keep.sum()))
    tracks = tuple(t for t, k in zip(log_.tracks, keep) if k)
    timestamps: dict[str, np.ndarray] = {}
    tokens: dict[str, np.ndarray] = {}
    users = []
    for user in log_.user_ids:
        mask = keep[log_.tokens[user]]
        if not mask.any():
            continue
        users.append(user)
        timestamps[user] = log_.timestamps[user][mask].copy()
        tokens[user] = remap[log_.tokens[user][mask]]
    return EventLog(tuple(users), timestamps, tokens, tracks, log_.skipped)


# -- cache ------------------------------------------------------------------


def save_cache(log_: EventLog, path: str | Path) -> None:
    """Write the versioned NDJSON cache: header, one line per track, one per user."""
    with open(path, "w", encoding="utf-8") as fh:
        header = {
            "format": CACHE_FORMAT,
            "version": CACHE_VERSION,
            "n_users": len(log_.user_ids),
            "n_tracks": log_.vocab_size,
            "skipped": log_.skipped,
        }
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for tok, t in enumerate(log_.tracks):
            rec = {
                "token": tok,
                "track_id": t.track_id,
                "artist_id": t.artist_id,
                "artist_name": t.artist_name,
                "track_name": t.track_name,
                "synthesized": t.synthesized,
            }
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")
        for user in log_.user_ids:
            rec = {"user": user, "ts": log_.timestamps[user].tolist(), "tokens": log_.tokens[user].tolist()}
            fh.write(json.dumps(rec, sort_keys=True, ensure_ascii=False) + "\n")


def load_cache(path: str | Path) -> EventLog:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("format") != CACHE_FORMAT:
            raise NoveltyError(f"{path}: not an event-log cache")
        if header.get("version") != CACHE_VERSION:
            raise NoveltyError(f"{path}: unsupported cache version {header.get('version')}")
        tracks = []
        for _ in range(header["n_tracks"]):
            rec = json.loads(fh.readline())
            tracks.append(
                TrackInfo(rec["track_id"], rec["artist_id"], rec["artist_name"], rec["track_name"], rec["synthesized"])
            )
        users, timestamps, tokens = [], {}, {}
        for _ in range(header["n_users"]):
            rec = json.loads(fh.readline())
            users.append(rec["user"])
            timestamps[rec["user"]] = np.asarray(rec["ts"], dtype=np.int64)
            tokens[rec["user"]] = np.asarray(rec["tokens"], dtype=np.int64)
    return EventLog(tuple(users), timestamps, tokens, tuple(tracks), header["skipped"])

