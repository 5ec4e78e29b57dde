"""Taste discovery with collapsed Gibbs sampling for LDA.

Naming follows the listening domain rather than textbook LDA: ``taste_track``
holds P(track | taste) (one row per taste) and ``user_taste`` holds each
user's mixture over tastes.  The source model writes these as alpha and beta
respectively, the reverse of the usual convention, so the code avoids the
Greek names for the distributions and keeps ``hyper_doc`` / ``hyper_word``
for the two symmetric Dirichlet concentrations.

All randomness comes from a seeded :class:`numpy.random.Generator`: one
uniform per token per sweep, drawn in Python and consumed by the compiled
sweep kernel.  A run of ``n`` sweeps is therefore a prefix of any longer run
with the same seed.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from numba import njit

from .errors import AllOutOfVocabulary, BadTasteIndex, EmptyCorpus, EmptyHeldout, InvalidK, NoveltyError
from .sessions import Corpus

log = logging.getLogger(__name__)

MODEL_FORMAT = "noveltylearn.tastemodel"
MODEL_VERSION = 1
DEFAULT_HYPER_WORD = 0.01


def default_hyper_doc(K: int) -> float:
    return 50.0 / K


@njit(cache=True, nogil=True)
def _gibbs_sweep(doc_of, word_of, z, ndk, nkw, nk, hyper_doc, hyper_word, u):
    K = nk.shape[0]
    V = nkw.shape[1]
    vbeta = V * hyper_word
    cum = np.empty(K)
    for i in range(word_of.shape[0]):
        d = doc_of[i]
        w = word_of[i]
        k = z[i]
        ndk[d, k] -= 1
        nkw[k, w] -= 1
        nk[k] -= 1
        total = 0.0
        for j in range(K):
            total += (ndk[d, j] + hyper_doc) * (nkw[j, w] + hyper_word) / (nk[j] + vbeta)
            cum[j] = total
        r = u[i] * total
        k = 0
        while k < K - 1 and cum[k] <= r:
            k += 1
        z[i] = k
        ndk[d, k] += 1
        nkw[k, w] += 1
        nk[k] += 1


@njit(cache=True, nogil=True)
def _fold_in(words, z, taste_track, hyper_doc, u):
    """Gibbs over one held-out document with taste_track frozen; returns its taste counts."""
    K = taste_track.shape[0]
    nd = np.zeros(K)
    for i in range(words.shape[0]):
        nd[z[i]] += 1
    cum = np.empty(K)
    for it in range(u.shape[0]):
        for i in range(words.shape[0]):
            w = words[i]
            nd[z[i]] -= 1
            total = 0.0
            for j in range(K):
                total += (nd[j] + hyper_doc) * taste_track[j, w]
                cum[j] = total
            r = u[it, i] * total
            k = 0
            while k < K - 1 and cum[k] <= r:
                k += 1
            z[i] = k
            nd[k] += 1
    return nd


@dataclass
class SamplerState:
    """Token-level assignments and the count tables derived from them."""

    doc_of: np.ndarray
    word_of: np.ndarray
    z: np.ndarray
    ndk: np.ndarray
    nkw: np.ndarray
    nk: np.ndarray

    @classmethod
    def initialise(cls, corpus: Corpus, K: int, rng: np.random.Generator) -> "SamplerState":
        doc_of, word_of = flatten(corpus)
        z = rng.integers(0, K, size=len(word_of)).astype(np.int64)
        state = cls(doc_of, word_of, z, *_count(doc_of, word_of, z, len(corpus), K, corpus.vocab_size))
        return state

    def recount(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        K = self.nk.shape[0]
        return _count(self.doc_of, self.word_of, self.z, self.ndk.shape[0], K, self.nkw.shape[1])

    def is_consistent(self) -> bool:
        ndk, nkw, nk = self.recount()
        return bool(np.array_equal(ndk, self.ndk) and np.array_equal(nkw, self.nkw) and np.array_equal(nk, self.nk))


def _count(doc_of, word_of, z, D, K, V):
    ndk = np.zeros((D, K), dtype=np.int64)
    nkw = np.zeros((K, V), dtype=np.int64)
    np.add.at(ndk, (doc_of, z), 1)
    np.add.at(nkw, (z, word_of), 1)
    return ndk, nkw, nkw.sum(axis=1)


def flatten(corpus: Corpus) -> tuple[np.ndarray, np.ndarray]:
    """Expand bags into parallel (doc, word) token arrays, tokens sorted within each doc."""
    docs, words = [], []
    for d, bag in enumerate(corpus.documents):
        for w in sorted(bag):
            c = bag[w]
            docs.append(np.full(c, d, dtype=np.int64))
            words.append(np.full(c, w, dtype=np.int64))
    if not words:
        return np.zeros(0, dtype=np.int64), np.zeros(0, dtype=np.int64)
    return np.concatenate(docs), np.concatenate(words)


@dataclass(frozen=True, eq=False)
class TasteModel:
    taste_track: np.ndarray  # K x V, rows are P(track | taste)
    user_taste: np.ndarray  # M x K, rows are a user's taste proportions
    users: tuple[str, ...]
    hyper_doc: float
    hyper_word: float
    seed: int = 0
    iterations: int = 0
    log_likelihood: float = float("nan")
    vocabulary: tuple[str, ...] = ()
    _rows: dict[str, int] = field(default=None, repr=False)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        self.taste_track.setflags(write=False)
        self.user_taste.setflags(write=False)
        object.__setattr__(self, "_rows", {u: i for i, u in enumerate(self.users)})

    @property
    def K(self) -> int:
        return self.taste_track.shape[0]

    @property
    def V(self) -> int:
        return self.taste_track.shape[1]

    def prior(self, user: str | None) -> np.ndarray:
        """The user's taste proportions; uniform for users the model has not seen."""
        row = self._rows.get(user) if user is not None else None
        if row is None:
            return np.full(self.K, 1.0 / self.K)
        return self.user_taste[row]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TasteModel):
            return NotImplemented
        return (
            np.array_equal(self.taste_track, other.taste_track)
            and np.array_equal(self.user_taste, other.user_taste)
            and self.users == other.users
            and (self.hyper_doc, self.hyper_word, self.seed, self.iterations)
            == (other.hyper_doc, other.hyper_word, other.seed, other.iterations)
        )

    __hash__ = None  # type: ignore[assignment]

    def save(self, path: str | Path) -> None:
        rec = {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "K": self.K,
            "V": self.V,
            "hyper_doc": self.hyper_doc,
            "hyper_word": self.hyper_word,
            "seed": self.seed,
            "iterations": self.iterations,
            "log_likelihood": self.log_likelihood,
            "users": list(self.users),
            "vocabulary": list(self.vocabulary),
            "taste_track": self.taste_track.tolist(),
            "user_taste": self.user_taste.tolist(),
        }
        Path(path).write_text(json.dumps(rec) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TasteModel":
        rec = json.loads(Path(path).read_text(encoding="utf-8"))
        if rec.get("format") != MODEL_FORMAT or rec.get("version") != MODEL_VERSION:
            raise NoveltyError(f"{path}: not a version-{MODEL_VERSION} taste model")
        return cls(
            taste_track=np.asarray(rec["taste_track"], dtype=float).reshape(rec["K"], rec["V"]),
            user_taste=np.asarray(rec["user_taste"], dtype=float).reshape(len(rec["users"]), rec["K"]),
            users=tuple(rec["users"]),
            hyper_doc=rec["hyper_doc"],
            hyper_word=rec["hyper_word"],
            seed=rec["seed"],
            iterations=rec["iterations"],
            log_likelihood=rec["log_likelihood"],
            vocabulary=tuple(rec["vocabulary"]),
        )


def _estimate(corpus: Corpus, state: SamplerState, hyper_doc: float, hyper_word: float):
    K = state.nk.shape[0]
    V = corpus.vocab_size
    taste_track = (state.nkw + hyper_word) / (state.nk[:, None] + V * hyper_word)
    users: list[str] = []
    rows: dict[str, int] = {}
    for user, _ in corpus.doc_meta:
        if user not in rows:
            rows[user] = len(users)
            users.append(user)
    counts = np.zeros((len(users), K))
    for d, (user, _) in enumerate(corpus.doc_meta):
        counts[rows[user]] += state.ndk[d]
    user_taste = (counts + hyper_doc) / (counts.sum(axis=1, keepdims=True) + K * hyper_doc)
    return taste_track, user_taste, tuple(users)


def _train_loglik(state: SamplerState, taste_track: np.ndarray, hyper_doc: float) -> float:
    K = state.nk.shape[0]
    theta = (state.ndk + hyper_doc) / (state.ndk.sum(axis=1, keepdims=True) + K * hyper_doc)
    p = np.einsum("ik,ki->i", theta[state.doc_of], taste_track[:, state.word_of])
    return float(np.log(p).sum())


def _chain(corpus: Corpus, K: int, n_sweeps: int, hyper_doc: float, hyper_word: float, seed: int):
    rng = np.random.default_rng(seed)
    state = SamplerState.initialise(corpus, K, rng)
    n = len(state.word_of)
    for sweep in range(1, n_sweeps + 1):
        u = rng.random(n)
        _gibbs_sweep(state.doc_of, state.word_of, state.z, state.ndk, state.nkw, state.nk, hyper_doc, hyper_word, u)
        yield sweep, state


def _check_args(corpus: Corpus, K, sweeps: Sequence[int]) -> None:
    if not isinstance(K, (int, np.integer)) or isinstance(K, bool) or K < 1:
        raise InvalidK(f"K must be a positive integer, got {K!r}")
    if not sweeps or min(sweeps) < 1:
        raise ValueError("iterations must be >= 1")
    if len(corpus) == 0 or corpus.n_tokens == 0:
        raise EmptyCorpus("corpus has no tokens")


def train_checkpoints(
    corpus: Corpus,
    K: int,
    checkpoints: Sequence[int],
    hyper_doc: float | None = None,
    hyper_word: float = DEFAULT_HYPER_WORD,
    seed: int = 0,
    vocabulary: Sequence[str] = (),
) -> dict[int, TasteModel]:
    """Run one chain and snapshot a :class:`TasteModel` after each checkpoint sweep."""
    _check_args(corpus, K, checkpoints)
    hyper_doc = default_hyper_doc(K) if hyper_doc is None else float(hyper_doc)
    wanted = set(int(c) for c in checkpoints)
    out: dict[int, TasteModel] = {}
    for sweep, state in _chain(corpus, int(K), max(wanted), hyper_doc, hyper_word, seed):
        if sweep in wanted:
            tt, ut, users = _estimate(corpus, state, hyper_doc, hyper_word)
            ll = _train_loglik(state, tt, hyper_doc)
            log.debug("K=%d sweep %d loglik %.3f", K, sweep, ll)
            out[sweep] = TasteModel(tt, ut, users, hyper_doc, hyper_word, seed, sweep, ll, tuple(vocabulary))
    return out


def restart_seed(seed: int, restart: int) -> int:
    """Seed of restart ``restart``; restart 0 runs on ``seed`` itself."""
    if restart == 0:
        return int(seed)
    return int(np.random.SeedSequence([int(seed), restart]).generate_state(1)[0])


def _train_chain(corpus, K, iterations, hyper_doc, hyper_word, seed, vocabulary, n_samples, lag) -> TasteModel:
    points = [iterations - lag * j for j in range(n_samples)]
    models = train_checkpoints(corpus, K, points, hyper_doc, hyper_word, seed, vocabulary)
    final = models[iterations]
    if n_samples == 1:
        return final
    tt = np.mean([models[p].taste_track for p in points], axis=0)
    ut = np.mean([models[p].user_taste for p in points], axis=0)
    return TasteModel(
        tt, ut, final.users, final.hyper_doc, final.hyper_word, seed, iterations, final.log_likelihood, final.vocabulary
    )


def train(
    corpus: Corpus,
    K: int,
    iterations: int = 1000,
    hyper_doc: float | None = None,
    hyper_word: float = DEFAULT_HYPER_WORD,
    seed: int = 0,
    vocabulary: Sequence[str] = (),
    n_samples: int = 1,
    lag: int = 10,
    restarts: int = 1,
    threads: int = 1,
) -> TasteModel:
    """Fit the taste pool by collapsed Gibbs sampling.

    By default the estimates are the smoothed counts of the final sweep.  With
    ``n_samples > 1`` they are averaged over that many states spaced ``lag``
    sweeps apart, ending at the final sweep.  ``hyper_doc`` defaults to 50/K.

    With ``restarts > 1`` independent chains are run (seeds from
    :func:`restart_seed`) and the one with the highest final training
    log-likelihood is returned; ties go to the earliest restart.
    """
    iterations = int(iterations)
    if n_samples < 1 or (n_samples > 1 and iterations - lag * (n_samples - 1) < 1):
        raise ValueError("not enough sweeps for the requested number of lagged samples")
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    seeds = [restart_seed(seed, r) for r in range(restarts)]

    def run(s: int) -> TasteModel:
        return _train_chain(corpus, K, iterations, hyper_doc, hyper_word, s, vocabulary, n_samples, lag)

    if threads > 1 and restarts > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            chains = list(ex.map(run, seeds))
    else:
        chains = [run(s) for s in seeds]
    best = max(range(restarts), key=lambda r: (chains[r].log_likelihood, -r))
    if restarts > 1:
        log.info("restart log-likelihoods %s; keeping %d", [round(c.log_likelihood, 2) for c in chains], best)
    return chains[best]


def sampler_state(
    corpus: Corpus, K: int, iterations: int, hyper_doc: float | None = None, hyper_word=DEFAULT_HYPER_WORD, seed=0
) -> SamplerState:
    """The raw sampler state after ``iterations`` sweeps, for diagnostics."""
    _check_args(corpus, K, [iterations])
    hyper_doc = default_hyper_doc(K) if hyper_doc is None else float(hyper_doc)
    state = None
    for _, state in _chain(corpus, int(K), iterations, hyper_doc, hyper_word, seed):
        pass
    return state


# -- held-out likelihood ------------------------------------------------------


@dataclass(frozen=True)
class HeldoutLikelihood:
    log_likelihood: float
    n_tokens: int
    n_oov: int
    n_docs: int

    @property
    def perplexity(self) -> float:
        return math.exp(-self.log_likelihood / self.n_tokens)


def _doc_seed(bag: dict[int, int], seed: int) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(str(seed).encode())
    for w in sorted(bag):
        h.update(f"{w}:{bag[w]},".encode())
    return int.from_bytes(h.digest(), "little")


def heldout_likelihood(
    model: TasteModel, heldout: Corpus, fold_in_iterations: int = 50, seed: int = 0
) -> HeldoutLikelihood:
    """Fold each held-out document in against the frozen taste_track and sum token log-likelihoods.

    Each document's chain is seeded from its own contents, so the result does
    not depend on document order and duplicated documents score identically.
    """
    if len(heldout) == 0:
        raise EmptyHeldout("held-out corpus is empty")
    K, V = model.K, model.V
    total, n_tok, n_oov = 0.0, 0, 0
    for bag in heldout.documents:
        words = np.array([w for w in sorted(bag) if 0 <= w < V for _ in range(bag[w])], dtype=np.int64)
        n_oov += sum(c for w, c in bag.items() if not 0 <= w < V)
        if len(words) == 0:
            continue
        rng = np.random.default_rng(_doc_seed(bag, seed))
        z = rng.integers(0, K, size=len(words)).astype(np.int64)
        u = rng.random((fold_in_iterations, len(words)))
        nd = _fold_in(words, z, model.taste_track, model.hyper_doc, u)
        theta = (nd + model.hyper_doc) / (len(words) + K * model.hyper_doc)
        total += float(np.log(theta @ model.taste_track[:, words]).sum())
        n_tok += len(words)
    if n_tok == 0:
        raise AllOutOfVocabulary(f"all {n_oov} held-out tokens are out of vocabulary")
    if n_oov:
        log.info("dropped %d out-of-vocabulary held-out tokens", n_oov)
    return HeldoutLikelihood(total, n_tok, n_oov, len(heldout))


def perplexity(model: TasteModel, heldout: Corpus, fold_in_iterations: int = 50, seed: int = 0) -> float:
    """exp(-sum of held-out log-likelihoods / held-out token count)."""
    return heldout_likelihood(model, heldout, fold_in_iterations, seed).perplexity


def top_tracks(model: TasteModel, k: int, n: int = 10) -> list[tuple[int, float]]:
    if not 0 <= k < model.K:
        raise BadTasteIndex(f"taste {k} not in [0, {model.K})")
    row = model.taste_track[k]
    order = np.lexsort((np.arange(model.V), -row))[:n]
    return [(int(t), float(row[t])) for t in order]


# -- model selection ----------------------------------------------------------


@dataclass
class ModelSelection:
    best_k: int
    best_iterations: int
    grid: list[tuple[int, int, float]]
    tolerance: float

    def perplexity_of(self, K: int, iterations: int) -> float:
        for k, it, p in self.grid:
            if (k, it) == (K, iterations):
                return p
        raise KeyError((K, iterations))

    def write_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["K", "iterations", "perplexity"])
            for row in self.grid:
                w.writerow([row[0], row[1], repr(row[2])])


def elbow(grid: Sequence[tuple[int, int, float]], tolerance: float = 0.02) -> tuple[int, int]:
    """Smallest K within ``tolerance`` of the grid minimum, then its smallest adequate iteration count."""
    best_per_k: dict[int, float] = {}
    for K, _, p in grid:
        best_per_k[K] = min(p, best_per_k.get(K, math.inf))
    floor = min(best_per_k.values())
    K = min(k for k, p in best_per_k.items() if p <= (1 + tolerance) * floor)
    its = sorted((it, p) for k, it, p in grid if k == K)
    it = next(it for it, p in its if p <= (1 + tolerance) * best_per_k[K])
    return K, it


def heldout_split(corpus: Corpus, heldout_fraction: float, seed: int) -> tuple[Corpus, Corpus]:
    n = len(corpus)
    if n < 2:
        raise EmptyHeldout("need at least two documents to hold some out")
    n_out = min(max(1, int(round(heldout_fraction * n))), n - 1)
    perm = np.random.default_rng(seed).permutation(n)
    held = sorted(perm[:n_out].tolist())
    kept = sorted(perm[n_out:].tolist())
    return corpus.subset(kept), corpus.subset(held)


def select_model(
    corpus: Corpus,
    k_candidates: Sequence[int],
    iteration_candidates: Sequence[int],
    heldout_fraction: float = 0.2,
    seed: int = 0,
    tolerance: float = 0.02,
    fold_in_iterations: int = 50,
    hyper_doc: float | None = None,
    hyper_word: float = DEFAULT_HYPER_WORD,
    threads: int = 1,
) -> ModelSelection:
    """Grid over (K, sweeps) scored by held-out perplexity; documents are held out whole."""
    if not k_candidates or not iteration_candidates:
        raise ValueError("candidate lists must be non-empty")
    train_c, held_c = heldout_split(corpus, heldout_fraction, seed)

    def run(K: int) -> list[tuple[int, int, float]]:
        models = train_checkpoints(train_c, K, iteration_candidates, hyper_doc, hyper_word, seed)
        return [(K, it, perplexity(m, held_c, fold_in_iterations, seed)) for it, m in sorted(models.items())]

    ks = sorted(set(int(k) for k in k_candidates))
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            rows = list(ex.map(run, ks))
    else:
        rows = [run(K) for K in ks]
    grid = [r for rs in rows for r in rs]
    K, it = elbow(grid, tolerance)
    return ModelSelection(K, it, grid, tolerance)
