import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noveltylearn import lda
from noveltylearn.errors import AllOutOfVocabulary, BadTasteIndex, EmptyCorpus, EmptyHeldout, InvalidK
from noveltylearn.sessions import Corpus
from noveltylearn.synth import match_tastes, plant_tastes, sample_lda_corpus


def corpus_of(*bags, V=None):
    V = V or 1 + max(w for b in bags for w in b)
    return Corpus(tuple(bags), tuple((f"d{i}", None) for i in range(len(bags))), V)


@pytest.fixture(scope="module")
def planted2():
    rng = np.random.default_rng(11)
    tt = plant_tastes(2, 40, rng, "disjoint")
    corpus, _ = sample_lda_corpus(tt, 100, 200, rng)
    return tt, corpus


def test_single_word_single_taste_is_exact():
    m = lda.train(corpus_of({0: 5}), K=1, iterations=3, hyper_word=0.01)
    assert m.taste_track[0, 0] == 1.0
    assert m.user_taste[0, 0] == 1.0


def test_planted_two_tastes_recovered(planted2):
    tt, corpus = planted2
    m = lda.train(corpus, K=2, iterations=200, seed=1)
    _, tv = match_tastes(m.taste_track, tt)
    assert tv.max() < 0.1


def test_training_is_deterministic(planted2):
    _, corpus = planted2
    a = lda.train(corpus, K=3, iterations=20, seed=5)
    b = lda.train(corpus, K=3, iterations=20, seed=5)
    assert a == b
    assert a.taste_track.tobytes() == b.taste_track.tobytes()
    assert a != lda.train(corpus, K=3, iterations=20, seed=6)


def test_rows_are_stochastic(planted2):
    _, corpus = planted2
    m = lda.train(corpus, K=4, iterations=10)
    assert np.all(m.taste_track >= 0) and np.all(m.user_taste >= 0)
    np.testing.assert_allclose(m.taste_track.sum(axis=1), 1.0, atol=1e-9)
    np.testing.assert_allclose(m.user_taste.sum(axis=1), 1.0, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(
    st.lists(st.dictionaries(st.integers(0, 9), st.integers(1, 6), min_size=1, max_size=6), min_size=1, max_size=6),
    st.integers(1, 4),
    st.integers(1, 15),
    st.integers(0, 1000),
)
def test_count_tables_match_recount(bags, K, sweeps, seed):
    state = lda.sampler_state(corpus_of(*bags, V=10), K, sweeps, seed=seed)
    assert state.is_consistent()
    assert state.nk.sum() == len(state.z)


def test_kernel_matches_python_reference(planted2):
    _, corpus = planted2
    rng = np.random.default_rng(0)
    state = lda.SamplerState.initialise(corpus, 3, rng)
    ref = [a.copy() for a in (state.z, state.ndk, state.nkw, state.nk)]
    for _ in range(3):
        u = rng.random(len(state.z))
        lda._gibbs_sweep(state.doc_of, state.word_of, state.z, state.ndk, state.nkw, state.nk, 50 / 3, 0.01, u)
        lda._gibbs_sweep.py_func(state.doc_of, state.word_of, *ref, 50 / 3, 0.01, u)
    for a, b in zip((state.z, state.ndk, state.nkw, state.nk), ref):
        assert np.array_equal(a, b)

    words = np.array([0, 0, 3, 7, 21], dtype=np.int64)
    tt = plant_tastes(3, 40, np.random.default_rng(2), "dirichlet", 0.5)
    z0 = np.array([0, 1, 2, 0, 1], dtype=np.int64)
    u = np.random.default_rng(3).random((10, 5))
    nd_fast = lda._fold_in(words, z0.copy(), tt, 0.5, u)
    nd_ref = lda._fold_in.py_func(words, z0.copy(), tt, 0.5, u)
    assert np.array_equal(nd_fast, nd_ref)


def test_checkpoints_are_prefixes_of_longer_runs(planted2):
    _, corpus = planted2
    cps = lda.train_checkpoints(corpus, 2, [5, 15], seed=3)
    assert cps[5] == lda.train(corpus, 2, iterations=5, seed=3)
    assert cps[15] == lda.train(corpus, 2, iterations=15, seed=3)


def test_lagged_sample_averaging(planted2):
    _, corpus = planted2
    m = lda.train(corpus, 2, iterations=30, seed=0, n_samples=3, lag=5)
    parts = lda.train_checkpoints(corpus, 2, [20, 25, 30], seed=0)
    np.testing.assert_allclose(m.taste_track, np.mean([p.taste_track for p in parts.values()], axis=0))


def test_exchangeability_up_to_relabelling(planted2):
    tt, corpus = planted2
    order = np.random.default_rng(9).permutation(len(corpus))
    a = lda.train(corpus, 2, iterations=150, seed=2)
    b = lda.train(corpus.subset(order), 2, iterations=150, seed=2)
    _, tv = match_tastes(b.taste_track, a.taste_track)
    assert tv.max() < 0.05


@pytest.mark.parametrize("K", [0, -1, 2.5, True])
def test_invalid_k(K):
    with pytest.raises(InvalidK):
        lda.train(corpus_of({0: 1}), K=K, iterations=1)


def test_empty_corpus():
    with pytest.raises(EmptyCorpus):
        lda.train(Corpus((), (), 3), K=2, iterations=1)


def uniform_model(V, K=1):
    return lda.TasteModel(np.full((K, V), 1.0 / V), np.full((1, K), 1.0 / K), ("u",), 50.0 / K, 0.01)


@pytest.mark.parametrize("V", [1, 7, 200])
def test_uniform_model_perplexity_is_vocabulary_size(V):
    held = corpus_of({0: 3, V - 1: 2}, {V // 2: 9}, V=V)
    assert lda.perplexity(uniform_model(V), held, fold_in_iterations=5) == pytest.approx(V, rel=1e-12)


def test_planted_model_beats_uniform():
    rng = np.random.default_rng(4)
    tt = plant_tastes(3, 60, rng, "disjoint")
    held, _ = sample_lda_corpus(tt, 10, 100, rng)
    planted = lda.TasteModel(tt, np.full((1, 3), 1 / 3), ("u",), 50 / 3, 0.01)
    assert lda.perplexity(planted, held, 30) <= lda.perplexity(uniform_model(60), held, 30)


def test_duplicated_heldout_has_same_perplexity(planted2):
    tt, corpus = planted2
    m = lda.train(corpus, 2, iterations=30)
    held = corpus.subset(range(5))
    doubled = corpus.subset(list(range(5)) * 2)
    assert lda.perplexity(m, doubled, 20) == pytest.approx(lda.perplexity(m, held, 20), rel=1e-12)
    reordered = corpus.subset([4, 2, 0, 1, 3])
    assert lda.perplexity(m, reordered, 20) == pytest.approx(lda.perplexity(m, held, 20), rel=1e-12)


def test_heldout_oov_handling():
    m = uniform_model(4)
    res = lda.heldout_likelihood(m, corpus_of({0: 2, 9: 3}, V=10), 5)
    assert (res.n_tokens, res.n_oov) == (2, 3)
    with pytest.raises(AllOutOfVocabulary):
        lda.perplexity(m, corpus_of({8: 1}, V=10))
    with pytest.raises(EmptyHeldout):
        lda.perplexity(m, Corpus((), (), 4))


def test_top_tracks_examples():
    tt = np.array([[0.7, 0.2, 0.1], [0.4, 0.2, 0.4]])
    m = lda.TasteModel(tt, np.array([[0.5, 0.5]]), ("u",), 1.0, 0.01)
    assert lda.top_tracks(m, 0, 2) == [(0, 0.7), (1, 0.2)]
    assert len(lda.top_tracks(m, 0, 10)) == 3
    assert [t for t, _ in lda.top_tracks(m, 1, 2)] == [0, 2]
    with pytest.raises(BadTasteIndex):
        lda.top_tracks(m, 2, 1)


def test_elbow_examples():
    assert lda.elbow([(5, 100, 120.0), (10, 100, 100.0), (20, 100, 99.0)], 0.02) == (10, 100)
    assert lda.elbow([(7, 50, 3.0)]) == (7, 50)
    grid = [(5, 10, 200.0), (5, 100, 150.0), (5, 1000, 149.0)]
    assert lda.elbow(grid, 0.02) == (5, 100)


def test_select_model_single_candidate(planted2):
    _, corpus = planted2
    sel = lda.select_model(corpus, [2], [10], seed=0, fold_in_iterations=5)
    assert (sel.best_k, sel.best_iterations) == (2, 10)
    assert len(sel.grid) == 1 and math.isfinite(sel.grid[0][2])


def test_select_model_prefers_planted_k(planted2):
    _, corpus = planted2
    sel = lda.select_model(corpus, [1, 2, 4], [50], seed=0, fold_in_iterations=20, tolerance=0.02)
    assert sel.best_k == 2
    threaded = lda.select_model(corpus, [1, 2, 4], [50], seed=0, fold_in_iterations=20, threads=2)
    assert threaded.grid == sel.grid


def test_model_file_round_trip(tmp_path, planted2):
    _, corpus = planted2
    m = lda.train(corpus, 2, iterations=5, vocabulary=[f"t{i}" for i in range(corpus.vocab_size)])
    m.save(tmp_path / "m.json")
    back = lda.TasteModel.load(tmp_path / "m.json")
    assert back == m and back.vocabulary == m.vocabulary


def test_unseen_user_gets_uniform_prior():
    m = uniform_model(3, K=4)
    np.testing.assert_array_equal(m.prior("nobody"), np.full(4, 0.25))


def test_restarts_keep_the_most_likely_chain(planted2):
    _, corpus = planted2
    chains = [lda.train(corpus, 3, iterations=15, seed=lda.restart_seed(7, r)) for r in range(3)]
    best = lda.train(corpus, 3, iterations=15, seed=7, restarts=3)
    assert best.log_likelihood == max(c.log_likelihood for c in chains)
    assert best == lda.train(corpus, 3, iterations=15, seed=7, restarts=3, threads=3)
    assert lda.restart_seed(7, 0) == 7 and lda.restart_seed(7, 1) != lda.restart_seed(7, 2)
    with pytest.raises(ValueError):
        lda.train(corpus, 3, iterations=5, restarts=0)
