import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from noveltylearn import assignment
from noveltylearn.errors import EmptySession
from noveltylearn.lda import TasteModel
from noveltylearn.sessions import Session, sessionize
from noveltylearn.synth import SynthConfig, generate, plant_tastes


def model(taste_track, prior=None, user="u"):
    tt = np.asarray(taste_track, dtype=float)
    K = tt.shape[0]
    prior = np.full(K, 1.0 / K) if prior is None else np.asarray(prior, dtype=float)
    return TasteModel(tt, prior[None, :], (user,), 1.0, 0.01)


def test_single_token_bayes_rule():
    m = model([[0.2, 0.8], [0.8, 0.2]])
    post, oov = assignment.session_posterior(m, "u", [0])
    np.testing.assert_allclose(post, [0.2, 0.8], rtol=1e-15)
    assert not oov


def test_ten_tokens_product_oracle():
    m = model([[0.9, 0.1], [0.1, 0.9]])
    post, _ = assignment.session_posterior(m, "u", [0] * 10)
    expected = 0.9**10 / (0.9**10 + 0.1**10)
    assert post[0] == pytest.approx(expected, rel=1e-14)
    assert post[0] == pytest.approx(1 / (1 + 9.0**-10), rel=1e-14)  # 0.99999999971...


def test_degenerate_prior():
    m = model([[0.1, 0.9], [0.9, 0.1]], prior=[1.0, 0.0])
    post, _ = assignment.session_posterior(m, "u", [1, 1, 1, 1])
    assert post.tolist() == [1.0, 0.0]


def test_zero_probabilities_are_floored():
    m = model([[1.0, 0.0], [0.5, 0.5]])
    post, _ = assignment.session_posterior(m, "u", [1])
    assert post[1] > 0.999 and post[0] > 0


def test_oov_tokens_skipped_and_flagged():
    m = model([[0.2, 0.8], [0.8, 0.2]])
    post, oov = assignment.session_posterior(m, "u", [0, 7])
    np.testing.assert_allclose(post, [0.2, 0.8])
    post, oov = assignment.session_posterior(m, "u", [7, 9])
    assert oov and post.tolist() == [0.5, 0.5]


def test_empty_session():
    with pytest.raises(EmptySession):
        assignment.session_posterior(model([[1.0]]), "u", [])


@pytest.mark.parametrize("post,k", [((0.1, 0.7, 0.2), 1), ((0.5, 0.5), 0), ((0.25,) * 4, 0)])
def test_assign_taste(post, k):
    assert assignment.assign_taste(post) == k


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-700, 0), min_size=2, max_size=8), st.floats(-300, 300))
def test_scale_invariance(logs, shift):
    score = np.array(logs)
    a = assignment.normalise_log(score)
    b = assignment.normalise_log(score + shift)
    np.testing.assert_allclose(a, b, rtol=1e-9, atol=1e-300)
    assert assignment.assign_taste(a) == assignment.assign_taste(b) or np.isclose(a.max(), np.sort(a)[-2])
    assert a.sum() == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(0, 9), min_size=1, max_size=30), st.randoms(use_true_random=False))
def test_token_order_invariance(tokens, rnd):
    tt = plant_tastes(3, 10, np.random.default_rng(1), "dirichlet", 1.0)
    m = model(tt, [0.2, 0.3, 0.5])
    shuffled = tokens[:]
    rnd.shuffle(shuffled)
    a, _ = assignment.session_posterior(m, "u", tokens)
    b, _ = assignment.session_posterior(m, "u", shuffled)
    np.testing.assert_allclose(a, b, rtol=1e-12, atol=1e-300)


def planted_sessions(tastes, tt, rng, length=15):
    out = []
    for i, k in enumerate(tastes):
        toks = tuple(rng.choice(tt.shape[1], size=length, p=tt[k]).tolist())
        out.append(Session("u", i, 1000 * i, 1000 * i + 1, toks))
    return out


def test_alternating_sessions_give_alternating_trajectory():
    rng = np.random.default_rng(0)
    tt = plant_tastes(2, 20, rng, "disjoint")
    ss = planted_sessions([0, 1] * 10, tt, rng)
    traj = assignment.build_trajectory(model(tt), "u", ss)
    assert traj.assigned == [0, 1] * 10
    for step in traj.steps:
        assert step.posterior.sum() == pytest.approx(1.0, abs=1e-9)


def test_constant_and_single_session_trajectories():
    rng = np.random.default_rng(1)
    tt = plant_tastes(3, 30, rng, "disjoint")
    assert assignment.build_trajectory(model(tt), "u", planted_sessions([2] * 6, tt, rng)).assigned == [2] * 6
    assert len(assignment.build_trajectory(model(tt), "u", planted_sessions([1], tt, rng))) == 1


def test_trajectory_is_time_ordered():
    rng = np.random.default_rng(2)
    tt = plant_tastes(2, 20, rng, "disjoint")
    ss = planted_sessions([0, 1, 1], tt, rng)
    traj = assignment.build_trajectory(model(tt), "u", ss[::-1])
    assert [s.session_index for s in traj.steps] == [0, 1, 2]


def test_accuracy_on_planted_generator():
    cfg = SynthConfig(n_users=10, sessions_per_user=40, separation="dirichlet", concentration=0.05, seed=3)
    log, gt = generate(cfg)
    tt = gt.taste_track_for(log)
    tv = 0.5 * np.abs(tt[:, None] - tt[None]).sum(axis=2)
    assert tv[~np.eye(len(tt), dtype=bool)].min() >= 0.5
    ss = sessionize(log, 3600)
    hits = total = 0
    for u, user_sessions in ss.items():
        m = TasteModel(tt, gt.mixtures[u][None, :], (u,), 1.0, 0.01)
        traj = assignment.build_trajectory(m, u, user_sessions)
        hits += sum(a == b for a, b in zip(traj.assigned, gt.session_tastes[u]))
        total += len(traj)
    assert hits / total >= 0.95


def test_trajectory_file_round_trip(tmp_path):
    rng = np.random.default_rng(5)
    tt = plant_tastes(2, 20, rng, "disjoint")
    trajs = {"u": assignment.build_trajectory(model(tt), "u", planted_sessions([0, 1, 0], tt, rng))}
    assignment.write_trajectories(trajs, tmp_path / "t.ndjson")
    back = assignment.read_trajectories(tmp_path / "t.ndjson")
    assert back["u"].assigned == trajs["u"].assigned
    np.testing.assert_array_equal(back["u"].posteriors, trajs["u"].posteriors)
