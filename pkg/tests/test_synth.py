import io

import numpy as np
import pytest
from scipy import stats

from noveltylearn import ingest, sessions
from noveltylearn.errors import BadConfig
from noveltylearn.synth import GroundTruth, SynthConfig, generate, match_tastes, plant_tastes


def small(**kw):
    base = dict(n_users=6, sessions_per_user=30, seed=1)
    base.update(kw)
    return SynthConfig(**base)


def test_p_stay_one_gives_constant_chains():
    _, gt = generate(small(policy="persistence", p_stay_continuing=1.0))
    for tastes in gt.session_tastes.values():
        assert len(set(tastes)) == 1


def test_p_stay_zero_always_switches():
    _, gt = generate(small(policy="persistence", p_stay_continuing=0.0))
    for tastes in gt.session_tastes.values():
        assert all(a != b for a, b in zip(tastes, tastes[1:]))


def test_state_policy_is_deterministic_and_mixed():
    _, gt = generate(small(policy="state"))
    for u, tastes in gt.session_tastes.items():
        plan = gt.planted_policy(u)
        assert set(plan) == {"novel", "familiar"}
        for a, b in zip(tastes, tastes[1:]):
            assert (a != b) == (plan[a] == "novel")


def test_mixed_population():
    _, gt = generate(small(policy="mixed"))
    plans = [set(gt.planted_policy(u)) for u in sorted(gt.session_tastes)]
    assert plans[0::2] == [{"novel"}] * 3 and plans[1::2] == [{"familiar"}] * 3


def test_sessions_survive_sessionizer():
    log, gt = generate(small(max_session_length=40))
    ss = sessions.sessionize(log, 3600)
    for u in log.user_ids:
        assert len(ss[u]) == gt.config.sessions_per_user
    assert sum(len(s) for s in ss[log.user_ids[0]]) == len(log.tokens[log.user_ids[0]])


def test_generation_is_deterministic_and_tsv_round_trips():
    a, ga = generate(small())
    b, gb = generate(small())
    assert a == b and ga.session_tastes == gb.session_tastes
    buf = io.StringIO()
    ingest.write_tsv(a, buf)
    assert ingest.parse_events(buf.getvalue().splitlines()) == a
    assert generate(small(seed=2))[0] != a


def test_token_frequencies_match_planted_row():
    rng = np.random.default_rng(0)
    tt = plant_tastes(4, 40, rng, "dirichlet", 1.0)
    draws = rng.choice(40, size=10_000, p=tt[2])
    observed = np.bincount(draws, minlength=40)
    expected = tt[2] * 10_000
    keep = expected >= 5
    obs = np.append(observed[keep], observed[~keep].sum())
    exp = np.append(expected[keep], expected[~keep].sum())
    assert stats.chisquare(obs, exp).pvalue > 0.001


def test_generated_session_tokens_follow_their_taste():
    log, gt = generate(small(n_users=3, sessions_per_user=200))
    tt = gt.taste_track_for(log)
    counts = np.zeros_like(tt)
    for u, ss in sessions.sessionize(log, 3600).items():
        for s, k in zip(ss, gt.session_tastes[u]):
            np.add.at(counts[k], np.asarray(s.tokens), 1)
    for k in range(len(tt)):
        n = counts[k].sum()
        if n >= 2000:
            assert 0.5 * np.abs(counts[k] / n - tt[k]).sum() < 0.1


def test_disjoint_tastes_are_fully_separated():
    tt = plant_tastes(5, 200, np.random.default_rng(0))
    np.testing.assert_allclose(tt.sum(axis=1), 1.0)
    assert np.all((tt > 0).sum(axis=0) == 1)
    perm, tv = match_tastes(tt[[3, 1, 4, 0, 2]], tt)
    assert perm.tolist() == [3, 1, 4, 0, 2] and np.all(tv == 0)


def test_quitters_fit_the_quitting_rule():
    from noveltylearn.churn import ChurnClass, classify_quitting

    log, gt = generate(small(quitter_fraction=0.5, policy="persistence"))
    for u in log.user_ids:
        label = classify_quitting(log.timestamps[u], gt.dataset_end)
        want = ChurnClass.QUITTING if gt.archetype[u] == "quitting" else ChurnClass.CONTINUING
        assert label == want


def test_ground_truth_json_round_trip(tmp_path):
    _, gt = generate(small())
    gt.save(tmp_path / "gt.json")
    back = GroundTruth.load(tmp_path / "gt.json")
    assert back.session_tastes == gt.session_tastes
    np.testing.assert_array_equal(back.taste_track, gt.taste_track)
    assert back.config == gt.config


@pytest.mark.parametrize(
    "bad", [dict(n_tastes=1), dict(vocab_size=3, n_tastes=5), dict(policy="x"), dict(p_stay_quitting=1.5), dict(min_session_length=0)]
)
def test_bad_config(bad):
    with pytest.raises(BadConfig):
        generate(small(**bad))
