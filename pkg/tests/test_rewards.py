import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings, strategies as st

from restorl.rewards import (
    SCORE_MAX,
    SCORE_MIN,
    ProxyReward,
    QualityScorer,
    ReconstructionReward,
    RewardStats,
    ScorerConfig,
    ScorerParams,
    advantage,
    evaluate_scorer,
    iqa_reward,
    reconstruction_reward,
    refresh_scorer,
    score_images,
    scorer_corpus,
    scorer_distortion,
    severity_label,
    train_quality_scorer,
    update_stats,
)

finite = st.floats(-1e3, 1e3, allow_nan=False, allow_infinity=False)


# ------------------------------------------------------------ reconstruction reward

def test_reconstruction_reward_identity_and_scalar():
    g = np.random.default_rng(0).random((1, 4, 4))
    assert reconstruction_reward(g, g) == 0.0
    assert reconstruction_reward(np.array([0.5]), np.array([0.0])) == -0.5


@given(st.lists(finite, min_size=3, max_size=3), st.lists(finite, min_size=3, max_size=3))
def test_reconstruction_reward_symmetric_and_nonpositive(a, b):
    assert reconstruction_reward(a, b) == reconstruction_reward(b, a) <= 0


def test_reconstruction_reward_shape_check():
    with pytest.raises(ValueError):
        reconstruction_reward(np.zeros(3), np.zeros(4))


def test_reconstruction_backend_batches():
    x = np.random.default_rng(0).random((3, 1, 4, 4))
    g = np.zeros_like(x)
    np.testing.assert_allclose(ReconstructionReward()(x, g), [-np.linalg.norm(v) for v in x])


# ------------------------------------------------------------ scorer

def test_label_map_endpoints():
    np.testing.assert_allclose(severity_label([0.0, 0.5, 1.0]), [5.0, 3.0, 1.0])


def test_scores_in_range_for_random_inputs():
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(0)
        scorer = ScorerParams(QualityScorer(1, 4).eval())
    x = np.random.default_rng(0).random((10_000, 1, 8, 8))
    s = score_images(scorer, x, batch_size=2048)
    assert s.shape == (10_000,) and s.min() >= SCORE_MIN and s.max() <= SCORE_MAX
    np.testing.assert_array_equal(s[:5], score_images(scorer, x[:5]))


def test_scorer_rejects_non_finite():
    scorer = ScorerParams(QualityScorer(1, 4).eval())
    with pytest.raises(ValueError):
        score_images(scorer, np.full((1, 1, 8, 8), np.nan))


def test_scorer_distortions(rng):
    img = np.full((1, 8, 8), 0.5)
    for kind in ("exposure", "noise", "rain"):
        out = scorer_distortion(img, kind, 0.7, np.random.default_rng(1))
        assert out.shape == img.shape and 0 <= out.min() and out.max() <= 1 and not np.allclose(out, img)
    with pytest.raises(ValueError):
        scorer_distortion(img, "jpeg", 0.5, rng)


def test_scorer_corpus_layout():
    cfg = ScorerConfig(tasks=("lowlight", "noise"), n_images=2, n_heldout=1, severities=(0.2, 0.8), size=8)
    images, sevs, base = scorer_corpus(cfg, 0)
    assert images.shape == (2 * (1 + 2 * 2), 1, 8, 8)
    assert list(sevs[:5]) == [0.0, 0.2, 0.8, 0.2, 0.8] and list(base[:5]) == [0] * 5
    held, _, _ = scorer_corpus(cfg, 0, heldout=True)
    assert len(held) == 5 and not np.array_equal(held[0], images[0])


@pytest.fixture(scope="module")
def small_scorer():
    cfg = ScorerConfig(n_images=12, n_heldout=6, severities=(0.1, 0.4, 0.8, 1.0), size=16, width=6, epochs=4)
    return cfg, train_quality_scorer(cfg, 0)


def test_scorer_training_deterministic(small_scorer):
    cfg, a = small_scorer
    b = train_quality_scorer(cfg, 0)
    x = np.random.default_rng(0).random((4, 1, 16, 16))
    np.testing.assert_array_equal(score_images(a, x), score_images(b, x))
    assert a.metadata["label_scheme"] == "5 - 4*severity"


def test_scorer_roundtrip(tmp_path, small_scorer):
    _, s = small_scorer
    s.save(tmp_path / "s.pt")
    back = ScorerParams.load(tmp_path / "s.pt")
    x = np.random.default_rng(1).random((3, 1, 16, 16))
    np.testing.assert_array_equal(score_images(s, x), score_images(back, x))
    assert iqa_reward(back, x[0]) == pytest.approx(score_images(s, x[:1])[0])
    np.testing.assert_array_equal(ProxyReward(back)(x, x), score_images(s, x))


def test_scorer_needs_three_levels():
    with pytest.raises(ValueError):
        train_quality_scorer(ScorerConfig(severities=(0.5, 0.5)), 0)


def test_evaluate_scorer_keys(small_scorer):
    cfg, s = small_scorer
    rep = evaluate_scorer(s, cfg, 0)
    assert set(rep) == {"spearman_vs_severity", "mean_gt", "mean_sev08", "gt_beats_sev08"}
    assert -1 <= rep["spearman_vs_severity"] <= 1


def test_refresh_scorer_moves_towards_labels(small_scorer):
    import copy

    cfg, s = small_scorer
    s = copy.deepcopy(s)
    rng = np.random.default_rng(0)
    gts = rng.random((8, 1, 16, 16)) * 0.5 + 0.25
    outputs = np.clip(gts + 0.2 * rng.standard_normal(gts.shape), 0, 1)
    before = score_images(s, gts).mean()
    refresh_scorer(s, outputs, gts, 0, epochs=20, lr=2e-3)
    assert s.metadata["refreshes"] == 1
    assert score_images(s, gts).mean() > before or score_images(s, gts).mean() > 4.5


# ------------------------------------------------------------ reward statistics

def test_first_observation():
    st_ = RewardStats()
    update_stats(st_, "a", [2.5])
    e = st_.track["a"]
    assert (e.mean, e.var, e.count) == (2.5, 0.0, 1)


def test_constant_stream_has_zero_variance():
    st_ = RewardStats(decay=0.7)
    st_.update("a", [3.0] * 20)
    assert st_.track["a"].var == 0.0 and st_.track["a"].mean == 3.0


def test_decay_half_two_rewards():
    st_ = RewardStats(decay=0.5)
    st_.update("a", [1.0, 3.0])
    # first weight 1 (count 1), then max(0.5, 1/2) = 0.5: 1 + 0.5 * (3 - 1)
    assert st_.track["a"].mean == 2.0
    assert st_.track["a"].var == pytest.approx(0.5 * (0 + 0.5 * 4))


def test_decay_one_is_exact_running_moments():
    r = np.random.default_rng(0).normal(size=30)
    st_ = RewardStats(decay=1.0)
    st_.update("a", r)
    assert st_.track["a"].mean == pytest.approx(r.mean())
    assert st_.track["a"].var == pytest.approx(r.var())


def test_batch_only_advantages():
    st_ = RewardStats(eps_var=1e-12).set_batch([1.0, 2.0, 3.0])
    adv = [advantage(r, st_, "x") for r in (1.0, 2.0, 3.0)]
    np.testing.assert_allclose(adv, [-1.2247449, 0.0, 1.2247449], rtol=1e-6)


def test_equal_rewards_give_zero_advantage():
    st_ = RewardStats().set_batch([0.7] * 4)
    assert all(st_.advantage(0.7, i) == 0.0 for i in range(4))


def test_mix_pooling_and_track_only():
    st_ = RewardStats(mix=0.25, min_count=2).set_batch([0.0, 4.0])
    st_.update("a", [1.0, 3.0])
    mu_t, var_t = st_.track["a"].mean, st_.track["a"].var
    mu, var = st_.baseline("a")
    assert mu == pytest.approx(0.25 * mu_t + 0.75 * 2.0)
    assert var == pytest.approx(0.25 * var_t + 0.75 * 4.0)
    only = RewardStats(mix=1.0, min_count=2, track=st_.track).set_batch([0.0, 4.0])
    assert only.baseline("a") == (mu_t, var_t)


def test_cold_track_falls_back_to_batch():
    st_ = RewardStats(mix=1.0, min_count=2).set_batch([1.0, 3.0])
    st_.update("a", [5.0])
    assert st_.baseline("a") == (2.0, 1.0)


@settings(max_examples=50, deadline=None)
@given(rewards=st.lists(st.floats(-10, 10), min_size=2, max_size=8), shift=st.floats(-100, 100),
       mix=st.floats(0, 1))
def test_advantage_shift_invariance(rewards, shift, mix):
    assume(np.var(rewards) > 1e-3)

    def advs(rs):
        s = RewardStats(mix=mix, min_count=1, decay=0.9).set_batch(rs)
        s.update("a", rs)
        return np.array([s.advantage(r, "a") for r in rs])

    np.testing.assert_allclose(advs(rewards), advs([r + shift for r in rewards]), atol=1e-6)


@settings(max_examples=50, deadline=None)
@given(rewards=st.lists(st.floats(-10, 10), min_size=1, max_size=30), decay=st.floats(0.01, 1.0))
def test_track_variance_nonnegative(rewards, decay):
    s = RewardStats(decay=decay)
    s.update("k", rewards)
    assert s.track["k"].var >= 0 and s.track["k"].count == len(rewards)


def test_stats_validation():
    for kw in ({"decay": 0.0}, {"mix": 1.5}, {"eps_var": 0.0}):
        with pytest.raises(ValueError):
            RewardStats(**kw)
    with pytest.raises(ValueError):
        RewardStats().update("a", [math.nan])
    with pytest.raises(ValueError):
        RewardStats().baseline("a")
