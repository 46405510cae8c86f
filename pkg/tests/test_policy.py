import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.stats import spearmanr

from hecad import nn
from hecad import policy as P
from hecad.datasets import Window

from conftest import central_difference, max_relative_error


def softmax_oracle(logits):
    e = [np.exp(v) for v in logits]
    total = sum(e)
    return np.array([v / total for v in e])


def random_params(rng, input_dim=4, hidden=6, k=3, scale=0.5):
    return P.PolicyParams(rng.normal(scale=scale, size=(hidden, input_dim)), rng.normal(scale=scale, size=hidden),
                          rng.normal(scale=scale, size=(k, hidden)), rng.normal(scale=scale, size=k))


def test_context_univariate():
    day = np.zeros(96)
    day[0], day[2] = -1.0, 1.0
    z = P.extract_context(day[:, None], "univariate")
    np.testing.assert_allclose(z, [-1.0, 1.0, 0.0, np.std(day)])
    np.testing.assert_array_equal(P.extract_context(np.full((96, 1), 2.5), "univariate"), [2.5, 2.5, 2.5, 0.0])


def test_context_multivariate_uses_encoder():
    from hecad.detectors import seq2seq_spec
    spec = seq2seq_spec("iot").net
    params = nn.init_params(spec, 0)
    window = np.random.default_rng(0).normal(size=(128, 18))
    z = P.extract_context(window, "multivariate", (params, spec))
    assert z.shape == (16,)
    h, _ = nn.lstm_encode(params, spec, window[None])
    np.testing.assert_array_equal(z, h[0])
    with pytest.raises(P.PolicyError):
        P.extract_context(window, "multivariate")
    with pytest.raises(P.PolicyError):
        P.extract_contexts([Window(0, window, 0, 0)], "multivariate")


def test_forward_zero_and_crafted():
    p = P.init_policy(4, seed=0)
    p.W1[:] = 0
    np.testing.assert_allclose(P.policy_forward(p, np.ones(4)).s, [1 / 3] * 3, atol=1e-15)
    p.b2[:] = [np.log(2), 0, 0]
    np.testing.assert_allclose(P.policy_forward(p, np.ones(4)).s, [0.5, 0.25, 0.25], atol=1e-15)


def test_forward_matches_oracle(rng):
    for _ in range(20):
        p = random_params(rng)
        z = rng.normal(size=4)
        logits = [sum(p.W2[k, j] * np.tanh(p.W1[j] @ z + p.b1[j]) for j in range(6)) + p.b2[k] for k in range(3)]
        np.testing.assert_allclose(P.policy_forward(p, z).s, softmax_oracle(logits), atol=1e-12)


def test_forward_shape_mismatch():
    with pytest.raises(nn.ShapeError):
        P.policy_forward(P.init_policy(4, 0), np.ones(5))


def test_initial_policy_is_uniform():
    p = P.init_policy(4, seed=3)
    assert p.W1.shape == (100, 4) and p.W2.shape == (3, 100)
    probs = P.policy_probs(p, np.random.default_rng(0).normal(size=(10, 4)))
    np.testing.assert_allclose(probs, 1 / 3, atol=1e-15)


@settings(max_examples=100, deadline=None)
@given(z=arrays(np.float64, 4, elements=st.floats(-50, 50)), seed=st.integers(0, 10_000),
       shift=st.floats(-100, 100))
def test_softmax_properties(z, seed, shift):
    p = random_params(np.random.default_rng(seed), scale=2.0)
    s = P.policy_forward(p, z).s
    assert abs(s.sum() - 1) <= 1e-12 and np.all(s > 0)
    q = p.copy()
    q.b2 = q.b2 + shift
    np.testing.assert_allclose(P.policy_forward(q, z).s, s, atol=1e-12)


def test_select_action():
    assert P.select_action(np.array([0.1, 0.7, 0.2])) == 1
    assert P.select_action(np.array([0.5, 0.5, 0.0])) == 0
    dist = P.ActionDist(np.array([0.2, 0.3, 0.5]))
    assert P.select_action(dist) == 2
    np.testing.assert_array_equal(dist.chosen, [0, 0, 1])
    with pytest.raises(ValueError):
        P.select_action(dist, "sample")


def test_sampling_frequencies():
    s = np.array([0.2, 0.5, 0.3])
    rng = np.random.default_rng(0)
    draws = np.array([P.select_action(s, "sample", rng) for _ in range(100_000)])
    np.testing.assert_allclose(np.bincount(draws, minlength=3) / len(draws), s, atol=0.01)


def test_cost_and_reward_examples():
    assert P.cost(0.0, 0.0005) == 0.0
    assert P.cost(504.5, 0.0005) == pytest.approx(0.20144, abs=1e-5)
    assert P.cost(732.3, 0.00035) == pytest.approx(0.20401, abs=1e-5)
    cfg = P.RewardConfig(0.0005)
    sample = P.BanditSample(np.zeros(4), np.array([1.0, 0.0, 0.0]), np.array([12.4, 257.4, 504.5]))
    assert P.reward(sample, 0, cfg) == pytest.approx(0.99384, abs=1e-5)
    sample.correctness_per_arm[2] = 0.0
    assert P.reward(sample, 2, cfg) == pytest.approx(-0.20144, abs=1e-5)
    zero_delay = P.BanditSample(np.zeros(4), np.ones(3), np.zeros(3))
    assert P.reward(zero_delay, 1, cfg) == 1.0
    with pytest.raises(ValueError):
        P.reward(sample, 3, cfg)
    with pytest.raises(ValueError):
        P.cost(-1.0, 0.0005)


def test_cost_monotone_over_random_pairs():
    rng = np.random.default_rng(0)
    alpha = rng.uniform(1e-5, 1e-2, 10_000)
    a, b = np.sort(rng.uniform(0, 1e4, size=(2, 10_000)), axis=0)
    ca, cb = P.cost(a, alpha), P.cost(b, alpha)
    assert np.all(ca <= cb) and np.all(cb < 1) and np.all(ca >= 0)


@settings(max_examples=200, deadline=None)
@given(correct=st.sampled_from([0.0, 1.0]), delay=st.floats(0, 1e6), alpha=st.floats(1e-6, 1.0))
def test_reward_range(correct, delay, alpha):
    s = P.BanditSample(np.zeros(1), np.array([correct]), np.array([delay]))
    r = P.reward(s, 0, P.RewardConfig(alpha))
    assert -1 < r <= 1


def test_gradient_examples():
    p = P.init_policy(4, seed=0)
    assert all(np.all(g == 0) for g in P.policy_gradient(p, np.ones(4), 1, 0.0))
    grads = P.policy_gradient(p, np.ones(4), 0, 1.0)
    np.testing.assert_allclose(grads[3], [-2 / 3, 1 / 3, 1 / 3], atol=1e-15)


@pytest.mark.parametrize("action", [0, 1, 2])
def test_log_prob_gradient_matches_finite_differences(rng, action):
    p = random_params(rng, input_dim=5, hidden=20)
    assert p.size <= 2000
    z = rng.normal(size=5)
    analytic = P.policy_gradient(p, z, action, advantage=-1.0)  # gradient of +ln pi
    numeric = central_difference(lambda: P.log_prob(p, z, action), p.arrays)
    assert max_relative_error(analytic, numeric) < 1e-4


def test_expected_update_favours_best_arm():
    p = random_params(np.random.default_rng(1), hidden=8, scale=0.3)
    z = np.ones(4)
    arm_rewards = np.array([0.2, 0.9, 0.4])
    rng = np.random.default_rng(0)
    s = P.policy_forward(p, z).s
    avg = [np.zeros_like(a) for a in p.arrays]
    for _ in range(10_000):
        k = P.select_action(s, "sample", rng)
        for acc, g in zip(avg, P.policy_gradient(p, z, k, arm_rewards[k])):
            acc += g / 10_000
    step = p.copy()
    step = P.PolicyParams.from_arrays([a - 0.05 * g for a, g in zip(p.arrays, avg)])
    assert P.policy_forward(step, z).s[1] > s[1]


def _fixture(correctness, delay=1e-6, n=50):
    rng = np.random.default_rng(0)
    contexts = rng.normal(size=(n, 4))
    windows = [Window(i, None, 0, i) for i in range(n)]
    corr = np.tile(correctness, (n, 1))
    return P.build_bandit_samples(windows, corr, np.full_like(corr, delay), contexts), contexts


BANDIT_OPT = nn.OptimizerConfig("rmsprop", 1e-3, epochs=200, batch_size=1)


@pytest.mark.parametrize("arm", [0, 2])
def test_dominant_arm_is_learned(arm):
    correctness = np.zeros(3)
    correctness[arm] = 1.0
    samples, contexts = _fixture(correctness)
    params, curve = P.train_policy(samples, P.RewardConfig(0.0005), BANDIT_OPT, seed=0)
    assert np.mean(P.greedy_actions(params, contexts) == arm) >= 0.95
    rho = spearmanr(curve.epoch, curve.mean_reward).statistic
    assert rho > 0


def test_uniform_rewards_stay_uniform():
    samples, contexts = _fixture(np.ones(3), delay=100.0)
    params, _ = P.train_policy(samples, P.RewardConfig(0.0005), BANDIT_OPT, seed=0)
    tv = 0.5 * np.abs(P.policy_probs(params, contexts) - 1 / 3).sum(axis=1)
    assert tv.mean() <= 0.05


def test_constant_rewards_freeze_after_baseline_warmup():
    samples, _ = _fixture(np.ones(3), delay=100.0, n=5)
    cfg = P.RewardConfig(0.0005, baseline_decay=0.0)  # baseline equals the last reward
    opt = nn.OptimizerConfig("sgd", 0.1, epochs=1, batch_size=1)
    first, _ = P.train_policy(samples, cfg, opt, seed=0)
    again, _ = P.train_policy(samples, cfg, nn.OptimizerConfig("sgd", 0.1, epochs=5, batch_size=1), seed=0)
    # only the first update (baseline 0) moves the parameters
    assert all(np.array_equal(a, b) for a, b in zip(first.arrays, again.arrays))
    assert not all(np.array_equal(a, b) for a, b in zip(first.arrays, P.init_policy(4, 0).arrays))


def test_training_is_deterministic_and_validates():
    samples, _ = _fixture(np.array([0.0, 1.0, 0.0]))
    opt = nn.OptimizerConfig("rmsprop", 1e-3, epochs=3, batch_size=1)
    a, ca = P.train_policy(samples, P.RewardConfig(0.0005), opt, seed=5)
    b, cb = P.train_policy(samples, P.RewardConfig(0.0005), opt, seed=5)
    assert all(np.array_equal(x, y) for x, y in zip(a.arrays, b.arrays))
    assert ca.mean_reward == cb.mean_reward
    with pytest.raises(P.PolicyError):
        P.train_policy([], P.RewardConfig(0.0005), opt)
    with pytest.raises(ValueError):
        P.RewardConfig(0.0)
    with pytest.raises(ValueError):
        P.RewardConfig(0.1, baseline_decay=1.0)


def test_build_bandit_samples():
    windows = [Window(i, None, 0, i) for i in range(4)]
    corr = np.zeros((4, 3))
    delays = np.tile([12.4, 257.4, 504.5], (4, 1))
    samples = P.build_bandit_samples(windows, corr, delays, np.zeros((4, 2)))
    assert len(samples) == 4 and np.all(samples[0].correctness_per_arm == 0)
    np.testing.assert_array_equal(samples[3].delay_per_arm, [12.4, 257.4, 504.5])
    with pytest.raises(nn.ShapeError):
        P.build_bandit_samples(windows, corr[:3], delays, np.zeros((4, 2)))
    with pytest.raises(ValueError):
        P.build_bandit_samples(windows, corr, np.zeros((4, 3)), np.zeros((4, 2)))


def test_policy_checkpoint_round_trip(tmp_path, rng):
    p = random_params(rng, hidden=100)
    P.save_policy(tmp_path / "policy.json", p, seed=1, extra={"kind": "univariate"})
    back, meta = P.load_policy(tmp_path / "policy.json")
    assert meta == {"kind": "univariate"}
    assert all(np.array_equal(a, b) for a, b in zip(p.arrays, back.arrays))


def test_fixed_policy():
    contexts = np.zeros((7, 4))
    np.testing.assert_array_equal(P.choose_actions(P.FixedPolicy(1), contexts), np.ones(7))


def test_context_scaler_fit_apply_round_trip(rng):
    x = rng.normal(3.0, 2.0, size=(50, 4))
    x[:, 2] = 7.0
    s = P.ContextScaler.fit(x)
    z = s.apply(x)
    np.testing.assert_allclose(z[:, [0, 1, 3]].mean(axis=0), 0.0, atol=1e-12)
    np.testing.assert_allclose(z[:, [0, 1, 3]].std(axis=0), 1.0, atol=1e-12)
    np.testing.assert_array_equal(z[:, 2], 0.0)
    back = P.ContextScaler.from_dict(s.to_dict())
    np.testing.assert_array_equal(back.apply(x), z)


def test_context_scaler_only_for_day_statistics(rng):
    x = rng.normal(size=(10, 4))
    assert isinstance(P.context_scaler(x, "univariate"), P.ContextScaler)
    assert P.context_scaler(np.tanh(x), "multivariate") is None
