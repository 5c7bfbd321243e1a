from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridppo.nn import Adam, CriticParams, PolicyParams, gaussian_log_prob, load_checkpoint
from gridppo.ppo_trainer import (
    BanditEnv, GaeConfig, PpoConfig, Rollout, TrainConfig, TrainingAborted, bandit_config,
    clipped_surrogate, collect_rollouts, compute_gae, discounted_return, ppo_update, train,
)
from gridppo.rl_env import GridEnv, StepResult


def gae_by_summation(rewards, values, dones, gamma, lam, bootstrap):
    """Direct sum over (gamma*lam)^l * delta_{t+l} up to the episode end."""
    n = len(rewards)
    nxt = np.append(values[1:], bootstrap)
    nxt = np.where(dones, 0.0, nxt)
    delta = rewards + gamma * nxt - values
    adv = np.zeros(n)
    for t in range(n):
        acc, w = 0.0, 1.0
        for k in range(t, n):
            acc += w * delta[k]
            if dones[k]:
                break
            w *= gamma * lam
        adv[t] = acc
    return adv


def test_discounted_return():
    assert discounted_return([1, 1, 1], 1.0) == 3
    assert discounted_return([1, 1, 1], 0.5) == 1.75
    assert discounted_return([4, 9, 9], 0.0) == 4


def test_gae_hand_example():
    adv, ret = compute_gae([1, 1, 1], [1, 2, 3], [False, False, True], 0.9, 0.95)
    np.testing.assert_allclose(adv, [1.79145, -0.01, -2.0], rtol=0, atol=1e-12)
    np.testing.assert_allclose(ret, adv + [1, 2, 3])


def test_gae_lambda_zero_is_td_error(rng):
    r, v = rng.normal(size=6), rng.normal(size=6)
    d = np.array([0, 0, 1, 0, 0, 0], dtype=bool)
    adv, _ = compute_gae(r, v, d, 0.9, 0.0, bootstrap_value=0.7)
    nxt = np.where(d, 0.0, np.append(v[1:], 0.7))
    np.testing.assert_array_equal(adv, r + 0.9 * nxt - v)


def test_gae_lambda_one_is_return_minus_value(rng):
    r, v = rng.normal(size=5), rng.normal(size=5)
    d = np.array([0, 0, 0, 0, 1], dtype=bool)
    adv, _ = compute_gae(r, v, d, 0.9, 1.0)
    expected = [discounted_return(r[t:], 0.9) - v[t] for t in range(5)]
    np.testing.assert_allclose(adv, expected, rtol=0, atol=1e-12)


def test_gae_undiscounted_returns_to_go(rng):
    r = rng.normal(size=7)
    d = np.array([0, 0, 1, 0, 0, 0, 1], dtype=bool)
    adv, ret = compute_gae(r, np.zeros(7), d, 1.0, 1.0)
    expected = np.concatenate([np.cumsum(r[:3][::-1])[::-1], np.cumsum(r[3:][::-1])[::-1]])
    np.testing.assert_allclose(adv, expected, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.floats(0, 1), st.floats(0, 1), st.integers(0, 2**32 - 1))
def test_gae_summation_equals_recursion(n, gamma, lam, seed):
    rng = np.random.default_rng(seed)
    r, v = rng.normal(size=n) * 100, rng.normal(size=n) * 100
    d = rng.random(n) < 0.25
    boot = float(rng.normal())
    adv, _ = compute_gae(r, v, d, gamma, lam, boot)
    ref = gae_by_summation(r, v, d, gamma, lam, boot)
    # inputs are O(100), so 1e-12 relative to their scale
    assert np.max(np.abs(adv - ref)) <= 1e-12 * max(1.0, np.abs(ref).max())


def test_clipped_surrogate_examples():
    assert clipped_surrogate(1.0, 3.7, 0.1) == 3.7
    assert clipped_surrogate(1.5, 2.0, 0.2) == 2.4
    assert clipped_surrogate(0.5, -1.0, 0.2) == -0.8


def test_config_validation():
    with pytest.raises(ValueError):
        PpoConfig(clip_eps=0)
    with pytest.raises(ValueError):
        PpoConfig(minibatch=0)
    with pytest.raises(ValueError):
        GaeConfig(gamma=1.5)


class CaptureOpt:
    def __init__(self):
        self.grads = []

    def step(self, params, grads, lr):
        self.grads.append([g.copy() for g in grads])


def _bandit_rollout(policy, rng, n=64):
    obs = np.ones((n, 1))
    mean = policy.mean(obs)
    acts = mean + np.exp(policy.log_std) * rng.normal(size=(n, 1))
    logp = gaussian_log_prob(mean, policy.log_std, acts)
    rewards = -(acts[:, 0] - 0.7) ** 2
    return Rollout(obs, acts, logp, rewards, np.zeros(n), np.ones(n, bool), 0.0)


def test_unchanged_policy_ratio_one_and_vanilla_gradient(rng):
    pol = PolicyParams.init(1, 1, hidden=(8,), rng=rng)
    cri = CriticParams.init(1, hidden=(8,), rng=rng)
    ro = _bandit_rollout(pol, rng)
    adv = rng.normal(size=len(ro))
    cap = CaptureOpt()
    cfg = PpoConfig(epochs=1, minibatch=len(ro), normalize_advantages=False)
    stats = ppo_update(pol, cri, ro, adv, np.zeros(len(ro)), cfg, cap, CaptureOpt(), rng)
    assert stats["clip_frac"] == 0.0 and stats["ratio"] == pytest.approx(1.0, abs=1e-15)

    # finite-difference gradient of -mean(A * log pi)
    def loss():
        return -np.mean(adv * gaussian_log_prob(pol.mean(ro.states), pol.log_std, ro.actions))

    params, grads, h = pol.params(), cap.grads[0], 1e-6
    for p, g in zip(params, grads):
        for idx in list(np.ndindex(p.shape))[:5]:
            old = p[idx]
            p[idx] = old + h
            lp = loss()
            p[idx] = old - h
            lm = loss()
            p[idx] = old
            assert g[idx] == pytest.approx((lp - lm) / (2 * h), rel=1e-4, abs=1e-8)


def test_critic_loss_zero_when_exact(rng):
    pol = PolicyParams.init(1, 1, rng=rng)
    cri = CriticParams.init(1, rng=rng)
    ro = _bandit_rollout(pol, rng)
    returns = cri.value(ro.states)
    stats = ppo_update(pol, cri, ro, rng.normal(size=len(ro)), returns,
                       PpoConfig(epochs=1, minibatch=len(ro)), Adam(), Adam(), rng)
    assert stats["critic_loss"] == 0.0


def test_non_finite_loss_raises(rng):
    pol = PolicyParams.init(1, 1, rng=rng)
    cri = CriticParams.init(1, rng=rng)
    ro = _bandit_rollout(pol, rng)
    with pytest.raises(FloatingPointError):
        ppo_update(pol, cri, ro, np.full(len(ro), np.nan), np.zeros(len(ro)),
                   PpoConfig(epochs=1, normalize_advantages=False), Adam(), Adam(), rng)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_normalization_keeps_gradient_signs(seed):
    """Per-sample surrogate gradient signs at ratio 1 follow the advantage ranking around its mean."""
    rng = np.random.default_rng(seed)
    adv = rng.normal(size=30) * rng.uniform(0.1, 100)
    norm = (adv - adv.mean()) / adv.std()
    centered = adv - adv.mean()
    assert np.array_equal(np.sign(norm), np.sign(centered))
    assert np.array_equal(np.argsort(norm), np.argsort(adv))


def _grid_env_and_scenario(mod_case, small_dataset):
    env = GridEnv(mod_case, calibration=small_dataset.calibration)
    return env, small_dataset.scenarios[0]


def test_five_steps_one_episode(mod_case, small_dataset, rng):
    """With a near-deterministic imitation-quality policy no step diverges, so 5 steps = 1 episode."""
    from gridppo.rl_env import normalize_setpoints
    env, sc = _grid_env_and_scenario(mod_case, small_dataset)
    target = normalize_setpoints(mod_case, sc.Pg_opt, sc.Vg_opt)
    pol = PolicyParams.init(28, 10, log_std=-20.0, rng=rng)  # optimum sits on the line limit
    net = pol.actor
    net.weights[-1][:] = 0.0
    net.biases[-1][:] = np.log(target / (1 - target))  # sigmoid^-1 of the oracle setpoints
    cri = CriticParams.init(38, rng=rng)
    ro = collect_rollouts(env, pol, cri, 5, rng, lambda r: sc)
    assert list(ro.dones) == [False] * 4 + [True]
    assert len(ro.episode_returns) == 1
    np.testing.assert_allclose(ro.rewards, 500.0, atol=1e-3)


def test_rollouts_deterministic(mod_case, small_dataset):
    env, _ = _grid_env_and_scenario(mod_case, small_dataset)
    pol = PolicyParams.init(28, 10, rng=0)
    cri = CriticParams.init(38, rng=1)
    scs = small_dataset.scenarios
    pick = lambda r: scs[r.integers(len(scs))]  # noqa: E731
    a = collect_rollouts(env, pol, cri, 12, np.random.default_rng(3), pick)
    b = collect_rollouts(env, pol, cri, 12, np.random.default_rng(3), pick)
    for f in ("states", "actions", "log_probs", "rewards", "values", "dones"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))


def test_all_diverging(mod_case, small_dataset, rng):
    env, sc = _grid_env_and_scenario(mod_case, small_dataset)
    heavy = replace(sc, Pd=sc.Pd * 6, Qd=sc.Qd * 6)
    pol = PolicyParams.init(28, 10, rng=rng)
    ro = collect_rollouts(env, pol, CriticParams.init(38, rng=rng), 7, rng, lambda r: heavy)
    assert np.all(ro.rewards == -5000.0) and np.all(ro.dones)


def test_zero_updates_keeps_initial_policy(tmp_path, rng):
    pol = PolicyParams.init(1, 1, rng=rng)
    init = pol.copy()
    path = tmp_path / "ck.npz"
    res = train(BanditEnv(), lambda r: None, pol, CriticParams.init(1, rng=rng),
                PpoConfig(updates=0), seed=0, checkpoint_path=path)
    assert res.log == []
    back = load_checkpoint(path)
    for a, b in zip(back.policy.params(), init.params()):
        np.testing.assert_array_equal(a, b)


def test_bandit_converges():
    pol = PolicyParams.init(1, 1, rng=0)
    train(BanditEnv(), lambda r: None, pol, CriticParams.init(1, rng=100),
          PpoConfig(**bandit_config()), seed=0)
    assert abs(pol.mean(np.ones((1, 1)))[0, 0] - 0.7) < 0.05


class NanEnv(BanditEnv):
    def __init__(self, after):
        super().__init__()
        self.calls, self.after = 0, after

    def step(self, action):
        self.calls += 1
        res = super().step(action)
        return StepResult(res.next_state, np.nan if self.calls > self.after else res.reward, True, res.info)


def test_non_finite_training_keeps_last_good_checkpoint(tmp_path, rng):
    pol = PolicyParams.init(1, 1, rng=rng)
    path = tmp_path / "ck.npz"
    log = tmp_path / "log.csv"
    cfg = PpoConfig(rollout_steps=16, minibatch=16, epochs=1, updates=5)
    with pytest.raises(TrainingAborted):
        train(NanEnv(after=32), lambda r: None, pol, CriticParams.init(1, rng=rng), cfg,
              checkpoint_path=path, log_path=log, eval_fn=lambda p: 1.0, eval_every=1)
    back = load_checkpoint(path)
    assert all(np.all(np.isfinite(p)) for p in back.policy.params())
    lines = log.read_text().splitlines()
    assert lines[0].startswith("update,mean_return,actor_loss,critic_loss,clip_frac,eval_success_rate")
    assert len(lines) == 3  # header plus the two good updates


def test_train_config_round_trip(tmp_path):
    cfg = TrainConfig(seed=3, ppo=PpoConfig(updates=7), gae=GaeConfig(0.9, 0.8),
                      reward={"w_v": 500.0}, log_std=-2.0)
    path = tmp_path / "cfg.json"
    cfg.save(path)
    assert TrainConfig.load(path) == cfg
    with pytest.raises(ValueError, match="unknown"):
        TrainConfig.from_dict({"learning_rate": 1})
