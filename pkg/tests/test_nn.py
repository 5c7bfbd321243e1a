import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gridppo.nn import (
    Adam, Checkpoint, CriticParams, Mlp, PolicyParams, adam_step, backward, forward,
    gaussian_entropy, gaussian_log_prob, load_checkpoint, sample_action, save_checkpoint, sgd_step,
)

HALF_LOG_2PI = 0.5 * np.log(2 * np.pi)


def test_identity_linear_layer():
    net = Mlp([np.eye(3)], [np.zeros(3)], ["linear"])
    x = np.arange(6.0).reshape(2, 3)
    np.testing.assert_array_equal(forward(net, x), x)


def test_zero_weights_sigmoid_half():
    net = Mlp([np.zeros((4, 2))], [np.zeros(2)], ["sigmoid"])
    np.testing.assert_array_equal(forward(net, np.ones((3, 4))), 0.5)


def test_batch_equals_rowwise(rng):
    net = Mlp.init([5, 7, 3], output="sigmoid", rng=rng)
    x = rng.normal(size=(6, 5))
    rows = np.vstack([forward(net, r[None]) for r in x])
    np.testing.assert_allclose(forward(net, x), rows, rtol=0, atol=1e-15)


def test_shape_mismatch():
    net = Mlp.init([4, 3], rng=0)
    with pytest.raises(ValueError):
        forward(net, np.ones((2, 5)))
    with pytest.raises(ValueError):
        backward(net, np.ones((2, 4)), np.ones((2, 4)))


def test_scalar_linear_gradient():
    net = Mlp([np.array([[2.0]])], [np.zeros(1)], ["linear"])
    gW, gb = backward(net, np.array([[3.0]]), np.ones((1, 1)))
    assert gW[0, 0] == 3.0 and gb[0] == 1.0


def test_zero_upstream_zero_grads(rng):
    net = Mlp.init([4, 8, 3], output="sigmoid", rng=rng)
    for g in backward(net, rng.normal(size=(5, 4)), np.zeros((5, 3))):
        assert not g.any()


def _fd_check(net, x, up, rng, probes=20, h=1e-5):
    grads = backward(net, x, up)
    params = net.params()
    for _ in range(probes):
        k = rng.integers(len(params))
        idx = tuple(rng.integers(s) for s in params[k].shape)
        old = params[k][idx]
        params[k][idx] = old + h
        lp = np.sum(forward(net, x) * up)
        params[k][idx] = old - h
        lm = np.sum(forward(net, x) * up)
        params[k][idx] = old
        fd = (lp - lm) / (2 * h)
        assert abs(grads[k][idx] - fd) <= 1e-4 * max(1.0, abs(fd)), (k, idx, grads[k][idx], fd)


def _away_from_kinks(net, rng, n, margin=1e-3):
    """Inputs whose hidden pre-activations all sit at least ``margin`` from zero."""
    while True:
        x = rng.normal(size=(n, net.sizes[0]))
        _, cache = net.forward(x, keep=True)
        if all(np.abs(z).min() > margin for _, z in cache[1:-1]):
            return x


def test_backprop_matches_finite_differences(rng):
    net = Mlp.init([4, 8, 3], output="sigmoid", rng=rng)
    x = _away_from_kinks(net, rng, 6)
    _fd_check(net, x, rng.normal(size=(6, 3)), rng)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10**6), st.sampled_from(["sigmoid", "linear"]))
def test_backprop_property(seed, out):
    rng = np.random.default_rng(seed)
    net = Mlp.init([3, 6, 5, 2], output=out, rng=rng)
    _fd_check(net, _away_from_kinks(net, rng, 4), rng.normal(size=(4, 2)), rng, probes=10)


def test_gaussian_log_prob_fixtures():
    assert gaussian_log_prob([0.3], [0.0], [0.3]) == pytest.approx(-0.9189385332, abs=1e-9)
    assert gaussian_log_prob([0.0], [0.0], [1.0]) == pytest.approx(-1.4189385332, abs=1e-9)
    assert gaussian_log_prob(np.zeros(10), np.zeros(10), np.zeros(10)) == pytest.approx(
        10 * -0.9189385332, abs=1e-9)
    # against the textbook univariate density
    mu, sd, a = 0.2, 0.5, -0.1
    dens = np.exp(-0.5 * ((a - mu) / sd) ** 2) / (sd * np.sqrt(2 * np.pi))
    assert gaussian_log_prob([mu], [np.log(sd)], [a]) == pytest.approx(np.log(dens), abs=1e-12)


def test_gaussian_entropy():
    assert gaussian_entropy(np.zeros(2)) == pytest.approx(2 * (0.5 + HALF_LOG_2PI))


def test_sampling(rng):
    mean = np.array([0.2, 0.8])
    assert np.all(sample_action(mean, np.full(2, -1e9), rng) == mean)
    a = sample_action(mean, np.zeros(2), np.random.default_rng(5))
    b = sample_action(mean, np.zeros(2), np.random.default_rng(5))
    np.testing.assert_array_equal(a, b)
    n = 100_000
    sd = np.exp(-1.0)
    draws = sample_action(np.broadcast_to(mean, (n, 2)), np.full(2, -1.0), rng)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < 4 * sd / np.sqrt(n))


def test_sgd_and_adam():
    p = [np.array([1.0, 2.0])]
    sgd_step(p, [np.zeros(2)], 0.1)
    np.testing.assert_array_equal(p[0], [1.0, 2.0])
    q = [np.array([1.0, 2.0])]
    g = [np.array([0.5, -0.5])]
    sgd_step(p, g, 0.1)
    sgd_step(p, g, 0.1)
    sgd_step(q, g, 0.2)
    np.testing.assert_allclose(p[0], q[0])
    # first Adam step from zero state moves each coordinate by lr against the gradient sign
    r = [np.array([0.0, 0.0])]
    st = Adam()
    adam_step(r, [np.array([3.0, -1e-3])], st, 0.01)
    np.testing.assert_allclose(r[0], [-0.01, 0.01], rtol=1e-4)


def test_policy_uses_load_columns_only(rng):
    pol = PolicyParams.init(28, 10, rng=rng)
    s = rng.normal(size=(3, 38))
    s2 = s.copy()
    s2[:, 28:] = 99.0
    np.testing.assert_array_equal(pol.mean(s), pol.mean(s2))
    out = pol.mean(s)
    assert out.shape == (3, 10) and np.all((out > 0) & (out < 1))
    assert pol.actor.sizes == [28, 64, 64, 10]
    np.testing.assert_array_equal(pol.log_std, -1.0)


def test_checkpoint_round_trip(tmp_path, rng):
    pol = PolicyParams.init(28, 10, rng=rng)
    cri = CriticParams.init(38, rng=rng)
    opt = Adam()
    opt.step(pol.params(), [np.ones_like(p) for p in pol.params()], 1e-3)
    path = tmp_path / "ck.npz"
    save_checkpoint(path, Checkpoint(pol, cri, opt, None, {"case_fingerprint": "abc"}))
    back = load_checkpoint(path)
    s = rng.normal(size=(4, 38))
    np.testing.assert_array_equal(back.policy.mean(s), pol.mean(s))
    np.testing.assert_array_equal(back.critic.value(s), cri.value(s))
    np.testing.assert_array_equal(back.policy.log_std, pol.log_std)
    assert back.actor_opt.t == 1 and back.critic_opt is None
    assert back.meta == {"case_fingerprint": "abc"}
