import math

import numpy as np
import pytest

from trpoppo.autodiff import Graph, ParamVector, evaluate, gradient
from trpoppo.networks import (
    GaussianDist,
    LOG_STD_MAX,
    LOG_STD_MIN,
    build_policy,
    build_value,
    clamp_log_std,
    entropy,
    graph_entropy,
    graph_kl,
    graph_log_prob,
    init_policy,
    init_value,
    kl_divergence,
    load_checkpoint,
    log_prob,
    policy_forward,
    save_checkpoint,
    value_forward,
)

from conftest import central_diff, rel_err


def test_zero_policy_is_standard_normal():
    net = init_policy(4, 3, None, hidden=(5,), log_std=0.0)
    dist = policy_forward(net, np.ones(4))
    np.testing.assert_array_equal(dist.mean, np.zeros(3))
    np.testing.assert_array_equal(dist.std, np.ones(3))


def test_toy_policy_forward_by_hand():
    net = init_policy(2, 1, None, hidden=(2,))
    params = ParamVector.from_arrays(
        {
            "pi/w0": [[0.5, -1.0], [2.0, 0.25]],
            "pi/b0": [0.1, -0.2],
            "pi/w1": [[1.5], [-0.7]],
            "pi/b1": [0.3],
            "pi/log_std": [0.0],
        }
    )
    net = net.with_params(params)
    x = np.array([0.4, -0.6])
    h0 = math.tanh(0.4 * 0.5 + -0.6 * 2.0 + 0.1)
    h1 = math.tanh(0.4 * -1.0 + -0.6 * 0.25 - 0.2)
    expected = 1.5 * h0 - 0.7 * h1 + 0.3
    assert abs(policy_forward(net, x).mean[0] - expected) < 1e-14


def test_toy_value_forward_by_hand():
    net = init_value(2, None, hidden=(2,))
    assert value_forward(net, np.array([1.0, 2.0])) == 0.0
    params = ParamVector.from_arrays(
        {"v/w0": [[1.0, 0.0], [0.5, -1.0]], "v/b0": [0.0, 0.1], "v/w1": [[2.0], [1.0]], "v/b1": [-0.5]}
    )
    net = net.with_params(params)
    x = np.array([0.2, 0.3])
    expected = 2.0 * math.tanh(0.2 + 0.15) + math.tanh(-0.3 + 0.1) - 0.5
    assert abs(value_forward(net, x) - expected) < 1e-14


@pytest.mark.parametrize("bad", [np.nan, np.inf])
def test_non_finite_obs_rejected(bad):
    obs = np.array([0.0, bad])
    with pytest.raises(ValueError):
        policy_forward(init_policy(2, 1, None, hidden=(2,)), obs)
    with pytest.raises(ValueError):
        value_forward(init_value(2, None, hidden=(2,)), obs)


def test_obs_dimension_mismatch_rejected():
    with pytest.raises(ValueError):
        policy_forward(init_policy(3, 1, None, hidden=(2,)), np.zeros(2))


def test_log_prob_constants():
    d = GaussianDist(np.zeros(3), np.zeros(3))
    assert abs(log_prob(d, np.zeros(3)) - 3 * -0.9189385332) < 1e-9
    mu, ls = np.array([0.5, -1.0]), np.array([0.2, -0.7])
    assert abs(log_prob(GaussianDist(mu, ls), mu) - -np.sum(ls + 0.5 * math.log(2 * math.pi))) < 1e-12
    with pytest.raises(ValueError):
        log_prob(d, np.zeros(2))


def test_log_prob_density_integrates_to_one(rng):
    for _ in range(5):
        mu, ls = rng.normal(), rng.uniform(-1, 0.5)
        d = GaussianDist(np.array([mu]), np.array([ls]))
        sigma = math.exp(ls)
        grid = np.linspace(mu - 10 * sigma, mu + 10 * sigma, 20001)
        dens = np.exp(log_prob(d, grid[:, None]))
        assert abs(np.trapezoid(dens, grid) - 1.0) < 1e-3


def test_entropy_values(rng):
    assert abs(entropy(GaussianDist(np.zeros(1), np.zeros(1))) - 1.4189385) < 1e-7
    ls = rng.normal(size=4)
    doubled = entropy(GaussianDist(np.zeros(4), ls + math.log(2))) - entropy(GaussianDist(np.zeros(4), ls))
    assert abs(doubled - 0.693147 * 4) < 1e-5
    d = GaussianDist(rng.normal(size=2), rng.uniform(-0.5, 0.5, size=2))
    samples = d.mean + d.std * np.random.default_rng(0).standard_normal((10**6, 2))
    mc = -np.mean(log_prob(d, samples))
    assert abs(mc - entropy(d)) < 1e-2


def test_kl_values(rng):
    p = GaussianDist(rng.normal(size=3), rng.normal(size=3) * 0.3)
    assert kl_divergence(p, p) == 0.0
    assert abs(kl_divergence(GaussianDist(np.zeros(1), np.zeros(1)), GaussianDist(np.ones(1), np.zeros(1))) - 0.5) < 1e-15
    for _ in range(3):
        old = GaussianDist(rng.normal(size=2), rng.uniform(-0.5, 0.5, size=2))
        new = GaussianDist(rng.normal(size=2), rng.uniform(-0.5, 0.5, size=2))
        x = old.mean + old.std * np.random.default_rng(1).standard_normal((10**6, 2))
        mc = np.mean(log_prob(old, x) - log_prob(new, x))
        assert kl_divergence(old, new) >= 0
        assert abs(mc - kl_divergence(old, new)) < 1e-2
    with pytest.raises(ValueError):
        kl_divergence(GaussianDist(np.zeros(1), np.zeros(1)), GaussianDist(np.zeros(2), np.zeros(2)))


def policy_graph(net):
    g = Graph()
    obs = g.input("obs", (None, net.obs_dim))
    act = g.input("act", (None, net.act_dim))
    old_mean = g.input("old_mean", (None, net.act_dim))
    old_ls = g.input("old_ls", (net.act_dim,))
    mean, ls = build_policy(g, net, obs)
    return g, {
        "logp": graph_log_prob(mean, ls, act).sum(),
        "entropy": graph_entropy(ls),
        "kl": graph_kl(old_mean, old_ls, mean, ls).mean(),
        "mean": mean,
    }


def test_graph_matches_numpy(small_policy, small_value, rng):
    g, nodes = policy_graph(small_policy)
    obs = rng.normal(size=(6, 5))
    act = rng.normal(size=(6, 3))
    dist = policy_forward(small_policy, obs)
    feed = {"obs": obs, "act": act, "old_mean": dist.mean + 0.1, "old_ls": dist.log_std - 0.2}
    p = small_policy.params
    np.testing.assert_allclose(evaluate(g, nodes["mean"], p, feed), dist.mean, rtol=1e-12)
    assert abs(evaluate(g, nodes["logp"], p, feed) - np.sum(log_prob(dist, act))) < 1e-10
    assert abs(evaluate(g, nodes["entropy"], p, feed) - entropy(dist)) < 1e-12
    old = GaussianDist(feed["old_mean"], feed["old_ls"])
    assert abs(evaluate(g, nodes["kl"], p, feed) - np.mean(kl_divergence(old, dist))) < 1e-12

    gv = Graph()
    v = build_value(gv, small_value, gv.input("obs", (None, 5)))
    np.testing.assert_allclose(evaluate(gv, v, small_value.params, {"obs": obs}), value_forward(small_value, obs), rtol=1e-12)


@pytest.mark.parametrize("quantity", ["logp", "entropy", "kl"])
def test_policy_quantities_pass_gradient_check(quantity, small_policy, rng):
    g, nodes = policy_graph(small_policy)
    obs = rng.normal(size=(4, 5))
    dist = policy_forward(small_policy, obs)
    feed = {"obs": obs, "act": rng.normal(size=(4, 3)), "old_mean": dist.mean + 0.3, "old_ls": dist.log_std + 0.1}
    p = small_policy.params
    out = nodes[quantity]
    numeric = central_diff(lambda v: float(evaluate(g, out, p.with_values(v), feed)), p.values)
    assert rel_err(gradient(g, out, p, feed).values, numeric) < 1e-4


def test_value_passes_gradient_check(small_value, rng):
    g = Graph()
    out = build_value(g, small_value, g.input("obs", (None, 5))).square().mean()
    feed = {"obs": rng.normal(size=(4, 5))}
    p = small_value.params
    numeric = central_diff(lambda v: float(evaluate(g, out, p.with_values(v), feed)), p.values)
    assert rel_err(gradient(g, out, p, feed).values, numeric) < 1e-4


def test_kl_gradient_vanishes_at_old_params(small_policy, rng):
    g, nodes = policy_graph(small_policy)
    obs = rng.normal(size=(7, 5))
    dist = policy_forward(small_policy, obs)
    feed = {"obs": obs, "act": np.zeros((7, 3)), "old_mean": dist.mean, "old_ls": dist.log_std}
    grad = gradient(g, nodes["kl"], small_policy.params, feed).values
    assert np.max(np.abs(grad)) < 1e-8


def test_ratio_identity(small_policy, rng):
    obs = rng.normal(size=(5, 5))
    dist = policy_forward(small_policy, obs)
    a = dist.sample(rng)
    np.testing.assert_array_equal(np.exp(log_prob(dist, a) - log_prob(policy_forward(small_policy, obs), a)), 1.0)


def test_log_std_clamp():
    net = init_policy(2, 3, None, hidden=(2,))
    arrays = net.params.unflatten()
    arrays["pi/log_std"] = np.array([-9.0, 0.5, 7.0])
    clamped = clamp_log_std(ParamVector.from_arrays(arrays))
    np.testing.assert_array_equal(clamped["pi/log_std"], [LOG_STD_MIN, 0.5, LOG_STD_MAX])


def test_default_architecture(rng):
    net = init_policy(10, 4, rng)
    assert net.params["pi/w0"].shape == (10, 256)
    assert net.params["pi/w1"].shape == (256, 256)
    assert net.params["pi/w2"].shape == (256, 4)
    # near-zero initial mean head
    assert np.max(np.abs(net.params["pi/w2"])) < 0.05


def test_checkpoint_roundtrip(tmp_path, small_policy, small_value):
    params = small_policy.params.merged(small_value.params)
    path = tmp_path / "ck.bin"
    save_checkpoint(path, params, {"obs_dim": 5})
    loaded, meta = load_checkpoint(path)
    assert loaded.values.tobytes() == params.values.tobytes()
    assert loaded.layout == params.layout
    assert meta == {"obs_dim": 5}
    # raw payload is little-endian float64 at the end of the file
    raw = path.read_bytes()
    tail = np.frombuffer(raw[-8 * params.size :], dtype="<f8")
    assert tail.tobytes() == params.values.astype("<f8").tobytes()
