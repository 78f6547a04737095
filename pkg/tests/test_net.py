import math

import numpy as np
import pytest

from oracles import naive_forward
from tiltrl.net import (
    LOG_STD_MAX,
    LOG_STD_MIN,
    POLICY_LAYOUT,
    VALUE_LAYOUT,
    ActionMap,
    AdamState,
    ContractError,
    MlpParams,
    adam_step,
    backward,
    forward,
    gaussian_entropy,
    gaussian_logprob,
    logprob,
    mlp_init,
    policy_sample,
)

LOG_2PI = math.log(2 * math.pi)


def relative_error(a, b, floor=1e-6):
    return abs(a - b) / max(abs(a), abs(b), floor)


def test_init_deterministic_and_zero_bias():
    a = mlp_init(3, POLICY_LAYOUT, log_std_init=-1.0)
    b = mlp_init(3, POLICY_LAYOUT, log_std_init=-1.0)
    for x, y in zip(a.arrays(), b.arrays()):
        np.testing.assert_array_equal(x, y)
    assert all(np.all(bias == 0.0) for bias in a.biases)
    assert a.layout == POLICY_LAYOUT
    np.testing.assert_array_equal(a.log_std, np.full(6, -1.0))
    assert mlp_init(4, VALUE_LAYOUT).log_std is None


def test_init_variance():
    for k, fan_in in enumerate(VALUE_LAYOUT[:-1]):
        var = np.mean([np.var(mlp_init(s, VALUE_LAYOUT).weights[k]) for s in range(10)])
        assert var == pytest.approx(2.0 / fan_in, rel=0.2)


def test_forward_zero_params():
    p = mlp_init(0, VALUE_LAYOUT)
    p = p.with_arrays([np.zeros_like(a) for a in p.arrays()])
    y, _ = forward(p, np.ones(19))
    assert y.shape == (1,) and y[0] == 0.0


def test_forward_positive_cone_is_linear():
    rng = np.random.default_rng(0)
    p = mlp_init(1, (19, 16, 16, 3))
    p.weights = [np.abs(W) for W in p.weights]
    x = rng.uniform(0.1, 1.0, 19)
    y1, _ = forward(p, x)
    y2, _ = forward(p, 2.5 * x)
    np.testing.assert_allclose(y2, 2.5 * y1, rtol=1e-13)


def test_forward_matches_naive_oracle():
    rng = np.random.default_rng(1)
    for seed in range(5):
        p = mlp_init(seed, POLICY_LAYOUT)
        p.biases = [rng.normal(size=b.shape) for b in p.biases]
        x = rng.normal(size=19)
        y, _ = forward(p, x)
        np.testing.assert_allclose(y, naive_forward(p, x), atol=1e-12)


def test_forward_batch_matches_single():
    rng = np.random.default_rng(2)
    p = mlp_init(0, POLICY_LAYOUT)
    X = rng.normal(size=(7, 19))
    Y, _ = forward(p, X)
    for x, y in zip(X, Y):
        np.testing.assert_allclose(forward(p, x)[0], y, atol=1e-13)


def test_forward_shape_contract():
    with pytest.raises(ContractError):
        forward(mlp_init(0, POLICY_LAYOUT), np.zeros(18))


def test_backward_zero_upstream():
    p = mlp_init(0, POLICY_LAYOUT)
    _, cache = forward(p, np.ones(19))
    g, dx = backward(p, cache, np.zeros(6))
    assert all(np.all(a == 0.0) for a in g.arrays())
    assert np.all(dx == 0.0)


def test_backward_stale_cache():
    p = mlp_init(0, POLICY_LAYOUT)
    _, cache = forward(p, np.ones(19))
    with pytest.raises(ContractError):
        backward(p.copy(), cache, np.ones(6))
    with pytest.raises(ContractError):
        backward(p, cache, np.ones(5))


def _fd_check(p, X, seed, n_coords, h=1e-5):
    rng = np.random.default_rng(seed)
    w_out = rng.normal(size=p.layout[-1])

    def loss(params):
        y, _ = forward(params, X)
        return float(np.sum(np.tanh(y) * w_out))

    y, cache = forward(p, X)
    dy = (1.0 - np.tanh(y) ** 2) * w_out
    grads, _ = backward(p, cache, dy)
    flat, gflat = p.flat(), grads.flat()
    n_params = flat.size - (0 if p.log_std is None else p.log_std.size)
    worst = 0.0
    for i in rng.choice(n_params, size=n_coords, replace=False):
        up, dn = flat.copy(), flat.copy()
        up[i] += h
        dn[i] -= h
        fd = (loss(p.unflat(up)) - loss(p.unflat(dn))) / (2 * h)
        worst = max(worst, relative_error(fd, gflat[i]))
    return worst


def test_backward_finite_differences():
    rng = np.random.default_rng(3)
    for seed, layout in enumerate((POLICY_LAYOUT, VALUE_LAYOUT)):
        p = mlp_init(seed, layout)
        p.biases = [0.1 * rng.normal(size=b.shape) for b in p.biases]
        X = rng.normal(size=(4, 19))
        assert _fd_check(p, X, seed, 300) < 1e-4


def test_input_gradient_fd_and_masked_input():
    rng = np.random.default_rng(4)
    p = mlp_init(2, VALUE_LAYOUT)
    x = rng.normal(size=19)
    _, cache = forward(p, x)
    _, dx = backward(p, cache, np.ones(1))
    for i in range(19):
        e = np.zeros(19)
        e[i] = 1e-6
        fd = (forward(p, x + e)[0][0] - forward(p, x - e)[0][0]) / 2e-6
        assert relative_error(fd, dx[i]) < 1e-4
    p.weights[0][5, :] = 0.0
    _, cache = forward(p, x)
    _, dx = backward(p, cache, np.ones(1))
    assert dx[5] == 0.0


def test_adam_zero_gradient_noop():
    p = mlp_init(0, VALUE_LAYOUT)
    opt = AdamState.for_params(p)
    p2, opt2 = adam_step(p, p.zeros_like(), opt)
    for a, b in zip(p.arrays(), p2.arrays()):
        np.testing.assert_array_equal(a, b)
    assert opt2.t == 1


def test_adam_first_step_magnitude():
    p = MlpParams([np.zeros((2, 3))], [np.zeros(3)])
    g = MlpParams([np.array([[0.5, -2.0, 1e-3], [3.0, -1e-2, 7.0]])], [np.array([1.0, -1.0, 0.2])])
    opt = AdamState.for_params(p, lr=0.01)
    p2, _ = adam_step(p, g, opt)
    expect = -0.01 * g.weights[0] / (np.abs(g.weights[0]) + 1e-8)
    np.testing.assert_allclose(p2.weights[0], expect, rtol=1e-6)


def test_adam_quadratic_bowl():
    # Adam moves each coordinate by at most ~lr per step, so keep w* within reach
    target = np.array([[0.6, -0.8], [0.5, 0.3]])
    p = MlpParams([np.zeros((2, 2))], [np.zeros(2)])
    opt = AdamState.for_params(p, lr=0.01)
    for _ in range(200):
        g = MlpParams([2.0 * (p.weights[0] - target)], [np.zeros(2)])
        p, opt = adam_step(p, g, opt)
    assert np.linalg.norm(p.weights[0] - target) < 1e-2


def test_adam_clamps_log_std():
    p = mlp_init(0, (19, 4, 6), log_std_init=0.0)
    g = p.zeros_like()
    g.log_std = np.full(6, -1.0)
    opt = AdamState.for_params(p, lr=1.0)
    for _ in range(5):
        p, opt = adam_step(p, g, opt)
    assert np.all(p.log_std <= LOG_STD_MAX)
    g.log_std = np.full(6, 1.0)
    for _ in range(20):
        p, opt = adam_step(p, g, opt)
    assert np.all(p.log_std >= LOG_STD_MIN)


def test_policy_sample_deterministic_limit():
    amap = ActionMap(np.full(6, 3.0), 1.4, 14.2)
    mean = np.linspace(-0.5, 0.5, 6)
    a, _, _ = policy_sample(mean, np.full(6, -60.0), np.random.default_rng(0), amap)
    np.testing.assert_allclose(a, amap.to_thrust(mean), atol=1e-20)


def test_policy_sample_monte_carlo_mean():
    rng = np.random.default_rng(1)
    mean, log_std = np.array([0.3, -0.2, 0.0, 1.0, -1.0, 0.5]), np.log(np.full(6, 0.4))
    n = 100000
    u = np.stack([policy_sample(mean, log_std, rng)[2] for _ in range(n)])
    assert np.all(np.abs(u.mean(axis=0) - mean) < 3 * 0.4 / math.sqrt(n))


def test_policy_sample_logp_matches_density():
    rng = np.random.default_rng(2)
    mean, log_std = rng.normal(size=6), rng.uniform(-2, 0, 6)
    _, lp, u = policy_sample(mean, log_std, rng)
    sig = np.exp(log_std)
    dens = np.prod(np.exp(-0.5 * ((u - mean) / sig) ** 2) / (sig * math.sqrt(2 * math.pi)))
    assert lp == pytest.approx(math.log(dens), abs=1e-12)


def test_logprob_examples():
    amap = ActionMap(np.full(6, 3.0), 1.4, 14.2)
    mean = np.full(6, 0.2)
    assert logprob(mean, np.zeros(6), amap.to_thrust(mean), amap) == pytest.approx(-3 * LOG_2PI, abs=1e-12)
    d = np.array([0.1, -0.3, 0.2, 0.0, 0.05, 0.4])
    ls = np.full(6, -0.5)
    assert gaussian_logprob(mean, ls, mean + d) == pytest.approx(gaussian_logprob(mean, ls, mean - d), abs=1e-14)


def test_logprob_ratio_matches_density_ratio():
    rng = np.random.default_rng(3)
    m1, m2 = rng.normal(size=6), rng.normal(size=6)
    ls1, ls2 = rng.uniform(-1, 0, 6), rng.uniform(-1, 0, 6)
    a = rng.normal(size=6)

    def dens(m, ls):
        s = np.exp(ls)
        return np.prod(np.exp(-0.5 * ((a - m) / s) ** 2) / (s * math.sqrt(2 * math.pi)))

    ratio = math.exp(logprob(m2, ls2, a) - logprob(m1, ls1, a))
    assert ratio == pytest.approx(dens(m2, ls2) / dens(m1, ls1), rel=1e-12)


def test_entropy_closed_form():
    ls = np.log(np.full(6, 0.5))
    assert gaussian_entropy(ls) == pytest.approx(6 * (0.5 * math.log(2 * math.pi * math.e) + math.log(0.5)))


def test_action_map_round_trip_and_clamp():
    amap = ActionMap(np.full(6, 3.0), 1.42, 14.2)
    u = np.array([0.1, -0.5, 1.0, 0.0, 2.0, -1.0])
    np.testing.assert_allclose(amap.to_raw(amap.to_thrust(u)), u, atol=1e-15)
    T = amap.to_thrust(np.array([-10.0, 20.0, 0, 0, 0, 0]))
    assert T[0] == 0.0 and T[1] == 14.2
