import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fmdt.net import (NetModel, NonFiniteError, ParametrizedDenoiser, TimeEmbedding,
                      load_checkpoint, n_weights, save_checkpoint)

CONFIGS = [("tanh", (16, 16)), ("gelu", (16, 16)), ("gelu", (8, 24, 8))]


def _model(klass="C_IplusNN", activation="tanh", hidden=(16, 16), d=3, seed=0):
    return ParametrizedDenoiser(NetModel.init(d, hidden, activation, seed=seed), klass)


def _batch(g, B=6, d=3):
    return g.standard_normal((B, d)), g.standard_normal((B, d)), g.uniform(0, 0.95, B), \
        g.uniform(0.5, 2.0, B)


def test_weight_count_matches_layout():
    net = NetModel.init(3, (5, 7))
    dims = [3 + TimeEmbedding().width, 5, 7, 3]
    assert net.weights.size == n_weights(dims) == sum((a + 1) * b for a, b in zip(dims, dims[1:]))


def test_zero_weights_give_zero_output(rng):
    net = NetModel.init(2, (8,))
    zero = net.with_weights(np.zeros_like(net.weights))
    np.testing.assert_array_equal(zero(rng.standard_normal((4, 2)), 0.3), np.zeros((4, 2)))


def test_identity_block_linear_layer(rng):
    emb = TimeEmbedding((1.0,))
    d = 3
    W = np.zeros((d, d + emb.width))
    W[:, :d] = np.eye(d)
    net = NetModel([d + emb.width, d], np.concatenate([W.ravel(), np.zeros(d)]), "tanh", emb)
    x = rng.standard_normal((4, d))
    np.testing.assert_array_equal(net(x, 0.7), x)


def test_forward_matches_golden_value(frozen):
    o = frozen["forward_golden"]
    net = NetModel.init(o["d"], tuple(o["hidden"]), o["activation"], seed=o["seed"])
    x = np.zeros(o["d"])
    x[0] = 1.0
    np.testing.assert_allclose(net(x, o["t"]), o["value"], rtol=1e-12, atol=1e-14)


def test_init_is_deterministic(rng):
    a, b = NetModel.init(2, seed=9), NetModel.init(2, seed=9)
    np.testing.assert_array_equal(a.weights, b.weights)
    x = rng.standard_normal((3, 2))
    np.testing.assert_array_equal(a(x, 0.2), b(x, 0.2))
    assert not np.array_equal(a.weights, NetModel.init(2, seed=10).weights)


def test_non_finite_weights_rejected():
    net = NetModel.init(2, (4,))
    w = net.weights.copy()
    w[3] = np.nan
    with pytest.raises(NonFiniteError):
        net.with_weights(w)(np.zeros(2), 0.5)


def test_parametrization_classes(rng):
    x = rng.standard_normal((4, 3))
    nn, res = _model("C_NN"), _model("C_IplusNN")
    np.testing.assert_array_equal(res(x, 0.3), x + 0.7 * nn.net(x, 0.3))
    np.testing.assert_array_equal(nn(x, 0.3), nn.net(x, 0.3))
    z = res.with_weights(np.zeros_like(res.net.weights))
    np.testing.assert_array_equal(z(x, 0.4), x)
    np.testing.assert_array_equal(nn.with_weights(np.zeros_like(nn.net.weights))(x, 0.4), 0 * x)


def test_residual_class_is_identity_at_one():
    worst = 0.0
    for seed in range(100):
        g = np.random.default_rng(seed)
        pd = _model("C_IplusNN", seed=seed).with_weights(
            3 * g.standard_normal(_model().net.weights.size))
        x = 10 * g.standard_normal(3)
        worst = max(worst, np.abs(pd(x, 1.0) - x).max())
    assert worst == 0.0


@pytest.mark.parametrize("klass", ["C_NN", "C_IplusNN"])
@pytest.mark.parametrize("activation,hidden", CONFIGS)
def test_gradient_matches_finite_differences(klass, activation, hidden):
    g = np.random.default_rng(1)
    pd = _model(klass, activation, hidden)
    x_t, x1, t, w = _batch(g)
    _, grad = pd.loss_and_grad(x_t, x1, t, w)
    h = 1e-5
    for k in g.choice(pd.net.weights.size, 50, replace=False):
        e = np.zeros_like(pd.net.weights)
        e[k] = h
        lp = pd.with_weights(pd.net.weights + e).loss_and_grad(x_t, x1, t, w)[0]
        lm = pd.with_weights(pd.net.weights - e).loss_and_grad(x_t, x1, t, w)[0]
        fd = (lp - lm) / (2 * h)
        assert abs(grad[k] - fd) <= 1e-4 * max(abs(fd), abs(grad[k]), 1e-6)


def test_zero_model_at_its_minimum_has_zero_gradient(rng):
    pd = _model("C_NN")
    pd = pd.with_weights(np.zeros_like(pd.net.weights))
    x_t, _, t, w = _batch(rng)
    loss, grad = pd.loss_and_grad(x_t, np.zeros_like(x_t), t, w)
    assert loss == 0.0 and np.all(grad == 0.0)


def test_duplicated_batch_leaves_gradient_unchanged(rng):
    pd = _model()
    x_t, x1, t, w = _batch(rng)
    l1, g1 = pd.loss_and_grad(x_t, x1, t, w)
    dup = lambda a: np.concatenate([a, a])  # noqa: E731
    l2, g2 = pd.loss_and_grad(dup(x_t), dup(x1), dup(t), dup(w))
    assert l1 == pytest.approx(l2, rel=1e-14)
    np.testing.assert_allclose(g1, g2, rtol=1e-12, atol=1e-15)


def test_non_finite_loss_reports_index(rng):
    pd = _model()
    x_t, x1, t, w = _batch(rng)
    x1[2, 0] = np.inf
    with pytest.raises(NonFiniteError) as err:
        pd.loss_and_grad(x_t, x1, t, w)
    assert err.value.index == 2


@pytest.mark.parametrize("klass", ["C_NN", "C_IplusNN"])
@pytest.mark.parametrize("activation,hidden", CONFIGS)
def test_jvp_matches_finite_differences(klass, activation, hidden):
    g = np.random.default_rng(2)
    pd = _model(klass, activation, hidden)
    x, u = g.standard_normal((5, 3)), g.standard_normal((5, 3))
    h = 1e-5
    fd = (pd(x + h * u, 0.35) - pd(x - h * u, 0.35)) / (2 * h)
    jv = pd.jvp(x, 0.35, u)
    assert np.linalg.norm(jv - fd) <= 1e-5 * np.linalg.norm(fd)


@given(st.floats(-3, 3), st.floats(-3, 3), st.integers(0, 1000))
def test_jvp_is_linear(a, b, seed):
    g = np.random.default_rng(seed)
    pd = _model("C_NN", "gelu")
    x, u, w = g.standard_normal((3, 3, 3))
    lhs = pd.jvp(x, 0.6, a * u + b * w)
    rhs = a * pd.jvp(x, 0.6, u) + b * pd.jvp(x, 0.6, w)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10 * (1 + np.abs(rhs).max()))


def test_jvp_of_identity_map(rng):
    pd = _model("C_IplusNN")
    pd = pd.with_weights(np.zeros_like(pd.net.weights))
    u = rng.standard_normal((2, 3))
    np.testing.assert_array_equal(pd.jvp(rng.standard_normal((2, 3)), 0.5, u), u)


def test_vjp_is_adjoint_of_jvp(rng):
    for klass in ("C_NN", "C_IplusNN"):
        pd = _model(klass, "gelu")
        x, u, w = rng.standard_normal((3, 4, 3))
        lhs = (w * pd.jvp(x, 0.2, u)).sum(1)
        rhs = (pd.vjp(x, 0.2, w) * u).sum(1)
        np.testing.assert_allclose(lhs, rhs, rtol=1e-12)
        lhs = (w * pd.velocity_jvp(x, 0.2, u)).sum(1)
        np.testing.assert_allclose(lhs, (pd.velocity_vjp(x, 0.2, w) * u).sum(1), rtol=1e-12)


@pytest.mark.parametrize("klass", ["C_NN", "C_IplusNN"])
def test_jacobian_functional_gradient(klass, rng):
    pd = _model(klass, "tanh", (8, 8))
    x, u, w = rng.standard_normal((3, 4, 3))
    t = rng.uniform(0.1, 0.8, 4)
    coef = rng.uniform(0.5, 1.5, 4)

    def functional(p):
        return float((coef * (w * p.velocity_jvp(x, t, u)).sum(1)).sum())

    grad = pd.velocity_jacobian_functional_grad(x, t, u, w, coef)
    h = 1e-5
    for k in rng.choice(pd.net.weights.size, 30, replace=False):
        e = np.zeros_like(pd.net.weights)
        e[k] = h
        fd = (functional(pd.with_weights(pd.net.weights + e))
              - functional(pd.with_weights(pd.net.weights - e))) / (2 * h)
        assert abs(grad[k] - fd) <= 1e-5 * max(abs(fd), 1e-3)


def test_checkpoint_round_trip(tmp_path, rng):
    pd = _model("C_NN", "gelu")
    pd.ema_weights = pd.net.weights * 0.5
    save_checkpoint(tmp_path / "m.json", pd)
    back = load_checkpoint(tmp_path / "m.json")
    x = rng.standard_normal((3, 3))
    np.testing.assert_array_equal(back(x, 0.3), pd(x, 0.3))
    np.testing.assert_array_equal(back.ema_weights, pd.ema_weights)
    assert back.klass == "C_NN"
