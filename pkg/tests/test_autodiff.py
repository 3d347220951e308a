import numpy as np
import pytest

from icaflow import autodiff as ad
from icaflow.errors import GraphError


def scalar_graph(fn, shape=()):
    return ad.DiffGraph({"x": shape}, lambda t: fn(t["x"]))


def test_softplus_at_zero():
    g = scalar_graph(ad.softplus)
    assert ad.evaluate(g, {"x": 0.0}) == pytest.approx(np.log(2.0), abs=1e-12)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(3, 3))
    g = ad.DiffGraph({"A": (3, 3)},
                     lambda t: ad.matmul(ad.constant(np.eye(3)), t["A"]))
    np.testing.assert_array_equal(ad.evaluate(g, {"A": a}), a)


def test_sum_of_squares():
    g = scalar_graph(lambda x: ad.tsum(ad.square(x)), shape=(2,))
    assert ad.evaluate(g, {"x": [3.0, 4.0]}) == 25.0


def test_gradient_softplus_is_sigmoid():
    g = scalar_graph(ad.softplus)
    assert ad.gradient(g, {"x": 0.0})["x"] == pytest.approx(0.5)


def test_gradient_x_times_x():
    g = scalar_graph(lambda x: x * x)
    assert ad.gradient(g, {"x": 3.0})["x"] == pytest.approx(6.0)


def test_gradient_requires_scalar_output():
    g = scalar_graph(ad.square, shape=(3,))
    with pytest.raises(GraphError, match="scalar"):
        ad.gradient(g, {"x": [1.0, 2.0, 3.0]})


def test_unbound_input_fails():
    g = ad.DiffGraph({"x": (), "y": ()}, lambda t: t["x"] * t["y"])
    with pytest.raises(GraphError, match="unbound input 'y'"):
        ad.evaluate(g, {"x": 1.0})


def test_shape_mismatch_names_input():
    g = scalar_graph(lambda x: ad.tsum(x), shape=(2,))
    with pytest.raises(GraphError, match="'x'"):
        ad.evaluate(g, {"x": [1.0, 2.0, 3.0]})


def test_nonfinite_intermediate_names_node():
    g = scalar_graph(lambda x: ad.exp(x))
    with pytest.raises(GraphError, match="exp"):
        ad.evaluate(g, {"x": 1e4})


def test_log_of_negative_fails():
    g = scalar_graph(ad.log)
    with pytest.raises(GraphError, match="log"):
        ad.evaluate(g, {"x": -1.0})


def test_check_gradient_single_softplus():
    g = scalar_graph(ad.softplus)
    assert ad.check_gradient(g, {"x": 0.7}, step=1e-5) < 1e-7


def test_check_gradient_flags_relu_kink():
    g = scalar_graph(ad.relu)
    with pytest.warns(ad.NonSmoothWarning):
        err = ad.check_gradient(g, {"x": 0.0}, step=1e-5)
    assert np.isfinite(err)


def test_relu_right_derivative_at_zero():
    g = scalar_graph(ad.relu)
    assert ad.gradient(g, {"x": 0.0})["x"] == 1.0
    g2 = scalar_graph(lambda x: ad.leaky_relu(x, slope=0.1))
    assert ad.gradient(g2, {"x": 0.0})["x"] == 1.0
    g3 = scalar_graph(lambda x: ad.maximum(x, 2.0))
    assert ad.gradient(g3, {"x": 2.0})["x"] == 1.0


# Smooth test points per primitive, chosen away from kinks and log/sqrt
# domain edges.
PRIMITIVES = [
    ("add", lambda x: x + ad.constant(1.7), (-4, 4)),
    ("sub", lambda x: ad.constant(0.3) - x, (-4, 4)),
    ("mul", lambda x: x * x, (-4, 4)),
    ("div", lambda x: ad.constant(2.0) / x, (0.5, 4)),
    ("neg", lambda x: -x, (-4, 4)),
    ("log", ad.log, (0.2, 5)),
    ("exp", ad.exp, (-3, 3)),
    ("square", ad.square, (-4, 4)),
    ("sqrt", ad.sqrt, (0.2, 5)),
    ("softplus", ad.softplus, (-5, 5)),
    ("sigmoid", ad.sigmoid, (-5, 5)),
    ("relu", ad.relu, (0.5, 5)),
    ("leaky_relu", ad.leaky_relu, (0.5, 5)),
    ("maximum", lambda x: ad.maximum(x, 1.0), (2, 5)),
    ("softmax", ad.softmax, (-2, 2)),
    ("cumsum", ad.cumsum, (-3, 3)),
]


@pytest.mark.parametrize("name,fn,lohi", PRIMITIVES, ids=[p[0] for p in PRIMITIVES])
def test_primitive_gradients_match_central_differences(name, fn, lohi):
    # 100 random smooth points folded into one 100-vector probe; the graph
    # contracts with fixed weights so the output stays scalar.
    rng = np.random.default_rng(hash(name) % 2**32)
    lo, hi = lohi
    points = rng.uniform(lo, hi, size=100)
    # contraction weights of magnitude ~1 keep the finite-difference probe
    # free of cancellation noise
    weights = ad.constant(rng.uniform(0.5, 1.5, size=100)
                          * rng.choice([-1.0, 1.0], size=100))
    g = ad.DiffGraph({"x": (100,)}, lambda t: ad.tsum(fn(t["x"]) * weights))
    assert ad.check_gradient(g, {"x": points}, step=1e-5) < 1e-6


def test_matmul_gradient_batched():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(2, 3, 4))
    w = rng.normal(size=(4, 5))
    g = ad.DiffGraph(
        {"A": (2, 3, 4), "W": (4, 5)},
        lambda t: ad.tsum(ad.square(ad.matmul(t["A"], t["W"]))))
    assert ad.check_gradient(g, {"A": a, "W": w}, step=1e-6) < 1e-6


def test_structural_op_gradients():
    rng = np.random.default_rng(4)
    x = rng.normal(size=(2, 6))

    def build(t):
        r = ad.reshape(t["x"], (2, 2, 3))
        left = ad.slice_last(r, 0, 1)
        right = ad.slice_last(r, 1, 3)
        joined = ad.concat_last([right, left])
        return ad.tsum(ad.square(joined))

    g = ad.DiffGraph({"x": (2, 6)}, build)
    assert ad.check_gradient(g, {"x": x}, step=1e-6) < 1e-6


def test_evaluate_is_pure():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(4, 4))
    g = ad.DiffGraph(
        {"x": (4, 4)},
        lambda t: ad.tsum(ad.softmax(ad.matmul(t["x"], t["x"]))))
    first = ad.evaluate(g, {"x": x})
    for _ in range(3):
        again = ad.evaluate(g, {"x": x})
        assert again.tobytes() == first.tobytes()


def test_gradient_linearity_on_random_graphs():
    # gradient of (f + g) equals gradient of f plus gradient of g
    rng = np.random.default_rng(6)
    for trial in range(5):
        w = rng.normal(size=(3, 3))
        c1 = ad.constant(rng.normal(size=(3, 3)))
        c2 = ad.constant(rng.normal(size=(3,)))

        def f(t):
            return ad.tsum(ad.sigmoid(ad.matmul(t["w"], c1)))

        def g(t):
            return ad.tsum(ad.square(t["w"]) * c2)

        ga = ad.gradient(ad.DiffGraph({"w": (3, 3)}, f), {"w": w})["w"]
        gb = ad.gradient(ad.DiffGraph({"w": (3, 3)}, g), {"w": w})["w"]
        gsum = ad.gradient(
            ad.DiffGraph({"w": (3, 3)}, lambda t: f(t) + g(t)), {"w": w})["w"]
        np.testing.assert_allclose(gsum, ga + gb, rtol=1e-12, atol=1e-12)


def test_gradient_accumulates_through_fanout():
    # y = x*x + x*x reuses the same node twice
    g = scalar_graph(lambda x: x * x + x * x)
    assert ad.gradient(g, {"x": 3.0})["x"] == pytest.approx(12.0)


def test_scope_prefixes_node_names():
    def build(t):
        with ad.scope("tail"):
            return ad.log(t["x"])

    g = ad.DiffGraph({"x": ()}, build)
    with pytest.raises(GraphError, match="tail/log"):
        ad.evaluate(g, {"x": -2.0})
