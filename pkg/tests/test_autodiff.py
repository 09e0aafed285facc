import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fewdomain import autodiff as ad


def scalar(tape, v):
    return tape.variable(np.float64(v))


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(1e-8, np.maximum(np.abs(a), np.abs(b))))


# forward values ------------------------------------------------------------

def test_matmul_identity():
    t = ad.Tape()
    out = ad.matmul(t.constant([[1, 0], [0, 1]]), t.constant([[3], [4]]))
    np.testing.assert_array_equal(out.value, [[3], [4]])


def test_relu_definition():
    t = ad.Tape()
    np.testing.assert_array_equal(ad.relu(t.constant([-1, 0, 2])).value, [0, 0, 2])


def test_mean_two_values():
    t = ad.Tape()
    assert ad.mean(t.constant([0.4, 0.8])).item() == pytest.approx(0.6, abs=1e-15)


def test_shape_mismatch_names_shapes():
    t = ad.Tape()
    with pytest.raises(ad.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(t.constant(np.ones(3)), t.constant(np.ones(4)))


def test_softmax_xent_values():
    t = ad.Tape()
    out = ad.softmax_xent(t.constant([[1.0, 2.0], [0.0, 0.0]]), [0, 1])
    np.testing.assert_allclose(out.value, [np.log1p(np.e), np.log(2)], rtol=1e-14)


def test_values_are_float64():
    t = ad.Tape()
    assert t.constant([1, 2]).value.dtype == np.float64


# first and second order ----------------------------------------------------

def test_grad_square():
    t = ad.Tape()
    x = scalar(t, 3.0)
    (g,) = ad.grad(x * x, [x])
    assert g.item() == 6.0


def test_grad_product():
    t = ad.Tape()
    x, y = scalar(t, 2.0), scalar(t, 5.0)
    gx, gy = ad.grad(x * y, [x, y])
    assert (gx.item(), gy.item()) == (5.0, 2.0)


def test_second_order_cube():
    t = ad.Tape()
    x = scalar(t, 2.0)
    (g,) = ad.grad(x * x * x, [x], create_graph=True)
    assert g.requires_grad
    (gg,) = ad.grad(g, [x])
    # oracle: central difference of 3x^2
    h = 1e-5
    fd = (3 * (2 + h) ** 2 - 3 * (2 - h) ** 2) / (2 * h)
    assert gg.item() == pytest.approx(fd, rel=1e-8)
    assert gg.item() == pytest.approx(12.0, abs=1e-12)


@pytest.mark.parametrize("n", [2, 3, 4])
@pytest.mark.parametrize("x0", [-1.7, 0.6, 2.3])
def test_second_order_powers(n, x0):
    t = ad.Tape()
    x = scalar(t, x0)
    y = x
    for _ in range(n - 1):
        y = y * x
    (g,) = ad.grad(y, [x], create_graph=True)
    (gg,) = ad.grad(g, [x])
    expected = n * (n - 1) * x0 ** (n - 2)
    assert gg.item() == pytest.approx(expected, rel=1e-6)


def test_non_scalar_output_rejected():
    t = ad.Tape()
    x = t.variable(np.ones(3))
    with pytest.raises(ad.ShapeError, match="scalar"):
        ad.grad(ad.relu(x), [x])


def test_unreachable_gradient_is_exact_zero():
    t = ad.Tape()
    x, y = t.variable(np.ones((2, 2))), t.variable(np.full(3, 4.0))
    (gy,) = ad.grad(ad.sum(x), [y])
    assert gy.shape == (3,)
    assert np.all(gy.value == 0.0)


def test_relu_subgradient_at_zero():
    t = ad.Tape()
    x = t.variable([0.0, 1.0, -1.0])
    (g,) = ad.grad(ad.sum(ad.relu(x)), [x])
    np.testing.assert_array_equal(g.value, [0.0, 1.0, 0.0])


def test_without_create_graph_gradients_are_constants():
    t = ad.Tape()
    x = scalar(t, 1.5)
    (g,) = ad.grad(x * x, [x])
    assert not g.requires_grad
    (gg,) = ad.grad(g, [x])
    assert gg.item() == 0.0


# every primitive against finite differences ---------------------------------

def _check(build, shapes, rng, trials=100):
    """build(tape, nodes) -> scalar node; compares grad with finite_diff."""
    for _ in range(trials):
        arrays = [rng.uniform(-1, 1, size=s) for s in shapes]
        t = ad.Tape()
        nodes = [t.variable(a) for a in arrays]
        grads = [g.value for g in ad.grad(build(t, nodes), nodes)]

        def f(ps):
            tt = ad.Tape()
            return build(tt, [tt.constant(p) for p in ps]).item()

        fd = ad.finite_diff(f, arrays, h=1e-5)
        for g, e in zip(grads, fd):
            assert np.allclose(g, e, rtol=1e-4, atol=1e-7), (g, e)


def _weighted(t, node):
    # a fixed random readout so every output entry matters
    w = np.random.default_rng(99).uniform(-1, 1, size=node.shape)
    return ad.sum(ad.mul(node, t.constant(w)))


PRIMITIVES = {
    "matmul": (lambda t, n: _weighted(t, ad.matmul(n[0], n[1])), [(3, 4), (4, 2)]),
    "add": (lambda t, n: _weighted(t, ad.add(n[0], n[1])), [(3, 4), (4,)]),
    "sub": (lambda t, n: _weighted(t, ad.sub(n[0], n[1])), [(3, 4), (3, 4)]),
    "scale": (lambda t, n: _weighted(t, ad.scale(n[0], -2.5)), [(5,)]),
    "relu": (lambda t, n: _weighted(t, ad.relu(n[0])), [(3, 4)]),
    "mean": (lambda t, n: ad.mean(ad.mul(n[0], n[0])), [(3, 4)]),
    "sum": (lambda t, n: _weighted(t, ad.sum(n[0], axis=0)), [(3, 4)]),
    "softmax_xent": (lambda t, n: _weighted(t, ad.softmax_xent(n[0], [0, 2, 1])), [(3, 4)]),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    build, shapes = PRIMITIVES[name]
    _check(build, shapes, np.random.default_rng(hash(name) % 2**32))


def test_mlp_loss_second_order_matches_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(5, 3))
    y = np.array([0, 1, 2, 1, 0])

    def loss(t, ps):
        h = ad.relu(ad.add(ad.matmul(t.constant(x), ps[0]), ps[1]))
        return ad.mean(ad.softmax_xent(ad.add(ad.matmul(h, ps[2]), ps[3]), y))

    def grad_norm_sq(t, ps):
        gs = ad.grad(loss(t, ps), ps, create_graph=True)
        return ad.add(ad.sum(ad.mul(gs[0], gs[0])), ad.sum(ad.mul(gs[2], gs[2])))

    arrays = [rng.uniform(-1, 1, size=s) for s in [(3, 4), (4,), (4, 3), (3,)]]
    t = ad.Tape()
    nodes = [t.variable(a) for a in arrays]
    grads = [g.value for g in ad.grad(grad_norm_sq(t, nodes), nodes)]

    def f(ps):
        tt = ad.Tape()
        return grad_norm_sq(tt, [tt.variable(p) for p in ps]).item()

    for g, e in zip(grads, ad.finite_diff(f, arrays)):
        assert rel_err(g, e) < 1e-4


# finite_diff itself ---------------------------------------------------------

def test_finite_diff_square():
    (g,) = ad.finite_diff(lambda ps: float(ps[0] ** 2), [np.array(3.0)], h=1e-5)
    assert abs(g - 6.0) < 1e-6


def test_finite_diff_constant():
    (g,) = ad.finite_diff(lambda ps: 7.0, [np.ones((2, 3))])
    assert np.all(np.abs(g) < 1e-9)


def test_finite_diff_rejects_bad_input():
    with pytest.raises(ValueError):
        ad.finite_diff(lambda ps: 0.0, [np.ones(2)], h=0.0)
    with pytest.raises(FloatingPointError):
        ad.finite_diff(lambda ps: float("nan"), [np.ones(2)])


# tape ----------------------------------------------------------------------

def _build(seed):
    t = ad.Tape(rng_seed=seed)
    a = t.variable(t.rng.normal(size=(4, 3)))
    b = t.variable(t.rng.normal(size=(3, 2)))
    out = ad.mean(ad.softmax_xent(ad.relu(ad.matmul(a, b)), [0, 1, 1, 0]))
    ad.grad(out, [a, b], create_graph=True)
    return t


def test_tape_is_topologically_ordered():
    t = _build(0)
    pos = {n.id: i for i, n in enumerate(t.nodes)}
    for n in t.nodes:
        assert all(pos[p.id] < pos[n.id] for p in n.parents)


def test_tape_replay_bit_exact():
    t1, t2 = _build(11), _build(11)
    v1 = [n.value.tobytes() for n in t1.nodes]
    assert v1 == [n.value.tobytes() for n in t2.nodes]
    assert v1 == [v.tobytes() for v in t1.replay()]


def test_node_size_matches_shape():
    for n in _build(1).nodes:
        assert n.value.size == int(np.prod(n.shape))


@settings(max_examples=40, deadline=None)
@given(st.lists(st.floats(-5, 5), min_size=2, max_size=6),
       st.integers(0, 5))
def test_softmax_xent_grad_sums_to_zero(logits, label):
    label = label % len(logits)
    t = ad.Tape()
    z = t.variable([logits])
    (g,) = ad.grad(ad.sum(ad.softmax_xent(z, [label])), [z])
    assert abs(g.value.sum()) < 1e-10
