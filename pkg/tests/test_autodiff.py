import zlib

import numpy as np
import pytest

from pco import autodiff as ad
from pco.autodiff import Tape, finite_difference_check


def test_matmul_shape():
    t = ad.matmul(np.ones((2, 3)), np.ones((3, 4)))
    assert t.shape == (2, 4)


def test_l2_norm_rows():
    x = np.array([[0, 0, 0, 0], [1, 0, 0, 0], [3, 4, 0, 0]], dtype=float)
    out = ad.l2_norm(x).value
    assert out[0] == pytest.approx(np.sqrt(ad.EPS), abs=0)
    assert out[0] < 1e-11
    assert out[1] == 1.0
    assert out[2] == 5.0


def test_softmax_symmetric():
    np.testing.assert_array_equal(ad.softmax(np.zeros(2)).value, [0.5, 0.5])


def test_softmax_mask_zeroes_entries():
    p = ad.softmax(np.array([[1.0, 2.0, 3.0]]), mask=np.array([[True, False, True]])).value
    assert p[0, 1] == 0.0
    assert p.sum() == pytest.approx(1.0)


def _grad(f, x):
    tape = Tape()
    leaf = tape.leaf(x)
    tape.backward(f(leaf))
    return tape.grad(leaf)


def test_backward_sum_is_ones():
    x = np.random.default_rng(0).normal(size=(2, 3, 4))
    np.testing.assert_array_equal(_grad(ad.sum, x), np.ones_like(x))


def test_backward_square():
    np.testing.assert_allclose(_grad(lambda t: ad.sum(t * t), np.array([1.0, 2.0, 3.0])), [2, 4, 6])


def test_backward_norm():
    np.testing.assert_allclose(_grad(ad.l2_norm, np.array([3.0, 4.0])), [0.6, 0.8], rtol=1e-15)


def test_backward_errors():
    tape = Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ad.AutodiffError, match="scalar"):
        tape.backward(x * 2.0)
    with pytest.raises(ad.AutodiffError, match="empty"):
        Tape().backward(ad.const(1.0))
    other = Tape()
    y = other.leaf(1.0)
    with pytest.raises(ad.AutodiffError):
        tape.backward(y)


def test_shape_error_names_op_and_shapes():
    with pytest.raises(ad.ShapeError) as exc:
        ad.matmul(np.ones((2, 3)), np.ones((4, 5)))
    msg = str(exc.value)
    assert "matmul" in msg and "(2, 3)" in msg and "(4, 5)" in msg
    with pytest.raises(ad.ShapeError, match="linear"):
        ad.linear(np.ones((2, 3)), np.ones((3, 4)), np.ones(3))
    with pytest.raises(ad.ShapeError, match="add"):
        ad.add(np.ones((2, 3)), np.ones((4,)))


@pytest.mark.filterwarnings("ignore:overflow:RuntimeWarning")
def test_non_finite_is_raised():
    with pytest.raises(ad.NonFiniteError, match="scale"):
        ad.scale(np.array([1e308]), 10.0)
    with pytest.raises(ad.AutodiffError, match="divide"):
        ad.div(1.0, np.array([0.0]))


def test_mixed_tapes_rejected():
    a, b = Tape().leaf(1.0), Tape().leaf(2.0)
    with pytest.raises(ad.AutodiffError, match="different tapes"):
        a + b


def test_constants_do_not_record():
    tape = Tape()
    tape.leaf(1.0)
    ad.const(np.ones(3)) * 2.0
    assert len(tape) == 1


def test_fd_check_linear_and_constant():
    x = {"x": np.random.default_rng(1).normal(size=(3, 2))}
    assert finite_difference_check(lambda p: ad.sum(p["x"]), x) <= 1e-9
    assert finite_difference_check(lambda p: ad.const(3.0), x) <= 1e-9
    with pytest.raises(ValueError):
        finite_difference_check(lambda p: ad.sum(p["x"]), x, h=0.0)


# Each case: (name, builder(rng) -> (params, f)).  f maps tensors to a tensor,
# which is contracted with fixed random weights to a scalar.

def _away_from_zero(rng, shape, lo=0.1):
    x = rng.uniform(lo, 2.0, size=shape)
    return x * rng.choice([-1.0, 1.0], size=shape)


OPS = {
    "matmul": lambda r: ({"a": r.normal(size=(2, 3)), "b": r.normal(size=(3, 4))},
                         lambda p: p["a"] @ p["b"]),
    "matmul_batched": lambda r: ({"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(4, 2))},
                                 lambda p: p["a"] @ p["b"]),
    "matmul_bb": lambda r: ({"a": r.normal(size=(2, 3, 4)), "b": r.normal(size=(2, 4, 3))},
                            lambda p: p["a"] @ p["b"]),
    "linear": lambda r: ({"x": r.normal(size=(2, 3, 4)), "w": r.normal(size=(4, 2)), "b": r.normal(size=(2,))},
                         lambda p: ad.linear(p["x"], p["w"], p["b"])),
    "squared_error": lambda r: ({"a": r.normal(size=(3, 4, 2))},
                                lambda p: ad.squared_error(p["a"], np.ones((3, 4, 2)),
                                                           np.array([[1, 1, 0, 1]] * 3, bool))),
    "add_broadcast": lambda r: ({"a": r.normal(size=(2, 3)), "b": r.normal(size=(3,))},
                                lambda p: p["a"] + p["b"]),
    "subtract": lambda r: ({"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 1))},
                           lambda p: p["a"] - p["b"]),
    "multiply": lambda r: ({"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 3))},
                           lambda p: p["a"] * p["b"]),
    "scale": lambda r: ({"a": r.normal(size=(4,))}, lambda p: ad.scale(p["a"], -1.7)),
    "mean_axis": lambda r: ({"a": r.normal(size=(2, 3, 4))}, lambda p: ad.mean(p["a"], axis=1)),
    "sum": lambda r: ({"a": r.normal(size=(3, 2))}, lambda p: ad.sum(p["a"], axis=0, keepdims=True)),
    "l2_norm": lambda r: ({"a": r.normal(size=(3, 4))}, lambda p: ad.l2_norm(p["a"])),
    "sqrt": lambda r: ({"a": r.uniform(0.2, 3.0, size=(5,))}, lambda p: ad.sqrt(p["a"])),
    "divide": lambda r: ({"a": r.normal(size=(2, 3)), "b": _away_from_zero(r, (2, 3), 0.3)},
                         lambda p: p["a"] / p["b"]),
    "relu": lambda r: ({"a": _away_from_zero(r, (6,), 0.01)}, lambda p: ad.relu(p["a"])),
    "gelu": lambda r: ({"a": r.normal(scale=2.0, size=(6,))}, lambda p: ad.gelu(p["a"])),
    "softmax": lambda r: ({"a": r.normal(size=(2, 5))}, lambda p: ad.softmax(p["a"])),
    "softmax_masked": lambda r: ({"a": r.normal(size=(2, 4))},
                                 lambda p: ad.softmax(p["a"], mask=np.array([[1, 1, 0, 1], [0, 1, 1, 1]], bool))),
    "layer_norm": lambda r: ({"a": r.normal(size=(2, 3, 5)), "g": r.normal(size=(5,)), "b": r.normal(size=(5,))},
                             lambda p: ad.layer_norm(p["a"], p["g"], p["b"])),
    "embedding_lookup": lambda r: ({"t": r.normal(size=(4, 3))},
                                   lambda p: ad.embedding_lookup(p["t"], np.array([[0, 2], [2, 3]]))),
    "concat": lambda r: ({"a": r.normal(size=(2, 3)), "b": r.normal(size=(2, 2))},
                         lambda p: ad.concat([p["a"], p["b"]], axis=1)),
    "slice": lambda r: ({"a": r.normal(size=(3, 4))}, lambda p: p["a"][1:, ::2]),
    "gather": lambda r: ({"a": r.normal(size=(3, 4))}, lambda p: p["a"][np.array([0, 2, 2]), np.array([1, 1, 3])]),
    "masked_mean": lambda r: ({"a": r.normal(size=(2, 4, 3))},
                              lambda p: ad.masked_mean(p["a"], np.array([[1, 1, 0, 0], [1, 1, 1, 0]]), axis=1)),
    "reshape_transpose": lambda r: ({"a": r.normal(size=(2, 6))},
                                    lambda p: ad.transpose(ad.reshape(p["a"], (2, 3, 2)), (2, 0, 1))),
    "broadcast_to": lambda r: ({"a": r.normal(size=(1, 3))}, lambda p: ad.broadcast_to(p["a"], (4, 3))),
}


@pytest.mark.parametrize("op", sorted(OPS))
def test_op_gradients_match_finite_differences(op):
    rng = np.random.default_rng(zlib.crc32(op.encode()))
    worst = 0.0
    for _ in range(100):
        params, f = OPS[op](rng)
        probe = f({k: ad.const(v) for k, v in params.items()})
        w = rng.normal(size=probe.shape)
        worst = max(worst, finite_difference_check(lambda p: ad.sum(f(p) * w), params, h=1e-5))
    assert worst <= 1e-4


def test_backward_is_deterministic():
    rng = np.random.default_rng(3)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))

    def run():
        tape = Tape()
        x, y = tape.leaf(a), tape.leaf(b)
        tape.backward(ad.sum(ad.gelu(x @ y) * ad.softmax(x @ y)))
        return tape.grad(x), tape.grad(y)

    g1, g2 = run(), run()
    for u, v in zip(g1, g2):
        assert u.tobytes() == v.tobytes()


def test_gradient_is_linear():
    rng = np.random.default_rng(4)
    x0 = rng.normal(size=5)
    f = lambda t: ad.sum(ad.gelu(t))
    g = lambda t: ad.l2_norm(t)
    both = _grad(lambda t: f(t) + g(t), x0)
    np.testing.assert_allclose(both, _grad(f, x0) + _grad(g, x0), rtol=1e-14, atol=1e-15)


def test_reused_input_accumulates():
    # x used twice: d/dx (x * x + x) = 2x + 1
    x0 = np.array([0.5, -2.0])
    np.testing.assert_allclose(_grad(lambda t: ad.sum(t * t + t), x0), 2 * x0 + 1)
