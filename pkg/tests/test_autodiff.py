import numpy as np
import pytest

from ropim import autodiff as ad
from ropim.errors import ContractError, ShapeError

STEP = 1e-5
TOL = 1e-4


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    """max |a - b| / max(|a|, |b|) over the whole tensor."""
    denom = max(np.abs(a).max(), np.abs(b).max())
    return 0.0 if denom == 0 else float(np.abs(a - b).max() / denom)


def check_grads(build, inputs, seed=0):
    """Compare backward with central differences for a tensor-valued ``build``.

    A fixed random cotangent R turns the output into the scalar <build(), R>.
    """
    params = [ad.parameter(x) for x in inputs]
    out = build(*params)
    R = np.random.default_rng(seed).standard_normal(out.shape)
    loss = ad.sum(ad.mul(out, R))
    loss.backward()

    def f():
        return float((build(*params).data * R).sum())

    return max(rel_err(p.grad, ad.numerical_grad(f, p, STEP)) for p in params)


@pytest.fixture
def g():
    return np.random.default_rng(7)


# --- forward values --------------------------------------------------------------------

def test_forward_examples(g):
    A = g.standard_normal((3, 4))
    np.testing.assert_array_equal(ad.matmul(np.eye(3), A).data, A)
    np.testing.assert_allclose(ad.softmax(np.zeros(2)).data, [0.5, 0.5])
    z = ad.parameter(np.zeros((2, 3)))
    loss = ad.abs_sum(z)
    loss.backward()
    assert loss.data == 0 and not np.any(z.grad)


def test_gelu_tanh_form():
    x = np.array([-3.0, -1.0, 0.0, 0.5, 2.0])
    ref = 0.5 * x * (1 + np.tanh(np.sqrt(2 / np.pi) * (x + 0.044715 * x ** 3)))
    np.testing.assert_allclose(ad.gelu(x).data, ref, rtol=0, atol=1e-15)


def test_layer_norm_constant_row_is_finite():
    out = ad.layer_norm(np.full((2, 4), 3.0), np.ones(4), np.arange(4.0))
    np.testing.assert_allclose(out.data, np.tile(np.arange(4.0), (2, 1)))


def test_sum_gradient_is_ones(g):
    W = ad.parameter(g.standard_normal((3, 2, 4)))
    ad.sum(W).backward()
    np.testing.assert_array_equal(W.grad, np.ones((3, 2, 4)))


def test_inner_product_gradient(g):
    x = g.standard_normal(5)
    w = ad.parameter(g.standard_normal(5))
    ad.sum(ad.mul(w, x)).backward()
    np.testing.assert_allclose(w.grad, x)


def test_l1_subgradient_at_zero_is_zero():
    a = ad.parameter(np.array([-2.0, 0.0, 3.0]))
    ad.abs_sum(a).backward()
    np.testing.assert_array_equal(a.grad, [-1.0, 0.0, 1.0])
    b = ad.parameter(np.array([0.0, 0.0, 4.0, -4.0]))
    ad.abs_mean(b).backward()
    np.testing.assert_array_equal(b.grad, [0.0, 0.0, 0.25, -0.25])


# --- per-primitive gradient checks -----------------------------------------------------

def _away_from_zero(g, shape):
    x = g.standard_normal(shape)
    return np.where(np.abs(x) < 0.1, 0.5, x)


CASES = {
    "add": (lambda a, b: ad.add(a, b), [(3, 4), (4,)]),
    "sub": (lambda a, b: ad.sub(a, b), [(2, 3, 4), (3, 4)]),
    "mul": (lambda a, b: ad.mul(a, b), [(3, 4), (3, 4)]),
    "scale": (lambda a: ad.scale(a, -2.5), [(5,)]),
    "matmul": (lambda a, b: ad.matmul(a, b), [(3, 4), (4, 5)]),
    "matmul_batched": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (4, 2)]),
    "matmul_batched_both": (lambda a, b: ad.matmul(a, b), [(2, 3, 4), (2, 4, 3)]),
    "transpose": (lambda a: ad.transpose(a), [(3, 5)]),
    "permute": (lambda a: ad.permute(a, (1, 0, 2)), [(2, 3, 4)]),
    "reshape": (lambda a: ad.reshape(a, (6, 2)), [(3, 4)]),
    "getitem_slice": (lambda a: ad.getitem(a, (slice(1, None), slice(None, 2))), [(3, 4)]),
    "getitem_fancy": (lambda a: ad.getitem(a, np.array([0, 2, 0])), [(3, 4)]),
    "concat": (lambda a, b: ad.concat([a, b], axis=0), [(1, 4), (3, 4)]),
    "broadcast_to": (lambda a: ad.broadcast_to(a, (3, 2, 4)), [(1, 4)]),
    "softmax": (lambda a: ad.softmax(a), [(3, 5)]),
    "layer_norm": (lambda x, gm, bt: ad.layer_norm(x, gm, bt), [(4, 6), (6,), (6,)]),
    "gelu": (lambda a: ad.gelu(a), [(4, 5)]),
    "mean": (lambda a: ad.mean(a), [(3, 4)]),
    "sum": (lambda a: ad.sum(a), [(3, 4)]),
    "abs_sum": (lambda a: ad.abs_sum(a), [(3, 4)]),
    "abs_mean": (lambda a: ad.abs_mean(a), [(3, 4)]),
    "linear_map": (lambda a: ad.linear_map(a, lambda v: v[::-1] * 2, lambda v: v[::-1] * 2),
                   [(4, 3)]),
}


@pytest.mark.parametrize("name", sorted(CASES))
@pytest.mark.parametrize("seed", range(5))
def test_primitive_gradients(name, seed):
    build, shapes = CASES[name]
    g = np.random.default_rng(seed)
    inputs = [_away_from_zero(g, s) for s in shapes]
    assert check_grads(build, inputs, seed) < TOL


@pytest.mark.parametrize("seed", range(5))
def test_two_layer_mlp_gradients(seed):
    g = np.random.default_rng(seed)
    X = g.standard_normal((8, 5))

    def build(W1, b1, W2, b2):
        h = ad.gelu(ad.add(ad.matmul(X, W1), b1))
        return ad.add(ad.matmul(h, W2), b2)

    shapes = [(5, 7), (7,), (7, 3), (3,)]
    assert check_grads(build, [g.standard_normal(s) for s in shapes], seed) < TOL


# --- tape behaviour --------------------------------------------------------------------

def test_shared_subexpression_accumulates(g):
    a = ad.parameter(g.standard_normal(3))
    b = ad.mul(a, a)
    ad.sum(ad.add(b, b)).backward()
    np.testing.assert_allclose(a.grad, 4 * a.data)


def test_graph_freed_after_backward(g):
    a = ad.parameter(g.standard_normal(3))
    mid = ad.scale(a, 2.0)
    loss = ad.sum(mid)
    loss.backward()
    assert mid._parents == () and mid.grad is None
    assert a.grad is not None


def test_backward_requires_scalar(g):
    a = ad.parameter(g.standard_normal(3))
    with pytest.raises(ContractError):
        ad.scale(a, 2.0).backward()
    with pytest.raises(ContractError):
        ad.sum(ad.Tensor(np.ones(3))).backward()


def test_constants_receive_no_gradient(g):
    c = ad.Tensor(g.standard_normal(3))
    a = ad.parameter(g.standard_normal(3))
    ad.sum(ad.mul(a, c)).backward()
    assert c.grad is None


def test_deep_chain_does_not_recurse():
    a = ad.parameter(np.ones(2))
    x = a
    for _ in range(5000):
        x = ad.scale(x, 1.0)
    ad.sum(x).backward()
    np.testing.assert_array_equal(a.grad, [1.0, 1.0])


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.add(np.ones((2, 3)), np.ones((3, 2)))
    with pytest.raises(ShapeError):
        ad.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_repeat_runs_bit_identical(g):
    X = g.standard_normal((4, 6))
    W0 = g.standard_normal((6, 6))

    def run():
        W = ad.parameter(W0.copy())
        loss = ad.abs_mean(ad.layer_norm(ad.matmul(X, W), np.ones(6), np.zeros(6)))
        loss.backward()
        return loss.data.tobytes(), W.grad.tobytes()

    assert run() == run()


def test_finite_after_passes(g):
    W = ad.parameter(g.standard_normal((6, 6)) * 10)
    out = ad.softmax(ad.matmul(g.uniform(-10, 10, (5, 6)), W))
    ad.sum(ad.mul(out, g.standard_normal(out.shape))).backward()
    assert np.all(np.isfinite(out.data)) and np.all(np.isfinite(W.grad))
