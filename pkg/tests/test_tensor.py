"""Autodiff core: forward values, backward rules vs central differences."""

import numpy as np
import pytest

from recurlm import tensor as T
from recurlm.tensor import Tensor, cross_entropy, grad_check, no_grad

RNG = np.random.default_rng(0)


def rand(*shape, scale=1.0):
    return Tensor(RNG.normal(size=shape) * scale, requires_grad=True)


def fd_check(fn, tensors, step=1e-6, tol=1e-6):
    """Central-difference oracle for a scalar-valued fn of the given tensors."""
    for t in tensors:
        t.zero_grad()
    loss = fn()
    loss.backward()
    for t in tensors:
        ad = t.grad.copy()
        fd = np.zeros_like(t.data)
        with no_grad():
            for ix in np.ndindex(t.data.shape):
                orig = t.data[ix]
                t.data[ix] = orig + step
                up = fn().item()
                t.data[ix] = orig - step
                down = fn().item()
                t.data[ix] = orig
                fd[ix] = (up - down) / (2 * step)
        denom = np.maximum(np.maximum(np.abs(ad), np.abs(fd)), 1e-4)
        assert np.max(np.abs(ad - fd) / denom) < tol, f"{fn} grad mismatch"


def test_sigmoid_at_zero():
    assert T.sigmoid(Tensor(0.0)).item() == pytest.approx(0.5)


def test_matmul_identity():
    a = RNG.normal(size=(3, 3))
    out = Tensor(np.eye(3)) @ Tensor(a)
    np.testing.assert_allclose(out.data, a)


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
        Tensor(np.zeros((2, 3))) @ Tensor(np.zeros((2, 3)))


def test_square_derivative():
    x = Tensor(3.0, requires_grad=True)
    T.square(x).backward()
    assert x.grad == pytest.approx(6.0)


def test_log_sqrt_domain_errors():
    with pytest.raises(ValueError, match="log"):
        T.log(Tensor([-1.0]))
    with pytest.raises(ValueError, match="sqrt"):
        T.sqrt(Tensor([-1.0]))


def test_linear_map_gradient():
    w = rand(4, 3)
    x = Tensor(np.ones((3, 1)))
    (w @ x).sum().backward()
    np.testing.assert_allclose(w.grad, np.ones((4, 3)))


def test_backward_accumulates_across_recorded_forwards():
    w = rand(5)
    loss = (w * 2.0).sum() + T.square(w).sum()
    loss.backward()
    np.testing.assert_allclose(w.grad, 2.0 + 2.0 * w.data)

    # two separate backwards accumulate identically
    w2 = Tensor(w.data.copy(), requires_grad=True)
    (w2 * 2.0).sum().backward()
    T.square(w2).sum().backward()
    np.testing.assert_allclose(w2.grad, w.grad)


def test_diamond_graph_accumulation():
    x = rand(3)
    y = x * 2.0
    loss = (y * x).sum()  # d/dx (2x^2) = 4x
    loss.backward()
    np.testing.assert_allclose(x.grad, 4.0 * x.data)


@pytest.mark.parametrize(
    "name,builder",
    [
        ("add_broadcast", lambda a, b: (a + b).sum()),
        ("mul_broadcast", lambda a, b: (a * b).mean()),
        ("div", lambda a, b: (a / (b * b + 1.0)).sum()),
        ("sub", lambda a, b: (a - b).sum()),
    ],
)
def test_elementwise_grads(name, builder):
    a = rand(4, 5)
    b = rand(5)  # broadcast over leading dim
    fd_check(lambda: builder(a, b), [a, b])


@pytest.mark.parametrize(
    "name,fn",
    [
        ("sigmoid", lambda x: T.sigmoid(x).sum()),
        ("tanh", lambda x: T.tanh(x).sum()),
        ("exp", lambda x: T.exp(x).sum()),
        ("square", lambda x: T.square(x).sum()),
        ("relu", lambda x: T.relu(x).sum()),
        ("softmax", lambda x: (T.softmax(x) * T.softmax(x)).sum()),
        ("mean_axis", lambda x: T.tmean(x, axis=1).sum()),
        ("max_axis", lambda x: T.tmax(x, axis=0).sum()),
        ("reshape_transpose", lambda x: (x.reshape(5, 4).transpose() * 2.0).sum()),
        ("pow", lambda x: (x**3).sum()),
    ],
)
def test_unary_grads(name, fn):
    x = rand(4, 5)
    fd_check(lambda: fn(x), [x])


def test_log_sqrt_grads_positive_domain():
    x = Tensor(RNG.uniform(0.5, 2.0, size=(4, 5)), requires_grad=True)
    fd_check(lambda: T.log(x).sum(), [x])
    fd_check(lambda: T.sqrt(x).sum(), [x])


def test_matmul_batched_grads():
    a = rand(2, 3, 4)
    b = rand(4, 5)
    fd_check(lambda: (a @ b).sum(), [a, b])
    c = rand(2, 1, 5, 3)
    d = rand(2, 4, 3, 2)  # broadcast over axis 1
    fd_check(lambda: (c @ d).sum(), [c, d])


def test_concat_index_take_grads():
    a = rand(3, 4)
    b = rand(2, 4)
    fd_check(lambda: (T.concat([a, b], axis=0)[1:4] * 3.0).sum(), [a, b])

    e = rand(6, 4)
    ids = np.array([[0, 2], [5, 2]])
    fd_check(lambda: T.take(e, ids, axis=0).sum(), [e])  # repeated index accumulates

    f = rand(2, 6, 3)
    fd_check(lambda: T.take(f, np.array([4, 1]), axis=1).sum(), [f])


def test_index_rejects_arrays():
    with pytest.raises(TypeError, match="take"):
        rand(4)[np.array([0, 1])]


def test_scatter_rows_values_and_grads():
    base = rand(2, 5, 3)
    rows = rand(2, 2, 3)
    idx = np.array([1, 4])
    out = T.scatter_rows(base, rows, idx, axis=1)
    np.testing.assert_allclose(out.data[:, idx], rows.data)
    np.testing.assert_allclose(out.data[:, [0, 2, 3]], base.data[:, [0, 2, 3]])
    fd_check(lambda: (T.scatter_rows(base, rows, idx, axis=1) ** 2).sum(), [base, rows])


def test_scatter_rows_rejects_duplicate_index():
    with pytest.raises(ValueError, match="unique"):
        T.scatter_rows(rand(1, 4, 2), rand(1, 2, 2), np.array([1, 1]))


def test_softmax_rows_sum_to_one():
    x = rand(6, 9)
    s = T.softmax(x).data
    np.testing.assert_allclose(s.sum(-1), np.ones(6), atol=1e-12)


def test_cross_entropy_matches_manual_and_grads():
    logits = rand(4, 7, scale=2.0)
    targets = RNG.integers(0, 7, size=4)
    ce = cross_entropy(logits, targets, reduction="none")
    probs = np.exp(logits.data) / np.exp(logits.data).sum(-1, keepdims=True)
    np.testing.assert_allclose(ce.data, -np.log(probs[np.arange(4), targets]), atol=1e-12)
    fd_check(lambda: cross_entropy(logits, targets, reduction="mean"), [logits], step=1e-5)
    fd_check(lambda: (cross_entropy(logits, targets, reduction="none") * 2.0).sum(), [logits], step=1e-5)


def test_cross_entropy_target_out_of_range():
    with pytest.raises(ValueError, match="out of range"):
        cross_entropy(rand(3, 4), np.array([0, 4, 1]))


def test_backward_requires_scalar():
    with pytest.raises(ValueError, match="scalar"):
        rand(3).backward()


def test_no_grad_records_nothing():
    x = rand(3)
    with no_grad():
        y = T.square(x).sum()
    assert not y.requires_grad
    assert y._parents == ()


def test_determinism():
    a = np.random.default_rng(7).normal(size=(8, 8))
    r1 = T.softmax(Tensor(a) @ Tensor(a.T)).data
    r2 = T.softmax(Tensor(a) @ Tensor(a.T)).data
    assert np.array_equal(r1, r2)


def test_float32_paths_stay_float32():
    x = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    y = ((x * 2.0 + 1.0) @ x).sum()
    assert y.dtype == np.float32
    y.backward()
    assert x.grad.dtype == np.float32


def test_grad_check_simple_cases():
    w = Tensor(2.0, requires_grad=True)
    rep = grad_check(lambda: T.square(w), {"w": w}, step=1e-4)
    assert rep.passed and rep.per_param["w"] < 1e-6

    c = Tensor(1.5, requires_grad=True)
    rep = grad_check(lambda: Tensor(3.0) * 1.0 + c * 0.0, {"c": c}, step=1e-4)
    assert rep.per_param["c"] == 0.0


def test_grad_check_catches_wrong_gradient():
    w = Tensor(np.array([1.0, 2.0]), requires_grad=True)

    def f():
        # deliberately corrupt gradient flow by detaching one path
        return (w * w.detach()).sum()

    rep = grad_check(f, {"w": w}, step=1e-4, tol=1e-3)
    assert not rep.passed
