import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cumix.numerics import (
    DimensionError,
    affine_backward,
    affine_forward,
    relu,
    relu_backward,
    soft_cross_entropy,
    soft_cross_entropy_mean,
    softmax_rows,
)
from oracles import central_differences, gradient_mismatches


def test_affine_forward_examples():
    np.testing.assert_array_equal(affine_forward([[1, 2]], [[1, 0], [0, 1]], [0, 0]), [[1, 2]])
    np.testing.assert_array_equal(affine_forward([[1, 2]], [[0, 0], [0, 0]], [3, 4]), [[3, 4]])
    np.testing.assert_array_equal(affine_forward([[1, 2], [3, 4]], [[1], [1]], [1]), [[4], [8]])


def test_affine_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(1, 3\).*\(2, 2\)"):
        affine_forward([[1, 2, 3]], np.eye(2), [0, 0])


def test_affine_backward_examples():
    gi, gw, gb = affine_backward(np.ones((3, 2)), np.ones((2, 4)), np.zeros((3, 4)))
    assert not gi.any() and not gw.any() and not gb.any()
    gi, gw, gb = affine_backward([[2.0]], [[3.0]], [[1.0]])
    assert gw.tolist() == [[2.0]] and gi.tolist() == [[3.0]] and gb.tolist() == [1.0]


def test_affine_backward_matches_finite_differences():
    rng = np.random.default_rng(7)
    t = {"x": rng.standard_normal((4, 8)), "w": rng.standard_normal((8, 3)), "b": rng.standard_normal(3)}
    probe = rng.standard_normal((4, 3))

    def scalar():
        return float((affine_forward(t["x"], t["w"], t["b"]) * probe).sum())

    num = central_differences(scalar, t, ["x", "w", "b"])
    gi, gw, gb = affine_backward(t["x"], t["w"], probe)
    for name, ana in (("x", gi), ("w", gw), ("b", gb)):
        rel = np.abs(ana - num[name]).max() / np.abs(num[name]).max()
        assert rel < 1e-6, name


def test_relu_examples():
    assert relu([-1, 0, 2]).tolist() == [0, 0, 2]
    assert relu_backward([-1, 0, 2], [5, 5, 5]).tolist() == [0, 0, 5]
    x = np.array([0.5, 1.0, 3.0])
    np.testing.assert_array_equal(relu(x), x)


def test_softmax_examples():
    np.testing.assert_allclose(softmax_rows([[0, 0, 0, 0]]), [[0.25] * 4])
    out = softmax_rows([[1000.0, 0.0]])
    assert np.all(np.isfinite(out)) and out[0, 0] == 1.0 and out[0, 1] == 0.0
    np.testing.assert_allclose(softmax_rows([[math.log(2), math.log(1)]]), [[2 / 3, 1 / 3]], rtol=1e-15)


@settings(max_examples=200, deadline=None)
@given(arrays(np.float64, (3, 5), elements=st.floats(-1e6, 1e6)))
def test_softmax_rows_sum_to_one(x):
    np.testing.assert_allclose(softmax_rows(x).sum(axis=1), 1.0, atol=1e-9)


def test_soft_cross_entropy_examples():
    for target in ([1, 0, 0, 0], [0.25] * 4, [0.1, 0.2, 0.3, 0.4]):
        loss, _ = soft_cross_entropy([0, 0, 0, 0], target)
        assert loss == pytest.approx(math.log(4), abs=1e-12)
    logits = np.array([0.3, -1.2, 2.0])
    t = softmax_rows(logits)
    loss, grad = soft_cross_entropy(logits, t)
    assert loss == pytest.approx(-(t * np.log(t)).sum(), abs=1e-12)
    np.testing.assert_allclose(grad, 0.0, atol=1e-15)
    # -log(sigmoid(10)) = log(1 + e^-10), evaluated independently
    loss, _ = soft_cross_entropy([10.0, 0.0], [1.0, 0.0])
    assert loss == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-12)
    assert loss == pytest.approx(4.54e-5, rel=1e-3)


def test_soft_cross_entropy_rejects_unnormalized_target():
    with pytest.raises(ValueError):
        soft_cross_entropy([0.0, 0.0], [0.7, 0.7])
    with pytest.raises(ValueError):
        soft_cross_entropy([0.0, 0.0], [1.5, -0.5])


@settings(max_examples=200, deadline=None)
@given(
    arrays(np.float64, 4, elements=st.floats(-30, 30)),
    arrays(np.float64, 4, elements=st.floats(0.0, 1.0)),
)
def test_gibbs_inequality(logits, raw):
    if raw.sum() < 1e-3:
        raw = raw + 0.25
    t = raw / raw.sum()
    loss, _ = soft_cross_entropy(logits, t)
    nz = t[t > 0]
    entropy = -(nz * np.log(nz)).sum()
    assert loss >= entropy - 1e-9


def test_batch_mean_matches_rowwise():
    rng = np.random.default_rng(3)
    z = rng.standard_normal((5, 4))
    t = softmax_rows(rng.standard_normal((5, 4)))
    loss, grad = soft_cross_entropy_mean(z, t)
    rows = [soft_cross_entropy(z[i], t[i]) for i in range(5)]
    assert loss == pytest.approx(sum(r[0] for r in rows) / 5, abs=1e-14)
    np.testing.assert_allclose(grad, np.stack([r[1] for r in rows]) / 5, atol=1e-15)


def test_operations_are_pure():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((3, 4))
    x0 = x.copy()
    a = softmax_rows(x)
    b = softmax_rows(x)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(x, x0)
