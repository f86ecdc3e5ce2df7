import io

import numpy as np
import pytest

from promptseg import autodiff as ad
from promptseg.autodiff import (
    GraphError,
    ShapeError,
    Tensor,
    backward,
    finite_diff_check,
    parameter,
    softmax_rows,
    zero_grad,
)


def test_matmul_identity():
    x = np.random.default_rng(0).normal(size=(2, 5))
    out = ad.matmul(Tensor(np.eye(2)), Tensor(x))
    np.testing.assert_array_equal(out.data, x)


def test_matmul_hand_values():
    a = Tensor([[1.0, 2.0], [3.0, 4.0]])
    b = Tensor([[5.0], [6.0]])
    out = ad.matmul(a, b)
    np.testing.assert_array_equal(out.data, [[17.0], [39.0]])


def test_matmul_shape_mismatch_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 3))))


def test_matmul_gradient_matches_finite_differences():
    rng = np.random.default_rng(7)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4, 2)))
    w = Tensor(rng.normal(size=(3, 2)))  # fixed weights make the loss non-trivial

    def loss():
        return (ad.matmul(a, b) * w).sum()

    assert finite_diff_check(loss, [a, b], step=1e-5) < 1e-6


def test_softmax_uniform_on_zero_row():
    out = softmax_rows(Tensor(np.zeros((1, 4))))
    np.testing.assert_allclose(out.data, [[0.25, 0.25, 0.25, 0.25]], atol=1e-15)


def test_softmax_stabilized_against_overflow():
    out = softmax_rows(Tensor([[1000.0, 1000.0]]))
    assert np.all(np.isfinite(out.data))
    np.testing.assert_allclose(out.data, [[0.5, 0.5]], atol=1e-15)


def test_softmax_closed_form_row():
    out = softmax_rows(Tensor([[0.0, np.log(3.0)]]))
    np.testing.assert_allclose(out.data, [[0.25, 0.75]], atol=1e-12)


@pytest.mark.parametrize("seed", range(25))
def test_softmax_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(scale=5.0, size=(6, 9))
    out = softmax_rows(Tensor(x))
    np.testing.assert_allclose(out.data.sum(axis=1), np.ones(6), atol=1e-12)
    assert np.all(out.data >= 0.0)


def test_backward_sum_gives_ones():
    x = parameter(np.arange(6.0).reshape(2, 3))
    zero_grad([x])
    backward(x.sum())
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))


def test_backward_half_square_gives_identity():
    x = parameter(np.arange(6.0).reshape(2, 3))
    zero_grad([x])
    backward((x * x).sum() * 0.5)
    np.testing.assert_array_equal(x.grad, x.data)


def test_backward_rejects_non_scalar_loss():
    x = parameter(np.ones((2, 2)))
    with pytest.raises(GraphError):
        backward(x * 2.0)


def test_unused_leaf_gets_exact_zero_gradient():
    x = parameter(np.ones((3, 3)))
    unused = parameter(np.ones((2, 2)))
    zero_grad([x, unused])
    backward((x * x).sum())
    assert unused.grad is not None
    np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))


def test_gradient_does_not_flow_into_frozen_leaf():
    frozen = Tensor(np.ones((2, 2)), requires_grad=False)
    live = parameter(np.ones((2, 2)))
    zero_grad([live])
    backward((ad.matmul(frozen, live)).sum())
    assert frozen.grad is None
    assert np.any(live.grad != 0.0)


def test_quadratic_form_finite_difference_is_tight():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(4, 4))
    q = q + q.T
    x = parameter(rng.normal(size=(4, 1)))

    def loss():
        return (ad.matmul(ad.matmul(x.T, Tensor(q)), x)).sum() * 0.5

    assert finite_diff_check(loss, [x], step=1e-5) < 1e-9


def test_softmax_cross_entropy_composite_gradient():
    rng = np.random.default_rng(11)
    logits = parameter(rng.normal(size=(5, 3)))
    onehot = np.zeros((5, 3))
    onehot[np.arange(5), rng.integers(0, 3, size=5)] = 1.0

    def loss():
        p = softmax_rows(logits)
        return -(Tensor(onehot) * ad.log(ad.maximum_scalar(p, 1e-8))).sum() * (1.0 / 5.0)

    assert finite_diff_check(loss, [logits], step=1e-5) < 1e-6


def _random_composite(seed):
    """A scalar function exercising every differentiable primitive."""
    rng = np.random.default_rng(seed)
    a = parameter(rng.normal(size=(3, 4)))
    b = parameter(rng.normal(size=(4, 3)))
    c = parameter(rng.normal(size=(1, 3)))

    def loss():
        h = ad.matmul(a, b) + c  # broadcast add
        h = softmax_rows(h) * 3.0 + ad.softplus(h) - h * 0.25
        h = ad.concat_rows(h, ad.rows(h, 0, 2))
        h = h / ad.sqrt(ad.maximum_scalar((h * h).mean(axis=1, keepdims=True), 1e-6) + 1.0)
        h = ad.exp(h * 0.1) + ad.log(ad.maximum_scalar(h * h + 0.5, 1e-8))
        return (h.T.reshape(3, 5) * 0.5).sum() + (h.mean() - h.sum(axis=0)).sum()

    return loss, [a, b, c]


@pytest.mark.parametrize("seed", range(20))
def test_primitive_gradients_property(seed):
    loss, params = _random_composite(seed)
    assert finite_diff_check(loss, params, step=1e-5) < 1e-5


def test_shared_leaf_accumulates_both_paths():
    w = parameter(np.array([[2.0]]))
    zero_grad([w])
    backward((w * 3.0 + w * w).sum())  # d/dw = 3 + 2w = 7
    np.testing.assert_allclose(w.grad, [[7.0]])


def test_detach_blocks_gradient():
    x = parameter(np.ones((2, 2)) * 2.0)
    zero_grad([x])
    backward((x.detach() * x).sum())  # detached factor is a constant
    np.testing.assert_array_equal(x.grad, np.full((2, 2), 2.0))


def test_ops_on_finite_inputs_stay_finite():
    rng = np.random.default_rng(5)
    x = Tensor(rng.normal(scale=50.0, size=(4, 4)))
    for out in [
        softmax_rows(x),
        ad.softplus(x),
        ad.relu(x),
        ad.exp(x * 0.01),
        ad.log(ad.maximum_scalar(x, 1e-8)),
        ad.sqrt(ad.maximum_scalar(x, 0.0) + 1e-8),
    ]:
        assert np.all(np.isfinite(out.data))


# -- serialization ------------------------------------------------------------


def test_record_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(9)
    arr = rng.normal(size=(3, 5, 2))
    buf = io.BytesIO()
    ad.write_record(buf, arr)
    buf.seek(0)
    back = ad.read_record(buf)
    assert back.shape == arr.shape
    assert back.tobytes() == arr.tobytes()


def test_record_layout_is_little_endian_with_magic():
    buf = io.BytesIO()
    ad.write_record(buf, np.array([[1.0, 2.0]]))
    raw = buf.getvalue()
    assert raw[:4] == b"DT64"
    assert raw[4:8] == (2).to_bytes(4, "little")  # rank
    assert raw[8:16] == (1).to_bytes(8, "little")  # extent 0
    assert raw[16:24] == (2).to_bytes(8, "little")  # extent 1
    assert np.frombuffer(raw[24:], dtype="<f8").tolist() == [1.0, 2.0]


def test_archive_round_trip(tmp_path):
    rng = np.random.default_rng(21)
    tensors = {"a.w": rng.normal(size=(2, 2)), "b": rng.normal(size=(5,))}
    manifest = {"kind": "test", "flags": {"x": 1}}
    path = tmp_path / "arch.bin"
    ad.save_archive(path, tensors, manifest)
    loaded, mf = ad.load_archive(path)
    assert mf == manifest
    assert set(loaded) == {"a.w", "b"}
    for k in tensors:
        assert loaded[k].tobytes() == tensors[k].tobytes()
