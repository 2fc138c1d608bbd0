import numpy as np
import pytest

from cmm import numerics as nm
from cmm.numerics import GraphError, Parameter, ShapeError, Tensor


def grad_of(loss, param):
    param.tensor.zero_grad()
    nm.backward(loss)
    return param.grad.copy()


class TestMatmul:
    def test_identity(self):
        a = Tensor(np.arange(6.0).reshape(2, 3))
        out = nm.matmul(a, Tensor(np.eye(3)))
        np.testing.assert_array_equal(out.data, a.data)

    def test_hand_product(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor(2.0 * np.eye(2))
        np.testing.assert_array_equal(nm.matmul(a, b).data, [[2.0, 4.0], [6.0, 8.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ShapeError, match="2, 3"):
            nm.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))

    def test_batched_broadcast_adjoint(self):
        p = Parameter("w", np.random.default_rng(0).normal(size=(3, 2)))
        batch = Tensor(np.random.default_rng(1).normal(size=(4, 2, 3)))
        loss = nm.sum_(nm.matmul(batch, p.tensor))
        err = nm.finite_diff_check(lambda: nm.sum_(nm.matmul(batch, p.tensor)), [p])
        assert err < 1e-6
        assert loss.data.shape == ()


class TestMaskedSoftmax:
    def test_symmetric_logits(self):
        out = nm.masked_softmax(Tensor([[0.0, 0.0]]), np.ones((1, 2), dtype=bool))
        np.testing.assert_allclose(out.data, [[0.5, 0.5]])

    def test_blocked_entry(self):
        # softmax over the first two of [1, 2, 3], third blocked
        out = nm.masked_softmax(Tensor([[1.0, 2.0, 3.0]]), np.array([[True, True, False]]))
        e1, e2 = np.exp(1.0), np.exp(2.0)
        np.testing.assert_allclose(out.data, [[e1 / (e1 + e2), e2 / (e1 + e2), 0.0]], atol=1e-12)
        assert out.data[0, 2] == 0.0

    def test_single_allowed(self):
        out = nm.masked_softmax(Tensor([[5.0, -1.0]]), np.array([[False, True]]))
        np.testing.assert_array_equal(out.data, [[0.0, 1.0]])

    def test_fully_blocked_row_raises(self):
        with pytest.raises(GraphError, match="blocked"):
            nm.masked_softmax(Tensor([[1.0, 2.0]]), np.zeros((1, 2), dtype=bool))

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(7)
        logits = Tensor(rng.normal(size=(5, 9)))
        mask = rng.random((5, 9)) > 0.4
        mask[:, 0] = True
        out = nm.masked_softmax(logits, mask)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)
        assert (out.data[~np.broadcast_to(mask, out.data.shape)] == 0.0).all()


class TestBackward:
    def test_sum_of_squares(self):
        p = Parameter("p", [1.0, 2.0])
        loss = nm.sum_(p.tensor * p.tensor)
        np.testing.assert_allclose(grad_of(loss, p), [2.0, 4.0])

    def test_unreached_parameter_keeps_zero_grad(self):
        p = Parameter("p", [1.0, 2.0])
        q = Parameter("q", [3.0])
        loss = nm.sum_(p.tensor * p.tensor)
        nm.backward(loss)
        np.testing.assert_array_equal(q.grad, [0.0])

    def test_double_backward_doubles(self):
        p = Parameter("p", [1.0, 2.0])
        loss = nm.sum_(p.tensor * p.tensor)
        nm.backward(loss)
        first = p.grad.copy()
        nm.backward(loss)
        np.testing.assert_allclose(p.grad, 2.0 * first)

    def test_non_scalar_loss_rejected(self):
        p = Parameter("p", [1.0, 2.0])
        with pytest.raises(GraphError, match="scalar"):
            nm.backward(p.tensor * p.tensor)


class TestFiniteDiff:
    def test_quadratic_is_exact(self):
        p = Parameter("p", np.array([0.3, -1.2, 2.0]))
        err = nm.finite_diff_check(lambda: nm.sum_(p.tensor * p.tensor), [p], eps=1e-5)
        assert err <= 1e-9

    def test_sigmoid_chain(self):
        p = Parameter("p", np.array([[0.2, -0.4], [1.0, 0.5]]))
        err = nm.finite_diff_check(lambda: nm.sum_(nm.sigmoid(p.tensor @ p.tensor)), [p], eps=1e-5)
        assert err <= 1e-6

    def test_detects_corrupted_adjoint(self, monkeypatch):
        real = nm.sigmoid

        def broken(a):
            out = real(a)
            orig = out._backward

            def bw(g):
                orig(g * 1.5)  # deliberately wrong scale

            out._backward = bw
            return out

        monkeypatch.setattr(nm, "sigmoid", broken)
        p = Parameter("p", np.array([0.3, 0.7]))
        err = nm.finite_diff_check(lambda: nm.sum_(nm.sigmoid(p.tensor)), [p], eps=1e-5)
        assert err > 1e-2

    def test_eps_validated(self):
        p = Parameter("p", [1.0])
        with pytest.raises(ValueError):
            nm.finite_diff_check(lambda: nm.sum_(p.tensor), [p], eps=1.0)

    def test_subsampled_coordinates(self):
        # 900-term sums leave ~1e-7 of cancellation noise in the oracle itself
        p = Parameter("p", np.random.default_rng(0).normal(size=(30, 30)))
        err = nm.finite_diff_check(
            lambda: nm.sum_(p.tensor * p.tensor), [p], eps=1e-5, max_coords=200
        )
        assert err <= 1e-5


def _primitive_cases(rng):
    """(name, params, loss_fn) triples over random small shapes.

    Weight constants are drawn once so each loss_fn is deterministic
    across the repeated evaluations finite differencing needs.
    """
    a = Parameter("a", rng.normal(size=(3, 4)))
    b = Parameter("b", rng.normal(size=(3, 4)))
    m1 = Parameter("m1", rng.normal(size=(3, 4)))
    m2 = Parameter("m2", rng.normal(size=(4, 2)))
    mask = rng.random((3, 4)) > 0.3
    mask[:, 0] = True
    idx = rng.integers(0, 3, size=5)
    col = rng.integers(0, 4, size=3)
    w_row = Tensor(rng.normal(size=(4,)))
    w_26 = Tensor(rng.normal(size=(2, 6)))
    w_38 = Tensor(rng.normal(size=(3, 8)))
    w_54 = Tensor(rng.normal(size=(5, 4)))
    w_3 = Tensor(rng.normal(size=(3,)))
    w_34 = Tensor(rng.normal(size=(3, 4)))

    return [
        ("add", [a, b], lambda: nm.sum_(a.tensor + b.tensor)),
        ("sub", [a, b], lambda: nm.sum_(a.tensor - b.tensor)),
        ("mul", [a, b], lambda: nm.sum_(a.tensor * b.tensor)),
        ("mul_broadcast", [a], lambda: nm.sum_(a.tensor * w_row)),
        ("mul_scalar", [a], lambda: nm.sum_(nm.mul_scalar(a.tensor, -2.5))),
        ("matmul", [m1, m2], lambda: nm.sum_(m1.tensor @ m2.tensor)),
        ("transpose", [a], lambda: nm.sum_(nm.transpose(a.tensor, (1, 0)) @ a.tensor)),
        ("reshape", [a], lambda: nm.sum_(nm.reshape(a.tensor, (2, 6)) * w_26)),
        ("concat", [a, b], lambda: nm.sum_(nm.concat([a.tensor, b.tensor], axis=1) * w_38)),
        ("gather_rows", [a], lambda: nm.sum_(nm.gather_rows(a.tensor, idx) * w_54)),
        ("take_per_row", [a], lambda: nm.sum_(nm.take_per_row(a.tensor, col))),
        ("sum_axis", [a], lambda: nm.sum_(nm.sum_(a.tensor, axis=1) * w_3)),
        ("mean", [a], lambda: nm.mean(a.tensor)),
        ("relu", [a], lambda: nm.sum_(nm.relu(a.tensor) * w_34)),
        ("sigmoid", [a], lambda: nm.sum_(nm.sigmoid(a.tensor))),
        ("exp", [a], lambda: nm.sum_(nm.exp(nm.mul_scalar(a.tensor, 0.3)))),
        ("log", [a], lambda: nm.sum_(nm.log(nm.sigmoid(a.tensor)))),
        ("masked_softmax", [a], lambda: nm.sum_(nm.masked_softmax(a.tensor, mask) * w_34)),
        ("layer_norm", [a], lambda: nm.sum_(nm.layer_norm(a.tensor) * w_34)),
        ("dropout", [a], lambda: nm.sum_(nm.dropout(a.tensor, 0.4, np.random.default_rng(11), True))),
        ("cosine_rows", [a, b], lambda: nm.sum_(nm.cosine_rows(a.tensor, b.tensor))),
    ]


def test_every_primitive_adjoint_100_seeds():
    """Central-difference oracle over each primitive on random small shapes."""
    worst = {}
    for seed in range(100):
        rng = np.random.default_rng(seed)
        for name, params, loss_fn in _primitive_cases(rng):
            err = nm.finite_diff_check(loss_fn, params, eps=1e-5)
            worst[name] = max(worst.get(name, 0.0), err)
    bad = {k: v for k, v in worst.items() if v > 1e-6}
    assert not bad, f"adjoints over tolerance: {bad}"


class TestLayerNorm:
    def test_zero_mean_unit_variance(self):
        rng = np.random.default_rng(3)
        x = Tensor(rng.normal(0.0, 10.0, size=(20, 16)))
        y = nm.layer_norm(x).data
        assert np.abs(y.mean(axis=-1)).max() <= 1e-9
        assert np.abs(y.var(axis=-1) - 1.0).max() <= 1e-6

    def test_constant_rows_map_to_zero(self):
        x = Tensor(np.full((3, 8), 4.2))
        np.testing.assert_array_equal(nm.layer_norm(x).data, np.zeros((3, 8)))


class TestDeterminism:
    def test_bit_identical_forward_and_grad(self):
        def run():
            rng = np.random.default_rng(42)
            p = Parameter("p", rng.normal(size=(6, 6)))
            x = Tensor(rng.normal(size=(4, 6)))
            h = nm.relu(x @ p.tensor)
            loss = nm.sum_(nm.layer_norm(h) * h)
            nm.backward(loss)
            return loss.data.tobytes(), p.grad.tobytes()

        assert run() == run()


def test_dropout_off_is_identity_and_consumes_no_rng():
    rng = np.random.default_rng(0)
    before = rng.bit_generator.state["state"]["state"]
    x = Tensor(np.ones((2, 2)))
    out = nm.dropout(x, 0.0, rng, True)
    assert out is x
    assert rng.bit_generator.state["state"]["state"] == before


def test_sinusoidal_positions_shape_and_range():
    table = nm.sinusoidal_positions(10, 8)
    assert table.shape == (10, 8)
    assert np.abs(table).max() <= 1.0
    assert table[0, 0] == 0.0 and table[0, 1] == 1.0
