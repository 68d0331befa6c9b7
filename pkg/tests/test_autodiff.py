"""Gradient and contract tests for the reverse-mode engine."""

from __future__ import annotations

import numpy as np
import pytest

from doodlerank import autodiff as ad
from oracles import finite_difference_gradient, max_relative_error

GRADCHECK_TOL = 1e-4


def _leaf(rng, shape, lo=-2.0, hi=2.0):
    return ad.Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True, dtype=np.float64)


def _run_backward(build, *leaves):
    for t in leaves:
        t.zero_grad()
    with ad.Tape() as tape:
        loss = build(*leaves)
        tape.backward(loss)
    return [t.grad.copy() for t in leaves]


def _gradcheck(build, *leaves):
    """Compare tape gradients against central finite differences."""
    got = _run_backward(build, *leaves)
    for i, leaf in enumerate(leaves):
        def scalar_fn(x, i=i, leaf=leaf):
            saved = leaf.data
            leaf.data = np.asarray(x, dtype=np.float64)
            try:
                return build(*leaves).item()
            finally:
                leaf.data = saved

        want = finite_difference_gradient(scalar_fn, leaf.data)
        err = max_relative_error(got[i], want)
        assert err <= GRADCHECK_TOL, f"leaf {i}: max rel err {err:.3e}"


class TestForwardFixtures:
    def test_relu_definition(self):
        out = ad.relu(ad.Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_max_with_zero_is_relu(self):
        assert ad.max_with_zero is ad.relu

    def test_l2_norm_3_4_5(self):
        assert ad.l2_norm(ad.Tensor([3.0, 4.0])).item() == pytest.approx(5.0)

    def test_sum_of_squares_gradient(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        with ad.Tape() as tape:
            loss = ad.sum(ad.mul(x, x))
            tape.backward(loss)
        np.testing.assert_allclose(x.grad, [2.0, 4.0])

    def test_backward_sum_is_ones(self):
        x = ad.Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(ad.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones((2, 3), dtype=np.float32))

    def test_backward_mean_quarter(self):
        x = ad.Tensor(np.ones(4), requires_grad=True)
        with ad.Tape() as tape:
            tape.backward(ad.mean(x))
        np.testing.assert_allclose(x.grad, np.full(4, 0.25), rtol=1e-6)


class TestGradchecks:
    """Every primitive op against central finite differences, seeded trials."""

    @pytest.mark.parametrize("seed", range(10))
    def test_elementwise_chain(self, seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, (3, 4))
        y = _leaf(rng, (3, 4))
        _gradcheck(lambda a, b: ad.sum(ad.mul(ad.add(a, b), ad.sub(a, 0.5))), x, y)

    @pytest.mark.parametrize("seed", range(10))
    def test_div_neg(self, seed):
        rng = np.random.default_rng(seed)
        x = _leaf(rng, (2, 3))
        y = ad.Tensor(rng.uniform(0.5, 2.0, size=(2, 3)), requires_grad=True, dtype=np.float64)
        _gradcheck(lambda a, b: ad.sum(ad.div(ad.neg(a), b)), x, y)

    @pytest.mark.parametrize("seed", range(10))
    def test_relu(self, seed):
        rng = np.random.default_rng(100 + seed)
        # keep points away from the kink at 0
        data = rng.uniform(0.1, 2.0, size=(3, 3)) * rng.choice([-1.0, 1.0], size=(3, 3))
        x = ad.Tensor(data, requires_grad=True, dtype=np.float64)
        _gradcheck(lambda a: ad.sum(ad.relu(a)), x)

    @pytest.mark.parametrize("seed", range(10))
    def test_sigmoid_log(self, seed):
        rng = np.random.default_rng(200 + seed)
        x = _leaf(rng, (5,))
        _gradcheck(lambda a: ad.sum(ad.log(ad.add(ad.sigmoid(a), 0.1))), x)

    @pytest.mark.parametrize("seed", range(10))
    def test_matmul_bias(self, seed):
        rng = np.random.default_rng(300 + seed)
        a = _leaf(rng, (3, 4))
        w = _leaf(rng, (4, 2))
        b = _leaf(rng, (2,))
        _gradcheck(lambda x, y, z: ad.sum(ad.add(ad.matmul(x, y), z)), a, w, b)

    @pytest.mark.parametrize("seed", range(10))
    def test_reductions_with_axis(self, seed):
        rng = np.random.default_rng(400 + seed)
        x = _leaf(rng, (4, 3))
        _gradcheck(lambda a: ad.sum(ad.mul(ad.mean(a, axis=0), ad.sum(a, axis=0))), x)

    @pytest.mark.parametrize("seed", range(10))
    def test_l2_norm_rows(self, seed):
        rng = np.random.default_rng(500 + seed)
        x = ad.Tensor(rng.uniform(0.5, 2.0, size=(3, 4)), requires_grad=True, dtype=np.float64)
        _gradcheck(lambda a: ad.sum(ad.l2_norm(a, axis=1)), x)

    @pytest.mark.parametrize("seed", range(10))
    def test_clamp(self, seed):
        rng = np.random.default_rng(600 + seed)
        x = _leaf(rng, (6,))
        _gradcheck(lambda a: ad.sum(ad.clamp(a, -1.5, 1.5)), x)

    @pytest.mark.parametrize("seed", range(10))
    def test_concat_reshape(self, seed):
        rng = np.random.default_rng(700 + seed)
        a = _leaf(rng, (2, 3))
        b = _leaf(rng, (1, 3))
        _gradcheck(lambda x, y: ad.sum(ad.mul(c := ad.concat([x, y], axis=0), c)), a, b)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("stride,padding", [(1, "same"), (1, "valid"), (2, "same"), (2, "valid")])
    def test_conv2d(self, seed, stride, padding):
        rng = np.random.default_rng(800 + seed)
        x = _leaf(rng, (2, 2, 6, 6))
        w = _leaf(rng, (3, 2, 3, 3))
        b = _leaf(rng, (3,))
        _gradcheck(lambda i, k, c: ad.sum(ad.conv2d(i, k, c, stride=stride, padding=padding)), x, w, b)

    @pytest.mark.parametrize("seed", range(10))
    def test_maxpool2(self, seed):
        rng = np.random.default_rng(900 + seed)
        # distinct values avoid argmax ties, which are subgradient points
        data = rng.permutation(36).reshape(1, 1, 6, 6).astype(np.float64) * 0.1
        x = ad.Tensor(data, requires_grad=True, dtype=np.float64)
        _gradcheck(lambda a: ad.sum(ad.mul(ad.maxpool2(a), ad.maxpool2(a))), x)

    @pytest.mark.parametrize("seed", range(10))
    def test_scale_channels(self, seed):
        rng = np.random.default_rng(1000 + seed)
        f = _leaf(rng, (2, 3, 4, 4))
        m = _leaf(rng, (2, 1, 4, 4))
        _gradcheck(lambda a, b: ad.sum(ad.scale_channels(a, b)), f, m)


class TestGRL:
    def test_forward_identity_bit_exact(self):
        rng = np.random.default_rng(0)
        x = ad.Tensor(rng.standard_normal((4, 5)), requires_grad=True)
        out = ad.grl(x, 0.5)
        assert out.data is x.data

    def test_negative_lambda_rejected(self):
        with pytest.raises(ValueError):
            ad.grl(ad.Tensor([1.0]), -0.1)

    @pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
    def test_backward_scales_by_minus_lambda(self, lam):
        rng = np.random.default_rng(42)
        data = rng.uniform(-2, 2, size=(3, 4))

        def run(with_grl):
            x = ad.Tensor(data, requires_grad=True, dtype=np.float64)
            with ad.Tape() as tape:
                h = ad.grl(x, lam) if with_grl else x
                loss = ad.sum(ad.mul(ad.relu(h), h))
                tape.backward(loss)
            return x.grad.copy()

        got = run(True)
        plain = run(False)
        np.testing.assert_allclose(got, -lam * plain, rtol=1e-12, atol=1e-15)

    def test_lambda_zero_freezes_upstream(self):
        x = ad.Tensor([1.0, -2.0], requires_grad=True, dtype=np.float64)
        with ad.Tape() as tape:
            tape.backward(ad.sum(ad.grl(x, 0.0)))
        np.testing.assert_array_equal(x.grad, [0.0, 0.0])

    def test_upstream_grad_negated_at_lambda_one(self):
        x = ad.Tensor([3.0, 4.0], requires_grad=True, dtype=np.float64)
        with ad.Tape() as tape:
            tape.backward(ad.sum(ad.grl(x, 1.0)))
        np.testing.assert_array_equal(x.grad, [-1.0, -1.0])


class TestTapeContracts:
    def test_two_branch_accumulation(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True, dtype=np.float64)
        with ad.Tape() as tape:
            y = ad.mul(x, 2.0)
            z = ad.mul(x, 3.0)
            tape.backward(ad.sum(ad.add(y, z)))
        np.testing.assert_allclose(x.grad, [5.0, 5.0])

        # each branch alone contributes its own share
        for factor, want in ((2.0, 2.0), (3.0, 3.0)):
            x.zero_grad()
            with ad.Tape() as tape:
                tape.backward(ad.sum(ad.mul(x, factor)))
            np.testing.assert_allclose(x.grad, [want, want])

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        with ad.Tape() as tape:
            y = ad.mul(x, 2.0)
            with pytest.raises(ad.GradientStateError):
                tape.backward(y)

    def test_double_backward_rejected(self):
        x = ad.Tensor([1.0], requires_grad=True)
        with ad.Tape() as tape:
            loss = ad.sum(x)
            tape.backward(loss)
            with pytest.raises(ad.GradientStateError):
                tape.backward(loss)

    def test_constant_loss_not_on_tape(self):
        with pytest.raises(ad.GradientStateError):
            ad.backward(ad.Tensor(1.0))

    def test_shape_mismatch_names_both_shapes(self):
        a = ad.Tensor(np.ones((2, 3)))
        b = ad.Tensor(np.ones((4, 5)))
        with pytest.raises(ad.ShapeError) as exc:
            ad.add(a, b)
        assert "(2, 3)" in str(exc.value) and "(4, 5)" in str(exc.value)

    def test_log_of_zero_is_numeric_error(self):
        with pytest.raises(ad.NumericError):
            ad.log(ad.Tensor([0.0]))

    def test_div_by_zero_is_numeric_error(self):
        with pytest.raises(ad.NumericError):
            ad.div(ad.Tensor([1.0]), ad.Tensor([0.0]))

    def test_no_recording_without_tape(self):
        x = ad.Tensor([1.0], requires_grad=True)
        out = ad.relu(x)
        assert out._tape is None
