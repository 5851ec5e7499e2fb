import io

import numpy as np
import pytest
from scipy import special as sp

from etcseg.autodiff import Tensor, grad_check, nn_ops, no_grad, ops, special
from etcseg.autodiff.tensor import make_result
from etcseg.autodiff.serialization import (
    MAGIC,
    encode_tensor,
    load_tensor,
    read_tensor,
    save_tensor,
)
from etcseg.errors import DimensionError, DomainError, FormatError, NumericError, UsageError

TOL = 1e-4


def leaf(rng, shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


class TestTensor:
    def test_backward_accumulates_through_shared_nodes(self):
        x = Tensor([2.0, 3.0], requires_grad=True)
        y = ops.sum(ops.mul(x, x))
        y.backward()
        np.testing.assert_allclose(x.grad, [4.0, 6.0])

    def test_fan_out_matches_scaling(self):
        x = Tensor([1.5, -2.0], requires_grad=True)
        ops.sum(ops.add(x, x)).backward()
        z = Tensor([1.5, -2.0], requires_grad=True)
        ops.sum(ops.mul(z, 2.0)).backward()
        np.testing.assert_array_equal(x.grad, z.grad)

    def test_backward_needs_scalar_without_seed(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(UsageError):
            ops.mul(x, 2.0).backward()

    def test_item_rejects_multi_element(self):
        with pytest.raises(UsageError):
            Tensor([1.0, 2.0]).item()

    def test_no_grad_skips_graph(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = ops.mul(x, 3.0)
        assert not y.requires_grad
        assert ops.mul(x, 3.0).requires_grad

    def test_constant_parent_gets_no_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        c = Tensor([5.0, 7.0])
        ops.sum(ops.mul(x, c)).backward()
        assert c.grad is None
        np.testing.assert_allclose(x.grad, [5.0, 7.0])

    def test_operator_sugar(self):
        x = Tensor(2.0, requires_grad=True)
        y = (3.0 * x - 1.0) / x + x ** 2.0
        y.backward()
        # d/dx (3 - 1/x + x^2) = 1/x^2 + 2x
        assert x.grad == pytest.approx(0.25 + 4.0)


class TestOpsErrors:
    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            ops.add(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 2))))

    def test_log_of_zero(self):
        with pytest.raises(DomainError):
            ops.log(Tensor([1.0, 0.0]))

    def test_div_by_zero(self):
        with pytest.raises(DomainError):
            ops.div(Tensor([1.0]), Tensor([0.0]))

    def test_non_finite_output_is_numeric_error(self):
        with pytest.raises(NumericError):
            ops.exp(Tensor([1000.0]))

    def test_broadcast_rank_mismatch(self):
        with pytest.raises(DimensionError):
            ops.broadcast_to(Tensor(np.ones(3)), (2, 3))

    def test_digamma_domain(self):
        with pytest.raises(DomainError):
            special.digamma(Tensor([0.0]))
        with pytest.raises(DomainError):
            special.lgamma_values(np.array([-1.0]))


class TestGradients:
    def test_elementwise(self, rng):
        a, b = leaf(rng, (3, 4)), leaf(rng, (3, 4), 0.5, 2.0)
        f = lambda a, b: ops.sum(ops.div(ops.mul(ops.sub(a, b), ops.exp(a)), ops.add(b, 1.0)))
        assert grad_check(f, [a, b]) < TOL

    def test_log_pow_softplus(self, rng):
        a = leaf(rng, (5,), 0.5, 3.0)
        f = lambda a: ops.sum(ops.add(ops.log(a), ops.add(ops.pow(a, 1.7), ops.softplus(ops.mul(a, -2.0)))))
        assert grad_check(f, [a]) < TOL

    def test_tensor_exponent(self, rng):
        a, p = leaf(rng, (4,), 0.5, 2.0), leaf(rng, (4,), 0.5, 2.0)
        assert grad_check(lambda a, p: ops.sum(ops.pow(a, p)), [a, p]) < TOL

    def test_reductions_and_norm(self, rng):
        a = leaf(rng, (2, 3, 4))
        f = lambda a: ops.add(ops.mean(ops.norm(a, axis=1)), ops.sum(ops.mean(a, axis=(0, 2), keepdims=True)))
        assert grad_check(f, [a]) < TOL

    def test_shape_ops(self, rng):
        a, b = leaf(rng, (2, 3)), leaf(rng, (2, 2))
        def f(a, b):
            joined = ops.concat([a, b], axis=1)
            picked = ops.select(joined, [1, 1, 0], axis=0)
            spread = ops.expand_along(ops.reshape(picked, (15,)), 0, 2)
            return ops.sum(ops.mul(spread, spread))
        assert grad_check(f, [a, b]) < TOL

    def test_special_functions(self, rng):
        x = leaf(rng, (6,), 0.2, 8.0)
        f = lambda x: ops.sum(ops.add(special.digamma(x), ops.add(special.trigamma(x), special.lgamma(x))))
        assert grad_check(f, [x]) < TOL

    def test_conv2d(self, rng):
        x, w, b = leaf(rng, (2, 2, 5, 5)), leaf(rng, (3, 2, 3, 3)), leaf(rng, (3,))
        f = lambda x, w, b: ops.sum(ops.mul(nn_ops.conv2d(x, w, b, padding=1), nn_ops.conv2d(x, w, b, padding=1)))
        assert grad_check(f, [x, w, b]) < TOL

    def test_strided_conv2d(self, rng):
        x, w = leaf(rng, (1, 2, 6, 6)), leaf(rng, (2, 2, 2, 2))
        f = lambda x, w: ops.sum(ops.exp(nn_ops.conv2d(x, w, stride=2)))
        assert grad_check(f, [x, w]) < TOL

    def test_transposed_conv2d(self, rng):
        x, w, b = leaf(rng, (2, 3, 2, 3)), leaf(rng, (3, 2, 2, 2)), leaf(rng, (2,))
        f = lambda x, w, b: ops.sum(ops.exp(nn_ops.transposed_conv2d(x, w, b, stride=2)))
        assert grad_check(f, [x, w, b]) < TOL

    def test_upsampling(self, rng):
        x = leaf(rng, (1, 2, 3, 4))
        def f(x):
            up = ops.add(nn_ops.bilinear_upsample(x, 2), nn_ops.nearest_upsample(x, 2))
            return ops.sum(ops.mul(up, up))
        assert grad_check(f, [x]) < TOL

    def test_maxpool(self, rng):
        x = leaf(rng, (2, 2, 4, 4))
        assert grad_check(lambda x: ops.sum(ops.exp(nn_ops.maxpool2d(x, 2))), [x]) < TOL

    def test_grad_check_flags_wrong_gradient(self):
        x = Tensor([1.0, 2.0])

        def broken(x):
            return make_result(np.sum(x.data ** 2), (x,), lambda g: (g * x.data,), 'broken')

        assert grad_check(broken, [x]) > 0.1


class TestNnOps:
    def test_transposed_conv_is_adjoint_of_conv(self, rng):
        x = rng.normal(size=(1, 2, 3, 3))
        w = rng.normal(size=(2, 4, 2, 2))
        y = rng.normal(size=(1, 4, 6, 6))
        forward = nn_ops.transposed_conv2d(Tensor(x), Tensor(w), stride=2).data
        # conv2d weight layout is (C_out, C_in, kh, kw); the adjoint swaps the channel axes
        back = nn_ops.conv2d(Tensor(y), Tensor(w), stride=2).data
        assert np.sum(forward * y) == pytest.approx(np.sum(x * back))

    def test_bilinear_preserves_constants(self):
        x = Tensor(np.full((1, 1, 3, 5), 2.5))
        np.testing.assert_allclose(nn_ops.bilinear_upsample(x, 2).data, 2.5)

    def test_nearest_upsample_replicates(self):
        x = Tensor(np.arange(4.0).reshape(1, 1, 2, 2))
        out = nn_ops.nearest_upsample(x, 2).data[0, 0]
        np.testing.assert_array_equal(out[:2, :2], 0.0)
        np.testing.assert_array_equal(out[2:, 2:], 3.0)

    def test_maxpool_values(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_array_equal(nn_ops.maxpool2d(x, 2).data[0, 0], [[5.0, 7.0], [13.0, 15.0]])

    def test_conv_requires_nchw(self):
        with pytest.raises(DimensionError):
            nn_ops.conv2d(Tensor(np.ones((3, 3))), Tensor(np.ones((1, 1, 3, 3))))


class TestSpecialFunctions:
    @pytest.mark.parametrize('fn, oracle', [
        (special.digamma_values, sp.digamma),
        (special.trigamma_values, lambda x: sp.polygamma(1, x)),
        (special.tetragamma_values, lambda x: sp.polygamma(2, x)),
        (special.lgamma_values, sp.gammaln),
    ])
    def test_matches_scipy(self, fn, oracle):
        x = np.concatenate([np.geomspace(1e-3, 1e6, 200), np.linspace(0.5, 12.0, 47)])
        np.testing.assert_allclose(fn(x), oracle(x), rtol=1e-10, atol=1e-10)

    def test_recurrence_crossing_threshold(self):
        x = np.array([5.999999, 6.0, 6.000001])
        np.testing.assert_allclose(special.digamma_values(x), sp.digamma(x), rtol=1e-11, atol=1e-11)


class TestSerialization:
    def test_round_trip_is_bitwise(self, rng, tmp_path):
        array = rng.normal(size=(3, 4, 5))
        save_tensor(tmp_path / 't.etns', array)
        loaded = load_tensor(tmp_path / 't.etns')
        assert loaded.shape == array.shape
        assert loaded.tobytes() == array.tobytes()

    def test_header_layout(self):
        payload = encode_tensor(np.zeros((2, 3)))
        assert payload[:4] == MAGIC
        assert payload[4] == 1 and payload[5] == 2
        assert len(payload) == 6 + 2 * 4 + 6 * 8

    def test_bad_magic(self):
        payload = b'XXXX' + encode_tensor(np.ones(2))[4:]
        with pytest.raises(FormatError):
            read_tensor(io.BytesIO(payload))

    def test_truncated(self):
        payload = encode_tensor(np.ones((2, 2)))
        with pytest.raises(FormatError):
            read_tensor(io.BytesIO(payload[:-3]))

    def test_trailing_bytes(self, tmp_path):
        (tmp_path / 'x.etns').write_bytes(encode_tensor(np.ones(2)) + b'\x00')
        with pytest.raises(FormatError):
            load_tensor(tmp_path / 'x.etns')
