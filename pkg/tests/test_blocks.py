import numpy as np
import pytest

from rangefuse.blocks import ConvSENeXt, ResidualBlock, make_block
from rangefuse.errors import ConfigError, DimensionError
from rangefuse.tensor import Tensor, check_gradients, functional as F

from conftest import randomize_affine


def n_params(module):
    return sum(p.size for p in module.parameters())


def senext_closed_form(cin, cout, k, r, projected):
    count = cin * k * k + cin * cout + cout * cout * 2 // r
    count += 2 * cin + 2 * cout  # dw and pw norms
    count += cout // r + cout  # SE biases
    if projected:
        count += cin * cout + 2 * cout
    return count


def block64(cls, rng, *args, **kw):
    return cls(*args, rng=rng, dtype=np.float64, **kw)


class TestConvSENeXt:
    @pytest.mark.parametrize(
        "cin,cout,k,stride,r",
        [(16, 16, 3, 1, 4), (16, 32, 3, 1, 4), (32, 32, 7, 2, 4), (128, 128, 3, 2, 8), (16, 64, 5, 1, 2)],
    )
    def test_parameter_count_closed_form(self, cin, cout, k, stride, r):
        block = ConvSENeXt(cin, cout, k, stride, se_ratio=r)
        projected = stride != 1 or cin != cout
        assert (block.skip is not None) == projected
        assert n_params(block) == senext_closed_form(cin, cout, k, r, projected)

    def test_zero_input_gives_zero(self, rng):
        block = block64(ConvSENeXt, rng, 16, 16)
        out = block(Tensor(np.zeros((1, 16, 8, 8))))
        assert not out.data.any()

    def test_se_saturation_is_noop(self, rng):
        block = block64(ConvSENeXt, rng, 16, 16)
        block.se_expand.bias.data[:] = 100.0
        x = Tensor(rng.standard_normal((2, 16, 8, 8)))
        out = block(x)
        y_pw = block.pw_norm(block.pw(F.hardswish(block.dw_norm(block.dw(x)))))
        np.testing.assert_array_equal(out.data, y_pw.data + x.data)

    def test_se_scale_range_and_spatially_constant(self, rng):
        block = block64(ConvSENeXt, rng, 16, 32, stride=2)
        y = Tensor(rng.standard_normal((2, 32, 4, 4)) * 5)
        s = block.se_scale(y).data
        assert s.shape == (2, 32, 1, 1)
        assert s.min() >= 0.0 and s.max() <= 1.0

    @pytest.mark.parametrize("stride,shape", [(1, (1, 16, 8, 8)), (2, (1, 16, 4, 4))])
    def test_output_shape(self, rng, stride, shape):
        block = block64(ConvSENeXt, rng, 16, 16, stride=stride)
        assert block(Tensor(rng.standard_normal((1, 16, 8, 8)))).shape == shape

    def test_channel_mismatch(self, rng):
        with pytest.raises(DimensionError):
            block64(ConvSENeXt, rng, 16, 16)(Tensor(np.zeros((1, 8, 4, 4))))

    def test_ratio_must_divide(self):
        with pytest.raises(ConfigError):
            ConvSENeXt(16, 18, se_ratio=4)

    def test_eval_forward_is_pure(self, rng):
        block = block64(ConvSENeXt, rng, 16, 32, stride=2)
        block(Tensor(rng.standard_normal((2, 16, 8, 8))))  # populate running stats
        block.eval()
        x = Tensor(rng.standard_normal((1, 16, 8, 8)))
        stats = [b.copy() for _, b in block.named_buffers()]
        a, b = block(x), block(x)
        assert a.data.tobytes() == b.data.tobytes()
        for before, (_, after) in zip(stats, block.named_buffers()):
            np.testing.assert_array_equal(before, after)

    @pytest.mark.parametrize("cout,stride", [(16, 1), (32, 2)])
    def test_gradients_every_parameter(self, rng, cout, stride):
        block = block64(ConvSENeXt, rng, 16, cout, stride=stride)
        randomize_affine(block, rng)
        x = Tensor(rng.standard_normal((1, 16, 8, 8)), requires_grad=True)
        w = rng.standard_normal((1, cout, 8 // stride, 8 // stride))

        def loss():
            return F.sum(F.mul(block(x), Tensor(w)))

        params = block.parameters() + [x]
        errs = check_gradients(loss, params, step=1e-5)
        assert max(errs.values()) < 1e-3


class TestResidualBlock:
    def test_zero_weights_give_skip(self, rng):
        block = block64(ResidualBlock, rng, 8, 8)
        block.conv1.weight.data[:] = 0
        block.conv2.weight.data[:] = 0
        x = Tensor(rng.standard_normal((1, 8, 6, 6)))
        np.testing.assert_array_equal(block(x).data, x.data)

    def test_zero_weights_projected_skip(self, rng):
        block = block64(ResidualBlock, rng, 8, 16, stride=2)
        block.conv1.weight.data[:] = 0
        block.conv2.weight.data[:] = 0
        x = Tensor(rng.standard_normal((1, 8, 6, 6)))
        np.testing.assert_array_equal(block(x).data, block.skip(x).data)

    def test_stride_halves(self, rng):
        block = block64(ResidualBlock, rng, 8, 8, stride=2)
        assert block(Tensor(rng.standard_normal((2, 8, 8, 12)))).shape == (2, 8, 4, 6)

    def test_gradients(self, rng):
        block = block64(ResidualBlock, rng, 4, 8, stride=2)
        randomize_affine(block, rng)
        x = Tensor(rng.standard_normal((1, 4, 6, 6)), requires_grad=True)
        w = rng.standard_normal((1, 8, 3, 3))
        errs = check_gradients(lambda: F.sum(F.mul(block(x), Tensor(w))), block.parameters() + [x])
        assert max(errs.values()) < 1e-3


def test_make_block_dispatch():
    assert isinstance(make_block("convsenext", 16, 16), ConvSENeXt)
    assert isinstance(make_block("residual", 16, 16), ResidualBlock)
    with pytest.raises(ConfigError):
        make_block("dseb", 16, 16)
