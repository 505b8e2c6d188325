import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from facegan.errors import ConfigError, ShapeError
from facegan.generator import (
    Generator,
    ResidualBlock,
    frozen_spectral_state,
    perturb_latent,
    spectral_layers,
)
from facegan.gradcheck import check_gradients


def conv_out(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def convT_out(n, k, s, p, op):
    return (n - 1) * s - 2 * p + k + op


def expected_latent(size):
    # 9x9/pad 4, then two 3x3 stride-2 convs; the SN convs and residual blocks keep size
    n = conv_out(size, 9, 1, 4)
    n = conv_out(conv_out(n, 3, 2, 1), 3, 2, 1)
    return n


def zero_params(model):
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()


@pytest.mark.parametrize("size,channels", [(128, 3), (16, 1), (32, 3), (64, 1)])
def test_encode_decode_shapes(size, channels):
    g = Generator(channels, n_res_blocks=2).eval()
    x = torch.randn(2, channels, size, size)
    z = g.encode(x)
    side = expected_latent(size)
    assert tuple(z.shape) == (2, 64, side, side)
    y = g.decode(z)
    up = convT_out(convT_out(side, 3, 2, 1, 1), 3, 2, 1, 1)
    assert tuple(y.shape) == (2, channels, up, up) == tuple(x.shape)
    assert y.abs().max() <= 1


def test_decoder_output_bounded_under_large_inputs():
    g = Generator(1, n_res_blocks=1)
    y = g.decode(1e4 * torch.randn(3, 64, 4, 4))
    assert y.abs().max().item() <= 1.0


def test_zero_weights_give_zero_features():
    g = Generator(1, n_res_blocks=2, bias=False)
    zero_params(g)
    z = g.encode(torch.randn(2, 1, 16, 16))
    assert torch.count_nonzero(z) == 0


def test_layer_inventory():
    g = Generator(3)
    convs = [m for m in g.encoder if isinstance(m, nn.Conv2d)]
    assert [c.kernel_size for c in convs] == [(9, 9), (3, 3), (3, 3), (3, 3), (3, 3), (3, 3)]
    assert [c.stride for c in convs] == [(1, 1), (2, 2), (2, 2), (1, 1), (1, 1), (1, 1)]
    assert all(c.out_channels == 64 for c in convs)
    assert len(spectral_layers(g)) == 3
    assert sum(isinstance(m, ResidualBlock) for m in g.encoder) == 6
    tconvs = [m for m in g.decoder if isinstance(m, nn.ConvTranspose2d)]
    assert len(tconvs) == 2 and all(t.stride == (2, 2) for t in tconvs)


def test_parameter_count_depends_only_on_channels():
    count = lambda g: sum(p.numel() for p in g.parameters())
    assert count(Generator(3)) == count(Generator(3))
    assert count(Generator(1)) != count(Generator(3))


@given(st.integers(1, 4), st.integers(1, 4))
@settings(max_examples=10)
def test_residual_block_preserves_shape(n, side):
    block = ResidualBlock(8)
    x = torch.randn(n + 1, 8, side, side)
    assert block(x).shape == x.shape


@pytest.mark.parametrize("shape", [(1, 1, 16, 18), (1, 1, 18, 18), (1, 3, 16, 16), (16, 16)])
def test_encode_rejects_bad_shapes(shape):
    with pytest.raises(ShapeError):
        Generator(1).encode(torch.zeros(shape))


def test_decode_rejects_bad_latent():
    with pytest.raises(ShapeError):
        Generator(1).decode(torch.zeros(1, 32, 4, 4))


class TestPerturbLatent:
    def test_zero_scale_is_identity(self):
        z = torch.randn(2, 64, 4, 4)
        assert torch.equal(perturb_latent(z, 0.0, seed=5), z)

    def test_seeded(self):
        z = torch.randn(2, 64, 4, 4)
        assert torch.equal(perturb_latent(z, 0.1, seed=5), perturb_latent(z, 0.1, seed=5))
        assert not torch.equal(perturb_latent(z, 0.1, seed=5), perturb_latent(z, 0.1, seed=6))

    def test_variance(self):
        out = perturb_latent(torch.zeros(1, 64, 32, 32), 0.1, seed=0)
        assert out.numel() >= 65536
        assert abs(out.var().item() - 0.01) < 0.2 * 0.01

    def test_negative_scale(self):
        with pytest.raises(ConfigError):
            perturb_latent(torch.zeros(1, 64, 4, 4), -0.1)


class TestSpectralNorm:
    def test_normalized_weight_has_unit_norm(self):
        torch.manual_seed(0)
        g = Generator(1)
        for module, sn in spectral_layers(g):
            w = module.parametrizations.weight.original
            sn.power_iterate(w, 5)
            with torch.no_grad():
                top = torch.linalg.matrix_norm(module.weight.reshape(64, -1), ord=2)
            assert abs(top.item() - 1) < 1e-2

    def test_frozen_state_stops_updates(self):
        g = Generator(1).train()
        (_, sn), *_ = spectral_layers(g)
        x = torch.randn(2, 1, 16, 16)
        with frozen_spectral_state(g):
            before = sn._u.clone()
            g.encode(x)
            assert torch.equal(before, sn._u)
            assert sn.frozen
        assert not sn.frozen
        g.encode(x)

    def test_eval_mode_does_not_iterate(self):
        g = Generator(1).eval()
        (_, sn), *_ = spectral_layers(g)
        before = sn._basis.clone()
        g.encode(torch.randn(1, 1, 16, 16))
        assert torch.equal(before, sn._basis)


def test_round_trip_gradients_match_finite_differences():
    torch.manual_seed(0)
    g = Generator(1, n_res_blocks=2).eval()
    x = torch.randn(2, 1, 16, 16)

    def loss(model, dtype):
        with frozen_spectral_state(model):
            return model(x.to(dtype)).sum()

    samples = check_gradients(loss, g, lambda m: list(m.named_parameters()), n=10, seed=1)
    errors = [s.rel_error for s in samples]
    assert max(errors) < 1e-2, errors
