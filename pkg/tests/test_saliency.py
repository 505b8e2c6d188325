import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from facegan.errors import ShapeError
from facegan.saliency import SaliencyExtractor, compose_adversarial


@pytest.mark.parametrize("side", [4, 8, 16, 32])
def test_output_shape_and_range(side):
    s = SaliencyExtractor()(torch.randn(2, 64, side, side))
    assert tuple(s.shape) == (2, 1, 4 * side, 4 * side)
    assert 0 <= s.min() and s.max() <= 1


def test_final_conv_has_one_channel():
    convs = [m for m in SaliencyExtractor().net if isinstance(m, nn.Conv2d)]
    assert convs[-1].out_channels == 1


def test_zero_params_give_one_half():
    sal = SaliencyExtractor()
    with torch.no_grad():
        for p in sal.parameters():
            p.zero_()
    s = sal(torch.randn(2, 64, 4, 4))
    assert torch.equal(s, torch.full_like(s, 0.5))


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 100))
@settings(max_examples=25)
def test_range_over_random_draws(seed, scale):
    torch.manual_seed(seed)
    sal = SaliencyExtractor()
    with torch.no_grad():
        for p in sal.parameters():
            p.mul_(scale)
    s = sal(scale * torch.randn(1, 64, 4, 4))
    assert 0 <= s.min() and s.max() <= 1


def test_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        SaliencyExtractor()(torch.randn(1, 32, 4, 4))


class TestCompose:
    def test_zero_perturbation(self):
        x = torch.randn(2, 3, 8, 8)
        out = compose_adversarial(x.clamp(-3, 3), torch.zeros_like(x), torch.rand(2, 1, 8, 8))
        assert torch.equal(out, x.clamp(-3, 3))

    def test_zero_mask(self):
        x = torch.randn(2, 3, 8, 8).clamp(-3, 3)
        out = compose_adversarial(x, torch.rand_like(x), torch.zeros(2, 1, 8, 8))
        assert torch.equal(out, x)

    def test_constant_arithmetic(self):
        out = compose_adversarial(torch.zeros(1, 3, 4, 4), torch.full((1, 3, 4, 4), 0.3), torch.ones(1, 1, 4, 4))
        assert torch.equal(out, torch.full((1, 3, 4, 4), 0.3))

    def test_clamped(self):
        out = compose_adversarial(torch.full((1, 1, 4, 4), 2.9), torch.ones(1, 1, 4, 4), torch.ones(1, 1, 4, 4))
        assert torch.equal(out, torch.full((1, 1, 4, 4), 3.0))

    @given(st.integers(0, 10000))
    @settings(max_examples=30)
    def test_monotone_gating_and_bound(self, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(1, 2, 4, 4, generator=g)
        p = 2 * torch.rand(1, 2, 4, 4, generator=g) - 1
        lo = torch.rand(1, 1, 4, 4, generator=g)
        hi = lo + (1 - lo) * torch.rand(1, 1, 4, 4, generator=g)
        wide = (-1e9, 1e9)
        d_lo = (compose_adversarial(x, p, lo, wide) - x).abs()
        d_hi = (compose_adversarial(x, p, hi, wide) - x).abs()
        assert torch.all(d_hi >= d_lo - 1e-6)
        assert d_hi.max() <= p.abs().max() + 1e-6

    def test_shape_mismatch(self):
        x = torch.zeros(1, 3, 8, 8)
        with pytest.raises(ShapeError):
            compose_adversarial(x, torch.zeros(1, 3, 4, 4), torch.zeros(1, 1, 8, 8))
        with pytest.raises(ShapeError):
            compose_adversarial(x, x, torch.zeros(1, 3, 8, 8))
        with pytest.raises(ShapeError):
            compose_adversarial(x, x, torch.zeros(1, 1, 4, 4))
