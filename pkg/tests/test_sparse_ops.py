import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from fusionflow import reference
from fusionflow.sparse_ops import ConfidenceConv2d, confidence_conv, max_confidence_pool, nn_upsample


def _layer(cin, cout, k=3, seed=0):
    torch.manual_seed(seed)
    return ConfidenceConv2d(cin, cout, kernel_size=k).double()


def test_unit_confidence_stays_unit(gen):
    layer = _layer(2, 3)
    f = torch.randn(1, 2, 6, 7, generator=gen, dtype=torch.float64)
    _, c = layer(f, torch.ones(1, 1, 6, 7, dtype=torch.float64))
    # zero padding at the border lowers confidence; the interior is exactly 1
    assert torch.allclose(c[..., 1:-1, 1:-1], torch.ones_like(c[..., 1:-1, 1:-1]), atol=1e-12)


def test_zero_confidence_gives_bias(gen):
    layer = _layer(2, 3)
    f = torch.randn(1, 2, 5, 5, generator=gen, dtype=torch.float64)
    out, c = layer(f, torch.zeros(1, 1, 5, 5, dtype=torch.float64))
    assert torch.all(c == 0)
    assert torch.allclose(out, layer.bias.view(1, 3, 1, 1).expand_as(out))


def test_single_point_matches_direct_evaluation():
    f = torch.zeros(1, 1, 5, 5, dtype=torch.float64)
    f[0, 0, 2, 2] = 3.5
    c = torch.zeros_like(f)
    c[0, 0, 2, 2] = 1.0
    weight = torch.ones(1, 1, 3, 3, dtype=torch.float64)
    raw = torch.full((3, 3), 0.5413, dtype=torch.float64)
    out, conf = confidence_conv(f, c, weight, torch.zeros(1, dtype=torch.float64), raw)
    ref_out, ref_conf = reference.confidence_conv(f.numpy(), c.numpy(), weight.numpy(), np.zeros(1), raw.numpy())
    np.testing.assert_allclose(out.numpy(), ref_out, atol=1e-12)
    np.testing.assert_allclose(conf.numpy(), ref_conf, atol=1e-12)
    # every output that sees the point reproduces it exactly
    np.testing.assert_allclose(out[0, 0, 1:4, 1:4].numpy(), 3.5, atol=1e-6)
    np.testing.assert_allclose(conf[0, 0, 1:4, 1:4].numpy(), 1 / 9, atol=1e-12)
    assert conf[0, 0, 0].abs().sum() == 0


def test_strided_matches_reference(gen):
    f = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)
    c = torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64)
    weight = torch.randn(4, 3, 3, 3, generator=gen, dtype=torch.float64)
    bias = torch.randn(4, generator=gen, dtype=torch.float64)
    raw = torch.randn(3, 3, generator=gen, dtype=torch.float64)
    out, conf = confidence_conv(f, c, weight, bias, raw, stride=2)
    ref_out, ref_conf = reference.confidence_conv(f.numpy(), c.numpy(), weight.numpy(), bias.numpy(), raw.numpy(), 2)
    np.testing.assert_allclose(out.numpy(), ref_out, atol=1e-9)
    np.testing.assert_allclose(conf.numpy(), ref_conf, atol=1e-12)


def test_contract_violations():
    f = torch.zeros(1, 1, 4, 4)
    with pytest.raises(ValueError):
        confidence_conv(f, torch.zeros(1, 1, 4, 5), torch.zeros(1, 1, 3, 3), torch.zeros(1), torch.zeros(3, 3))
    with pytest.raises(ValueError):
        ConfidenceConv2d(1, 1, kernel_size=2)


def test_pool_picks_most_confident():
    a, b, c_, d = 1.0, 2.0, 3.0, 4.0
    f = torch.tensor([[[[a, b], [c_, d]]]])
    c = torch.tensor([[[[0.1, 0.9], [0.3, 0.2]]]])
    out, conf = max_confidence_pool(f, c)
    assert out.item() == b
    assert conf.item() == pytest.approx(0.9)


@pytest.mark.parametrize('value', [1.0, 0.0])
def test_pool_tie_breaks_to_first_element(value, gen):
    f = torch.randn(1, 2, 6, 6, generator=gen)
    out, conf = max_confidence_pool(f, torch.full((1, 1, 6, 6), value))
    assert torch.equal(out, f[..., ::2, ::2])
    assert torch.all(conf == value)


def test_pool_odd_size_pads_with_zero_confidence(gen):
    f = torch.randn(1, 1, 5, 3, generator=gen, dtype=torch.float64)
    c = torch.rand(1, 1, 5, 3, generator=gen, dtype=torch.float64)
    out, conf = max_confidence_pool(f, c)
    ref_out, ref_conf = reference.max_confidence_pool(f.numpy(), c.numpy())
    assert out.shape == (1, 1, 3, 2)
    np.testing.assert_allclose(out.numpy(), ref_out)
    np.testing.assert_allclose(conf.numpy(), ref_conf)


def test_upsample_replicates():
    f = torch.tensor([[[[7.0]]]])
    out, conf = nn_upsample(f, torch.ones_like(f))
    assert torch.equal(out, torch.full((1, 1, 2, 2), 7.0))
    x = torch.arange(4.0).view(1, 1, 2, 2)
    out, _ = nn_upsample(x, x)
    np.testing.assert_array_equal(out.numpy(), reference.nn_upsample(x.numpy()))
    assert out[0, 0, 3, 0] == 2.0 and out[0, 0, 1, 3] == 1.0


def test_pool_then_upsample_constant_is_fixed_point():
    f = torch.full((1, 3, 8, 8), 2.5)
    c = torch.full((1, 1, 8, 8), 0.4)
    out, conf = nn_upsample(*max_confidence_pool(f, c))
    assert torch.equal(out, f) and torch.equal(conf, c)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), depth=st.integers(1, 4), h=st.integers(3, 12), w=st.integers(3, 12))
def test_confidence_bounded_through_random_stacks(seed, depth, h, w):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    f = torch.randn(1, 2, h, w, generator=g)
    c = torch.rand(1, 1, h, w, generator=g) * (torch.rand(1, 1, h, w, generator=g) < 0.5)
    for i in range(depth):
        layer = ConfidenceConv2d(f.shape[1], 2)
        with torch.no_grad():
            layer.conf_weight_raw.normal_(0, 2, generator=g)
        op = i % 3
        if op == 0:
            f, c = layer(f, c)
        elif op == 1:
            f, c = max_confidence_pool(f, c)
        else:
            f, c = nn_upsample(f, c)
        assert float(c.detach().min()) >= 0.0 and float(c.detach().max()) <= 1.0 + 1e-6
        assert torch.isfinite(f).all()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_masked_values_never_leak(seed):
    g = torch.Generator().manual_seed(seed)
    torch.manual_seed(seed)
    conv_a, conv_b = ConfidenceConv2d(1, 3).double(), ConfidenceConv2d(3, 2).double()
    f = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64)
    c = (torch.rand(1, 1, 8, 8, generator=g) < 0.3).double()
    garbage = f + 1e3 * torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64) * (1 - c)

    def run(x):
        y, k = conv_a(x, c)
        y, k = max_confidence_pool(y, k)
        y, k = conv_b(y, k)
        return nn_upsample(y, k)

    out_a, conf_a = run(f)
    out_b, conf_b = run(garbage)
    assert torch.allclose(out_a, out_b, atol=1e-6)
    assert torch.equal(conf_a, conf_b)
