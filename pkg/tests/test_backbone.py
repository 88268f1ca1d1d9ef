import pytest
import torch

from fusionflow.backbone import LidarPyramid, OUTPUT_LEVELS, PlainLidarPyramid, RGBPyramid
from conftest import checksum

# recorded from the first build that passed every other check
RGB_GOLDEN = {
    6: (0.9377934893072961, 1.19064694663939),
    2: (110.82714789367806, 159.34478868117964),
}
LIDAR_GOLDEN = {
    6: (44292.17420774698, 58010.74472230673, 0.0011566997272893786),
    2: (83249.09925804962, 103259.63195947907, 113.85383281111717),
}


def test_level_sizes():
    out = RGBPyramid()(torch.rand(1, 3, 64, 64))
    assert sorted(out) == sorted(OUTPUT_LEVELS)
    assert out[6].shape == (1, 192, 1, 1)
    assert out[2].shape == (1, 32, 16, 16)


def test_rejects_non_divisible_input():
    with pytest.raises(ValueError):
        RGBPyramid()(torch.rand(1, 3, 64, 70))
    with pytest.raises(ValueError):
        LidarPyramid()(torch.rand(1, 1, 60, 64), torch.ones(1, 1, 60, 64))


def test_shared_pyramid_is_bitwise_identical_on_identical_images():
    net = RGBPyramid()
    x = torch.rand(1, 3, 64, 128)
    a, b = net(torch.cat([x, x]))[2]
    assert torch.equal(a, b)


def test_rgb_golden():
    torch.manual_seed(0)
    net = RGBPyramid()
    out = net(torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(1)))
    for level, expected in RGB_GOLDEN.items():
        assert checksum(out[level]) == pytest.approx(expected, rel=1e-4)


def test_lidar_golden():
    torch.manual_seed(0)
    net = LidarPyramid()
    g = torch.Generator().manual_seed(2)
    d = torch.rand(1, 1, 64, 64, generator=g) * 40
    v = (torch.rand(1, 1, 64, 64, generator=g) < 0.2).float()
    f, c = net(d, v)
    for level, (total, magnitude, conf) in LIDAR_GOLDEN.items():
        assert checksum(f[level]) == pytest.approx((total, magnitude), rel=1e-4)
        assert c[level].double().sum().item() == pytest.approx(conf, rel=1e-4)


def test_empty_lidar_has_zero_confidence_and_finite_features():
    f, c = LidarPyramid()(torch.rand(1, 1, 64, 64) * 30, torch.zeros(1, 1, 64, 64))
    for level in OUTPUT_LEVELS:
        assert torch.all(c[level] == 0)
        assert torch.isfinite(f[level]).all()


def test_full_lidar_confidence():
    net = LidarPyramid()
    encoded = net.encode(torch.rand(1, 1, 128, 128), torch.ones(1, 1, 128, 128))
    _, c1 = encoded[1]
    # zero-confidence padding erodes the border; the interior of the first level is exactly one
    assert torch.allclose(c1[..., 2:-2, 2:-2], torch.ones_like(c1[..., 2:-2, 2:-2]), atol=1e-6)


def test_confidence_is_monotone_in_validity():
    net = LidarPyramid()
    d = torch.rand(1, 1, 64, 64) * 20
    sparse = (torch.rand(1, 1, 64, 64) < 0.1).float()
    _, c_full = net(d, torch.ones_like(sparse))
    _, c_sparse = net(d, sparse)
    for level in OUTPUT_LEVELS:
        assert torch.all(c_full[level] >= c_sparse[level] - 1e-7)
        assert c_full[level].max() <= 1.0 + 1e-6


def _support_oracle(mask, levels):
    # nonzero confidence propagates exactly like a binary mask: pooling keeps any
    # hit in the window, each 3x3 convolution dilates by one cell
    supports = {}
    m = mask.bool()
    for level in range(1, levels + 1):
        m = torch.nn.functional.max_pool2d(m.float(), 2).bool()
        for _ in range(2):
            m = torch.nn.functional.max_pool2d(m.float(), 3, stride=1, padding=1).bool()
        supports[level] = m
    return supports


def test_single_point_footprint():
    validity = torch.zeros(1, 1, 64, 64)
    validity[..., 32, 32] = 1
    encoded = LidarPyramid().encode(torch.full((1, 1, 64, 64), 10.0), validity)
    expected = _support_oracle(validity, 6)
    for level, (_, c) in encoded.items():
        assert torch.equal(c > 0, expected[level])
    assert encoded[2][1][0, 0, 0].abs().sum() == 0


def test_plain_variant_reports_unit_confidence():
    f, c = PlainLidarPyramid()(torch.rand(1, 1, 64, 64), torch.zeros(1, 1, 64, 64))
    assert all(torch.all(c[level] == 1) for level in OUTPUT_LEVELS)
