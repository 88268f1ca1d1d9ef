import numpy as np
import pytest
import torch

from fusionflow import dataio, network, reference
from fusionflow.network import (CheckpointError, ModelConfig, MultiScalePrediction, SceneFlowNet, TrainSchedule,
                                TrainingDiverged)

TINY = dict(channels=(4, 4, 6, 6, 8, 8), search_radius=1, estimator_widths=(8, 6),
            context_widths=(6, 6, 6, 6, 6, 6))


def tiny(**overrides):
    return ModelConfig(**{**TINY, **overrides})


def _inputs(gen, h=64, w=128, density=0.1):
    images = [torch.rand(1, 3, h, w, generator=gen) for _ in range(2)]
    depths = [torch.rand(1, 1, h, w, generator=gen) * 30 + 1 for _ in range(2)]
    masks = [(torch.rand(1, 1, h, w, generator=gen) < density).float() for _ in range(2)]
    return images[0], images[1], depths[0], masks[0], depths[1], masks[1]


def test_output_resolution(gen):
    torch.manual_seed(0)
    pred = SceneFlowNet(tiny())(*_inputs(gen))
    assert pred.final.shape == (1, 4, 64, 128)
    assert pred.refined.shape == (1, 4, 16, 32)
    assert sorted(pred.levels) == [2, 3, 4, 5, 6]
    assert pred.levels[6].shape == (1, 4, 1, 2)


def test_forward_is_deterministic(gen):
    torch.manual_seed(0)
    model = SceneFlowNet(tiny()).eval()
    inputs = _inputs(gen)
    with torch.no_grad():
        assert torch.equal(model(*inputs).final, model(*inputs).final)


def test_empty_lidar_is_finite(gen):
    model = SceneFlowNet(tiny())
    inputs = list(_inputs(gen, density=0.0))
    assert torch.isfinite(model(*inputs).final).all()


def test_size_mismatch_raises(gen):
    inputs = list(_inputs(gen))
    inputs[2] = inputs[2][..., :64]
    with pytest.raises(ValueError):
        SceneFlowNet(tiny())(*inputs)


def test_predict_crops_padding():
    sample = dataio.synth_generate(0, (70, 100))
    out = network.predict(SceneFlowNet(tiny()), [sample])
    assert out.shape == (1, 70, 100, 4)


def _perfect_prediction(gt, valid):
    levels = {level: network.downsample_gt(gt, valid, level)[0] for level in (6, 5, 4, 3)}
    refined = network.downsample_gt(gt, valid, 2)[0]
    return MultiScalePrediction(levels=levels, refined=refined, final=gt)


def test_loss_zero_for_exact_prediction(gen):
    gt = torch.randn(2, 4, 64, 64, generator=gen)
    valid = torch.rand(2, 1, 64, 64, generator=gen) < 0.5
    result = network.multiscale_loss(_perfect_prediction(gt, valid), gt, valid)
    assert result.total.item() == pytest.approx(0.0, abs=1e-6)


def test_single_pixel_euclidean_loss():
    # one valid pixel carrying (3,4,0,0) per level unit: level-6 cell target is (3,4,0,0)
    gt = torch.zeros(1, 4, 64, 64)
    valid = torch.zeros(1, 1, 64, 64, dtype=torch.bool)
    valid[..., 10, 10] = True
    gt[0, :, 10, 10] = torch.tensor([3.0, 4.0, 0.0, 0.0]) * 64
    pred = _perfect_prediction(gt, valid)
    pred.levels[6] = torch.zeros_like(pred.levels[6])
    result = network.multiscale_loss(pred, gt, valid, weights=(1, 0, 0, 0, 0))
    assert result.levels[6].item() == pytest.approx(5.0)
    assert result.total.item() == pytest.approx(5.0)


def test_loss_matches_reference(gen):
    gt = torch.randn(1, 4, 64, 128, generator=gen, dtype=torch.float64) * 5
    valid = torch.rand(1, 1, 64, 128, generator=gen) < 0.3
    levels = {l: torch.randn(1, 4, 64 >> l, 128 >> l, generator=gen, dtype=torch.float64) for l in (6, 5, 4, 3)}
    refined = torch.randn(1, 4, 16, 32, generator=gen, dtype=torch.float64)
    pred = MultiScalePrediction(levels, refined, None)
    result = network.multiscale_loss(pred, gt, valid)
    fields = {l: v.numpy() for l, v in levels.items()}
    fields[2] = refined.numpy()
    total, _ = reference.multiscale_loss(fields, gt.numpy(), valid[:, 0].numpy(), network.DEFAULT_LEVEL_WEIGHTS)
    assert result.total.item() == pytest.approx(total, rel=1e-9)


def test_empty_ground_truth_warns(gen):
    gt = torch.randn(1, 4, 64, 64, generator=gen)
    valid = torch.zeros(1, 1, 64, 64, dtype=torch.bool)
    with pytest.warns(UserWarning):
        result = network.multiscale_loss(_perfect_prediction(gt, torch.ones_like(valid)), gt, valid)
    assert result.empty and result.total.item() == 0.0


def test_robust_loss_is_positive_at_zero_error(gen):
    gt = torch.randn(1, 4, 64, 64, generator=gen)
    valid = torch.ones(1, 1, 64, 64, dtype=torch.bool)
    result = network.multiscale_loss(_perfect_prediction(gt, valid), gt, valid, robust=True)
    assert result.levels[6].item() == pytest.approx(0.01 ** 0.4, rel=1e-4)


@pytest.fixture(scope='module')
def small_set():
    return dataio.synth_dataset(2, (64, 64), seed=3)


def _schedule(**kw):
    base = dict(steps=3, batch_size=2, log_every=0, seed=5)
    base.update(kw)
    return TrainSchedule(**base)


def test_zero_learning_rate_keeps_parameters(small_set):
    torch.manual_seed(1)
    model = SceneFlowNet(tiny())
    before = {k: v.clone() for k, v in model.state_dict().items()}
    network.train(small_set, schedule=_schedule(learning_rate=0.0), model=model)
    assert all(torch.equal(before[k], v) for k, v in model.state_dict().items())


def test_training_is_reproducible(small_set):
    _, a = network.train(small_set, tiny(), _schedule())
    _, b = network.train(small_set, tiny(), _schedule())
    assert a == b


def test_non_finite_loss_raises(small_set):
    broken = [s.replace(gt=np.full_like(s.gt, np.nan)) for s in small_set]
    with pytest.raises(TrainingDiverged):
        network.train(broken, tiny(), _schedule(steps=1))


def test_training_writes_outputs(small_set, tmp_path):
    network.train(small_set, tiny(), _schedule(out_dir=str(tmp_path), checkpoint_every=2))
    assert (tmp_path / 'checkpoint.sfck').is_file()
    assert (tmp_path / 'checkpoint-000002.sfck').is_file()
    rows = (tmp_path / 'loss.csv').read_text().splitlines()
    assert rows[0].split(',') == network.LOSS_COLUMNS and len(rows) == 4


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    model = SceneFlowNet(tiny(use_confidence_concat=False))
    path = tmp_path / 'm.sfck'
    network.save_checkpoint(str(path), model)
    loaded = network.load_checkpoint(str(path))
    assert loaded.cfg == model.cfg
    for key, value in model.state_dict().items():
        assert torch.equal(loaded.state_dict()[key], value)
    assert path.read_bytes()[:4] == b'SFCK'


def test_checkpoint_mismatch_lists_differences(tmp_path):
    path = tmp_path / 'm.sfck'
    network.save_checkpoint(str(path), SceneFlowNet(tiny()))
    with pytest.raises(CheckpointError, match='fusion.levels.2.fusion.0.weight'):
        network.load_checkpoint(str(path), tiny(use_confidence_concat=False))


@pytest.mark.parametrize('payload', [b'JUNK', b'SFCK\x01\x00\x00\x00\xff'])
def test_corrupt_checkpoint(tmp_path, payload):
    path = tmp_path / 'bad.sfck'
    path.write_bytes(payload)
    with pytest.raises(CheckpointError):
        network.read_checkpoint(str(path))


def test_config_text_round_trip():
    cfg = tiny(robust_loss=True, use_confidence_conv=False)
    assert ModelConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ValueError):
        ModelConfig.from_strings({'nonsense': '1'})
    with pytest.raises(ValueError):
        ModelConfig(channels=(1, 2))


def test_draw_lidar_respects_fixed_density(small_set):
    rng = np.random.default_rng(0)
    sample = small_set[0]
    depth_t, depth_t1 = network.draw_lidar(sample, _schedule(fixed_fraction=0.1, noise_sigma=0.0), rng)
    assert depth_t.count == round(0.1 * sample.depth_t.count)
    assert not np.any(depth_t.validity & ~sample.depth_t.validity)
    np.testing.assert_array_equal(depth_t.disparity[depth_t.validity], sample.depth_t.disparity[depth_t.validity])
