"""Acceptance suite: one pass/fail line per criterion, at the stated tolerances.

The training criteria (overfit, density robustness) run real optimization on
a single CPU core and take several minutes each.
"""
import time

import numpy as np
import torch
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from fusionflow import dataio, metrics, network, pipeline
from fusionflow.checks import GRADIENT_CHECKS, ORACLE_CHECKS, run_checks
from fusionflow.dataio import Calibration
from fusionflow.network import ModelConfig, SceneFlowNet, TrainSchedule
from fusionflow.sparse_ops import ConfidenceConv2d, max_confidence_pool, nn_upsample
from conftest import record_criterion

GRADIENT_OPS = ('confidence_conv', 'max_confidence_pool', 'nn_upsample', 'warp', 'cost_volume',
                'estimator', 'context', 'fusion', 'loss')
ORACLE_OPS = ('oracle_cost_volume', 'oracle_max_confidence_pool', 'oracle_warp', 'oracle_multiscale_loss',
              'oracle_metrics')


def test_criterion_1_gradient_suite():
    start = time.perf_counter()
    results = []
    for seed in (0, 1, 2):
        results += run_checks(list(GRADIENT_CHECKS), seed=seed)
    elapsed = time.perf_counter() - start
    covered = {r.name for r in results}
    worst = max(r.max_rel_error for r in results)
    failed = sorted({r.name for r in results if not r.passed})
    passed = set(GRADIENT_OPS) <= covered and not failed and worst <= 1e-4 and elapsed < 300
    detail = 'worst rel err {:.2e} <= 1e-4 over {} checks, {:.1f}s < 300s{}'.format(
        worst, len(results), elapsed, ', failed: {}'.format(failed) if failed else '')
    assert record_criterion(1, 'finite-difference gradient suite', passed, detail)


def test_criterion_2_oracle_equivalence():
    results = []
    for seed in (0, 1, 2):
        results += run_checks(list(ORACLE_CHECKS), seed=seed)
    worst = max(r.max_rel_error for r in results)
    covered = {r.name for r in results}
    passed = set(ORACLE_OPS) <= covered and all(r.passed for r in results) and worst <= 1e-6
    detail = 'worst rel err {:.2e} <= 1e-6 over {} oracle runs'.format(worst, len(results))
    assert record_criterion(2, 'brute-force oracle equivalence', passed, detail)


def _random_stack(g, depth):
    ops = []
    for _ in range(depth):
        kind = int(torch.randint(0, 3, (1,), generator=g))
        if kind == 0:
            layer = ConfidenceConv2d(2, 2).double()
            with torch.no_grad():
                layer.conf_weight_raw.normal_(0, 2, generator=g)
                layer.weight.normal_(0, 1, generator=g)
            ops.append(layer)
        else:
            ops.append(max_confidence_pool if kind == 1 else nn_upsample)
    return ops


def _run_stack(ops, f, c):
    for op in ops:
        f, c = op(f, c)
    return f, c


def _erosion(ops):
    # cells near the border that zero-confidence padding may pull below one
    e = 0
    for op in ops:
        if isinstance(op, ConfidenceConv2d):
            e += 1
        elif op is max_confidence_pool:
            e //= 2
        else:
            e *= 2
    return e


def test_criterion_3_confidence_contract():
    worst_bound = 0.0
    worst_identity = 0.0
    worst_leak = 0.0
    identity_cases = 0
    with torch.no_grad():
        for seed in range(40):
            g = torch.Generator().manual_seed(seed)
            ops = _random_stack(g, int(torch.randint(1, 7, (1,), generator=g)))
            f = torch.randn(1, 2, 16, 16, generator=g, dtype=torch.float64)
            mask = (torch.rand(1, 1, 16, 16, generator=g) < 0.4).double()
            c = torch.rand(1, 1, 16, 16, generator=g, dtype=torch.float64) * mask

            a, c_out = _run_stack(ops, f, c)
            worst_bound = max(worst_bound, float(-c_out.min()), float(c_out.max() - 1))

            # masked features must not reach any cell that carries confidence
            garbage = f + 1e4 * torch.randn(f.shape, generator=g, dtype=torch.float64) * (c == 0)
            b, _ = _run_stack(ops, garbage, c)
            seen = (c_out > 0).expand_as(a)
            if seen.any():
                worst_leak = max(worst_leak, float((a - b)[seen].abs().max()))

            ones = torch.ones(1, 1, 64, 64, dtype=torch.float64)
            f_big = torch.randn(1, 2, 64, 64, generator=g, dtype=torch.float64)
            _, c_one = _run_stack(ops, f_big, ones)
            e = _erosion(ops)
            if c_one.shape[-1] > 2 * e:
                interior = c_one[..., e:c_one.shape[-2] - e, e:c_one.shape[-1] - e]
                worst_identity = max(worst_identity, float((interior - 1).abs().max()))
                identity_cases += 1

    passed = worst_bound <= 1e-12 and worst_identity <= 1e-6 and worst_leak <= 1e-6 and identity_cases > 0
    detail = 'bound violation {:.1e}, unit identity err {:.1e} <= 1e-6 ({} stacks), masked leak {:.1e} <= 1e-6'.format(
        max(worst_bound, 0.0), worst_identity, identity_cases, worst_leak)
    assert record_criterion(3, 'confidence contract', passed, detail)


ABLATIONS = {
    'no conv, no concat': dict(use_confidence_conv=False, use_confidence_concat=False),
    'conv, no concat': dict(use_confidence_conv=True, use_confidence_concat=False),
    'conv + concat': dict(use_confidence_conv=True, use_confidence_concat=True),
}


def _confidence_gradient(model, g):
    '''Gradient magnitude of the fused features w.r.t. the confidence maps.'''
    image = torch.rand(1, 3, 64, 64, generator=g)
    disparity = torch.rand(1, 1, 64, 64, generator=g) * 20
    validity = (torch.rand(1, 1, 64, 64, generator=g) < 0.2).float()
    rgb = model.rgb_pyramid(image)
    lidar, confidence = model.lidar_pyramid(disparity, validity)
    confidence = {level: c.detach().requires_grad_(True) for level, c in confidence.items()}
    fused = model.fusion(rgb, lidar, confidence)
    total = sum((x * torch.randn(x.shape, generator=g)).sum() for x in fused.values())
    grads = torch.autograd.grad(total, list(confidence.values()), allow_unused=True)
    return sum(0.0 if gr is None else float(gr.abs().sum()) for gr in grads)


def test_criterion_4_ablation_wiring():
    cfg_kw = dict(channels=(4, 4, 6, 6, 8, 8), search_radius=1, estimator_widths=(8, 6),
                  context_widths=(6, 6, 6, 6, 6, 6))
    models = {}
    for name, flags in ABLATIONS.items():
        torch.manual_seed(0)
        models[name] = SceneFlowNet(ModelConfig(**cfg_kw, **flags))
    shapes = {name: {k: v.detach().numpy() for k, v in m.state_dict().items()} for name, m in models.items()}

    distinct = True
    names = list(ABLATIONS)
    for i, a in enumerate(names):
        for b in names[i + 1:]:
            distinct &= bool(network.shape_audit(models[a], shapes[b]))
            distinct &= bool(network.shape_audit(models[b], shapes[a]))

    g = torch.Generator().manual_seed(0)
    grads = {name: _confidence_gradient(model, g) for name, model in models.items()}
    no_conf_params = not any('conf_weight_raw' in k for k in shapes['no conv, no concat'])
    passed = (distinct and grads['no conv, no concat'] == 0.0 and grads['conv, no concat'] == 0.0
              and grads['conv + concat'] > 0.0 and no_conf_params)
    detail = 'pairwise audits distinct={}, confidence grad |g| = {}'.format(
        distinct, ', '.join('{}: {:.3g}'.format(k, v) for k, v in grads.items()))
    assert record_criterion(4, 'ablation wiring', passed, detail)


def test_criterion_5_overfit():
    dataset = dataio.synth_dataset(4, (64, 128), seed=1)
    schedule = TrainSchedule(steps=2000, batch_size=4, learning_rate=1e-4, fixed_fraction=0.1, noise_sigma=0.0,
                             augment=False, log_every=0, seed=0)
    start = time.perf_counter()
    model, _ = network.train(dataset, ModelConfig.desk(), schedule)
    elapsed = time.perf_counter() - start
    _, report = pipeline.evaluate_dataset(model, dataset, seed=5, fraction=0.1)
    passed = report.SF_EPE < 1.0 and elapsed < 1800
    detail = 'training SF-EPE {:.3f} px < 1.0 after 2000 steps, {:.0f}s < 1800s'.format(report.SF_EPE, elapsed)
    assert record_criterion(5, 'overfit sanity', passed, detail)


EVAL_DENSITIES = (0.005, 0.02, 0.1, 0.2)


def _density_profile(fixed_fraction):
    train_set = dataio.synth_dataset(32, (64, 128), seed=11)
    held_out = dataio.synth_dataset(8, (64, 128), seed=999)
    schedule = TrainSchedule(steps=1500, batch_size=4, learning_rate=2e-4, fixed_fraction=fixed_fraction,
                             noise_sigma=0.0, augment=False, log_every=0, seed=0)
    model, _ = network.train(train_set, ModelConfig.desk(), schedule)
    return [pipeline.evaluate_dataset(model, held_out, seed=3, fraction=f)[1].SF_EPE for f in EVAL_DENSITIES]


def test_criterion_6_density_robustness():
    randomized = _density_profile(None)
    control = _density_profile(0.2)
    ratio = max(randomized) / min(randomized)
    control_ratio = max(control) / min(control)
    passed = ratio <= 1.5 and control_ratio > 1.5
    detail = 'randomized max/min {:.3f} <= 1.5 (SF-EPE {}), fixed-20% control {:.3f} > 1.5 (SF-EPE {})'.format(
        ratio, ', '.join('{:.2f}'.format(v) for v in randomized), control_ratio,
        ', '.join('{:.2f}'.format(v) for v in control))
    assert record_criterion(6, 'density robustness', passed, detail)


def _one(u, v, d0, d1):
    return np.array([[[u, v, d0, d1]]], dtype=np.float64)


CALIB = Calibration(focal_length=1000.0, cx=0.0, cy=0.0, baseline=0.5)
ONE = np.ones((1, 1), bool)
VIOLATIONS = []


def _judge(name, err, mag, absolute, relative):
    '''Records a violation unless the metric agrees with the conjunction rule.'''
    def check(outlier):
        # values within rounding of a threshold are not adjudicated
        if abs(err - absolute) < 1e-9 or abs(err - relative * mag) < 1e-9 * max(1.0, mag):
            return
        expected = err > absolute and err > relative * mag
        if outlier != expected:
            VIOLATIONS.append((name, err, mag, outlier))
    return check


@settings(max_examples=400, deadline=None)
@given(gt=hnp.arrays(np.float64, 4, elements=st.floats(-300, 300)),
       direction=hnp.arrays(np.float64, 4, elements=st.floats(-1, 1)),
       scale=st.floats(0, 400))
def _adversarial_2d(gt, direction, scale):
    pred = gt + direction * scale
    p, q = pred.reshape(1, 1, 4), gt.reshape(1, 1, 4)
    checks = [('Fl', np.hypot(*(pred[:2] - gt[:2])), np.hypot(*gt[:2])),
              ('D0', abs(pred[2] - gt[2]), abs(gt[2])),
              ('D1', abs(pred[3] - gt[3]), abs(gt[3]))]
    for name, err, mag in checks:
        outlier = metrics.component_outlier_rate(p, q, ONE, name) == 100.0
        _judge(name, err, mag, 3.0, 0.05)(outlier)


@settings(max_examples=400, deadline=None)
@given(motion=st.floats(0.0, 50.0), error=st.floats(0.0, 20.0), depth=st.floats(2.0, 80.0),
       axis=st.integers(0, 1))
def _adversarial_3d(motion, error, depth, axis):
    d = CALIB.focal_length * CALIB.baseline / depth
    gt = _one(0, 0, d, d)
    gt[0, 0, axis] = motion * CALIB.focal_length / depth
    pred = gt.copy()
    pred[0, 0, axis] += error * CALIB.focal_length / depth
    out = metrics.sparse_eval_3d(pred, gt, ONE, CALIB)
    mag = float(np.linalg.norm(metrics.scene_flow_3d(gt, CALIB)[0, 0]))
    _judge('3D', out['SF_EPE_3D'], mag, 0.3, 0.10)(out['SF_3D'] == 100.0)


def test_criterion_7_threshold_semantics():
    VIOLATIONS.clear()
    _adversarial_2d()
    _adversarial_3d()
    # hand-built boundary cases: exactly at a threshold is never an outlier
    boundary = [
        metrics.component_outlier_rate(_one(3, 0, 1, 1), _one(0, 0, 1, 1), ONE, 'Fl'),
        metrics.component_outlier_rate(_one(0, 0, 105, 1), _one(0, 0, 100, 1), ONE, 'D0'),
        metrics.component_outlier_rate(_one(104, 0, 1, 1), _one(100, 0, 1, 1), ONE, 'Fl'),
    ]
    far = metrics.component_outlier_rate(_one(14, 0, 1, 1), _one(10, 0, 1, 1), ONE, 'Fl')
    passed = not VIOLATIONS and boundary == [0.0, 0.0, 0.0] and far == 100.0
    detail = '{} violations over 800 adversarial fields plus boundary cases'.format(len(VIOLATIONS))
    assert record_criterion(7, 'metric threshold conjunction', passed, detail)


def test_criterion_8_codec_fidelity(tmp_path):
    rng = np.random.default_rng(0)
    worst_flow = worst_disp = worst_pfm = 0.0
    for trial in range(20):
        h, w = rng.integers(1, 40, size=2)
        flow = rng.uniform(-511, 511, (h, w, 2))
        disp = rng.uniform(0.01, 255, (h, w))
        valid = rng.uniform(size=(h, w)) < 0.8
        dataio.write_flow_png(str(tmp_path / 'f.png'), flow, valid)
        dataio.write_disparity_png(str(tmp_path / 'd.png'), disp, valid)
        f, fv = dataio.read_flow_png(str(tmp_path / 'f.png'))
        d, dv = dataio.read_disparity_png(str(tmp_path / 'd.png'))
        assert np.array_equal(fv, valid) and np.array_equal(dv, valid)
        if valid.any():
            worst_flow = max(worst_flow, float(np.abs(f - flow)[valid].max()))
            worst_disp = max(worst_disp, float(np.abs(d - disp)[valid].max()))
        grid = rng.standard_normal((h, w, 3) if trial % 2 else (h, w)).astype(np.float32) * 100
        dataio.write_pfm(str(tmp_path / 'x.pfm'), grid, little_endian=bool(trial % 3))
        worst_pfm = max(worst_pfm, float(np.abs(dataio.read_pfm(str(tmp_path / 'x.pfm')) - grid).max()))
    passed = worst_flow <= 1 / 64 and worst_disp <= 1 / 256 and worst_pfm == 0.0
    detail = 'flow err {:.2e} <= 1/64, disparity err {:.2e} <= 1/256, float map err {:.1e}'.format(
        worst_flow, worst_disp, worst_pfm)
    assert record_criterion(8, 'codec fidelity', passed, detail)
