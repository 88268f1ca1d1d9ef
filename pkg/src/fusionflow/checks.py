"""Numerical self-checks: finite-difference gradient checks of every
differentiable operation and agreement with the brute-force references.

Each check returns its worst relative error; run_checks collects them into a
report with a pass/fail verdict per check.
"""
import time
from dataclasses import dataclass

import numpy as np
import torch

from . import matching, metrics, network, reference, sparse_ops
from .backbone import LidarPyramid, RGBPyramid
from .fusion import FusionLevel

GRADIENT_TOLERANCE = 1e-4
ORACLE_TOLERANCE = 1e-6


def _scalarize(outputs, generator):
    if isinstance(outputs, torch.Tensor):
        outputs = (outputs,)
    total = 0.0
    for out in outputs:
        weights = torch.randn(out.shape, generator=generator, dtype=out.dtype)
        total = total + (out * weights).sum()
    return total


def finite_difference_error(fn, tensors, eps=1e-6, max_elements=64, seed=0, fault=1.0):
    '''
    Compares autograd gradients with central differences of a random linear
    projection of fn's outputs.

    Arg(s):
        fn : callable
            no-argument function returning a tensor or tuple of tensors
        tensors : list[torch.Tensor]
            double-precision leaves (inputs or parameters) to check
        eps : float
            finite-difference step
        max_elements : int
            elements probed per tensor (a random subset when larger)
        fault : float
            multiplier applied to the analytic gradient, for fault injection
    Returns:
        float : max |analytic - numeric| / max |numeric| over all probes
    '''
    for t in tensors:
        t.requires_grad_(True)
        t.grad = None
    proj_seed = torch.Generator().manual_seed(seed)
    loss = _scalarize(fn(), proj_seed)
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)

    rng = np.random.default_rng(seed)
    worst_diff = 0.0
    worst_ref = 0.0
    for t, g in zip(tensors, grads):
        g = torch.zeros_like(t) if g is None else g
        g = g * fault
        flat = t.data.view(-1)
        picks = np.arange(flat.numel())
        if picks.size > max_elements:
            picks = rng.choice(picks, size=max_elements, replace=False)
        for idx in picks:
            original = flat[idx].item()
            with torch.no_grad():
                flat[idx] = original + eps
                plus = _scalarize(fn(), torch.Generator().manual_seed(seed)).item()
                flat[idx] = original - eps
                minus = _scalarize(fn(), torch.Generator().manual_seed(seed)).item()
                flat[idx] = original
            numeric = (plus - minus) / (2 * eps)
            analytic = g.view(-1)[idx].item()
            worst_diff = max(worst_diff, abs(analytic - numeric))
            worst_ref = max(worst_ref, abs(numeric), abs(analytic))
    return worst_diff / max(worst_ref, 1e-12)


def _rand(generator, *shape, low=-1.0, high=1.0):
    return low + (high - low) * torch.rand(*shape, generator=generator, dtype=torch.float64)


'''
Gradient checks
'''
def grad_confidence_conv(fault=1.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    f = _rand(g, 1, 2, 6, 6)
    c = _rand(g, 1, 1, 6, 6, low=0.05, high=1.0)
    w = _rand(g, 3, 2, 3, 3)
    b = _rand(g, 3)
    raw = _rand(g, 3, 3)
    errors = []
    for stride in (1, 2):
        errors.append(finite_difference_error(
            lambda: sparse_ops.confidence_conv(f, c, w, b, raw, stride=stride), [f, c, w, b, raw], fault=fault))
    return max(errors)


def grad_max_confidence_pool(fault=1.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    f = _rand(g, 1, 2, 8, 8)
    c = _rand(g, 1, 1, 8, 8, low=0.0, high=1.0)
    return finite_difference_error(lambda: sparse_ops.max_confidence_pool(f, c), [f, c], fault=fault)


def grad_nn_upsample(fault=1.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    f = _rand(g, 1, 2, 4, 4)
    c = _rand(g, 1, 1, 4, 4, low=0.0, high=1.0)
    return finite_difference_error(lambda: sparse_ops.nn_upsample(f, c), [f, c], fault=fault)


def grad_warp(fault=1.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    f = _rand(g, 1, 2, 6, 6)
    flow = _rand(g, 1, 2, 6, 6, low=-2.0, high=2.0)
    return finite_difference_error(lambda: matching.warp(f, flow), [f, flow], fault=fault)


def grad_cost_volume(fault=1.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    a = _rand(g, 1, 3, 6, 6)
    b = _rand(g, 1, 3, 6, 6)
    return finite_difference_error(lambda: matching.cost_volume(a, b, 2), [a, b], fault=fault)


def grad_upsample_sf(fault=1.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    sf = _rand(g, 1, 4, 3, 3)
    return finite_difference_error(lambda: matching.upsample_sf(sf), [sf], fault=fault)


def grad_estimator(fault=1.0, seed=0):
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    radius = 1
    features = 2
    estimator = matching.FlowEstimator(
        matching.estimator_in_channels(features, radius, coarsest=False), widths=(4, 3)).double()
    f_ref = _rand(g, 1, features, 6, 6)
    f_next = _rand(g, 1, features, 6, 6)
    up = _rand(g, 1, 4, 6, 6, low=-1.5, high=1.5)

    def run():
        sf, hidden, _ = matching.estimate_level(estimator, f_ref, f_next, up, radius)
        return sf, hidden

    return finite_difference_error(run, [f_ref, f_next, up] + list(estimator.parameters()), fault=fault)


def grad_context(fault=1.0, seed=0):
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    context = matching.ContextNetwork(2 + 2 + 3 + 4, widths=(4, 4, 3, 3, 3, 3)).double()
    # the zero-initialized head would hide every upstream gradient
    torch.nn.init.normal_(context.head.weight, std=0.3)
    est = _rand(g, 1, 3, 6, 6)
    f_ref = _rand(g, 1, 2, 6, 6)
    f_next = _rand(g, 1, 2, 6, 6)
    sf = _rand(g, 1, 4, 6, 6)
    return finite_difference_error(
        lambda: matching.context_refine(context, est, f_ref, f_next, sf),
        [est, f_ref, f_next, sf] + list(context.parameters()), fault=fault)


def grad_fusion(fault=1.0, seed=0):
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    level = FusionLevel(3, use_confidence_concat=True).double()
    rgb = _rand(g, 1, 3, 4, 4)
    lidar = _rand(g, 1, 3, 4, 4)
    conf = _rand(g, 1, 1, 4, 4, low=0.0, high=1.0)
    return finite_difference_error(
        lambda: level(rgb, lidar, conf), [rgb, lidar, conf] + list(level.parameters()), fault=fault)


def grad_lidar_pyramid(fault=1.0, seed=0):
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    pyramid = LidarPyramid(channels=(2, 2, 2, 2, 2, 2)).double()
    # uniform propagation kernels on a binary mask create exact confidence
    # ties, where max-confidence pooling is not differentiable
    with torch.no_grad():
        for name, param in pyramid.named_parameters():
            if name.endswith('conf_weight_raw'):
                param.add_(0.5 * torch.randn(param.shape, generator=g, dtype=param.dtype))
    disparity = _rand(g, 1, 1, 64, 64, low=1.0, high=10.0)
    validity = (torch.rand(1, 1, 64, 64, generator=g) < 0.3).double()

    def run():
        features, confidences = pyramid(disparity, validity)
        return tuple(features.values()) + tuple(confidences.values())

    return finite_difference_error(run, [disparity] + list(pyramid.parameters()), max_elements=16, fault=fault)


def grad_rgb_pyramid(fault=1.0, seed=0):
    torch.manual_seed(seed)
    g = torch.Generator().manual_seed(seed)
    pyramid = RGBPyramid(3, channels=(2, 2, 2, 2, 2, 2)).double()
    image = _rand(g, 1, 3, 64, 64, low=0.0, high=1.0)
    return finite_difference_error(
        lambda: tuple(pyramid(image).values()), [image] + list(pyramid.parameters()), max_elements=16, fault=fault)


def _fake_prediction(g, n, h, w):
    levels = {level: _rand(g, n, 4, h // 2 ** level, w // 2 ** level, low=-2, high=2) for level in (6, 5, 4, 3)}
    refined = _rand(g, n, 4, h // 4, w // 4, low=-2, high=2)
    return network.MultiScalePrediction(levels=levels, refined=refined, final=None)


def grad_loss(fault=1.0, seed=0):
    g = torch.Generator().manual_seed(seed)
    pred = _fake_prediction(g, 1, 64, 64)
    gt = _rand(g, 1, 4, 64, 64, low=-8, high=8)
    valid = torch.rand(1, 1, 64, 64, generator=g) < 0.7
    leaves = list(pred.levels.values()) + [pred.refined, gt]
    return finite_difference_error(lambda: network.multiscale_loss(pred, gt, valid).total, leaves, fault=fault)


GRADIENT_CHECKS = {
    'confidence_conv': grad_confidence_conv,
    'max_confidence_pool': grad_max_confidence_pool,
    'nn_upsample': grad_nn_upsample,
    'warp': grad_warp,
    'cost_volume': grad_cost_volume,
    'upsample_sf': grad_upsample_sf,
    'estimator': grad_estimator,
    'context': grad_context,
    'fusion': grad_fusion,
    'lidar_pyramid': grad_lidar_pyramid,
    'rgb_pyramid': grad_rgb_pyramid,
    'loss': grad_loss,
}


'''
Oracle checks: vectorized operators against the per-element references
'''
def _max_rel(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1.0))


def oracle_confidence_conv(seed=0):
    g = torch.Generator().manual_seed(seed)
    f, c = _rand(g, 2, 3, 9, 7), _rand(g, 2, 1, 9, 7, low=0.0, high=1.0)
    c = c * (c > 0.4)
    w, b, raw = _rand(g, 4, 3, 3, 3), _rand(g, 4), _rand(g, 3, 3)
    worst = 0.0
    for stride in (1, 2):
        out = sparse_ops.confidence_conv(f, c, w, b, raw, stride=stride)
        ref = reference.confidence_conv(f.numpy(), c.numpy(), w.numpy(), b.numpy(), raw.numpy(), stride=stride)
        worst = max(worst, _max_rel(out[0], ref[0]), _max_rel(out[1], ref[1]))
    return worst


def oracle_max_confidence_pool(seed=0):
    g = torch.Generator().manual_seed(seed)
    f = _rand(g, 2, 3, 32, 31)
    # coarse quantization forces ties so the tie-break rule is exercised
    c = torch.round(_rand(g, 2, 1, 32, 31, low=0.0, high=1.0) * 3) / 3
    out = sparse_ops.max_confidence_pool(f, c)
    ref = reference.max_confidence_pool(f.numpy(), c.numpy())
    return max(_max_rel(out[0], ref[0]), _max_rel(out[1], ref[1]))


def oracle_nn_upsample(seed=0):
    g = torch.Generator().manual_seed(seed)
    f, c = _rand(g, 1, 3, 16, 16), _rand(g, 1, 1, 16, 16, low=0.0, high=1.0)
    out = sparse_ops.nn_upsample(f, c)
    return max(_max_rel(out[0], reference.nn_upsample(f.numpy())), _max_rel(out[1], reference.nn_upsample(c.numpy())))


def oracle_warp(seed=0):
    g = torch.Generator().manual_seed(seed)
    f = _rand(g, 2, 3, 32, 32)
    integer_flow = torch.randint(-5, 6, (2, 2, 32, 32), generator=g).double()
    fractional = _rand(g, 2, 2, 32, 32, low=-5, high=5)
    return max(_max_rel(matching.warp(f, flow), reference.warp(f.numpy(), flow.numpy()))
               for flow in (integer_flow, fractional))


def oracle_cost_volume(seed=0):
    g = torch.Generator().manual_seed(seed)
    a, b = _rand(g, 1, 3, 12, 10), _rand(g, 1, 3, 12, 10)
    return _max_rel(matching.cost_volume(a, b, 4), reference.cost_volume(a.numpy(), b.numpy(), 4))


def oracle_upsample_sf(seed=0):
    g = torch.Generator().manual_seed(seed)
    sf = _rand(g, 1, 4, 5, 7, low=-10, high=10)
    return _max_rel(matching.upsample_sf(sf), 2.0 * reference.bilinear_upsample2(sf.numpy()))


def oracle_multiscale_loss(seed=0):
    g = torch.Generator().manual_seed(seed)
    pred = _fake_prediction(g, 2, 64, 128)
    gt = _rand(g, 2, 4, 64, 128, low=-8, high=8)
    valid = torch.rand(2, 1, 64, 128, generator=g) < 0.3
    result = network.multiscale_loss(pred, gt, valid)
    fields = {level: pred.levels[level].numpy() for level in (6, 5, 4, 3)}
    fields[2] = pred.refined.numpy()
    total, per_level = reference.multiscale_loss(fields, gt.numpy(), valid[:, 0].numpy(), network.DEFAULT_LEVEL_WEIGHTS)
    worst = _max_rel(result.total.item(), total)
    for level, value in per_level.items():
        worst = max(worst, _max_rel(result.levels[level].item(), value))
    return worst


def random_fields(rng, h=32, w=32):
    gt = np.concatenate([rng.uniform(-30, 30, (h, w, 2)), rng.uniform(1, 60, (h, w, 2))], axis=-1)
    noise = rng.standard_normal((h, w, 4)) * rng.choice([0.5, 3.0, 20.0], size=(h, w, 1))
    valid = rng.uniform(size=(h, w)) < 0.8
    return gt + noise, gt, valid


def oracle_metrics(seed=0):
    rng = np.random.default_rng(seed)
    pred, gt, valid = random_fields(rng)
    report = metrics.evaluate(pred, gt, valid)
    ref = reference.metrics(pred, gt, valid)
    worst = max(_max_rel(getattr(report, key), ref[key]) for key in ref)

    calib = network.dataio.Calibration(focal_length=300.0, cx=15.5, cy=15.5, baseline=0.5)
    mask = rng.uniform(size=valid.shape) < 0.3
    sparse = metrics.sparse_eval_3d(pred, gt, mask, calib)
    ref_rate, ref_epe = reference.sparse_metrics_3d(pred, gt, mask, calib.focal_length, calib.cx, calib.cy,
                                                    calib.baseline)
    worst = max(worst, _max_rel(sparse['SF_3D'], ref_rate), _max_rel(sparse['SF_EPE_3D'], ref_epe))
    return worst


ORACLE_CHECKS = {
    'oracle_confidence_conv': oracle_confidence_conv,
    'oracle_max_confidence_pool': oracle_max_confidence_pool,
    'oracle_nn_upsample': oracle_nn_upsample,
    'oracle_warp': oracle_warp,
    'oracle_cost_volume': oracle_cost_volume,
    'oracle_upsample_sf': oracle_upsample_sf,
    'oracle_multiscale_loss': oracle_multiscale_loss,
    'oracle_metrics': oracle_metrics,
}


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    tolerance: float
    seconds: float

    @property
    def passed(self):
        return bool(np.isfinite(self.max_rel_error)) and self.max_rel_error <= self.tolerance


def run_checks(names=None, inject_fault=None, seed=0):
    '''
    Runs the gradient and oracle checks.

    Arg(s):
        names : list[str]
            subset of checks to run; all when None
        inject_fault : str
            name of a gradient check whose analytic gradient is perturbed by 1%
    Returns:
        list[CheckResult]
    '''
    results = []
    selected = names or list(GRADIENT_CHECKS) + list(ORACLE_CHECKS)
    for name in selected:
        start = time.perf_counter()
        if name in GRADIENT_CHECKS:
            fault = 1.01 if name == inject_fault else 1.0
            error = GRADIENT_CHECKS[name](fault=fault, seed=seed)
            tolerance = GRADIENT_TOLERANCE
        elif name in ORACLE_CHECKS:
            with torch.no_grad():
                error = ORACLE_CHECKS[name](seed=seed)
            tolerance = ORACLE_TOLERANCE
        else:
            raise KeyError('unknown check: {}'.format(name))
        results.append(CheckResult(name, float(error), tolerance, time.perf_counter() - start))
    return results


def format_results(results):
    lines = ['{:<28} {:>14} {:>10} {:>6}'.format('check', 'max_rel_error', 'tolerance', 'status')]
    for r in results:
        lines.append('{:<28} {:>14.3e} {:>10.0e} {:>6}'.format(
            r.name, r.max_rel_error, r.tolerance, 'PASS' if r.passed else 'FAIL'))
    return '\n'.join(lines)
