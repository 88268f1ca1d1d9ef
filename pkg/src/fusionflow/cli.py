"""Command-line interface: train, eval, infer, synth and check.

Exit codes: 0 success, 1 check or metric failure, 2 usage or I/O error.
"""
import argparse
import logging
import os
import sys

import numpy as np

from . import checks, config, dataio, metrics, network, pipeline

log = logging.getLogger('fusionflow')

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2

DEFAULTS = {
    'run.seed': '0',
    'run.out': 'runs/latest',
    'run.checkpoint': '',
    'model.preset': 'full',
    'data.path': 'synth',
    'data.count': '4',
    'data.size': '64x128',
    'data.split': '',
    'data.second_frame_mode': 'aligned',
    'train.steps': '1000',
    'train.batch_size': '4',
    'train.learning_rate': '1e-4',
    'train.density_range': '0.002,0.2',
    'train.fraction': '',
    'train.points': '',
    'train.noise_sigma': str(dataio.DEFAULT_NOISE_SIGMA),
    'train.augment': 'true',
    'train.plateau_patience': '0',
    'train.checkpoint_every': '0',
    'eval.points': '',
    'eval.fraction': '',
    'eval.noise_sigma': '0',
    'eval.sparse_eval': 'false',
    'eval.error_maps': 'false',
    'eval.max_sf_epe': '',
}


class UsageError(Exception):
    pass


def _add_common(parser):
    parser.add_argument('--config', help='key = value config file (default: ${})'.format(config.CONFIG_ENV))
    parser.add_argument('--seed', dest='run.seed', help='root random seed')
    parser.add_argument('--out', dest='run.out', help='output directory')


def _add_model(parser):
    parser.add_argument('--preset', dest='model.preset', choices=['full', 'desk'],
                        help='full widths or reduced desk-scale widths')
    parser.add_argument('--no-confidence-conv', dest='model.use_confidence_conv', action='store_const',
                        const='false', help='plain convolutions in the LiDAR pyramid')
    parser.add_argument('--no-confidence-concat', dest='model.use_confidence_concat', action='store_const',
                        const='false', help='do not feed LiDAR confidence to the fusion module')
    parser.add_argument('--channels', dest='model.channels', help='pyramid channels, six comma-separated counts')
    parser.add_argument('--search-radius', dest='model.search_radius')
    parser.add_argument('--robust-loss', dest='model.robust_loss', action='store_const', const='true')


def _add_data(parser):
    parser.add_argument('--data', dest='data.path', help="'synth' or a dataset directory")
    parser.add_argument('--count', dest='data.count', help='number of synthetic samples')
    parser.add_argument('--size', dest='data.size', help='synthetic sample size HxW')
    parser.add_argument('--split', dest='data.split', help='comma-separated frame indices to use')
    parser.add_argument('--second-frame-mode', dest='data.second_frame_mode', choices=['aligned', 'dewarped'])


def build_parser():
    parser = argparse.ArgumentParser(prog='fusionflow', description=__doc__.splitlines()[0])
    parser.add_argument('-v', '--verbose', action='store_true')
    commands = parser.add_subparsers(dest='command', required=True)

    train = commands.add_parser('train', help='train a model')
    _add_common(train)
    _add_model(train)
    _add_data(train)
    train.add_argument('--steps', dest='train.steps')
    train.add_argument('--batch-size', dest='train.batch_size')
    train.add_argument('--lr', dest='train.learning_rate')
    train.add_argument('--density-range', dest='train.density_range', help='min,max LiDAR fraction')
    train.add_argument('--fraction', dest='train.fraction', help='fixed LiDAR fraction')
    train.add_argument('--points', dest='train.points', help='fixed LiDAR point count')
    train.add_argument('--noise-sigma', dest='train.noise_sigma')
    train.add_argument('--no-augment', dest='train.augment', action='store_const', const='false')
    train.add_argument('--plateau-patience', dest='train.plateau_patience')
    train.add_argument('--checkpoint-every', dest='train.checkpoint_every')

    evaluate = commands.add_parser('eval', help='evaluate a checkpoint')
    _add_common(evaluate)
    _add_model(evaluate)
    _add_data(evaluate)
    evaluate.add_argument('--checkpoint', dest='run.checkpoint')
    evaluate.add_argument('--points', dest='eval.points', help='LiDAR point counts, comma-separated')
    evaluate.add_argument('--fraction', dest='eval.fraction', help='LiDAR fractions, comma-separated')
    evaluate.add_argument('--noise-sigma', dest='eval.noise_sigma')
    evaluate.add_argument('--sparse-eval', dest='eval.sparse_eval', action='store_const', const='true')
    evaluate.add_argument('--error-maps', dest='eval.error_maps', action='store_const', const='true')
    evaluate.add_argument('--max-sf-epe', dest='eval.max_sf_epe', help='exit 1 if pooled SF-EPE exceeds this')

    infer = commands.add_parser('infer', help='predict scene flow for one frame pair')
    _add_common(infer)
    infer.add_argument('--checkpoint', dest='run.checkpoint')
    infer.add_argument('--image-t', required=True)
    infer.add_argument('--image-t1', required=True)
    infer.add_argument('--depth-t', required=True, help='KITTI 16-bit disparity PNG, 0 = no measurement')
    infer.add_argument('--depth-t1', required=True)
    infer.add_argument('--gt-flow', help='KITTI flow PNG for an error map')
    infer.add_argument('--gt-disp0')
    infer.add_argument('--gt-disp1')

    synth = commands.add_parser('synth', help='generate a synthetic dataset')
    _add_common(synth)
    synth.add_argument('--count', dest='data.count')
    synth.add_argument('--size', dest='data.size')

    check = commands.add_parser('check', help='run gradient and oracle self-checks')
    _add_common(check)
    check.add_argument('--only', help='comma-separated check names')
    check.add_argument('--inject-fault', help='perturb the analytic gradient of this check (testing aid)')
    return parser


def resolve(args):
    '''
    defaults <- config file <- explicit flags
    '''
    values = dict(DEFAULTS)
    path = getattr(args, 'config', None) or config.default_config_path()
    if path:
        values.update(config.read_config(path))
    for key, value in vars(args).items():
        if '.' in key and value is not None:
            values[key] = str(value)
    return values


def _parse_size(text):
    try:
        h, w = (int(v) for v in text.lower().split('x'))
    except ValueError:
        raise UsageError('size must look like HxW, got {!r}'.format(text))
    return h, w


def _parse_list(text, cast):
    return [cast(v) for v in text.split(',') if v.strip()] if text else []


def _optional(text, cast):
    return cast(text) if text not in ('', None) else None


def model_config(values, base=None):
    settings = config.section(values, 'model')
    preset = settings.pop('preset', 'full')
    if base is not None:
        cfg_values = {k: v for k, v in base.__dict__.items()}
    else:
        cfg_values = dict(network.DESK_WIDTHS) if preset == 'desk' else {}
    typed = network.ModelConfig.from_strings(settings) if settings else None
    if typed is not None:
        for key in settings:
            cfg_values[key] = getattr(typed, key)
    return network.ModelConfig(**cfg_values)


def load_data(values):
    split = _parse_list(values['data.split'], int) or None
    return pipeline.resolve_dataset(
        values['data.path'],
        count=int(values['data.count']),
        size=_parse_size(values['data.size']),
        seed=int(values['run.seed']),
        split=split,
        second_frame_mode=values['data.second_frame_mode'])


def _prepare_out(values):
    out = values['run.out']
    os.makedirs(out, exist_ok=True)
    config.write_config(os.path.join(out, 'resolved_config.txt'), values)
    return out


def _eval_settings(values):
    points = _parse_list(values['eval.points'], int)
    fractions = _parse_list(values['eval.fraction'], float)
    return points, fractions


def cmd_train(values):
    samples = load_data(values)
    cfg = model_config(values)
    out = _prepare_out(values)
    schedule = network.TrainSchedule(
        steps=int(values['train.steps']),
        batch_size=int(values['train.batch_size']),
        learning_rate=float(values['train.learning_rate']),
        density_range=tuple(_parse_list(values['train.density_range'], float)),
        fixed_fraction=_optional(values['train.fraction'], float),
        fixed_points=_optional(values['train.points'], int),
        noise_sigma=float(values['train.noise_sigma']),
        augment=network.parse_bool(values['train.augment']),
        second_frame_mode=values['data.second_frame_mode'],
        seed=int(values['run.seed']),
        plateau_patience=int(values['train.plateau_patience']),
        checkpoint_every=int(values['train.checkpoint_every']),
        out_dir=out)
    model, history = network.train(samples, cfg, schedule)

    points, fractions = _eval_settings(values)
    rows, pooled = pipeline.evaluate_dataset(
        model, samples, seed=int(values['run.seed']),
        fraction=fractions[0] if fractions else None,
        points=points[0] if points else None,
        noise_sigma=float(values['eval.noise_sigma']),
        sparse_eval=network.parse_bool(values['eval.sparse_eval']))
    metrics.write_reports_csv(os.path.join(out, 'final_metrics.csv'), rows + [('all', pooled)])
    print('final loss {:.6f}'.format(history[-1]['total']))
    print(metrics.format_table(pooled, title='training set'))
    return EXIT_OK


def cmd_eval(values):
    checkpoint = values['run.checkpoint']
    if not checkpoint or not os.path.isfile(checkpoint):
        raise UsageError('checkpoint not found: {}'.format(checkpoint or '(none given)'))
    stored, _ = network.read_checkpoint(checkpoint)
    cfg = model_config(values, base=stored)
    try:
        model = network.load_checkpoint(checkpoint, cfg)
    except network.CheckpointError as exc:
        raise UsageError(str(exc))
    samples = load_data(values)
    out = _prepare_out(values)
    seed = int(values['run.seed'])
    sparse_eval = network.parse_bool(values['eval.sparse_eval'])
    points, fractions = _eval_settings(values)

    if len(points) + len(fractions) > 1:
        rows = pipeline.density_sweep(model, samples, points, fractions, seed, sparse_eval)
        pooled = None
        for label, report in rows:
            print(metrics.format_table(report, title=label))
    else:
        error_dir = os.path.join(out, 'error_maps') if network.parse_bool(values['eval.error_maps']) else None
        per_sample, pooled = pipeline.evaluate_dataset(
            model, samples, seed,
            fraction=fractions[0] if fractions else None,
            points=points[0] if points else None,
            noise_sigma=float(values['eval.noise_sigma']),
            sparse_eval=sparse_eval,
            error_map_dir=error_dir)
        rows = per_sample + [('all', pooled)]
        print(metrics.format_table(pooled, title='all samples'))
    metrics.write_reports_csv(os.path.join(out, 'metrics.csv'), rows)

    limit = _optional(values['eval.max_sf_epe'], float)
    if limit is not None:
        worst = max(r.SF_EPE for _, r in rows if r.SF_EPE is not None)
        if worst > limit:
            print('SF-EPE {:.4f} exceeds limit {}'.format(worst, limit))
            return EXIT_FAILURE
    return EXIT_OK


def _read_depth(path):
    try:
        disparity, valid = dataio.read_disparity_png(path)
    except dataio.IngestionError as exc:
        raise UsageError(str(exc))
    return dataio.SparseDepthInput(disparity, valid)


def cmd_infer(values, args):
    checkpoint = values['run.checkpoint']
    if not checkpoint or not os.path.isfile(checkpoint):
        raise UsageError('checkpoint not found: {}'.format(checkpoint or '(none given)'))
    model = network.load_checkpoint(checkpoint)
    try:
        image_t = dataio.read_image(args.image_t)
        image_t1 = dataio.read_image(args.image_t1)
    except dataio.IngestionError as exc:
        raise UsageError(str(exc))
    depth_t, depth_t1 = _read_depth(args.depth_t), _read_depth(args.depth_t1)
    h, w = image_t.shape[:2]
    placeholder = dataio.Calibration(1.0, 0.0, 0.0, 1.0)
    sample = dataio.Sample(image_t, image_t1, depth_t, depth_t1,
                           np.zeros((h, w, 4), np.float32), np.zeros((h, w), bool), placeholder)
    pred = network.predict(model, [sample])[0]

    out = _prepare_out(values)
    np.save(os.path.join(out, 'sceneflow.npy'), pred.astype(np.float32))
    everywhere = np.ones((h, w), dtype=bool)
    dataio.write_flow_png(os.path.join(out, 'flow.png'), pred[..., :2], everywhere)
    dataio.write_disparity_png(os.path.join(out, 'disp_0.png'), pred[..., 2], everywhere)
    dataio.write_disparity_png(os.path.join(out, 'disp_1.png'), pred[..., 3], everywhere)

    if args.gt_flow and args.gt_disp0 and args.gt_disp1:
        flow, flow_valid = dataio.read_flow_png(args.gt_flow)
        d0, d0_valid = dataio.read_disparity_png(args.gt_disp0)
        d1, d1_valid = dataio.read_disparity_png(args.gt_disp1)
        gt = np.concatenate([flow, d0[..., None], d1[..., None]], axis=-1)
        valid = flow_valid & d0_valid & d1_valid
        metrics.render_error_map(pred, gt, valid, os.path.join(out, 'error_map.png'))
        print(metrics.format_table(metrics.evaluate(pred, gt, valid)))
    print('wrote {}'.format(out))
    return EXIT_OK


def cmd_synth(values):
    count = int(values['data.count'])
    h, w = _parse_size(values['data.size'])
    seed = int(values['run.seed'])
    out = _prepare_out(values)
    records = [{'seed': seed * 100003 + index, 'height': h, 'width': w} for index in range(count)]
    dataio.write_manifest(os.path.join(out, 'manifest.jsonl'), records)
    for index, record in enumerate(records):
        sample = dataio.synth_generate(record['seed'], (h, w))
        dataio.write_kitti_sample(out, index, sample)
    print('wrote {} samples to {}'.format(count, out))
    return EXIT_OK


def cmd_check(values, args):
    names = _parse_list(args.only, str) or None
    results = checks.run_checks(names, inject_fault=args.inject_fault, seed=int(values['run.seed']))
    print(checks.format_results(results))
    failed = [r for r in results if not r.passed]
    for r in failed:
        print('FAILED {}: max relative error {:.3e} > {:.0e}'.format(r.name, r.max_rel_error, r.tolerance))
    return EXIT_FAILURE if failed else EXIT_OK


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format='%(message)s')
    try:
        values = resolve(args)
        if args.command == 'train':
            return cmd_train(values)
        if args.command == 'eval':
            return cmd_eval(values)
        if args.command == 'infer':
            return cmd_infer(values, args)
        if args.command == 'synth':
            return cmd_synth(values)
        if args.command == 'check':
            return cmd_check(values, args)
    except (UsageError, config.ConfigError, pipeline.DatasetNotFound, dataio.IngestionError,
            dataio.ConfigurationError, ValueError, KeyError) as exc:
        print('error: {}'.format(exc), file=sys.stderr)
        return EXIT_USAGE
    except network.TrainingDiverged as exc:
        print('error: {}'.format(exc), file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_USAGE


if __name__ == '__main__':
    sys.exit(main())
