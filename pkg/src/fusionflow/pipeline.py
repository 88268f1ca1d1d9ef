"""Dataset resolution and evaluation shared by the CLI and the estimator."""
import os

import numpy as np

from . import dataio, metrics, network

DEFAULT_EVAL_FRACTION = 0.05


class DatasetNotFound(FileNotFoundError):
    pass


def resolve_dataset(spec, count=4, size=(64, 128), seed=0, split=None, second_frame_mode='aligned'):
    '''
    Loads samples from a dataset description.

    Arg(s):
        spec : str
            'synth' for freshly generated scenes, or a directory holding a
            synthetic manifest (manifest.jsonl), a KITTI scene flow layout
            (flow_occ/) or a FlyingThings3D layout (disparity_change/)
        split : list[int]
            frame indices to keep for KITTI, or sample positions otherwise
    Returns:
        list[Sample]
    '''
    if spec == 'synth':
        samples = dataio.synth_dataset(count, size, seed)
    else:
        if not os.path.isdir(spec):
            raise DatasetNotFound('dataset directory not found: {}'.format(spec))
        manifest = os.path.join(spec, 'manifest.jsonl')
        if os.path.isfile(manifest):
            samples = dataio.synth_from_manifest(manifest)
        elif os.path.isdir(os.path.join(spec, 'flow_occ')):
            indices = dataio.list_kitti_indices(spec)
            if split is not None:
                indices = [i for i in indices if i in set(split)]
                split = None
            samples = [dataio.load_kitti_sample(dataio.kitti_paths(spec, i), second_frame_mode) for i in indices]
        elif os.path.isdir(os.path.join(spec, 'disparity_change')):
            samples = [dataio.load_ft3d_sample(dataio.ft3d_paths(spec, *key), second_frame_mode=second_frame_mode)
                       for key in dataio.list_ft3d_frames(spec)]
        else:
            raise DatasetNotFound('no manifest.jsonl, flow_occ/ or disparity_change/ in {}'.format(spec))
    if split is not None:
        samples = [samples[i] for i in split]
    if second_frame_mode == 'dewarped':
        samples = [dataio.synth_dewarped(s) if 'disparity_t1_own' in s.meta else s for s in samples]
    return samples


def eval_lidar(sample, rng, fraction=None, points=None, noise_sigma=0.0):
    '''
    Draws the evaluation LiDAR inputs of one sample. Without fraction or
    points the default evaluation density is used.
    '''
    if fraction is None and points is None:
        fraction = DEFAULT_EVAL_FRACTION
    inputs = []
    for dense in (sample.depth_t, sample.depth_t1):
        if points is not None:
            sparse = dataio.sample_lidar(dense, rng, count=points)
        else:
            sparse = dataio.sample_lidar(dense, rng, fraction=fraction)
        inputs.append(dataio.add_noise(sparse, noise_sigma, rng))
    return inputs


def evaluate_dataset(model, samples, seed=0, fraction=None, points=None, noise_sigma=0.0,
                     sparse_eval=False, error_map_dir=None):
    '''
    Predicts every sample with seeded LiDAR inputs and computes its metrics.

    Returns:
        list[tuple[str, MetricsReport]] : per-sample reports
        MetricsReport : pooled report
    '''
    rng = np.random.default_rng(seed)
    rows = []
    for index, sample in enumerate(samples):
        depth_t, depth_t1 = eval_lidar(sample, rng, fraction, points, noise_sigma)
        pred = network.predict(model, [sample], [depth_t], [depth_t1])[0]
        input_mask = depth_t.validity if sparse_eval else None
        report = metrics.evaluate(pred, sample.gt, sample.valid, sample.calib, input_mask)
        label = sample.name or str(index)
        rows.append((label, report))
        if error_map_dir:
            os.makedirs(error_map_dir, exist_ok=True)
            metrics.render_error_map(pred, sample.gt, sample.valid,
                                     os.path.join(error_map_dir, '{}_error.png'.format(label)))
    return rows, metrics.aggregate([r for _, r in rows])


def density_sweep(model, samples, points_list=None, fractions=None, seed=0, sparse_eval=False):
    '''
    One pooled report per density setting.
    '''
    rows = []
    for points in points_list or []:
        _, report = evaluate_dataset(model, samples, seed, points=points, sparse_eval=sparse_eval)
        rows.append(('points={}'.format(points), report))
    for fraction in fractions or []:
        _, report = evaluate_dataset(model, samples, seed, fraction=fraction, sparse_eval=sparse_eval)
        rows.append(('fraction={}'.format(fraction), report))
    return rows
