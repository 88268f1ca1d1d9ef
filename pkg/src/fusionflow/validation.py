"""Input validation for samples handed to the estimator."""
import numpy as np

from .dataio import Sample, SparseDepthInput


def check_image(image, name='image'):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError('{} must be H x W x 3, got shape {}'.format(name, image.shape))
    if not np.isfinite(image).all():
        raise ValueError('{} contains non-finite values'.format(name))
    if image.min() < 0 or image.max() > 1:
        raise ValueError('{} values must lie in [0, 1]'.format(name))
    return image.astype(np.float32, copy=False)


def check_sparse_depth(depth, shape, name='depth'):
    if not isinstance(depth, SparseDepthInput):
        raise TypeError('{} must be a SparseDepthInput, got {}'.format(name, type(depth).__name__))
    if depth.disparity.shape != tuple(shape):
        raise ValueError('{} has shape {}, expected {}'.format(name, depth.disparity.shape, tuple(shape)))
    values = depth.disparity[depth.validity]
    if not np.isfinite(values).all() or (values <= 0).any():
        raise ValueError('{} must be finite and positive wherever valid'.format(name))
    return depth


def check_sample(sample, require_gt=True):
    if not isinstance(sample, Sample):
        raise TypeError('expected a Sample, got {}'.format(type(sample).__name__))
    shape = check_image(sample.image_t, 'image_t').shape[:2]
    if check_image(sample.image_t1, 'image_t1').shape[:2] != shape:
        raise ValueError('image_t1 differs in size from image_t')
    check_sparse_depth(sample.depth_t, shape, 'depth_t')
    check_sparse_depth(sample.depth_t1, shape, 'depth_t1')
    if require_gt:
        if sample.gt.shape != shape + (4,):
            raise ValueError('gt must be H x W x 4, got {}'.format(sample.gt.shape))
        if sample.valid.shape != shape:
            raise ValueError('valid must be H x W, got {}'.format(sample.valid.shape))
        if not np.isfinite(sample.gt[sample.valid]).all():
            raise ValueError('gt is not finite on valid pixels')
    return sample


def check_samples(samples, require_gt=True, same_size=False):
    if isinstance(samples, Sample):
        samples = [samples]
    samples = list(samples)
    if not samples:
        raise ValueError('no samples given')
    for sample in samples:
        check_sample(sample, require_gt)
    if same_size and len({s.shape for s in samples}) != 1:
        raise ValueError('training samples must share one size')
    return samples
