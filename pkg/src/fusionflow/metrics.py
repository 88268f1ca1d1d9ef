"""Dense and sparse scene flow metrics, 3D projection and error-map rendering.

Fields are H x W x 4 numpy arrays of (u, v, d0, d1) in pixels. A metric that
has no valid pixel to average over is reported as None, never as 0.
"""
import csv
import dataclasses
from dataclasses import dataclass

import cv2
import numpy as np

OUTLIER_PIXELS = 3.0
OUTLIER_RELATIVE = 0.05
OUTLIER_METERS = 0.3
OUTLIER_RELATIVE_3D = 0.10

# Logarithmic error bins (upper edges in pixels) and their RGB colors
ERROR_BIN_EDGES = (0.1875, 0.375, 0.75, 1.5, 3.0, 6.0, 12.0, 24.0, 48.0, np.inf)
ERROR_BIN_COLORS = np.array([
    [49, 54, 149],
    [69, 117, 180],
    [116, 173, 209],
    [171, 217, 233],
    [224, 243, 248],
    [254, 224, 144],
    [253, 174, 97],
    [244, 109, 67],
    [215, 48, 39],
    [165, 0, 38],
], dtype=np.uint8)
NEUTRAL_COLOR = np.array([128, 128, 128], dtype=np.uint8)

METRIC_NAMES = ('D0', 'D1', 'Fl', 'SF', 'SF_EPE', 'Fl_EPE', 'SF_3D', 'SF_EPE_3D')


def _relative(error, magnitude):
    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        rel = error / magnitude
    # zero ground truth: any positive error is infinitely relative
    return np.where(magnitude > 0, rel, np.where(error > 0, np.inf, 0.0))


def outlier_mask(error, magnitude, absolute=OUTLIER_PIXELS, relative=OUTLIER_RELATIVE):
    '''
    A pixel is an outlier only when it exceeds both the absolute and the
    relative threshold.
    '''
    return (error > absolute) & (_relative(error, magnitude) > relative)


def flow_outliers(pred, gt):
    error = np.linalg.norm(pred[..., :2] - gt[..., :2], axis=-1)
    return outlier_mask(error, np.linalg.norm(gt[..., :2], axis=-1))


def disparity_outliers(pred, gt, channel):
    error = np.abs(pred[..., channel] - gt[..., channel])
    return outlier_mask(error, np.abs(gt[..., channel]))


def _rate(mask, valid):
    n = int(valid.sum())
    if n == 0:
        return None
    return 100.0 * float((mask & valid).sum()) / n


def component_outlier_rate(pred, gt, valid, component):
    '''
    Percentage of valid pixels that are outliers in one component.

    Arg(s):
        pred, gt : numpy.ndarray
            H x W x 4 scene flow fields
        valid : numpy.ndarray
            H x W bool mask
        component : str
            'D0', 'D1' or 'Fl'
    Returns:
        float : percentage, or None without valid pixels
    '''
    if component == 'Fl':
        mask = flow_outliers(pred, gt)
    elif component == 'D0':
        mask = disparity_outliers(pred, gt, 2)
    elif component == 'D1':
        mask = disparity_outliers(pred, gt, 3)
    else:
        raise ValueError('unknown component: {}'.format(component))
    return _rate(mask, valid)


def sf_outliers(pred, gt):
    return disparity_outliers(pred, gt, 2) | disparity_outliers(pred, gt, 3) | flow_outliers(pred, gt)


def sf_outlier_rate(pred, gt, valid):
    '''
    Percentage of valid pixels that are outliers in any of D0, D1 or Fl.
    '''
    return _rate(sf_outliers(pred, gt), valid)


def _mean(values, valid):
    if not valid.any():
        return None
    return float(values[valid].mean())


def sf_epe(pred, gt, valid):
    return _mean(np.linalg.norm(pred - gt, axis=-1), valid)


def fl_epe(pred, gt, valid):
    return _mean(np.linalg.norm(pred[..., :2] - gt[..., :2], axis=-1), valid)


def project_3d(x, y, disparity, calib):
    '''
    Back-projects pixels with disparity to camera coordinates in meters.
    Points with non-positive disparity come back as NaN.

    Returns:
        numpy.ndarray : ... x 3 points (X, Y, Z)
    '''
    x, y, disparity = np.broadcast_arrays(
        np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64), np.asarray(disparity, dtype=np.float64))
    with np.errstate(divide='ignore', invalid='ignore', over='ignore'):
        z = np.where(disparity > 0, calib.focal_length * calib.baseline / disparity, np.nan)
    return np.stack([(x - calib.cx) * z / calib.focal_length, (y - calib.cy) * z / calib.focal_length, z], axis=-1)


def scene_flow_3d(field_, calib):
    '''
    3D motion of every pixel: the point at (x, y) with disparity d0 moves to
    the point at (x + u, y + v) with disparity d1.

    Returns:
        numpy.ndarray : H x W x 3 motion vectors (NaN where a disparity <= 0)
    '''
    h, w = field_.shape[:2]
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    start = project_3d(xs, ys, field_[..., 2], calib)
    end = project_3d(xs + field_[..., 0], ys + field_[..., 1], field_[..., 3], calib)
    return end - start


def sparse_eval_3d(pred, gt, input_mask, calib, valid=None):
    '''
    Sparse evaluation at the LiDAR input locations.

    Returns:
        dict : SF_3D (percent), SF_EPE_3D (meters), Fl (percent), Fl_EPE
            (pixels), sparse_count and excluded_3d (points whose predicted or
            ground-truth disparity is not positive)
    '''
    mask = input_mask.astype(bool)
    if valid is not None:
        mask = mask & valid
    sf_pred = scene_flow_3d(pred, calib)
    sf_gt = scene_flow_3d(gt, calib)
    finite = np.isfinite(sf_pred).all(axis=-1) & np.isfinite(sf_gt).all(axis=-1)
    usable = mask & finite

    error = np.linalg.norm(np.nan_to_num(sf_pred - sf_gt), axis=-1)
    magnitude = np.linalg.norm(np.nan_to_num(sf_gt), axis=-1)
    outliers = outlier_mask(error, magnitude, OUTLIER_METERS, OUTLIER_RELATIVE_3D)
    return {
        'SF_3D': _rate(outliers, usable),
        'SF_EPE_3D': _mean(error, usable),
        'Fl': _rate(flow_outliers(pred, gt), mask),
        'Fl_EPE': fl_epe(pred, gt, mask),
        'sparse_count': int(mask.sum()),
        'excluded_3d': int((mask & ~finite).sum()),
    }


@dataclass
class MetricsReport:
    D0: float = None
    D1: float = None
    Fl: float = None
    SF: float = None
    SF_EPE: float = None
    Fl_EPE: float = None
    SF_3D: float = None
    SF_EPE_3D: float = None
    valid_count: int = 0
    sparse_count: int = 0
    excluded_3d: int = 0

    def as_dict(self):
        return dataclasses.asdict(self)


def evaluate(pred, gt, valid, calib=None, input_mask=None):
    '''
    Dense metrics over valid pixels; with an input mask and calibration the
    sparse metrics replace Fl and Fl_EPE by their values on the input points
    and add the 3D metrics.
    '''
    valid = valid.astype(bool)
    report = MetricsReport(
        D0=component_outlier_rate(pred, gt, valid, 'D0'),
        D1=component_outlier_rate(pred, gt, valid, 'D1'),
        Fl=component_outlier_rate(pred, gt, valid, 'Fl'),
        SF=sf_outlier_rate(pred, gt, valid),
        SF_EPE=sf_epe(pred, gt, valid),
        Fl_EPE=fl_epe(pred, gt, valid),
        valid_count=int(valid.sum()))
    if input_mask is not None:
        if calib is None:
            raise ValueError('sparse evaluation needs a calibration')
        sparse = sparse_eval_3d(pred, gt, input_mask, calib, valid)
        for key, value in sparse.items():
            setattr(report, key, value)
    return report


def aggregate(reports):
    '''
    Pools per-sample reports, weighting dense metrics by valid pixel count and
    sparse metrics by sparse point count.
    '''
    dense = ('D0', 'D1', 'SF', 'SF_EPE')
    sparse = ('SF_3D', 'SF_EPE_3D')
    flow_is_sparse = any(r.sparse_count for r in reports)
    out = MetricsReport(
        valid_count=sum(r.valid_count for r in reports),
        sparse_count=sum(r.sparse_count for r in reports),
        excluded_3d=sum(r.excluded_3d for r in reports))
    for name in METRIC_NAMES:
        if name in dense:
            weight = 'valid_count'
        elif name in sparse or flow_is_sparse:
            weight = 'sparse_count'
        else:
            weight = 'valid_count'
        pairs = [(getattr(r, name), getattr(r, weight)) for r in reports if getattr(r, name) is not None]
        total = sum(w for _, w in pairs)
        if pairs and total > 0:
            setattr(out, name, sum(v * w for v, w in pairs) / total)
    return out


def format_table(report, title=None):
    lines = []
    if title:
        lines.append(title)
    lines.append('{:<10} {:>12} {:>12}'.format('metric', 'value', 'valid_count'))
    for name in METRIC_NAMES:
        value = getattr(report, name)
        text = 'n/a' if value is None else '{:.4f}'.format(value)
        on_points = name in ('SF_3D', 'SF_EPE_3D') or (name in ('Fl', 'Fl_EPE') and report.sparse_count)
        count = report.sparse_count if on_points else report.valid_count
        lines.append('{:<10} {:>12} {:>12}'.format(name, text, count))
    return '\n'.join(lines)


def write_reports_csv(path, rows):
    '''
    Writes one row per (label, report) pair.
    '''
    fields = ['label'] + list(METRIC_NAMES) + ['valid_count', 'sparse_count', 'excluded_3d']
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for label, report in rows:
            row = {'label': label}
            for key, value in report.as_dict().items():
                row[key] = '' if value is None else value
            writer.writerow(row)


def error_bins(epe):
    return np.searchsorted(np.asarray(ERROR_BIN_EDGES), epe, side='left')


def render_error_map(pred, gt, valid, path=None):
    '''
    Colors the per-pixel scene flow endpoint error on a fixed logarithmic
    scale. Invalid pixels are gray. Writes a PNG when a path is given.

    Returns:
        numpy.ndarray : H x W x 3 uint8 RGB image
    '''
    epe = np.linalg.norm(pred - gt, axis=-1)
    image = ERROR_BIN_COLORS[error_bins(epe)]
    image[~valid.astype(bool)] = NEUTRAL_COLOR
    if path is not None:
        if not cv2.imwrite(path, cv2.cvtColor(image, cv2.COLOR_RGB2BGR)):
            raise IOError('could not write {}'.format(path))
    return image
