"""Dataset ingestion, LiDAR simulation, photometric augmentation and a
synthetic scene generator with exact ground truth.

Grids are numpy arrays in H x W (x C) layout. Scene flow ground truth is an
H x W x 4 array of (u, v, d0, d1) in pixels, aligned to the first frame.
"""
import dataclasses
import json
import logging
import os
import re
import warnings
from dataclasses import dataclass, field

import cv2
import numpy as np

log = logging.getLogger(__name__)

FLOW_SCALE = 64.0
FLOW_OFFSET = 2 ** 15
DISPARITY_SCALE = 256.0
MIN_DENSITY = 0.002
MAX_DENSITY = 0.2
MIN_DISPARITY = 1e-3
DEFAULT_NOISE_SIGMA = 0.1

# FlyingThings3D renders use a fixed virtual camera
FT3D_FOCAL_LENGTH = 1050.0
FT3D_BASELINE = 1.0


class IngestionError(Exception):
    '''Raised when a dataset file is missing or malformed.'''


class ConfigurationError(ValueError):
    '''Raised for invalid sampling or augmentation settings.'''


@dataclass
class Calibration:
    focal_length: float
    cx: float
    cy: float
    baseline: float

    def __post_init__(self):
        if self.focal_length <= 0 or self.baseline <= 0:
            raise ValueError('focal length and baseline must be positive, got {} and {}'.format(
                self.focal_length, self.baseline))


@dataclass
class SparseDepthInput:
    disparity: np.ndarray
    validity: np.ndarray

    def __post_init__(self):
        self.disparity = np.asarray(self.disparity, dtype=np.float32)
        self.validity = np.asarray(self.validity, dtype=bool)
        if self.disparity.shape != self.validity.shape:
            raise ValueError('disparity {} and validity {} differ in shape'.format(
                self.disparity.shape, self.validity.shape))

    @property
    def count(self):
        return int(self.validity.sum())

    @property
    def density(self):
        return self.count / max(self.validity.size, 1)


@dataclass
class Sample:
    image_t: np.ndarray
    image_t1: np.ndarray
    depth_t: SparseDepthInput
    depth_t1: SparseDepthInput
    gt: np.ndarray
    valid: np.ndarray
    calib: Calibration
    name: str = ''
    meta: dict = field(default_factory=dict)

    @property
    def shape(self):
        return self.image_t.shape[:2]

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


'''
KITTI scene flow 2015 codecs
'''
def _read_png16(path, channels):
    if not os.path.isfile(path):
        raise IngestionError('missing file: {}'.format(path))
    raw = cv2.imread(path, cv2.IMREAD_UNCHANGED)
    if raw is None:
        raise IngestionError('unreadable PNG: {}'.format(path))
    if raw.dtype != np.uint16:
        raise IngestionError('expected 16-bit PNG, got {}: {}'.format(raw.dtype, path))
    if channels == 1 and raw.ndim != 2:
        raise IngestionError('expected single-channel PNG: {}'.format(path))
    if channels == 3 and (raw.ndim != 3 or raw.shape[2] != 3):
        raise IngestionError('expected three-channel PNG: {}'.format(path))
    return raw


def encode_flow(flow, valid):
    '''
    Encodes optical flow to the KITTI 16-bit layout (u, v, valid) in RGB order.
    '''
    raw = np.zeros(flow.shape[:2] + (3,), dtype=np.uint16)
    scaled = np.rint(flow * FLOW_SCALE + FLOW_OFFSET)
    raw[..., :2] = np.clip(scaled, 0, 65535).astype(np.uint16)
    raw[..., 2] = valid.astype(np.uint16)
    raw[~valid, :2] = 0
    return raw


def decode_flow(raw):
    flow = (raw[..., :2].astype(np.float64) - FLOW_OFFSET) / FLOW_SCALE
    valid = raw[..., 2] > 0
    flow[~valid] = 0.0
    return flow.astype(np.float32), valid


def encode_disparity(disparity, valid):
    raw = np.rint(np.asarray(disparity, dtype=np.float64) * DISPARITY_SCALE)
    # a valid disparity must never collapse onto the invalid code
    raw = np.clip(raw, 1, 65535)
    raw[~valid] = 0
    return raw.astype(np.uint16)


def decode_disparity(raw):
    valid = raw > 0
    return (raw.astype(np.float64) / DISPARITY_SCALE).astype(np.float32), valid


def write_flow_png(path, flow, valid):
    raw = encode_flow(flow, valid)
    # OpenCV stores channels as BGR
    if not cv2.imwrite(path, raw[..., ::-1]):
        raise IOError('could not write {}'.format(path))


def read_flow_png(path):
    return decode_flow(_read_png16(path, 3)[..., ::-1])


def write_disparity_png(path, disparity, valid):
    if not cv2.imwrite(path, encode_disparity(disparity, valid)):
        raise IOError('could not write {}'.format(path))


def read_disparity_png(path):
    return decode_disparity(_read_png16(path, 1))


def read_image(path):
    if not os.path.isfile(path):
        raise IngestionError('missing file: {}'.format(path))
    raw = cv2.imread(path, cv2.IMREAD_COLOR)
    if raw is None:
        raise IngestionError('unreadable image: {}'.format(path))
    return cv2.cvtColor(raw, cv2.COLOR_BGR2RGB).astype(np.float32) / 255.0


def write_image(path, image):
    raw = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    if not cv2.imwrite(path, cv2.cvtColor(raw, cv2.COLOR_RGB2BGR)):
        raise IOError('could not write {}'.format(path))


def read_kitti_calibration(path):
    '''
    Parses P_rect_02 and P_rect_03 from a KITTI calib_cam_to_cam file.
    '''
    if not os.path.isfile(path):
        raise IngestionError('missing file: {}'.format(path))
    entries = {}
    with open(path) as fh:
        for line in fh:
            if ':' not in line:
                continue
            key, _, value = line.partition(':')
            entries[key.strip()] = value.strip()
    try:
        p2 = np.array(entries['P_rect_02'].split(), dtype=np.float64).reshape(3, 4)
        p3 = np.array(entries['P_rect_03'].split(), dtype=np.float64).reshape(3, 4)
    except (KeyError, ValueError) as exc:
        raise IngestionError('malformed calibration file {}: {}'.format(path, exc))
    focal = p2[0, 0]
    baseline = abs(p2[0, 3] - p3[0, 3]) / focal
    return Calibration(focal_length=focal, cx=p2[0, 2], cy=p2[1, 2], baseline=baseline)


def write_kitti_calibration(path, calib):
    p2 = np.array([
        [calib.focal_length, 0.0, calib.cx, 0.0],
        [0.0, calib.focal_length, calib.cy, 0.0],
        [0.0, 0.0, 1.0, 0.0]])
    p3 = p2.copy()
    p3[0, 3] = -calib.baseline * calib.focal_length
    with open(path, 'w') as fh:
        for name, matrix in (('P_rect_02', p2), ('P_rect_03', p3)):
            fh.write('{}: {}\n'.format(name, ' '.join('{:.12e}'.format(v) for v in matrix.ravel())))


def kitti_paths(root, index):
    frame = '{:06d}'.format(index)
    return {
        'image_t': os.path.join(root, 'image_2', frame + '_10.png'),
        'image_t1': os.path.join(root, 'image_2', frame + '_11.png'),
        'flow': os.path.join(root, 'flow_occ', frame + '_10.png'),
        'disparity_t': os.path.join(root, 'disp_occ_0', frame + '_10.png'),
        'disparity_t1': os.path.join(root, 'disp_occ_1', frame + '_10.png'),
        'calib': os.path.join(root, 'calib_cam_to_cam', frame + '.txt'),
    }


def list_kitti_indices(root):
    folder = os.path.join(root, 'flow_occ')
    if not os.path.isdir(folder):
        raise IngestionError('not a KITTI scene flow directory (no flow_occ/): {}'.format(root))
    indices = []
    for name in sorted(os.listdir(folder)):
        match = re.fullmatch(r'(\d{6})_10\.png', name)
        if match:
            indices.append(int(match.group(1)))
    return indices


def dewarp_disparity(disparity_t1, flow, valid):
    '''
    Moves a reference-aligned second-frame disparity map into the second
    frame's own pixel grid by forward splatting to the nearest pixel. Where
    several points land on one pixel the nearest (largest disparity) wins.
    '''
    h, w = disparity_t1.shape
    ys, xs = np.nonzero(valid)
    tx = np.rint(xs + flow[ys, xs, 0]).astype(np.int64)
    ty = np.rint(ys + flow[ys, xs, 1]).astype(np.int64)
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    tx, ty = tx[inside], ty[inside]
    values = disparity_t1[ys[inside], xs[inside]]

    out = np.zeros((h, w), dtype=np.float32)
    # ascending sort so the largest disparity is written last
    order = np.argsort(values, kind='stable')
    out[ty[order], tx[order]] = values[order]
    mask = np.zeros((h, w), dtype=bool)
    mask[ty, tx] = True
    return SparseDepthInput(out, mask)


def _assemble(image_t, image_t1, flow, flow_valid, d0, d0_valid, d1, d1_valid, calib, name, second_frame_mode):
    valid = flow_valid & d0_valid & d1_valid
    gt = np.concatenate([flow, d0[..., None], d1[..., None]], axis=-1).astype(np.float32)
    gt[~valid] = 0.0
    depth_t = SparseDepthInput(d0, d0_valid)
    if second_frame_mode == 'aligned':
        depth_t1 = SparseDepthInput(d1, d1_valid)
    elif second_frame_mode == 'dewarped':
        depth_t1 = dewarp_disparity(d1, flow, d1_valid & flow_valid)
    else:
        raise ConfigurationError('unknown second frame mode: {}'.format(second_frame_mode))
    return Sample(image_t, image_t1, depth_t, depth_t1, gt, valid, calib, name=name)


def load_kitti_sample(paths, second_frame_mode='aligned'):
    '''
    Loads one KITTI scene flow frame pair.

    Arg(s):
        paths : dict[str, str]
            file paths as produced by kitti_paths
        second_frame_mode : str
            'aligned' keeps the second disparity map on the reference grid,
            'dewarped' moves it into the second frame's own geometry
    Returns:
        Sample : with the ground-truth disparity maps as dense LiDAR sources
    '''
    image_t = read_image(paths['image_t'])
    image_t1 = read_image(paths['image_t1'])
    flow, flow_valid = read_flow_png(paths['flow'])
    d0, d0_valid = read_disparity_png(paths['disparity_t'])
    d1, d1_valid = read_disparity_png(paths['disparity_t1'])
    calib = read_kitti_calibration(paths['calib'])
    shapes = {image_t.shape[:2], image_t1.shape[:2], flow.shape[:2], d0.shape, d1.shape}
    if len(shapes) != 1:
        raise IngestionError('inconsistent sizes {} for {}'.format(sorted(shapes), paths['flow']))
    name = os.path.basename(paths['flow'])[:6]
    return _assemble(image_t, image_t1, flow, flow_valid, d0, d0_valid, d1, d1_valid,
                     calib, name, second_frame_mode)


def write_kitti_sample(root, index, sample):
    '''
    Writes a sample in the KITTI scene flow directory layout.
    '''
    paths = kitti_paths(root, index)
    for path in paths.values():
        os.makedirs(os.path.dirname(path), exist_ok=True)
    write_image(paths['image_t'], sample.image_t)
    write_image(paths['image_t1'], sample.image_t1)
    write_flow_png(paths['flow'], sample.gt[..., :2], sample.valid)
    write_disparity_png(paths['disparity_t'], sample.gt[..., 2], sample.valid)
    write_disparity_png(paths['disparity_t1'], sample.gt[..., 3], sample.valid)
    write_kitti_calibration(paths['calib'], sample.calib)
    return paths


'''
FlyingThings3D float maps
'''
def read_pfm(path):
    '''
    Reads a PFM float map. A negative scale field marks little-endian data;
    rows are stored bottom to top.
    '''
    if not os.path.isfile(path):
        raise IngestionError('missing file: {}'.format(path))
    with open(path, 'rb') as fh:
        header = fh.readline().rstrip()
        if header == b'PF':
            channels = 3
        elif header == b'Pf':
            channels = 1
        else:
            raise IngestionError('bad PFM magic {!r}: {}'.format(header, path))
        dims = fh.readline().split()
        try:
            width, height = int(dims[0]), int(dims[1])
            scale = float(fh.readline().strip())
        except (IndexError, ValueError):
            raise IngestionError('malformed PFM header: {}'.format(path))
        if width <= 0 or height <= 0 or scale == 0:
            raise IngestionError('malformed PFM header: {}'.format(path))
        endian = '<' if scale < 0 else '>'
        payload = np.frombuffer(fh.read(), dtype=endian + 'f4')
    expected = width * height * channels
    if payload.size != expected:
        raise IngestionError('PFM payload has {} values, header declares {}: {}'.format(
            payload.size, expected, path))
    shape = (height, width, channels) if channels == 3 else (height, width)
    return np.flipud(payload.reshape(shape)).astype(np.float32)


def write_pfm(path, data, little_endian=True):
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 3 and data.shape[2] == 3:
        header = b'PF'
    elif data.ndim == 2:
        header = b'Pf'
    else:
        raise ValueError('PFM holds H x W or H x W x 3 grids, got {}'.format(data.shape))
    dtype = '<f4' if little_endian else '>f4'
    with open(path, 'wb') as fh:
        fh.write(header + b'\n')
        fh.write('{} {}\n'.format(data.shape[1], data.shape[0]).encode())
        fh.write(b'-1.0\n' if little_endian else b'1.0\n')
        fh.write(np.flipud(data).astype(dtype).tobytes())


def ft3d_paths(root, split, letter, sequence, frame, side='left'):
    seq = os.path.join(split, letter, '{:04d}'.format(sequence))
    return {
        'image_t': os.path.join(root, 'frames_cleanpass', seq, side, '{:04d}.png'.format(frame)),
        'image_t1': os.path.join(root, 'frames_cleanpass', seq, side, '{:04d}.png'.format(frame + 1)),
        'disparity': os.path.join(root, 'disparity', seq, side, '{:04d}.pfm'.format(frame)),
        'disparity_change': os.path.join(root, 'disparity_change', seq, 'into_future', side,
                                         '{:04d}.pfm'.format(frame)),
        'flow': os.path.join(root, 'optical_flow', seq, 'into_future', side,
                             'OpticalFlowIntoFuture_{:04d}_{}.pfm'.format(frame, side[0].upper())),
    }


def list_ft3d_frames(root, split='TRAIN'):
    '''
    Returns (split, letter, sequence, frame) tuples for which all files exist.
    '''
    base = os.path.join(root, 'disparity_change', split)
    if not os.path.isdir(base):
        raise IngestionError('not a FlyingThings3D directory (no disparity_change/{}): {}'.format(split, root))
    frames = []
    for letter in sorted(os.listdir(base)):
        for sequence in sorted(os.listdir(os.path.join(base, letter))):
            folder = os.path.join(base, letter, sequence, 'into_future', 'left')
            if not os.path.isdir(folder):
                continue
            for name in sorted(os.listdir(folder)):
                if name.endswith('.pfm'):
                    key = (split, letter, int(sequence), int(name[:-4]))
                    if all(os.path.isfile(p) for p in ft3d_paths(root, *key).values()):
                        frames.append(key)
    return frames


def load_ft3d_sample(paths, calib=None, second_frame_mode='aligned'):
    '''
    Loads one FlyingThings3D frame pair. All pixels are valid.
    '''
    image_t = read_image(paths['image_t'])
    image_t1 = read_image(paths['image_t1'])
    d0 = read_pfm(paths['disparity'])
    change = read_pfm(paths['disparity_change'])
    flow = read_pfm(paths['flow'])
    if flow.ndim == 3:
        flow = flow[..., :2]
    else:
        raise IngestionError('flow map must have three channels: {}'.format(paths['flow']))
    shapes = {image_t.shape[:2], image_t1.shape[:2], d0.shape, change.shape, flow.shape[:2]}
    if len(shapes) != 1:
        raise IngestionError('inconsistent sizes {} for {}'.format(sorted(shapes), paths['disparity']))
    h, w = d0.shape
    if calib is None:
        calib = Calibration(FT3D_FOCAL_LENGTH, (w - 1) / 2.0, (h - 1) / 2.0, FT3D_BASELINE)
    d1 = d0 + change
    everywhere = np.ones((h, w), dtype=bool)
    name = os.path.splitext(os.path.basename(paths['disparity']))[0]
    return _assemble(image_t, image_t1, flow, everywhere, d0, d0 > 0, d1, d1 > 0,
                     calib, name, second_frame_mode)


'''
LiDAR simulation
'''
def sample_lidar(dense, rng, fraction=None, count=None):
    '''
    Uniformly samples disparity points without replacement among the valid
    pixels of a dense map.

    Arg(s):
        dense : SparseDepthInput
            dense (or semi-dense) disparity source
        rng : numpy.random.Generator
            random stream
        fraction : float
            share of valid pixels to keep, within [0.002, 0.2]
        count : int
            fixed number of points, capped at the number of valid pixels
    Returns:
        SparseDepthInput : sampled points
    '''
    if (fraction is None) == (count is None):
        raise ConfigurationError('give exactly one of fraction or count')
    valid_index = np.flatnonzero(dense.validity)
    available = valid_index.size
    if fraction is not None:
        if not MIN_DENSITY <= fraction <= MAX_DENSITY:
            raise ConfigurationError('density fraction {} outside [{}, {}]'.format(
                fraction, MIN_DENSITY, MAX_DENSITY))
        n = int(round(fraction * available))
    else:
        if count < 0:
            raise ConfigurationError('point count must be non-negative, got {}'.format(count))
        n = int(count)
        if n > available:
            warnings.warn('requested {} points but only {} are valid; using {}'.format(n, available, available))
            n = available

    chosen = rng.choice(valid_index, size=n, replace=False)
    validity = np.zeros(dense.validity.size, dtype=bool)
    validity[chosen] = True
    validity = validity.reshape(dense.validity.shape)
    disparity = np.where(validity, dense.disparity, 0.0)
    return SparseDepthInput(disparity, validity)


def add_noise(sparse, sigma, rng):
    '''
    Adds zero-mean Gaussian noise to the valid disparities, clamped positive.
    '''
    if sigma < 0:
        raise ConfigurationError('noise sigma must be non-negative, got {}'.format(sigma))
    if sigma == 0:
        return SparseDepthInput(sparse.disparity.copy(), sparse.validity.copy())
    disparity = sparse.disparity.astype(np.float64)
    noise = rng.normal(0.0, sigma, size=int(sparse.validity.sum()))
    disparity[sparse.validity] = np.maximum(disparity[sparse.validity] + noise, MIN_DISPARITY)
    return SparseDepthInput(disparity.astype(np.float32), sparse.validity.copy())


'''
Photometric augmentation
'''
@dataclass
class AugmentConfig:
    brightness: float = 0.1
    contrast: float = 0.3
    gamma: float = 0.2
    color: float = 0.1
    noise: float = 0.02
    shared_probability: float = 0.5

    @classmethod
    def off(cls):
        return cls(0.0, 0.0, 0.0, 0.0, 0.0)


def _draw_photometric(rng, cfg):
    return {
        'brightness': rng.normal(0.0, cfg.brightness) if cfg.brightness > 0 else 0.0,
        'contrast': np.exp(rng.uniform(-cfg.contrast, cfg.contrast)),
        'gamma': np.exp(rng.uniform(-cfg.gamma, cfg.gamma)),
        'color': np.exp(rng.uniform(-cfg.color, cfg.color, size=3)),
        'noise': rng.uniform(0.0, cfg.noise),
    }


def _apply_photometric(image, params, rng):
    x = image.astype(np.float64)
    mean = x.mean()
    x = (x - mean) * params['contrast'] + mean
    x = x * params['color'] + params['brightness']
    x = np.clip(x, 0.0, 1.0) ** params['gamma']
    if params['noise'] > 0:
        x = x + rng.normal(0.0, params['noise'], size=x.shape)
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def augment(sample, rng, cfg=None):
    '''
    Photometric augmentation of both RGB frames. A drawn switch decides
    whether the two frames share one set of parameters. Geometry, depth and
    ground truth are left untouched.
    '''
    cfg = cfg or AugmentConfig()
    shared = rng.uniform() < cfg.shared_probability
    params_t = _draw_photometric(rng, cfg)
    params_t1 = params_t if shared else _draw_photometric(rng, cfg)
    return sample.replace(
        image_t=_apply_photometric(sample.image_t, params_t, rng),
        image_t1=_apply_photometric(sample.image_t1, params_t1, rng))


'''
Synthetic scenes
'''
def _texture(rng, height, width):
    coarse = rng.uniform(0.0, 1.0, size=(max(height // 6, 2), max(width // 6, 2), 3)).astype(np.float32)
    smooth = cv2.resize(coarse, (width, height), interpolation=cv2.INTER_CUBIC)
    fine = rng.uniform(-0.15, 0.15, size=(height, width, 3)).astype(np.float32)
    tint = rng.uniform(0.2, 0.8, size=3).astype(np.float32)
    return np.clip(0.5 * smooth + 0.5 * tint + fine, 0.0, 1.0)


@dataclass
class Layer:
    '''A rigidly translating textured rectangle (index 0 is the background).'''
    top: int
    left: int
    height: int
    width: int
    u: int
    v: int
    d0: float
    d1: float


def _paint(canvas, ids, texture, layer, layer_id, dx, dy):
    h, w = canvas.shape[:2]
    y0, x0 = layer.top + dy, layer.left + dx
    ys0, xs0 = max(y0, 0), max(x0, 0)
    ys1, xs1 = min(y0 + layer.height, h), min(x0 + layer.width, w)
    if ys0 >= ys1 or xs0 >= xs1:
        return
    canvas[ys0:ys1, xs0:xs1] = texture[ys0 - y0:ys1 - y0, xs0 - x0:xs1 - x0]
    ids[ys0:ys1, xs0:xs1] = layer_id


def synth_generate(seed, size=(64, 128), num_objects=None, max_motion=4, static=False):
    '''
    Renders a two-frame scene of 2-5 textured rectangles at distinct depths
    translating by whole pixels in front of a textured, translating background
    whose disparity is a vertical ramp.

    Ground-truth validity marks first-frame pixels that remain inside the image
    and visible (not covered by a nearer layer) in the second frame.

    Arg(s):
        seed : int
            random seed; equal seeds give equal scenes
        size : tuple[int, int]
            (height, width), each at least 64
        num_objects : int
            number of rectangles, drawn from [2, 5] if not given
        max_motion : int
            largest per-axis translation in pixels
        static : bool
            if set, nothing moves and disparities stay constant
    Returns:
        Sample : dense depth sources, exact ground truth, layer list in meta
    '''
    h, w = size
    if h < 64 or w < 64:
        raise ConfigurationError('synthetic scenes must be at least 64x64, got {}x{}'.format(h, w))
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 6)) if num_objects is None else int(num_objects)
    margin = max_motion

    def motion():
        if static:
            return 0, 0
        return int(rng.integers(-max_motion, max_motion + 1)), int(rng.integers(-max_motion, max_motion + 1))

    def change():
        return 0.0 if static else float(rng.uniform(-0.3, 0.3))

    # distinct depths: object disparities are spaced at least one pixel apart
    base = np.sort(rng.uniform(4.0, 14.0, size=n))
    disparities = base + np.arange(n) * 1.0

    bu, bv = motion()
    background = Layer(-margin, -margin, h + 2 * margin, w + 2 * margin, bu, bv, 0.0, change())
    bg_near = float(rng.uniform(1.5, 3.0))
    bg_far = float(rng.uniform(1.0, bg_near))
    textures = [_texture(rng, background.height, background.width)]
    layers = [background]
    for k in range(n):
        lh = int(rng.integers(h // 6, h // 2 + 1))
        lw = int(rng.integers(w // 8, w // 3 + 1))
        top = int(rng.integers(-lh // 4, h - 3 * lh // 4))
        left = int(rng.integers(-lw // 4, w - 3 * lw // 4))
        u, v = motion()
        d0 = float(disparities[k])
        layers.append(Layer(top, left, lh, lw, u, v, d0, d0 + change()))
        textures.append(_texture(rng, lh, lw))

    ramp = (bg_far + (bg_near - bg_far) * (np.arange(h + 2 * margin) - margin) / (h - 1)).astype(np.float32)

    def render(t):
        canvas = np.zeros((h, w, 3), dtype=np.float32)
        ids = np.zeros((h, w), dtype=np.int64)
        for layer_id, (layer, texture) in enumerate(zip(layers, textures)):
            dx, dy = (layer.u, layer.v) if t else (0, 0)
            _paint(canvas, ids, texture, layer, layer_id, dx, dy)
        return canvas, ids

    image_t, ids_t = render(0)
    image_t1, ids_t1 = render(1)

    ys, xs = np.mgrid[0:h, 0:w]
    u = np.array([layer.u for layer in layers], dtype=np.float32)[ids_t]
    v = np.array([layer.v for layer in layers], dtype=np.float32)[ids_t]
    obj_d0 = np.array([layer.d0 for layer in layers], dtype=np.float32)[ids_t]
    obj_d1 = np.array([layer.d1 for layer in layers], dtype=np.float32)[ids_t]
    bg_d0 = ramp[ys + margin]
    is_bg = ids_t == 0
    d0 = np.where(is_bg, bg_d0, obj_d0)
    d1 = np.where(is_bg, bg_d0 + background.d1, obj_d1)

    tx = xs + u.astype(np.int64)
    ty = ys + v.astype(np.int64)
    inside = (tx >= 0) & (tx < w) & (ty >= 0) & (ty < h)
    visible = np.zeros((h, w), dtype=bool)
    visible[inside] = ids_t1[ty[inside], tx[inside]] == ids_t[inside]
    valid = inside & visible

    gt = np.stack([u, v, d0, d1], axis=-1).astype(np.float32)
    gt[~valid] = 0.0

    # second frame disparity in its own geometry, for the dewarped LiDAR mode
    ys1 = ys - bv + margin
    own_t1 = ramp[np.clip(ys1, 0, ramp.size - 1)] + background.d1
    for layer_id, layer in enumerate(layers[1:], start=1):
        own_t1 = np.where(ids_t1 == layer_id, layer.d1, own_t1)

    everywhere = np.ones((h, w), dtype=bool)
    calib = Calibration(focal_length=float(w), cx=(w - 1) / 2.0, cy=(h - 1) / 2.0, baseline=0.5)
    return Sample(
        image_t=image_t,
        image_t1=image_t1,
        depth_t=SparseDepthInput(d0, everywhere),
        depth_t1=SparseDepthInput(d1, everywhere),
        gt=gt,
        valid=valid,
        calib=calib,
        name='synth-{}'.format(seed),
        meta={'seed': seed, 'layers': layers, 'ids_t': ids_t, 'ids_t1': ids_t1,
              'disparity_t1_own': own_t1.astype(np.float32)})


def synth_dewarped(sample):
    '''
    Returns the sample with its second depth source in the second frame's
    own geometry (synthetic scenes know it exactly).
    '''
    own = sample.meta['disparity_t1_own']
    return sample.replace(depth_t1=SparseDepthInput(own, np.ones_like(own, dtype=bool)))


def write_manifest(path, records):
    with open(path, 'w') as fh:
        for record in records:
            fh.write(json.dumps(record, sort_keys=True) + '\n')


def read_manifest(path):
    if not os.path.isfile(path):
        raise IngestionError('missing file: {}'.format(path))
    records = []
    with open(path) as fh:
        for number, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                records.append({'seed': int(record['seed']), 'height': int(record['height']),
                                'width': int(record['width'])})
            except (ValueError, KeyError, TypeError) as exc:
                raise IngestionError('bad manifest record on line {} of {}: {}'.format(number, path, exc))
    return records


def synth_from_manifest(path):
    return [synth_generate(r['seed'], (r['height'], r['width'])) for r in read_manifest(path)]


def synth_dataset(count, size=(64, 128), seed=0):
    return [synth_generate(seed * 100003 + index, size) for index in range(count)]
