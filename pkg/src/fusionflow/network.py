"""Full model assembly, multi-level loss, training loop and checkpoint files."""
import csv
import dataclasses
import logging
import os
import struct
import warnings
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import dataio
from .backbone import DEFAULT_CHANNELS, NUM_LEVELS, OUTPUT_LEVELS, LidarPyramid, PlainLidarPyramid, RGBPyramid
from .fusion import FusionModule
from .matching import (
    DEFAULT_CONTEXT_WIDTHS,
    DEFAULT_ESTIMATOR_WIDTHS,
    DEFAULT_SEARCH_RADIUS,
    ContextNetwork,
    FlowEstimator,
    context_refine,
    estimate_level,
    estimator_in_channels,
    upsample_sf,
)

log = logging.getLogger(__name__)

DEFAULT_LEVEL_WEIGHTS = (0.32, 0.08, 0.02, 0.01, 0.005)
PAD_MULTIPLE = 2 ** NUM_LEVELS
DESK_WIDTHS = {
    'channels': (8, 16, 32, 48, 64, 96),
    'estimator_widths': (64, 64, 48, 32, 16),
    'context_widths': (64, 64, 64, 48, 32, 16),
}


class TrainingDiverged(RuntimeError):
    '''Raised when the training loss becomes non-finite.'''


class CheckpointError(ValueError):
    '''Raised for unreadable checkpoints or checkpoints that do not fit a model.'''


@dataclass
class ModelConfig:
    use_confidence_conv: bool = True
    use_confidence_concat: bool = True
    channels: tuple = DEFAULT_CHANNELS
    search_radius: int = DEFAULT_SEARCH_RADIUS
    level_weights: tuple = DEFAULT_LEVEL_WEIGHTS
    estimator_widths: tuple = DEFAULT_ESTIMATOR_WIDTHS
    context_widths: tuple = DEFAULT_CONTEXT_WIDTHS
    fusion_preprocess: int = 2
    fusion_convs: int = 2
    robust_loss: bool = False

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        self.level_weights = tuple(float(a) for a in self.level_weights)
        self.estimator_widths = tuple(int(c) for c in self.estimator_widths)
        self.context_widths = tuple(int(c) for c in self.context_widths)
        if len(self.channels) != NUM_LEVELS:
            raise ValueError('channels needs {} entries, got {}'.format(NUM_LEVELS, len(self.channels)))
        if len(self.level_weights) != len(OUTPUT_LEVELS):
            raise ValueError('level_weights needs {} entries (levels 6..2)'.format(len(OUTPUT_LEVELS)))

    @classmethod
    def desk(cls, **overrides):
        '''Reduced widths for single-core training runs.'''
        settings = dict(DESK_WIDTHS)
        settings.update(overrides)
        return cls(**settings)

    def to_text(self):
        lines = []
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ','.join(str(v) for v in value)
            elif isinstance(value, bool):
                value = 'true' if value else 'false'
            lines.append('{} = {}'.format(f.name, value))
        return '\n'.join(lines) + '\n'

    @classmethod
    def from_text(cls, text):
        values = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith('#'):
                continue
            key, _, value = line.partition('=')
            values[key.strip()] = value.strip()
        return cls.from_strings(values)

    @classmethod
    def from_strings(cls, values):
        kwargs = {}
        types = {f.name: f.default for f in dataclasses.fields(cls)}
        for key, value in values.items():
            if key not in types:
                raise ValueError('unknown model setting: {}'.format(key))
            default = types[key]
            if isinstance(default, bool):
                kwargs[key] = parse_bool(value)
            elif isinstance(default, tuple):
                cast = float if key == 'level_weights' else int
                kwargs[key] = tuple(cast(v) for v in str(value).split(',') if v.strip())
            else:
                kwargs[key] = type(default)(value)
        return cls(**kwargs)


def parse_bool(value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in ('1', 'true', 'yes', 'on'):
        return True
    if text in ('0', 'false', 'no', 'off'):
        return False
    raise ValueError('not a boolean: {!r}'.format(value))


@dataclass
class MultiScalePrediction:
    levels: dict
    refined: torch.Tensor
    final: torch.Tensor


class SceneFlowNet(nn.Module):
    '''
    RGB and LiDAR pyramids, per-level fusion and coarse-to-fine scene flow
    estimation with context refinement. One pyramid instance per modality and
    one fusion module serve both time steps.
    '''

    def __init__(self, cfg=None):
        super().__init__()
        self.cfg = cfg or ModelConfig()
        channels = self.cfg.channels
        self.rgb_pyramid = RGBPyramid(3, channels)
        if self.cfg.use_confidence_conv:
            self.lidar_pyramid = LidarPyramid(channels)
        else:
            self.lidar_pyramid = PlainLidarPyramid(channels)
        self.fusion = FusionModule(
            channels,
            use_confidence_concat=self.cfg.use_confidence_concat,
            num_preprocess=self.cfg.fusion_preprocess,
            num_fusion=self.cfg.fusion_convs)
        self.estimators = nn.ModuleDict({
            str(level): FlowEstimator(
                estimator_in_channels(channels[level - 1], self.cfg.search_radius, level == NUM_LEVELS),
                self.cfg.estimator_widths)
            for level in OUTPUT_LEVELS
        })
        context_in = 2 * channels[1] + self.cfg.estimator_widths[-1] + 4
        self.context = ContextNetwork(context_in, self.cfg.context_widths)

    def features(self, image, disparity, validity):
        rgb = self.rgb_pyramid(image)
        lidar, confidence = self.lidar_pyramid(disparity, validity)
        return self.fusion(rgb, lidar, confidence)

    def forward(self, image_t, image_t1, disparity_t, validity_t, disparity_t1, validity_t1):
        '''
        Arg(s):
            image_t, image_t1 : torch.Tensor[float32]
                N x 3 x H x W images in [0, 1], H and W multiples of 64
            disparity_t, disparity_t1 : torch.Tensor[float32]
                N x 1 x H x W sparse disparity in pixels
            validity_t, validity_t1 : torch.Tensor
                N x 1 x H x W masks of valid disparity
        Returns:
            MultiScalePrediction : per-level fields, refined level 2 and the
                full-resolution field
        '''
        shapes = {tuple(t.shape[-2:]) for t in (image_t, image_t1, disparity_t, validity_t, disparity_t1, validity_t1)}
        if len(shapes) != 1:
            raise ValueError('input sizes differ: {}'.format(sorted(shapes)))

        # both time steps go through the shared pyramids and fusion as one batch
        n = image_t.shape[0]
        fused = self.features(
            torch.cat([image_t, image_t1]),
            torch.cat([disparity_t, disparity_t1]),
            torch.cat([validity_t, validity_t1]))
        fused_t = {level: x[:n] for level, x in fused.items()}
        fused_t1 = {level: x[n:] for level, x in fused.items()}

        levels = {}
        sf = None
        est_features = None
        for level in OUTPUT_LEVELS:
            up = None if sf is None else upsample_sf(sf)
            sf, est_features, _ = estimate_level(
                self.estimators[str(level)], fused_t[level], fused_t1[level], up, self.cfg.search_radius)
            levels[level] = sf

        refined = context_refine(self.context, est_features, fused_t[2], fused_t1[2], sf)
        final = 4.0 * F.interpolate(refined, scale_factor=4, mode='bilinear', align_corners=False)
        return MultiScalePrediction(levels=levels, refined=refined, final=final)


'''
Input preparation
'''
def pad_amount(size, multiple=PAD_MULTIPLE):
    return (-size) % multiple


def to_tensor_batch(samples, depth_t=None, depth_t1=None, device='cpu'):
    '''
    Stacks samples into padded NCHW tensors. Images are reflect-padded, LiDAR
    and ground truth are zero-padded with zero validity.

    Arg(s):
        samples : list[Sample]
            samples of one common size
        depth_t, depth_t1 : list[SparseDepthInput]
            sparse inputs to use instead of the samples' own depth sources
    Returns:
        dict[str, torch.Tensor] : padded inputs, gt and validity
        tuple[int, int] : original (height, width)
    '''
    shapes = {s.shape for s in samples}
    if len(shapes) != 1:
        raise ValueError('samples differ in size: {}'.format(sorted(shapes)))
    h, w = shapes.pop()
    ph, pw = pad_amount(h), pad_amount(w)
    depth_t = depth_t or [s.depth_t for s in samples]
    depth_t1 = depth_t1 or [s.depth_t1 for s in samples]

    def images(key):
        x = torch.from_numpy(np.stack([getattr(s, key) for s in samples])).permute(0, 3, 1, 2).float()
        if ph or pw:
            mode = 'reflect' if ph < h and pw < w else 'replicate'
            x = F.pad(x, (0, pw, 0, ph), mode=mode)
        return x

    def grid(arrays, channels_last=False):
        x = torch.from_numpy(np.stack(arrays).astype(np.float32))
        x = x.permute(0, 3, 1, 2) if channels_last else x[:, None]
        return F.pad(x, (0, pw, 0, ph))

    batch = {
        'image_t': images('image_t'),
        'image_t1': images('image_t1'),
        'disparity_t': grid([d.disparity for d in depth_t]),
        'validity_t': grid([d.validity for d in depth_t]),
        'disparity_t1': grid([d.disparity for d in depth_t1]),
        'validity_t1': grid([d.validity for d in depth_t1]),
        'gt': grid([s.gt for s in samples], channels_last=True),
        'valid': grid([s.valid for s in samples]),
    }
    return {k: v.to(device) for k, v in batch.items()}, (h, w)


def run_model(model, batch):
    return model(batch['image_t'], batch['image_t1'], batch['disparity_t'], batch['validity_t'],
                 batch['disparity_t1'], batch['validity_t1'])


def predict(model, samples, depth_t=None, depth_t1=None):
    '''
    Full-resolution predictions cropped to the samples' size, as an
    N x H x W x 4 numpy array.
    '''
    model.eval()
    batch, (h, w) = to_tensor_batch(samples, depth_t, depth_t1)
    with torch.no_grad():
        pred = run_model(model, batch)
    return pred.final[:, :, :h, :w].permute(0, 2, 3, 1).numpy()


'''
Loss
'''
@dataclass
class LossResult:
    total: torch.Tensor
    levels: dict
    empty: bool = False


def downsample_gt(gt, valid, level):
    '''
    Averages ground truth over the valid pixels of each 2^level cell and
    rescales it to that level's pixel units. A cell is valid if it holds at
    least one valid pixel.
    '''
    factor = 2 ** level
    valid = valid.to(gt.dtype)
    total = F.avg_pool2d(gt * valid, factor) * factor * factor
    count = F.avg_pool2d(valid, factor) * factor * factor
    cell_valid = count > 0
    mean = total / count.clamp(min=1.0)
    return mean / factor, cell_valid


def multiscale_loss(pred, gt, valid, weights=DEFAULT_LEVEL_WEIGHTS, robust=False):
    '''
    Weighted sum over levels 6..2 of the mean per-cell error norm between the
    prediction and the downsampled ground truth. Level 2 uses the
    context-refined field.

    Arg(s):
        pred : MultiScalePrediction
        gt : torch.Tensor[float32]
            N x 4 x H x W full-resolution ground truth in pixels
        valid : torch.Tensor
            N x 1 x H x W validity mask
        weights : tuple[float]
            level weights ordered 6..2
        robust : bool
            use (|e| + 0.01)^0.4 instead of the plain norm
    Returns:
        LossResult : total, per-level values and whether no pixel was valid
    '''
    levels = {}
    total = gt.new_zeros(())
    empty = not bool(valid.any())
    if empty:
        warnings.warn('multiscale loss called without valid ground truth; loss is 0')
    for level, alpha in zip(OUTPUT_LEVELS, weights):
        field_ = pred.refined if level == 2 else pred.levels[level]
        target, cell_valid = downsample_gt(gt, valid, level)
        error = torch.linalg.vector_norm(field_ - target, dim=1, keepdim=True)
        if robust:
            error = (error + 0.01) ** 0.4
        n_valid = cell_valid.sum()
        if n_valid > 0:
            loss = (error * cell_valid).sum() / n_valid
        else:
            loss = gt.new_zeros(())
        levels[level] = loss
        total = total + alpha * loss
    return LossResult(total=total, levels=levels, empty=empty)


'''
Training
'''
@dataclass
class TrainSchedule:
    steps: int = 1000
    batch_size: int = 4
    learning_rate: float = 1e-4
    density_range: tuple = (dataio.MIN_DENSITY, dataio.MAX_DENSITY)
    fixed_fraction: float = None
    fixed_points: int = None
    noise_sigma: float = dataio.DEFAULT_NOISE_SIGMA
    augment: bool = True
    second_frame_mode: str = 'aligned'
    seed: int = 0
    plateau_patience: int = 0
    plateau_window: int = 50
    checkpoint_every: int = 0
    out_dir: str = None
    log_every: int = 50


def draw_lidar(sample, schedule, rng):
    '''
    Draws the sparse, noisy LiDAR inputs of one sample for one step.
    '''
    inputs = []
    for dense in (sample.depth_t, sample.depth_t1):
        if schedule.fixed_points is not None:
            sparse = dataio.sample_lidar(dense, rng, count=schedule.fixed_points)
        else:
            fraction = schedule.fixed_fraction
            if fraction is None:
                fraction = rng.uniform(*schedule.density_range)
            sparse = dataio.sample_lidar(dense, rng, fraction=fraction)
        inputs.append(dataio.add_noise(sparse, schedule.noise_sigma, rng))
    return inputs


def train(dataset, cfg=None, schedule=None, model=None, callback=None):
    '''
    Trains a model with Adam on samples drawn from dataset. LiDAR inputs are
    re-sampled from each sample's dense depth sources at every step.

    Arg(s):
        dataset : list[Sample]
            training samples of one common size
        cfg : ModelConfig
            used when model is not given
        schedule : TrainSchedule
            optimization and sampling settings
        model : SceneFlowNet
            model to continue training; built from cfg and the seed otherwise
        callback : callable
            called as callback(step, row) after every step
    Returns:
        SceneFlowNet : trained model
        list[dict] : loss curve rows (step, total, level losses, lr)
    '''
    schedule = schedule or TrainSchedule()
    if not dataset:
        raise ValueError('empty training set')
    torch.manual_seed(schedule.seed)
    rng = np.random.default_rng(schedule.seed)
    if model is None:
        model = SceneFlowNet(cfg or ModelConfig())
    cfg = model.cfg
    model.train()

    optimizer = torch.optim.Adam(model.parameters(), lr=schedule.learning_rate)
    scheduler = None
    if schedule.plateau_patience > 0:
        scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            optimizer, mode='min', factor=0.5, patience=schedule.plateau_patience)
    if schedule.second_frame_mode == 'dewarped':
        dataset = [dataio.synth_dewarped(s) if 'disparity_t1_own' in s.meta else s for s in dataset]

    history = []
    window = []
    for step in range(1, schedule.steps + 1):
        index = rng.choice(len(dataset), size=min(schedule.batch_size, len(dataset)), replace=False)
        samples = [dataset[i] for i in sorted(index)]
        if schedule.augment:
            samples = [dataio.augment(s, rng) for s in samples]
        lidar = [draw_lidar(s, schedule, rng) for s in samples]
        batch, _ = to_tensor_batch(samples, [l[0] for l in lidar], [l[1] for l in lidar])

        pred = run_model(model, batch)
        result = multiscale_loss(pred, batch['gt'], batch['valid'], cfg.level_weights, cfg.robust_loss)
        level_values = {level: float(v.detach()) for level, v in result.levels.items()}
        if not torch.isfinite(result.total):
            raise TrainingDiverged('non-finite loss at step {}: level losses {}'.format(step, level_values))

        optimizer.zero_grad()
        result.total.backward()
        optimizer.step()

        row = {'step': step, 'total': float(result.total.detach())}
        row.update({'level{}'.format(level): value for level, value in level_values.items()})
        row['lr'] = optimizer.param_groups[0]['lr']
        history.append(row)
        if callback is not None:
            callback(step, row)
        if schedule.log_every and step % schedule.log_every == 0:
            log.info('step %d loss %.5f lr %.2e', step, row['total'], row['lr'])

        window.append(row['total'])
        if scheduler is not None and len(window) == schedule.plateau_window:
            scheduler.step(float(np.mean(window)))
            window = []

        if schedule.out_dir and schedule.checkpoint_every and step % schedule.checkpoint_every == 0:
            save_checkpoint(os.path.join(schedule.out_dir, 'checkpoint-{:06d}.sfck'.format(step)), model)

    if schedule.out_dir:
        os.makedirs(schedule.out_dir, exist_ok=True)
        save_checkpoint(os.path.join(schedule.out_dir, 'checkpoint.sfck'), model)
        write_loss_csv(os.path.join(schedule.out_dir, 'loss.csv'), history)
    return model, history


LOSS_COLUMNS = ['step', 'total'] + ['level{}'.format(level) for level in OUTPUT_LEVELS] + ['lr']


def write_loss_csv(path, history):
    with open(path, 'w', newline='') as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


'''
Checkpoints

Layout (little-endian): magic b'SFCK', uint32 version, uint32 config length,
config text (utf-8), uint32 parameter count, then per parameter: uint16 name
length, name (utf-8), uint8 rank, uint32 per dimension, float32 payload.
'''
CHECKPOINT_MAGIC = b'SFCK'
CHECKPOINT_VERSION = 1


def save_checkpoint(path, model):
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    config = model.cfg.to_text().encode('utf-8')
    state = model.state_dict()
    with open(path, 'wb') as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack('<II', CHECKPOINT_VERSION, len(config)))
        fh.write(config)
        fh.write(struct.pack('<I', len(state)))
        for name, tensor in state.items():
            encoded = name.encode('utf-8')
            fh.write(struct.pack('<H', len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack('<B', tensor.dim()))
            fh.write(struct.pack('<{}I'.format(tensor.dim()), *tensor.shape))
            fh.write(tensor.detach().cpu().numpy().astype('<f4').tobytes())


def read_checkpoint(path):
    '''
    Returns:
        ModelConfig : configuration stored with the parameters
        dict[str, numpy.ndarray] : parameters by name
    '''
    if not os.path.isfile(path):
        raise FileNotFoundError(path)
    with open(path, 'rb') as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError('not a checkpoint file: {}'.format(path))
    try:
        return _parse_checkpoint(data, path)
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError('corrupt checkpoint {}: {}'.format(path, exc))


def _parse_checkpoint(data, path):
    version, config_len = struct.unpack_from('<II', data, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError('unsupported checkpoint version {}: {}'.format(version, path))
    offset = 12
    cfg = ModelConfig.from_text(data[offset:offset + config_len].decode('utf-8'))
    offset += config_len
    (count,) = struct.unpack_from('<I', data, offset)
    offset += 4
    params = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from('<H', data, offset)
        offset += 2
        name = data[offset:offset + name_len].decode('utf-8')
        offset += name_len
        (rank,) = struct.unpack_from('<B', data, offset)
        offset += 1
        shape = struct.unpack_from('<{}I'.format(rank), data, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        params[name] = np.frombuffer(data, dtype='<f4', count=size, offset=offset).reshape(shape).copy()
        offset += 4 * size
    if offset != len(data):
        raise CheckpointError('trailing bytes in checkpoint: {}'.format(path))
    return cfg, params


def shape_audit(model, params):
    '''
    Lists differences between a model's parameters and a parameter dict.
    '''
    expected = {name: tuple(t.shape) for name, t in model.state_dict().items()}
    found = {name: tuple(a.shape) for name, a in params.items()}
    diff = []
    for name in sorted(set(expected) | set(found)):
        if name not in found:
            diff.append('missing {} {}'.format(name, expected[name]))
        elif name not in expected:
            diff.append('unexpected {} {}'.format(name, found[name]))
        elif expected[name] != found[name]:
            diff.append('shape {} checkpoint {} model {}'.format(name, found[name], expected[name]))
    return diff


def load_checkpoint(path, cfg=None):
    '''
    Builds a model from a checkpoint. If cfg is given the checkpoint must fit
    a model built from it, otherwise a CheckpointError lists the differences.
    '''
    stored_cfg, params = read_checkpoint(path)
    model = SceneFlowNet(cfg or stored_cfg)
    diff = shape_audit(model, params)
    if diff:
        raise CheckpointError('checkpoint does not match model:\n  ' + '\n  '.join(diff))
    model.load_state_dict({name: torch.from_numpy(value) for name, value in params.items()})
    return model


def parameter_count(module):
    return sum(p.numel() for p in module.parameters())
