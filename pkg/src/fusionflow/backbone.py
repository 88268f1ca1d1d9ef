"""Feature pyramids for RGB images and sparse LiDAR disparity.

Both pyramids encode to 1/64 of the input in six levels of two convolutions
each, then decode back to 1/4, merging the encoder output of every level on the
way up. Outputs are dictionaries keyed by level (2..6).
"""
import torch
import torch.nn.functional as F
from torch import nn

from .sparse_ops import ConfidenceConv2d, EPSILON, max_confidence_pool, nn_upsample

DEFAULT_CHANNELS = (16, 32, 64, 96, 128, 192)
OUTPUT_LEVELS = (6, 5, 4, 3, 2)
NUM_LEVELS = 6
LEAKY_SLOPE = 0.1


def leaky(x):
    return F.leaky_relu(x, LEAKY_SLOPE)


def conv(in_channels, out_channels, kernel_size=3, stride=1, dilation=1):
    return nn.Conv2d(
        in_channels,
        out_channels,
        kernel_size=kernel_size,
        stride=stride,
        padding=dilation * (kernel_size // 2),
        dilation=dilation)


def _check_divisible(x):
    h, w = x.shape[-2:]
    factor = 2 ** NUM_LEVELS
    if h % factor or w % factor:
        raise ValueError('input size {}x{} is not divisible by {}; pad it first'.format(h, w, factor))


class RGBPyramid(nn.Module):
    '''
    Plain convolutional encoder/decoder pyramid.

    Arg(s):
        in_channels : int
            3 for images, 1 for mask-zeroed disparity when confidence
            convolution is disabled
        channels : tuple[int]
            channel count per level 1..6
    '''

    def __init__(self, in_channels=3, channels=DEFAULT_CHANNELS):
        super().__init__()
        if len(channels) != NUM_LEVELS:
            raise ValueError('need {} channel counts, got {}'.format(NUM_LEVELS, len(channels)))
        self.channels = tuple(channels)

        self.encoder = nn.ModuleList()
        previous = in_channels
        for ch in self.channels:
            self.encoder.append(nn.ModuleList([conv(previous, ch, stride=2), conv(ch, ch)]))
            previous = ch

        # decoder merges at levels 5..2: upsampled level l+1 concatenated with encoder level l
        self.merge = nn.ModuleDict({
            str(level): conv(self.channels[level] + self.channels[level - 1], self.channels[level - 1], kernel_size=1)
            for level in range(2, NUM_LEVELS)
        })

    def forward(self, x):
        _check_divisible(x)
        encoded = {}
        for level, (conv_a, conv_b) in enumerate(self.encoder, start=1):
            x = leaky(conv_b(leaky(conv_a(x))))
            encoded[level] = x

        outputs = {NUM_LEVELS: encoded[NUM_LEVELS]}
        for level in range(NUM_LEVELS - 1, 1, -1):
            up = F.interpolate(outputs[level + 1], scale_factor=2, mode='bilinear', align_corners=False)
            outputs[level] = leaky(self.merge[str(level)](torch.cat([up, encoded[level]], dim=1)))
        return {level: outputs[level] for level in OUTPUT_LEVELS}


class ConfidenceMerge(nn.Module):
    '''
    Confidence-normalized 1x1 merge of two (feature, confidence) sources.

    Each source is a tap of a two-tap normalized convolution: features are
    weighted by source confidence and a softplus propagation weight, and the
    output confidence is the normalized sum of input confidences.
    '''

    def __init__(self, in_a, in_b, out_channels):
        super().__init__()
        self.proj_a = nn.Conv2d(in_a, out_channels, kernel_size=1, bias=False)
        self.proj_b = nn.Conv2d(in_b, out_channels, kernel_size=1, bias=False)
        self.bias = nn.Parameter(torch.zeros(out_channels))
        self.conf_weight_raw = nn.Parameter(torch.full((2,), 0.5413))
        with torch.no_grad():
            self.proj_a.weight.mul_(2.0)
            self.proj_b.weight.mul_(2.0)

    def forward(self, f_a, c_a, f_b, c_b):
        w_hat = F.softplus(self.conf_weight_raw)
        weight_a = w_hat[0] * c_a
        weight_b = w_hat[1] * c_b
        denominator = weight_a + weight_b
        numerator = weight_a * self.proj_a(f_a) + weight_b * self.proj_b(f_b)
        f_out = numerator / (denominator + EPSILON) + self.bias[None, :, None, None]
        c_out = denominator / w_hat.sum()
        return f_out, c_out


class LidarPyramid(nn.Module):
    '''
    Confidence pyramid for sparse disparity. Every convolution is a confidence
    convolution, every downsample is max-confidence pooling and every decoder
    upsample is nearest-neighbor replication. Activations apply to features
    only; confidences stay normalized-linear.
    '''

    def __init__(self, channels=DEFAULT_CHANNELS):
        super().__init__()
        if len(channels) != NUM_LEVELS:
            raise ValueError('need {} channel counts, got {}'.format(NUM_LEVELS, len(channels)))
        self.channels = tuple(channels)

        self.encoder = nn.ModuleList()
        previous = 1
        for ch in self.channels:
            self.encoder.append(nn.ModuleList([ConfidenceConv2d(previous, ch), ConfidenceConv2d(ch, ch)]))
            previous = ch

        self.merge = nn.ModuleDict({
            str(level): ConfidenceMerge(self.channels[level], self.channels[level - 1], self.channels[level - 1])
            for level in range(2, NUM_LEVELS)
        })

    def encode(self, disparity, validity):
        '''
        Returns the encoder (feature, confidence) pairs keyed by level 1..6.
        '''
        _check_divisible(disparity)
        c = validity.to(disparity.dtype)
        f = disparity * c
        encoded = {}
        for level, (conv_a, conv_b) in enumerate(self.encoder, start=1):
            f, c = max_confidence_pool(f, c)
            f, c = conv_a(f, c)
            f = leaky(f)
            f, c = conv_b(f, c)
            f = leaky(f)
            encoded[level] = (f, c)
        return encoded

    def forward(self, disparity, validity):
        '''
        Arg(s):
            disparity : torch.Tensor[float32]
                N x 1 x H x W disparity in pixels, arbitrary where invalid
            validity : torch.Tensor
                N x 1 x H x W binary mask
        Returns:
            dict[int, torch.Tensor] : features per level
            dict[int, torch.Tensor] : confidences per level
        '''
        encoded = self.encode(disparity, validity)
        outputs = {NUM_LEVELS: encoded[NUM_LEVELS]}
        for level in range(NUM_LEVELS - 1, 1, -1):
            f_up, c_up = nn_upsample(*outputs[level + 1])
            f_skip, c_skip = encoded[level]
            f, c = self.merge[str(level)](f_up, c_up, f_skip, c_skip)
            outputs[level] = (leaky(f), c)
        features = {level: outputs[level][0] for level in OUTPUT_LEVELS}
        confidences = {level: outputs[level][1] for level in OUTPUT_LEVELS}
        return features, confidences


class PlainLidarPyramid(nn.Module):
    '''
    Ablation variant: regular convolutions on mask-zeroed disparity, with a
    constant unit confidence reported at every level.
    '''

    def __init__(self, channels=DEFAULT_CHANNELS):
        super().__init__()
        self.pyramid = RGBPyramid(in_channels=1, channels=channels)

    def forward(self, disparity, validity):
        x = disparity * validity.to(disparity.dtype)
        features = self.pyramid(x)
        confidences = {
            level: torch.ones_like(features[level][:, :1])
            for level in OUTPUT_LEVELS
        }
        return features, confidences
