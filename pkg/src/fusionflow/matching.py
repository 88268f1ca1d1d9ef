"""Per-level scene flow prediction: warping, correlation, estimation, refinement.

Scene flow fields are N x 4 x H x W tensors holding (u, v, d0, d1) in pixels
of the level they live on.
"""
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import conv, leaky

DEFAULT_SEARCH_RADIUS = 4
DEFAULT_ESTIMATOR_WIDTHS = (128, 128, 96, 64, 32)
DEFAULT_CONTEXT_WIDTHS = (128, 128, 128, 96, 64, 32)
CONTEXT_DILATIONS = (1, 2, 4, 8, 16, 1, 1)


def warp(f_next, flow):
    '''
    Bilinearly samples f_next at p + flow(p). Corners that fall outside the
    image contribute zero.

    Arg(s):
        f_next : torch.Tensor[float32]
            N x C x H x W features of the second frame
        flow : torch.Tensor[float32]
            N x 2 x H x W displacement (u, v) in pixels of this level
    Returns:
        torch.Tensor[float32] : N x C x H x W warped features
    '''
    n, ch, h, w = f_next.shape
    if flow.shape != (n, 2, h, w):
        raise ValueError('flow {} does not match features {}'.format(tuple(flow.shape), tuple(f_next.shape)))

    ys, xs = torch.meshgrid(
        torch.arange(h, dtype=flow.dtype, device=flow.device),
        torch.arange(w, dtype=flow.dtype, device=flow.device),
        indexing='ij')
    x = xs + flow[:, 0]
    y = ys + flow[:, 1]

    x0 = torch.floor(x)
    y0 = torch.floor(y)
    wx1 = x - x0
    wy1 = y - y0
    x0 = x0.long()
    y0 = y0.long()

    source = f_next.reshape(n, ch, h * w)
    output = torch.zeros_like(f_next)
    for dy, wy in ((0, 1 - wy1), (1, wy1)):
        for dx, wx in ((0, 1 - wx1), (1, wx1)):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
            index = (yi.clamp(0, h - 1) * w + xi.clamp(0, w - 1)).reshape(n, 1, h * w)
            values = torch.gather(source, 2, index.expand(n, ch, h * w)).reshape(n, ch, h, w)
            weight = (wx * wy * inside.to(flow.dtype)).unsqueeze(1)
            output = output + weight * values
    return output


def cost_volume(f_ref, f_warp, radius=DEFAULT_SEARCH_RADIUS):
    '''
    Correlation of each reference feature with the warped features in a
    (2r+1) x (2r+1) window, averaged over channels. Out-of-bounds neighbors
    contribute zero. Offsets are ordered row-major: (dy, dx) with dy outer.

    Returns:
        torch.Tensor[float32] : N x (2r+1)^2 x H x W
    '''
    if f_ref.shape != f_warp.shape:
        raise ValueError('cost volume inputs differ: {} vs {}'.format(tuple(f_ref.shape), tuple(f_warp.shape)))
    n, ch, h, w = f_ref.shape
    padded = F.pad(f_warp, (radius, radius, radius, radius))
    costs = []
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[:, :, radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            costs.append((f_ref * shifted).sum(dim=1) / ch)
    return torch.stack(costs, dim=1)


def upsample_sf(sf):
    '''
    Bilinear x2 upsampling of a scene flow field; pixel-valued channels double.
    '''
    return 2.0 * F.interpolate(sf, scale_factor=2, mode='bilinear', align_corners=False)


class FlowEstimator(nn.Module):
    '''
    Convolution stack predicting a 4-channel scene flow field at one level.

    Arg(s):
        in_channels : int
            channels of the concatenated cost volume, reference features,
            warped features and (except at the coarsest level) upsampled flow
        widths : tuple[int]
            widths of the hidden convolutions
    '''

    def __init__(self, in_channels, widths=DEFAULT_ESTIMATOR_WIDTHS):
        super().__init__()
        layers = []
        previous = in_channels
        for width in widths:
            layers.append(conv(previous, width))
            previous = width
        self.layers = nn.ModuleList(layers)
        self.head = conv(previous, 4)
        self.out_channels = previous

    def forward(self, x):
        for layer in self.layers:
            x = leaky(layer(x))
        return self.head(x), x


class ContextNetwork(nn.Module):
    '''
    Dilated convolution stack producing a residual for the finest-level field.
    The last convolution is the 4-channel head and starts at zero, so the
    refinement is the identity at initialization.
    '''

    def __init__(self, in_channels, widths=DEFAULT_CONTEXT_WIDTHS, dilations=CONTEXT_DILATIONS):
        super().__init__()
        if len(dilations) != len(widths) + 1:
            raise ValueError('need one dilation per hidden layer plus one for the head')
        layers = []
        previous = in_channels
        for width, dilation in zip(widths, dilations):
            layers.append(conv(previous, width, dilation=dilation))
            previous = width
        self.layers = nn.ModuleList(layers)
        self.head = conv(previous, 4, dilation=dilations[-1])
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def forward(self, x, sf):
        for layer in self.layers:
            x = leaky(layer(x))
        return sf + self.head(x)


def estimator_in_channels(feature_channels, radius, coarsest):
    cost_channels = (2 * radius + 1) ** 2
    return cost_channels + 2 * feature_channels + (0 if coarsest else 4)


def estimate_level(estimator, f_ref, f_next, up_sf=None, radius=DEFAULT_SEARCH_RADIUS):
    '''
    Runs one level of the coarse-to-fine loop. Only the optical flow part of
    up_sf drives the warp; without up_sf the second frame is used unwarped.

    Returns:
        torch.Tensor[float32] : N x 4 x H x W scene flow at this level
        torch.Tensor[float32] : penultimate estimator features
        torch.Tensor[float32] : the warped second-frame features
    '''
    if up_sf is None:
        warped = f_next
        inputs = [cost_volume(f_ref, warped, radius), f_ref, warped]
    else:
        warped = warp(f_next, up_sf[:, :2])
        inputs = [cost_volume(f_ref, warped, radius), f_ref, warped, up_sf]
    sf, features = estimator(torch.cat(inputs, dim=1))
    return sf, features, warped


def context_refine(context, est_features, f_ref, f_next, sf):
    '''
    Adds the context network's residual to the finest-level field. The network
    sees both frames' fused features, the estimator features and the field.
    '''
    x = torch.cat([f_ref, f_next, est_features, sf], dim=1)
    return context(x, sf)
