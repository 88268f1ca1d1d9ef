"""Operators for sparse data that carries a per-pixel confidence in [0, 1].

Tensors are NCHW. Confidence maps have a single channel and the same spatial
size as the feature map they accompany.
"""
import torch
import torch.nn.functional as F
from torch import nn

EPSILON = 1e-8


def _check_pair(f, c):
    if f.dim() != 4 or c.dim() != 4:
        raise ValueError('expected NCHW tensors, got {} and {}'.format(tuple(f.shape), tuple(c.shape)))
    if c.shape[1] != 1:
        raise ValueError('confidence must have one channel, got {}'.format(c.shape[1]))
    if f.shape[0] != c.shape[0] or f.shape[2:] != c.shape[2:]:
        raise ValueError('feature {} and confidence {} differ in size'.format(tuple(f.shape), tuple(c.shape)))


def confidence_conv(f, c, weight, bias, conf_weight_raw, stride=1, dilation=1):
    '''
    Normalized convolution that propagates confidence alongside features.

    Arg(s):
        f : torch.Tensor[float32]
            N x C_in x H x W features
        c : torch.Tensor[float32]
            N x 1 x H x W confidence in [0, 1]
        weight : torch.Tensor[float32]
            C_out x C_in x k x k feature weights
        bias : torch.Tensor[float32]
            C_out bias, added after normalization
        conf_weight_raw : torch.Tensor[float32]
            k x k unconstrained propagation weights, mapped through softplus
        stride : int
            1 or 2
    Returns:
        torch.Tensor[float32] : N x C_out x H' x W' features
        torch.Tensor[float32] : N x 1 x H' x W' confidence
    '''
    _check_pair(f, c)
    k = weight.shape[-1]
    if k % 2 == 0 or weight.shape[-2] != k:
        raise ValueError('kernel must be square with odd size, got {}'.format(tuple(weight.shape[-2:])))
    if conf_weight_raw.shape != (k, k):
        raise ValueError('propagation kernel must be {}x{}'.format(k, k))
    if stride not in (1, 2):
        raise ValueError('stride must be 1 or 2, got {}'.format(stride))

    # Zero padding carries zero confidence, so border taps are simply absent
    padding = dilation * (k // 2)
    w_hat = F.softplus(conf_weight_raw)
    w_hat_kernel = w_hat[None, None]

    numerator = F.conv2d(f * c, weight * w_hat_kernel, stride=stride, padding=padding, dilation=dilation)
    denominator = F.conv2d(c, w_hat_kernel, stride=stride, padding=padding, dilation=dilation)

    f_out = numerator / (denominator + EPSILON) + bias[None, :, None, None]
    c_out = denominator / w_hat.sum()
    return f_out, c_out


def max_confidence_pool(f, c, window=2):
    '''
    Downsamples by keeping, per non-overlapping window, the feature vector and
    confidence at the most confident location. Ties go to the first location in
    row-major order. Sizes that do not divide are padded with zero confidence.
    '''
    _check_pair(f, c)
    n, ch, h, w = f.shape
    pad_h = (-h) % window
    pad_w = (-w) % window
    if pad_h or pad_w:
        f = F.pad(f, (0, pad_w, 0, pad_h))
        c = F.pad(c, (0, pad_w, 0, pad_h))
        h, w = h + pad_h, w + pad_w
    ho, wo = h // window, w // window

    # N x 1 x ho x wo x window*window, taps in row-major window order
    c_win = c.reshape(n, 1, ho, window, wo, window).permute(0, 1, 2, 4, 3, 5).reshape(n, 1, ho, wo, -1)
    f_win = f.reshape(n, ch, ho, window, wo, window).permute(0, 1, 2, 4, 3, 5).reshape(n, ch, ho, wo, -1)

    # torch.argmax does not promise first-index ties, so break them explicitly
    c_max = c_win.max(dim=-1, keepdim=True).values
    taps = torch.arange(window * window, device=c.device)
    candidates = torch.where(c_win == c_max, taps, window * window)
    index = candidates.min(dim=-1, keepdim=True).values

    c_out = torch.gather(c_win, -1, index).squeeze(-1)
    f_out = torch.gather(f_win, -1, index.expand(n, ch, ho, wo, 1)).squeeze(-1)
    return f_out, c_out


def nn_upsample(f, c, factor=2):
    '''
    Replicates every cell into a factor x factor block, for features and
    confidence alike.
    '''
    _check_pair(f, c)
    f_out = f.repeat_interleave(factor, dim=2).repeat_interleave(factor, dim=3)
    c_out = c.repeat_interleave(factor, dim=2).repeat_interleave(factor, dim=3)
    return f_out, c_out


class ConfidenceConv2d(nn.Module):
    '''
    Learnable confidence convolution with untied feature and propagation weights.

    Arg(s):
        in_channels : int
            number of input feature channels
        out_channels : int
            number of output feature channels
        kernel_size : int
            odd kernel size
        stride : int
            1 or 2
    '''

    def __init__(self, in_channels, out_channels, kernel_size=3, stride=1):
        super().__init__()
        if kernel_size % 2 == 0:
            raise ValueError('kernel_size must be odd, got {}'.format(kernel_size))
        self.stride = stride
        self.weight = nn.Parameter(torch.empty(out_channels, in_channels, kernel_size, kernel_size))
        self.bias = nn.Parameter(torch.zeros(out_channels))
        # softplus(0.5413) == 1, so propagation starts uniform with unit taps
        self.conf_weight_raw = nn.Parameter(torch.full((kernel_size, kernel_size), 0.5413))
        nn.init.kaiming_uniform_(self.weight, a=0.1)
        # Normalization divides by the tap count; undo it so activations keep scale
        with torch.no_grad():
            self.weight.mul_(kernel_size * kernel_size)

    def forward(self, f, c):
        return confidence_conv(f, c, self.weight, self.bias, self.conf_weight_raw, stride=self.stride)
