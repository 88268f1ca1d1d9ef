"""Multi-scale late fusion of RGB features, LiDAR features and LiDAR confidence."""
import torch
from torch import nn

from .backbone import DEFAULT_CHANNELS, OUTPUT_LEVELS, conv, leaky


class FusionLevel(nn.Module):
    '''
    Fuses one pyramid level. LiDAR features pass a preprocessing stack, are
    concatenated with the RGB features (and optionally the LiDAR confidence),
    and the volume is mixed by a second stack at constant spatial size.

    Arg(s):
        channels : int
            channel count X of this pyramid level; also the output width
        use_confidence_concat : bool
            if set, the confidence map enters the fusion volume as one channel
        num_preprocess : int
            convolutions applied to the LiDAR features before fusion
        num_fusion : int
            convolutions applied to the concatenated volume
    '''

    def __init__(self, channels, use_confidence_concat=True, num_preprocess=2, num_fusion=2):
        super().__init__()
        self.channels = channels
        self.use_confidence_concat = use_confidence_concat
        self.preprocess = nn.ModuleList([conv(channels, channels) for _ in range(num_preprocess)])

        in_channels = 2 * channels + (1 if use_confidence_concat else 0)
        layers = []
        for _ in range(num_fusion):
            layers.append(conv(in_channels, channels))
            in_channels = channels
        self.fusion = nn.ModuleList(layers)

    def forward(self, rgb, lidar, confidence):
        if rgb.shape[-2:] != lidar.shape[-2:] or rgb.shape[-2:] != confidence.shape[-2:]:
            raise ValueError('fusion inputs differ in size: rgb {}, lidar {}, confidence {}'.format(
                tuple(rgb.shape), tuple(lidar.shape), tuple(confidence.shape)))

        d = lidar
        for layer in self.preprocess:
            d = leaky(layer(d))

        if self.use_confidence_concat:
            x = torch.cat([rgb, confidence, d], dim=1)
        else:
            x = torch.cat([rgb, d], dim=1)

        for layer in self.fusion:
            x = leaky(layer(x))
        return x


class FusionModule(nn.Module):
    '''
    One FusionLevel per output level 6..2. The same module instance serves both
    time steps, which is how the weights are shared.
    '''

    def __init__(self, channels=DEFAULT_CHANNELS, use_confidence_concat=True, num_preprocess=2, num_fusion=2):
        super().__init__()
        self.levels = nn.ModuleDict({
            str(level): FusionLevel(
                channels[level - 1],
                use_confidence_concat=use_confidence_concat,
                num_preprocess=num_preprocess,
                num_fusion=num_fusion)
            for level in OUTPUT_LEVELS
        })

    def forward(self, rgb, lidar, confidence):
        '''
        Arg(s):
            rgb : dict[int, torch.Tensor]
                RGB pyramid outputs per level
            lidar : dict[int, torch.Tensor]
                LiDAR pyramid features per level
            confidence : dict[int, torch.Tensor]
                LiDAR confidences per level
        Returns:
            dict[int, torch.Tensor] : fused features per level
        '''
        return {
            level: self.levels[str(level)](rgb[level], lidar[level], confidence[level])
            for level in OUTPUT_LEVELS
        }
