"""Network architectures: SmaAt-UNet, SmaAt-fUsion, SmaAt-Krige-GNet and persistence.

All nets map a (B, 12, 64, 64) normalized precipitation window to a single
(B, 1, 64, 64) frame 30 minutes ahead. The two fusion nets take an extra
input: the station tensor (B, 22, 8, 12) or the flattened kriging stack
(B, 96, 64, 64).
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from nowcast.constants import GRID_SIZE, N_LAGS, N_STATIONS, N_VARIABLES

MODEL_NAMES = ("smaat_unet", "smaat_fusion", "smaat_krige_gnet", "persistence")


@dataclass(frozen=True)
class NetConfig:
    in_frames: int = N_LAGS
    out_frames: int = 1
    base_channels: int = 64
    depth: int = 5
    kernels_per_layer: int = 2
    reduction_ratio: int = 16
    station_channels: int = 512
    krige_channels: int = N_LAGS * N_VARIABLES
    # Krige-GNet: also feed the concatenated features into the next encoder level
    krige_feed_forward: bool = True

    def widths(self):
        return [self.base_channels * 2**i for i in range(self.depth)]

    def to_dict(self):
        return asdict(self)

    def config_hash(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


class DepthwiseSeparableConv(nn.Module):
    def __init__(self, in_channels, out_channels, kernel_size=3, padding=1, kernels_per_layer=1):
        super().__init__()
        self.depthwise = nn.Conv2d(
            in_channels,
            in_channels * kernels_per_layer,
            kernel_size=kernel_size,
            padding=padding,
            groups=in_channels,
        )
        self.pointwise = nn.Conv2d(in_channels * kernels_per_layer, out_channels, kernel_size=1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class DoubleConvDS(nn.Module):
    """(depthwise 3x3 -> pointwise 1x1 -> BN -> ReLU) twice. Spatial size is preserved."""

    def __init__(self, in_channels, out_channels, mid_channels=None, kernels_per_layer=1):
        super().__init__()
        if in_channels < 1 or out_channels < 1:
            raise ValueError(f"channel counts must be positive, got {in_channels} -> {out_channels}")
        mid_channels = mid_channels or out_channels
        self.in_channels = in_channels
        self.double_conv = nn.Sequential(
            DepthwiseSeparableConv(in_channels, mid_channels, kernels_per_layer=kernels_per_layer),
            nn.BatchNorm2d(mid_channels),
            nn.ReLU(inplace=True),
            DepthwiseSeparableConv(mid_channels, out_channels, kernels_per_layer=kernels_per_layer),
            nn.BatchNorm2d(out_channels),
            nn.ReLU(inplace=True),
        )

    def forward(self, x):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {x.shape[1]}")
        return self.double_conv(x)


class DownDS(nn.Module):
    def __init__(self, in_channels, out_channels, kernels_per_layer=1):
        super().__init__()
        self.maxpool_conv = nn.Sequential(
            nn.MaxPool2d(2),
            DoubleConvDS(in_channels, out_channels, kernels_per_layer=kernels_per_layer),
        )

    def forward(self, x):
        return self.maxpool_conv(x)


class UpDS(nn.Module):
    """Bilinear x2 upsampling, concat with the skip tensor, then a double DS conv."""

    def __init__(self, in_channels, out_channels, kernels_per_layer=1):
        super().__init__()
        self.up = nn.Upsample(scale_factor=2, mode="bilinear", align_corners=True)
        self.conv = DoubleConvDS(in_channels, out_channels, in_channels // 2, kernels_per_layer)

    def forward(self, x, skip):
        x = self.up(x)
        dy = skip.size(2) - x.size(2)
        dx = skip.size(3) - x.size(3)
        if dy or dx:
            x = F.pad(x, [dx // 2, dx - dx // 2, dy // 2, dy - dy // 2])
        return self.conv(torch.cat([skip, x], dim=1))


class ChannelAttention(nn.Module):
    def __init__(self, channels, reduction_ratio=16):
        super().__init__()
        hidden = max(channels // reduction_ratio, 1)
        self.mlp = nn.Sequential(
            nn.Flatten(),
            nn.Linear(channels, hidden),
            nn.ReLU(),
            nn.Linear(hidden, channels),
        )

    def forward(self, x):
        avg = self.mlp(F.adaptive_avg_pool2d(x, 1))
        mx = self.mlp(F.adaptive_max_pool2d(x, 1))
        return x * torch.sigmoid(avg + mx)[:, :, None, None]


class SpatialAttention(nn.Module):
    def __init__(self, kernel_size=7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2, bias=False)

    def forward(self, x):
        pooled = torch.cat([x.mean(dim=1, keepdim=True), x.amax(dim=1, keepdim=True)], dim=1)
        return x * torch.sigmoid(self.conv(pooled))


class CBAM(nn.Module):
    def __init__(self, channels, reduction_ratio=16):
        super().__init__()
        self.channel = ChannelAttention(channels, reduction_ratio)
        self.spatial = SpatialAttention()

    def forward(self, x):
        return self.spatial(self.channel(x))


def _check_precip(x, cfg):
    if x.ndim != 4 or x.shape[1] != cfg.in_frames or x.shape[-2:] != (GRID_SIZE, GRID_SIZE):
        raise ValueError(f"precip must be (B, {cfg.in_frames}, {GRID_SIZE}, {GRID_SIZE}), got {tuple(x.shape)}")


class SmaAtUNet(nn.Module):
    """Five-level depthwise-separable UNet with CBAM on every skip path."""

    needs_station = False
    needs_krige = False

    def __init__(self, config: NetConfig | None = None, bottleneck_extra: int = 0):
        super().__init__()
        cfg = config or NetConfig()
        self.config = cfg
        kpl, rr = cfg.kernels_per_layer, cfg.reduction_ratio
        w = cfg.widths()
        # bilinear upsampling halves the deepest width, as in the reference UNet
        w[-1] //= 2
        self.widths = w

        self.inc = DoubleConvDS(cfg.in_frames, w[0], kernels_per_layer=kpl)
        self.downs = nn.ModuleList(
            DownDS(w[i], w[i + 1], kernels_per_layer=kpl) for i in range(len(w) - 1)
        )
        self.attn = nn.ModuleList(CBAM(c, rr) for c in w)

        ups = []
        x_ch = w[-1] + bottleneck_extra
        for i in range(len(w) - 2, -1, -1):
            out = w[i] // 2 if i > 0 else w[0]
            ups.append(UpDS(x_ch + w[i], out, kernels_per_layer=kpl))
            x_ch = out
        self.ups = nn.ModuleList(ups)
        self.outc = nn.Conv2d(x_ch, cfg.out_frames, kernel_size=1)

    def encode(self, x):
        _check_precip(x, self.config)
        skips = []
        h = self.inc(x)
        for i, att in enumerate(self.attn):
            if i > 0:
                h = self.downs[i - 1](h)
            h = att(h)
            skips.append(h)
        return skips

    def decode(self, bottleneck, skips):
        h = bottleneck
        for up, skip in zip(self.ups, reversed(skips[:-1])):
            h = up(h, skip)
        return self.outc(h)

    def forward(self, precip):
        skips = self.encode(precip)
        return self.decode(skips[-1], skips)


class DepthwiseSeparableConv3d(nn.Module):
    def __init__(self, in_channels, out_channels, kernels_per_layer=1):
        super().__init__()
        self.depthwise = nn.Conv3d(
            in_channels, in_channels * kernels_per_layer, kernel_size=3, padding=1, groups=in_channels
        )
        self.pointwise = nn.Conv3d(in_channels * kernels_per_layer, out_channels, kernel_size=1)

    def forward(self, x):
        return self.pointwise(self.depthwise(x))


class StationBranch(nn.Module):
    """Embeds the (stations, variables, lags) volume into a bottleneck-shaped map.

    The volume is one 3D input channel. Two depthwise-separable 3D stages lift it
    to ``out_channels``; adaptive max pooling then reduces it to
    (out_channels, 1, s, s) and the singleton depth is dropped.
    """

    def __init__(self, out_channels=512, spatial=4, kernels_per_layer=2):
        super().__init__()
        mid = max(out_channels // 4, 1)
        self.convs = nn.Sequential(
            DepthwiseSeparableConv3d(1, mid, kernels_per_layer),
            nn.BatchNorm3d(mid),
            nn.ReLU(inplace=True),
            DepthwiseSeparableConv3d(mid, out_channels, kernels_per_layer),
            nn.BatchNorm3d(out_channels),
            nn.ReLU(inplace=True),
        )
        self.pool = nn.AdaptiveMaxPool3d((1, spatial, spatial))
        self.out_channels = out_channels

    def forward(self, station):
        if station.ndim != 4 or tuple(station.shape[1:]) != (N_STATIONS, N_VARIABLES, N_LAGS):
            raise ValueError(
                f"station must be (B, {N_STATIONS}, {N_VARIABLES}, {N_LAGS}), got {tuple(station.shape)}"
            )
        h = self.convs(station.unsqueeze(1))
        return self.pool(h).squeeze(2)


class SmaAtFusion(nn.Module):
    """SmaAt-UNet whose bottleneck is widened with a station-data embedding."""

    needs_station = True
    needs_krige = False

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        cfg = config or NetConfig()
        self.config = cfg
        self.unet = SmaAtUNet(cfg, bottleneck_extra=cfg.station_channels)
        spatial = GRID_SIZE // 2 ** (cfg.depth - 1)
        self.station = StationBranch(cfg.station_channels, spatial, cfg.kernels_per_layer)

    def forward(self, precip, station=None):
        if station is None:
            raise ValueError("SmaAt-fUsion requires the station tensor")
        skips = self.unet.encode(precip)
        emb = self.station(station)
        bottleneck = torch.cat([skips[-1], emb], dim=1)
        return self.unet.decode(bottleneck, skips)


class SmaAtKrigeGNet(nn.Module):
    """Dual-encoder UNet: a mirrored encoder over the 96-channel kriging stack.

    At every level the kriging features are concatenated onto the
    precipitation features. The fused tensor is the skip input and, with
    ``krige_feed_forward``, also the input of the next precipitation level.
    """

    needs_station = False
    needs_krige = True

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        cfg = config or NetConfig()
        self.config = cfg
        kpl, rr = cfg.kernels_per_layer, cfg.reduction_ratio
        w = cfg.widths()
        w[-1] //= 2
        ff = cfg.krige_feed_forward

        self.inc = DoubleConvDS(cfg.in_frames, w[0], kernels_per_layer=kpl)
        self.k_inc = DoubleConvDS(cfg.krige_channels, w[0], kernels_per_layer=kpl)
        fused = [2 * c for c in w]
        self.downs = nn.ModuleList(
            DownDS(fused[i] if ff else w[i], w[i + 1], kernels_per_layer=kpl) for i in range(len(w) - 1)
        )
        self.k_downs = nn.ModuleList(
            DownDS(w[i], w[i + 1], kernels_per_layer=kpl) for i in range(len(w) - 1)
        )
        self.attn = nn.ModuleList(CBAM(c, rr) for c in fused)

        ups = []
        x_ch = fused[-1]
        for i in range(len(w) - 2, -1, -1):
            out = w[i] // 2 if i > 0 else w[0]
            ups.append(UpDS(x_ch + fused[i], out, kernels_per_layer=kpl))
            x_ch = out
        self.ups = nn.ModuleList(ups)
        self.outc = nn.Conv2d(x_ch, cfg.out_frames, kernel_size=1)

    def forward(self, precip, krige=None):
        if krige is None:
            raise ValueError("SmaAt-Krige-GNet requires the kriging stack")
        _check_precip(precip, self.config)
        if krige.ndim != 4 or krige.shape[1] != self.config.krige_channels:
            raise ValueError(f"krige must be (B, {self.config.krige_channels}, H, W), got {tuple(krige.shape)}")
        p = self.inc(precip)
        k = self.k_inc(krige)
        skips = []
        for i, att in enumerate(self.attn):
            if i > 0:
                p = self.downs[i - 1](fused if self.config.krige_feed_forward else p)
                k = self.k_downs[i - 1](k)
            fused = att(torch.cat([p, k], dim=1))
            skips.append(fused)
        h = skips[-1]
        for up, skip in zip(self.ups, reversed(skips[:-1])):
            h = up(h, skip)
        return self.outc(h)


class Persistence(nn.Module):
    """Predicts the most recent input frame."""

    needs_station = False
    needs_krige = False

    def __init__(self, config: NetConfig | None = None):
        super().__init__()
        self.config = config or NetConfig()

    def forward(self, precip, *_):
        if precip.ndim != 4 or precip.shape[1] < 1:
            raise ValueError("persistence needs at least one input frame")
        return precip[:, -1:].clone()


def build_model(name: str, config: NetConfig | None = None) -> nn.Module:
    classes = {
        "smaat_unet": SmaAtUNet,
        "smaat_fusion": SmaAtFusion,
        "smaat_krige_gnet": SmaAtKrigeGNet,
        "persistence": Persistence,
    }
    if name not in classes:
        raise ValueError(f"unknown model {name!r}; choose from {', '.join(MODEL_NAMES)}")
    return classes[name](config)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def forward_batch(model, precip, station=None, krige=None):
    """Call ``model`` with whichever auxiliary input its architecture consumes."""
    if getattr(model, "needs_station", False):
        return model(precip, station)
    if getattr(model, "needs_krige", False):
        return model(precip, krige)
    return model(precip)
