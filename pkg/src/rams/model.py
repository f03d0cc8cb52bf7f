"""RAMS network: 3D-convolutional main branch with residual feature attention,
temporal reduction blocks and a global residual temporal-attention branch.

Tensors inside the network use the torch layout ``(B, F, T, H, W)`` for 3D
features and ``(B, C, H, W)`` for 2D ones. :func:`rams_forward` accepts the
channels-last stack layout ``H x W x T x C`` used by the data pipeline.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    F: int = 32
    N: int = 12
    f_h: int = 3
    f_w: int = 3
    f_t: int = 3
    r: int = 8
    s: int = 3
    T: int = 9
    C: int = 1

    def __post_init__(self):
        for name in ("F", "f_h", "f_w", "f_t", "r", "s", "T", "C"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.N < 0:
            raise ConfigError("N must be >= 0")
        if self.f_h % 2 == 0 or self.f_w % 2 == 0 or self.f_t % 2 == 0:
            raise ConfigError("kernel extents must be odd")
        if self.f_t < 2:
            raise ConfigError("f_t must be >= 2 to reduce the temporal axis")
        if self.F % self.r:
            raise ConfigError(f"F={self.F} is not divisible by r={self.r}")
        if self.n_reduction_blocks < 1:
            raise ConfigError("config yields no temporal reduction block")
        trajectory = self.temporal_trajectory
        if trajectory[-2] != self.f_t:
            raise ConfigError(
                f"temporal depth after reduction is {trajectory[-2]}, expected f_t={self.f_t}"
            )

    @property
    def n_reduction_blocks(self) -> int:
        return self.T // (self.f_t - 1) - 1

    @property
    def temporal_trajectory(self) -> list[int]:
        """Temporal depth after each TR-Conv, starting from T and ending at 1."""
        steps = [self.T]
        for _ in range(self.n_reduction_blocks + 1):
            steps.append(steps[-1] - (self.f_t - 1))
        return steps

    @property
    def temporal_channels(self) -> int:
        return self.T * self.C

    @property
    def temporal_reduced(self) -> int:
        # T*C is rarely a multiple of r (9 vs 8 by default), so floor with a floor of 1
        return max(1, self.temporal_channels // self.r)

    def to_dict(self) -> dict:
        return asdict(self)


def _pad3d(x: torch.Tensor, ph: int, pw: int, pt: int) -> torch.Tensor:
    if ph == pw == pt == 0:
        return x
    return F.pad(x, (pw, pw, ph, ph, pt, pt), mode="reflect")


def conv3d(x, weight, bias, temporal_padding=True):
    """3D convolution with reflect padding on H and W (and on T if requested).

    ``x`` is ``(B, F_in, T, H, W)``; ``weight`` is ``(F_out, F_in, f_t, f_h, f_w)``.
    Without temporal padding this is the TR-Conv and T shrinks by ``f_t - 1``.
    """
    if x.dim() != 5 or weight.dim() != 5:
        raise ValueError("conv3d expects 5D input and weight")
    if x.shape[1] != weight.shape[1]:
        raise ValueError(f"input has {x.shape[1]} features, weight expects {weight.shape[1]}")
    f_t, f_h, f_w = weight.shape[2:]
    if not temporal_padding and x.shape[2] < f_t:
        raise ValueError(f"temporal depth {x.shape[2]} smaller than kernel {f_t}")
    pt = f_t // 2 if temporal_padding else 0
    x = _pad3d(x, f_h // 2, f_w // 2, pt)
    return F.conv3d(x, weight, bias)


def conv2d(x, weight, bias):
    f_h, f_w = weight.shape[2:]
    if f_h > 1 or f_w > 1:
        x = F.pad(x, (f_w // 2, f_w // 2, f_h // 2, f_h // 2), mode="reflect")
    return F.conv2d(x, weight, bias)


def pixel_shuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    """Depth-to-space: ``(B, s*s*C, H, W) -> (B, C, s*H, s*W)``.

    Channel ``c*s*s + k`` lands at sub-pixel offset ``(k // s, k % s)``.
    """
    if x.shape[-3] % (s * s):
        raise ValueError(f"{x.shape[-3]} channels not divisible by s^2={s * s}")
    return F.pixel_shuffle(x, s)


def pixel_unshuffle(x: torch.Tensor, s: int) -> torch.Tensor:
    return F.pixel_unshuffle(x, s)


def _init_conv(weight: torch.Tensor, bias: torch.Tensor | None, generator=None):
    # variance-scaling, fan-in, uniform
    fan_in = weight[0].numel()
    limit = math.sqrt(3.0 / fan_in)
    with torch.no_grad():
        weight.uniform_(-limit, limit, generator=generator)
        if bias is not None:
            bias.zero_()


class Conv3d(nn.Module):
    def __init__(self, f_in, f_out, kernel, temporal_padding=True):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(f_out, f_in, *kernel))
        self.bias = nn.Parameter(torch.empty(f_out))
        self.temporal_padding = temporal_padding
        _init_conv(self.weight, self.bias)

    def forward(self, x):
        return conv3d(x, self.weight, self.bias, self.temporal_padding)


class Conv2d(nn.Module):
    def __init__(self, f_in, f_out, kernel):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(f_out, f_in, *kernel))
        self.bias = nn.Parameter(torch.empty(f_out))
        _init_conv(self.weight, self.bias)

    def forward(self, x):
        return conv2d(x, self.weight, self.bias)


class Attention(nn.Module):
    """Global average pool followed by a squeeze/excite pair of 1x1 convolutions.

    Works on any tensor whose dim 1 is the channel axis; pooling runs over all
    remaining non-batch axes.
    """

    def __init__(self, channels, reduced):
        super().__init__()
        self.down = nn.Parameter(torch.empty(reduced, channels))
        self.down_bias = nn.Parameter(torch.empty(reduced))
        self.up = nn.Parameter(torch.empty(channels, reduced))
        self.up_bias = nn.Parameter(torch.empty(channels))
        _init_conv(self.down, self.down_bias)
        _init_conv(self.up, self.up_bias)

    def forward(self, x_star):
        return attention_scales(x_star, self.down, self.down_bias, self.up, self.up_bias)


def attention_scales(x_star, down, down_bias, up, up_bias):
    """Per-channel scales in (0, 1), shaped to broadcast against ``x_star``."""
    z = x_star.mean(dim=tuple(range(2, x_star.dim())))
    hidden = torch.relu(z @ down.T + down_bias)
    scales = torch.sigmoid(hidden @ up.T + up_bias)
    return scales.reshape(*scales.shape, *([1] * (x_star.dim() - 2)))


def feature_attention(x_star, attention: Attention):
    return attention(x_star)


class RFAB(nn.Module):
    """Residual feature attention block."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        k = (cfg.f_t, cfg.f_h, cfg.f_w)
        self.conv1 = Conv3d(cfg.F, cfg.F, k)
        self.conv2 = Conv3d(cfg.F, cfg.F, k)
        self.attention = Attention(cfg.F, cfg.F // cfg.r)

    def body(self, x):
        return self.conv2(torch.relu(self.conv1(x)))

    def forward(self, x):
        x_star = self.body(x)
        return x + self.attention(x_star) * x_star


class TemporalReductionBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.rfab = RFAB(cfg)
        self.trconv = Conv3d(cfg.F, cfg.F, (cfg.f_t, cfg.f_h, cfg.f_w), temporal_padding=False)

    def forward(self, x):
        if x.shape[2] < self.trconv.weight.shape[2]:
            raise ValueError(f"temporal depth {x.shape[2]} too small for reduction")
        return self.trconv(self.rfab(x))


class RTABranch(nn.Module):
    """Global residual path: temporal attention over the T*C input planes, then
    a 2D convolution to s^2*C features and a pixel shuffle."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        tc = cfg.temporal_channels
        k = (cfg.f_h, cfg.f_w)
        self.s = cfg.s
        self.conv1 = Conv2d(tc, tc, k)
        self.conv2 = Conv2d(tc, tc, k)
        self.attention = Attention(tc, cfg.temporal_reduced)
        self.upconv = Conv2d(tc, cfg.s * cfg.s * cfg.C, k)

    def temporal_attention(self, x2d):
        x_star = self.conv2(torch.relu(self.conv1(x2d)))
        return self.attention(x_star), x_star

    def forward(self, x):
        # (B, C, T, H, W) -> (B, T*C, H, W); plane index is t*C + c
        b, c, t, h, w = x.shape
        x2d = x.permute(0, 2, 1, 3, 4).reshape(b, t * c, h, w)
        scales, x_star = self.temporal_attention(x2d)
        fused = x2d + scales * x_star
        return pixel_shuffle(self.upconv(fused), self.s)


class RAMS(nn.Module):
    def __init__(self, cfg: ModelConfig | None = None, use_rta: bool = True):
        super().__init__()
        cfg = cfg or ModelConfig()
        self.cfg = cfg
        self.use_rta = use_rta
        k = (cfg.f_t, cfg.f_h, cfg.f_w)
        self.shallow = Conv3d(cfg.C, cfg.F, k)
        self.rfabs = nn.ModuleList(RFAB(cfg) for _ in range(cfg.N))
        self.reduction = nn.ModuleList(
            TemporalReductionBlock(cfg) for _ in range(cfg.n_reduction_blocks)
        )
        self.final = Conv3d(cfg.F, cfg.s * cfg.s * cfg.C, k, temporal_padding=False)
        self.rta = RTABranch(cfg) if use_rta else None
        self.reset_parameters()

    def reset_parameters(self, generator: torch.Generator | None = None):
        for module in self.modules():
            if isinstance(module, (Conv3d, Conv2d)):
                _init_conv(module.weight, module.bias, generator)
            elif isinstance(module, Attention):
                _init_conv(module.down, module.down_bias, generator)
                _init_conv(module.up, module.up_bias, generator)

    def main_branch(self, x):
        shallow = self.shallow(x)
        feats = shallow
        for block in self.rfabs:
            feats = block(feats)
        feats = feats + shallow
        for block in self.reduction:
            feats = block(feats)
        out = self.final(feats)
        if out.shape[2] != 1:
            raise ConfigError(f"temporal depth {out.shape[2]} left after final TR-Conv")
        return pixel_shuffle(out[:, :, 0], self.cfg.s)

    def forward(self, x):
        """``x``: ``(B, C, T, H, W)`` -> ``(B, C, sH, sW)``."""
        if x.shape[1] != self.cfg.C or x.shape[2] != self.cfg.T:
            raise ConfigError(
                f"input has C={x.shape[1]}, T={x.shape[2]}; model expects C={self.cfg.C}, T={self.cfg.T}"
            )
        out = self.main_branch(x)
        if self.rta is not None:
            out = out + self.rta(x)
        return out


def stack_to_tensor(x) -> torch.Tensor:
    """``H x W x T x C`` (or batched ``B x H x W x T x C``) -> ``(B, C, T, H, W)``."""
    x = torch.as_tensor(x)
    if x.dim() == 4:
        x = x.unsqueeze(0)
    return x.permute(0, 4, 3, 1, 2)


def image_from_tensor(y: torch.Tensor) -> torch.Tensor:
    """``(B, C, sH, sW)`` -> ``B x sH x sW x C``."""
    return y.permute(0, 2, 3, 1)


def rams_forward(x, model: RAMS) -> torch.Tensor:
    """Channels-last entry point: ``H x W x T x C -> sH x sW x C`` (batch kept if given)."""
    batched = torch.as_tensor(x).dim() == 5
    xt = stack_to_tensor(x).to(next(model.parameters()).dtype)
    out = image_from_tensor(model(xt))
    return out if batched else out[0]


def count_parameters(cfg: ModelConfig, use_rta: bool = True) -> int:
    """Exact learnable-scalar count, derived from the layer arithmetic."""
    kt = cfg.f_t * cfg.f_h * cfg.f_w
    k2 = cfg.f_h * cfg.f_w

    def conv(n_in, n_out, k):
        return n_in * n_out * k + n_out

    att = conv(cfg.F, cfg.F // cfg.r, 1) + conv(cfg.F // cfg.r, cfg.F, 1)
    rfab = 2 * conv(cfg.F, cfg.F, kt) + att
    total = conv(cfg.C, cfg.F, kt)
    total += cfg.N * rfab
    total += cfg.n_reduction_blocks * (rfab + conv(cfg.F, cfg.F, kt))
    total += conv(cfg.F, cfg.s * cfg.s * cfg.C, kt)
    if use_rta:
        tc, tr = cfg.temporal_channels, cfg.temporal_reduced
        total += 2 * conv(tc, tc, k2) + conv(tc, tr, 1) + conv(tr, tc, 1)
        total += conv(tc, cfg.s * cfg.s * cfg.C, k2)
    return total


def describe(model: RAMS) -> list[tuple[str, tuple[int, ...], int]]:
    """Layer table: (key, shape, parameter count) for every learnable tensor."""
    return [(k, tuple(v.shape), v.numel()) for k, v in model.state_dict().items()]


def receptive_field_radius(cfg: ModelConfig) -> int:
    """Spatial LR radius of influence of one input pixel on the output."""
    # every padded/TR conv with f_h>1 grows it by f_h//2; attention pooling is global
    # but only through scale factors, which we ignore here on purpose (see callers)
    n3d = 1 + 2 * cfg.N + cfg.n_reduction_blocks * 3 + 1
    main = n3d * (cfg.f_h // 2)
    rta = 3 * (cfg.f_h // 2)
    return max(main, rta)
