"""
Conditional U-Net denoiser eps_theta(x, y_t, t).

The source image x is channel-concatenated with the noisy target y_t at the
input. Self-attention runs at every downsample factor listed in
UNetConfig.attention_levels; the middle block sits at factor 2**levels.
"""
import logging
import math
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import torch
from pydantic import ValidationError
from torch import nn

from app.core.errors import ConfigError, ShapeError
from app.diffusion.rng import Rng
from app.schemas.configs import UNetConfig
from app.tensor import ops

logger = logging.getLogger(__name__)

Tensor = torch.Tensor


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

class Conv(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, zero_init: bool = False):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_ch, in_ch, kernel, kernel))
        self.bias = nn.Parameter(torch.empty(out_ch))
        self.padding = kernel // 2
        self.zero_init = zero_init

    def forward(self, x: Tensor) -> Tensor:
        return ops.conv2d(x, self.weight, self.bias, stride=1, padding=self.padding)


class Linear(nn.Module):
    def __init__(self, in_features: int, out_features: int):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(out_features, in_features))
        self.bias = nn.Parameter(torch.empty(out_features))

    def forward(self, x: Tensor) -> Tensor:
        return ops.elementwise("add", ops.matmul(x, self.weight.t()), self.bias)


class GroupNorm(nn.Module):
    def __init__(self, groups: int, channels: int, eps: float = 1e-5):
        super().__init__()
        self.groups = groups
        self.eps = eps
        self.scale = nn.Parameter(torch.empty(channels))
        self.shift = nn.Parameter(torch.empty(channels))

    def forward(self, x: Tensor) -> Tensor:
        return ops.group_norm(x, self.groups, self.eps, self.scale, self.shift)


def timestep_embedding(t: Union[int, Tensor], dim: int, T: Optional[int] = None) -> Tensor:
    """
    Sinusoidal embedding with log-spaced frequencies: [sin(t*f), cos(t*f)].

    Args:
        t: one timestep or a 1-D tensor of timesteps
        dim: embedding width (even)
        T: schedule length; when given, t must lie in [0, T]

    Returns:
        Tensor[dim] for an int t, Tensor[N, dim] for a tensor
    """
    if dim % 2:
        raise ShapeError(f"timestep embedding dim must be even, got {dim}")
    scalar = not isinstance(t, Tensor) or t.ndim == 0
    steps = torch.as_tensor(t, dtype=torch.float64).reshape(-1)
    if T is not None and (float(steps.min()) < 0 or float(steps.max()) > T):
        raise ShapeError(f"timestep outside [0, {T}]")
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = steps[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1).to(torch.float32)
    return emb[0] if scalar else emb


class ResBlock(nn.Module):
    """GroupNorm-SiLU-conv twice, time embedding injected as scale-shift."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = GroupNorm(groups, in_ch)
        self.conv1 = Conv(in_ch, out_ch)
        self.emb_proj = Linear(emb_dim, 2 * out_ch)
        self.norm2 = GroupNorm(groups, out_ch)
        self.conv2 = Conv(out_ch, out_ch)
        self.skip = Conv(in_ch, out_ch, kernel=1) if in_ch != out_ch else None

    def forward(self, h: Tensor, emb: Tensor) -> Tensor:
        a = self.conv1(ops.elementwise("silu", self.norm1(h)))
        scale, shift = self.emb_proj(ops.elementwise("silu", emb)).chunk(2, dim=1)
        a = self.norm2(a) * (1 + scale[:, :, None, None]) + shift[:, :, None, None]
        a = self.conv2(ops.elementwise("silu", a))
        residual = h if self.skip is None else self.skip(h)
        return ops.elementwise("add", residual, a)


# ---------------------------------------------------------------------------
# Attention
# ---------------------------------------------------------------------------

@dataclass
class AttentionWeights:
    qkv_weight: Tensor              # [3C, C]
    qkv_bias: Tensor                # [3C]
    proj_weight: Tensor             # [C, C]
    proj_bias: Tensor               # [C]
    norm_scale: Optional[Tensor] = None
    norm_shift: Optional[Tensor] = None


def attention_probabilities(x: Tensor, heads: int, weights: AttentionWeights) -> Tensor:
    """Softmax attention maps [N, heads, HW, HW] of the (already normalized) tokens."""
    q, k, _ = _project_qkv(x, heads, weights)
    scale = 1.0 / math.sqrt(q.shape[-1])
    return ops.softmax(ops.matmul(q, k.transpose(-1, -2)) * scale, axis=-1)


def _project_qkv(h: Tensor, heads: int, weights: AttentionWeights) -> Tuple[Tensor, Tensor, Tensor]:
    n, c, hh, ww = h.shape
    tokens = h.reshape(n, c, hh * ww).transpose(1, 2)                      # [N, L, C]
    qkv = ops.elementwise("add", ops.matmul(tokens, weights.qkv_weight.t()), weights.qkv_bias)
    qkv = qkv.reshape(n, hh * ww, 3, heads, c // heads).permute(2, 0, 3, 1, 4)
    return qkv[0], qkv[1], qkv[2]                                           # [N, heads, L, d]


def self_attention_block(
    x: Tensor,
    heads: int,
    weights: AttentionWeights,
    groups: Optional[int] = None,
) -> Tensor:
    """
    Multi-head self-attention over spatial tokens with a residual connection.

    Args:
        x: [N, C, H, W] feature map
        heads: number of heads (divides C)
        weights: projection weights; norm affine used when groups is given
        groups: GroupNorm groups applied to x before projecting (None = no norm)

    Returns:
        x + proj(attention(x)), shape [N, C, H, W]
    """
    n, c, hh, ww = x.shape
    if heads < 1 or c % heads:
        raise ShapeError(f"{c} channels not divisible by {heads} heads")
    h = x
    if groups is not None:
        h = ops.group_norm(x, groups, 1e-5, weights.norm_scale, weights.norm_shift)
    q, k, v = _project_qkv(h, heads, weights)
    scale = 1.0 / math.sqrt(c // heads)
    attn = ops.softmax(ops.matmul(q, k.transpose(-1, -2)) * scale, axis=-1)
    out = ops.matmul(attn, v)                                               # [N, heads, L, d]
    out = out.permute(0, 2, 1, 3).reshape(n, hh * ww, c)
    out = ops.elementwise("add", ops.matmul(out, weights.proj_weight.t()), weights.proj_bias)
    out = out.transpose(1, 2).reshape(n, c, hh, ww)
    return ops.elementwise("add", x, out)


class AttentionBlock(nn.Module):
    def __init__(self, channels: int, heads: int, groups: int, factor: int, max_tokens: int):
        super().__init__()
        self.heads = heads
        self.groups = groups
        self.factor = factor
        self.max_tokens = max_tokens
        self.norm_scale = nn.Parameter(torch.empty(channels))
        self.norm_shift = nn.Parameter(torch.empty(channels))
        self.qkv_weight = nn.Parameter(torch.empty(3 * channels, channels))
        self.qkv_bias = nn.Parameter(torch.empty(3 * channels))
        self.proj_weight = nn.Parameter(torch.empty(channels, channels))
        self.proj_bias = nn.Parameter(torch.empty(channels))

    def weights(self) -> AttentionWeights:
        return AttentionWeights(
            self.qkv_weight, self.qkv_bias, self.proj_weight, self.proj_bias,
            self.norm_scale, self.norm_shift,
        )

    def forward(self, x: Tensor) -> Tensor:
        tokens = x.shape[2] * x.shape[3]
        if tokens > self.max_tokens:
            raise ConfigError(
                f"attention at factor {self.factor} sees {tokens} tokens > max_attention_tokens {self.max_tokens}"
            )
        return self_attention_block(x, self.heads, self.weights(), self.groups)


# ---------------------------------------------------------------------------
# U-Net
# ---------------------------------------------------------------------------

class UNet(nn.Module):
    """Weights are allocated uninitialized; use build_unet to get a usable model."""

    def __init__(self, config: UNetConfig):
        super().__init__()
        self.config = config
        cfg = config
        groups, heads = cfg.groupnorm_groups, cfg.heads
        emb_dim = cfg.time_embed_dim
        attn = set(cfg.attention_levels)

        def stage(in_ch: int, out_ch: int, factor: int) -> nn.ModuleDict:
            block = nn.ModuleDict({"res": ResBlock(in_ch, out_ch, emb_dim, groups)})
            if factor in attn:
                block["attn"] = AttentionBlock(out_ch, heads, groups, factor, cfg.max_attention_tokens)
            return block

        self.time_mlp = nn.ModuleDict({
            "lin1": Linear(cfg.base_channels, emb_dim),
            "lin2": Linear(emb_dim, emb_dim),
        })
        self.conv_in = Conv(cfg.in_channels_source + cfg.in_channels_target, cfg.base_channels)

        chans = cfg.level_channels
        self.down = nn.ModuleList()
        cur = cfg.base_channels
        for i, ch in enumerate(chans):
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks_per_level):
                blocks.append(stage(cur, ch, 2 ** i))
                cur = ch
            self.down.append(blocks)

        deepest = 2 ** cfg.levels
        self.middle = nn.ModuleDict({"res1": ResBlock(cur, cur, emb_dim, groups)})
        if deepest in attn:
            self.middle["attn"] = AttentionBlock(cur, heads, groups, deepest, cfg.max_attention_tokens)
        self.middle["res2"] = ResBlock(cur, cur, emb_dim, groups)

        # up[i] runs at factor 2**i; built deepest first so widths chain
        ups: Dict[int, nn.ModuleDict] = {}
        for i in reversed(range(cfg.levels)):
            ch = chans[i]
            upsample = Conv(cur, cur)
            blocks = nn.ModuleList()
            for _ in range(cfg.res_blocks_per_level):
                blocks.append(stage(cur + ch, ch, 2 ** i))
                cur = ch
            ups[i] = nn.ModuleDict({"upsample": upsample, "blocks": blocks})
        self.up = nn.ModuleList([ups[i] for i in range(cfg.levels)])

        self.out_norm = GroupNorm(groups, cur)
        self.out_conv = Conv(cur, cfg.in_channels_target, zero_init=True)

    def attention_factors(self) -> List[int]:
        """Downsample factor of every attention block, in execution order."""
        factors = [m.factor for m in self.down.modules() if isinstance(m, AttentionBlock)]
        factors += [m.factor for m in self.middle.modules() if isinstance(m, AttentionBlock)]
        for i in reversed(range(self.config.levels)):
            factors += [m.factor for m in self.up[i].modules() if isinstance(m, AttentionBlock)]
        return factors

    def _check_inputs(self, x: Tensor, y_t: Tensor) -> None:
        cfg = self.config
        if x.ndim != 4 or y_t.ndim != 4:
            raise ShapeError(f"expected NCHW inputs, got {tuple(x.shape)} and {tuple(y_t.shape)}")
        if x.shape[1] != cfg.in_channels_source or y_t.shape[1] != cfg.in_channels_target:
            raise ShapeError(
                f"channels {x.shape[1]}+{y_t.shape[1]} do not match config "
                f"{cfg.in_channels_source}+{cfg.in_channels_target}"
            )
        if x.shape[0] != y_t.shape[0] or x.shape[2:] != y_t.shape[2:]:
            raise ShapeError(f"source {tuple(x.shape)} and target {tuple(y_t.shape)} are misaligned")
        deepest = 2 ** cfg.levels
        if x.shape[2] % deepest or x.shape[3] % deepest:
            raise ShapeError(f"spatial extents {tuple(x.shape[2:])} not divisible by {deepest}")

    def forward(self, x: Tensor, y_t: Tensor, t: Union[int, Tensor]) -> Tensor:
        self._check_inputs(x, y_t)
        if not isinstance(t, Tensor) or t.ndim == 0:
            t = torch.full((x.shape[0],), int(t), dtype=torch.long)

        emb = timestep_embedding(t, self.config.base_channels).to(x.dtype)
        emb = self.time_mlp["lin2"](ops.elementwise("silu", self.time_mlp["lin1"](emb)))

        h = self.conv_in(torch.cat([x, y_t], dim=1))
        skips = []
        for blocks in self.down:
            for block in blocks:
                h = block["res"](h, emb)
                if "attn" in block:
                    h = block["attn"](h)
                skips.append(h)
            h = ops.resample(h, "down")

        h = self.middle["res1"](h, emb)
        if "attn" in self.middle:
            h = self.middle["attn"](h)
        h = self.middle["res2"](h, emb)

        for i in reversed(range(self.config.levels)):
            level = self.up[i]
            h = level["upsample"](ops.resample(h, "up"))
            for block in level["blocks"]:
                h = block["res"](torch.cat([h, skips.pop()], dim=1), emb)
                if "attn" in block:
                    h = block["attn"](h)

        h = ops.elementwise("silu", self.out_norm(h))
        return self.out_conv(h)


def forward(model: UNet, x: Tensor, y_t: Tensor, t: Union[int, Tensor]) -> Tensor:
    """eps_hat = model(x, y_t, t)."""
    return model(x, y_t, t)


# ---------------------------------------------------------------------------
# Construction
# ---------------------------------------------------------------------------

def _validated(cfg: UNetConfig) -> UNetConfig:
    try:
        return UNetConfig.model_validate(cfg.model_dump())
    except ValidationError as e:
        raise ConfigError(f"invalid UNetConfig: {e}") from e


def _fan_in(p: Tensor) -> int:
    return int(p[0].numel()) if p.ndim > 1 else int(p.numel())


@torch.no_grad()
def init_weights(model: UNet, rng: Rng) -> UNet:
    """
    Kaiming-uniform (a = sqrt(5)) for convs and projections, zero biases,
    unit norm scales, zero output conv. Each tensor draws from rng.split(name).
    """
    zero_prefixes = tuple(
        f"{name}." for name, m in model.named_modules() if isinstance(m, Conv) and m.zero_init
    )
    for name, p in model.named_parameters():
        if name.startswith(zero_prefixes):
            p.zero_()
        elif name.endswith("scale"):
            p.fill_(1.0)
        elif name.endswith(("shift", "bias")):
            p.zero_()
        else:
            bound = 1.0 / math.sqrt(_fan_in(p))
            values = rng.split(name).uniform(-bound, bound, tuple(p.shape))
            p.copy_(torch.from_numpy(values).to(p.dtype))
    return model


def build_unet(cfg: UNetConfig, rng: Rng) -> UNet:
    """Instantiate and initialize a U-Net; same (cfg, seed) gives identical weights."""
    cfg = _validated(cfg)
    model = init_weights(UNet(cfg), rng)
    logger.info(
        f"Built U-Net: {parameter_count(cfg):,} parameters, attention at factors {model.attention_factors()}"
    )
    return model


def weight_shape_table(cfg: UNetConfig) -> Dict[str, Tuple[int, ...]]:
    """Named weight shapes derived from the config alone (no allocation)."""
    cfg = _validated(cfg)
    with torch.device("meta"):
        model = UNet(cfg)
    return {name: tuple(p.shape) for name, p in model.named_parameters()}


def parameter_count(cfg: UNetConfig) -> int:
    return sum(math.prod(shape) for shape in weight_shape_table(cfg).values())


def preset(model_variant: str, image_size: int = 64, **overrides) -> UNetConfig:
    """
    Desk-scale presets that differ only in attention placement.

    Model I attends at factors {4, 8, 16}; Model II adds factor 2.
    """
    if image_size % 16:
        raise ConfigError(f"image_size {image_size} must be divisible by 16")
    levels = {"I": [4, 8, 16], "II": [2, 4, 8, 16]}.get(str(model_variant).upper())
    if levels is None:
        raise ConfigError(f"Unknown model variant: {model_variant}")
    try:
        return UNetConfig(image_size=image_size, attention_levels=levels, **overrides)
    except ValidationError as e:
        raise ConfigError(f"invalid preset overrides: {e}") from e
