"""
Miniature text-conditioned video UNet with factorized attention.

Every UNet block runs a spatial transformer (self-attention over the h*w
positions of each frame, cross-attention to the text tokens, FFN) followed by
a temporal transformer (self-attention over the f frames of each spatial
position, FFN). Appearance injection, when supplied, is applied between the
two. Convolutions act frame by frame.

Both self-attentions see fixed sinusoidal positions: the spatial one the
row and column of each token, the temporal one the frame index plus the
row and column of the position it runs at.
"""
import math

import torch
import torch.nn.functional as F
from einops import rearrange, repeat
from torch import nn
from torch.func import functional_call

from apps.adapters.lora import AdaptableLinear, active_adapters
from apps.backbone.types import ConditionEmbedding, LatentVideo


def timestep_embedding(timesteps, dim):
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = timesteps.float()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


def frame_positions(frames, dim):
    return timestep_embedding(torch.arange(frames), dim)


def grid_positions(height, width, dim):
    """``[(h w), dim]`` positions; the first half of the channels encodes the row, the rest the column."""
    rows = timestep_embedding(torch.arange(height), dim // 2)
    columns = timestep_embedding(torch.arange(width), dim - dim // 2)
    return torch.cat([
        repeat(rows, 'h d -> (h w) d', w=width),
        repeat(columns, 'w d -> (h w) d', h=height),
    ], dim=-1)


def _per_frame(layer, x):
    batch = x.shape[0]
    out = layer(rearrange(x, 'b f h w c -> (b f) c h w'))
    return rearrange(out, '(b f) c h w -> b f h w c', b=batch)


class Attention(nn.Module):

    def __init__(self, query_dim, context_dim=None, heads=4):
        super().__init__()
        context_dim = context_dim or query_dim
        self.heads = heads
        self.to_q = AdaptableLinear(query_dim, query_dim, bias=False)
        self.to_k = AdaptableLinear(context_dim, query_dim, bias=False)
        self.to_v = AdaptableLinear(context_dim, query_dim, bias=False)
        self.to_out = AdaptableLinear(query_dim, query_dim)

    def forward(self, x, context=None):
        context = x if context is None else context
        q, k, v = (
            rearrange(p, 'n l (h d) -> n h l d', h=self.heads)
            for p in (self.to_q(x), self.to_k(context), self.to_v(context))
        )
        out = F.scaled_dot_product_attention(q, k, v)
        return self.to_out(rearrange(out, 'n h l d -> n l (h d)'))


class FeedForward(nn.Module):

    def __init__(self, dim, mult=4):
        super().__init__()
        self.proj_in = AdaptableLinear(dim, dim * mult)
        self.proj_out = AdaptableLinear(dim * mult, dim)

    def forward(self, x):
        return self.proj_out(F.gelu(self.proj_in(x)))


class SpatialTransformer(nn.Module):
    """Per-frame block over ``[(b f), (h w), c]`` tokens."""

    def __init__(self, channels, context_dim, heads):
        super().__init__()
        self.norm1 = nn.LayerNorm(channels)
        self.attn1 = Attention(channels, heads=heads)
        self.norm2 = nn.LayerNorm(channels)
        self.attn2 = Attention(channels, context_dim=context_dim, heads=heads)
        self.norm3 = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)

    def forward(self, x, context, positions=None):
        x = x + self.attn1(self.norm1(x if positions is None else x + positions))
        x = x + self.attn2(self.norm2(x), context)
        return x + self.ff(self.norm3(x))


class TemporalTransformer(nn.Module):
    """Per-position block over ``[(b h w), f, c]`` tokens; no text conditioning."""

    def __init__(self, channels, heads):
        super().__init__()
        self.channels = channels
        self.norm1 = nn.LayerNorm(channels)
        self.attn1 = Attention(channels, heads=heads)
        self.norm2 = nn.LayerNorm(channels)
        self.ff = FeedForward(channels)

    def forward(self, x, locations=None):
        positions = frame_positions(x.shape[1], self.channels).to(x.dtype)
        if locations is not None:
            positions = positions + locations
        x = x + self.attn1(self.norm1(x + positions))
        return x + self.ff(self.norm2(x))


class VideoBlock(nn.Module):

    def __init__(self, name, channels, context_dim, heads, time_dim):
        super().__init__()
        self.name = name
        self.channels = channels
        self.time_proj = nn.Linear(time_dim, channels)
        self.spatial = SpatialTransformer(channels, context_dim, heads)
        self.temporal = TemporalTransformer(channels, heads)

    def forward(self, x, temb, context, injection=None, skip_temporal=False):
        batch, frames, height, width, _ = x.shape
        x = x + self.time_proj(temb)[:, None, None, None, :]
        hidden = rearrange(x, 'b f h w c -> (b f) (h w) c')
        grid = grid_positions(height, width, self.channels).to(x.dtype)
        hidden = self.spatial(hidden, repeat(context, 'b n d -> (b f) n d', f=frames), grid)
        hidden = rearrange(hidden, '(b f) (h w) c -> (b h w) f c', b=batch, h=height)
        if injection is not None:
            hidden = injection(hidden, self.name, batch)
        # A single frame has nothing to attend to; the temporal path is bypassed.
        if frames > 1 and not skip_temporal:
            hidden = self.temporal(hidden, repeat(grid, 'l c -> (b l) 1 c', b=batch))
        return rearrange(hidden, '(b h w) f c -> b f h w c', b=batch, h=height, w=width)


class VideoUNet(nn.Module):
    """
    Attributes:
    - blocks (ModuleDict): ``down0 .. down{L-1}`` then ``up0 .. up{L-1}``.
    - adapter_sets (dict[str, AdapterSet]): adapter sets installed for training.
    """

    def __init__(self, latent_channels=4, model_width=64, channel_mult=(1, 2), heads=4, context_dim=32):
        super().__init__()
        self.model_width = model_width
        self.levels = len(channel_mult)
        widths = [model_width * mult for mult in channel_mult]
        time_dim = model_width * 4
        self.time_embed = nn.Sequential(
            nn.Linear(model_width, time_dim), nn.SiLU(), nn.Linear(time_dim, time_dim),
        )
        self.conv_in = nn.Conv2d(latent_channels, widths[0], 3, padding=1)
        self.blocks = nn.ModuleDict()
        self.downsamplers = nn.ModuleList()
        self.fusers = nn.ModuleDict()
        self.upsamplers = nn.ModuleList()
        for level, width in enumerate(widths):
            self.blocks[f'down{level}'] = VideoBlock(f'down{level}', width, context_dim, heads, time_dim)
            if level < self.levels - 1:
                self.downsamplers.append(nn.Conv2d(width, widths[level + 1], 3, stride=2, padding=1))
        up_widths = widths[::-1]
        for level, width in enumerate(up_widths):
            self.fusers[f'up{level}'] = nn.Linear(2 * width, width)
            self.blocks[f'up{level}'] = VideoBlock(f'up{level}', width, context_dim, heads, time_dim)
            if level < self.levels - 1:
                self.upsamplers.append(nn.Conv2d(width, up_widths[level + 1], 3, padding=1))
        self.norm_out = nn.GroupNorm(8, widths[0])
        self.conv_out = nn.Conv2d(widths[0], latent_channels, 3, padding=1)
        self.adapter_sets = {}

    def block_channels(self):
        """Channel width of every block that carries a temporal transformer."""
        return {name: block.channels for name, block in self.blocks.items()}

    def forward(self, latents, timesteps, context, injection=None, skip_temporal=False):
        temb = self.time_embed(timestep_embedding(timesteps, self.model_width))
        x = _per_frame(self.conv_in, latents)
        skips = []
        for level in range(self.levels):
            x = self.blocks[f'down{level}'](x, temb, context, injection, skip_temporal)
            skips.append(x)
            if level < self.levels - 1:
                x = _per_frame(self.downsamplers[level], x)
        for level in range(self.levels):
            x = self.fusers[f'up{level}'](torch.cat([x, skips.pop()], dim=-1))
            x = self.blocks[f'up{level}'](x, temb, context, injection, skip_temporal)
            if level < self.levels - 1:
                upsampled = _per_frame(lambda h: F.interpolate(h, scale_factor=2, mode='nearest'), x)
                x = _per_frame(self.upsamplers[level], upsampled)
        x = F.silu(_per_frame(self.norm_out, x))
        return _per_frame(self.conv_out, x)


def condition_batch(cond, batch):
    """Broadcast a condition to ``[b, N, d]``."""
    if isinstance(cond, ConditionEmbedding):
        cond = cond.token_embeddings
    if cond.ndim == 2:
        cond = cond.unsqueeze(0).expand(batch, -1, -1)
    return cond


def unet_forward(unet, z_t, t, cond, adapters=None, injection=None, weights=None, skip_temporal=False):
    """
    Predict the noise in ``z_t``.

    Parameters:
    - unet (VideoUNet): the frozen base model.
    - z_t (LatentVideo | Tensor): noised latents ``[b, f, h, w, c]``.
    - t (int | Tensor): timestep, or one per batch element.
    - cond (ConditionEmbedding | Tensor): ``[N, d]`` or ``[b, N, d]``.
    - adapters (Sequence[AdapterSet] | None): sets to run with; None means the
      installed sets, an empty sequence means the bare base model.
    - injection (callable | None): ``(hidden, block_name, batch) -> hidden``
      applied before each temporal transformer.
    - weights (dict | None): full state dict to call the model with instead of
      its own parameters (merged inference weights).

    Returns:
    - Tensor: noise prediction with ``z_t``'s shape.

    Raises:
    - PlacementError: an adapter targets a layer the model does not have.
    """
    latents = z_t.latents if isinstance(z_t, LatentVideo) else z_t
    batch = latents.shape[0]
    timesteps = torch.as_tensor(t).reshape(-1).expand(batch)
    context = condition_batch(cond, batch).to(latents.dtype)
    kwargs = {'injection': injection, 'skip_temporal': skip_temporal}
    if weights is not None:
        return functional_call(unet, weights, (latents, timesteps, context), kwargs)
    if adapters is None:
        return unet(latents, timesteps, context, **kwargs)
    with active_adapters(unet, adapters):
        return unet(latents, timesteps, context, **kwargs)
