"""
Appearance injection before the temporal transformers.

Each UNet block has its own projection from the frame embedding to the
block's channel width. The projected vector is added to every spatial
position and every frame of the temporal-layout hidden states. The added
term is constant over the frame axis, so it carries appearance and no
motion.
"""
from dataclasses import replace

import torch
from einops import repeat
from torch import nn

from apps.appearance.providers import FrameEmbedding
from apps.backbone.types import HiddenStates
from apps.core.exceptions import MissingInjectorBlockError, ShapeError


class InjectorWeights(nn.Module):
    """One zero-initialized ``d_img -> c_l`` map per UNet block."""

    def __init__(self, block_channels, image_dim):
        super().__init__()
        self.image_dim = image_dim
        self.maps = nn.ModuleDict()
        for name, channels in block_channels.items():
            projection = nn.Linear(image_dim, channels, bias=False)
            nn.init.zeros_(projection.weight)
            self.maps[name] = projection

    @classmethod
    def for_unet(cls, unet, image_dim):
        return cls(unet.block_channels(), image_dim)


def inject_appearance(h_s, emb, weights, block, batch=None):
    """
    Add the projected frame embedding to every position and frame of ``h_s``.

    Parameters:
    - h_s (HiddenStates | Tensor): temporal layout ``[(b h w), f, c]``.
    - emb (FrameEmbedding | Tensor): ``[1, d_img]`` or ``[b, d_img]``.
    - weights (InjectorWeights): per-block maps.
    - block (str): UNet block name.
    - batch (int | None): b; defaults to the embedding's batch size.

    Raises:
    - MissingInjectorBlockError: no map for ``block``.
    - ShapeError: hidden states are not in temporal layout.
    """
    if block not in weights.maps:
        raise MissingInjectorBlockError(f"No injector map for block {block!r}")
    values = h_s.values if isinstance(h_s, HiddenStates) else h_s
    if isinstance(h_s, HiddenStates) and h_s.layout != 'temporal':
        raise ShapeError("Appearance is injected into temporal-layout hidden states")
    vector = emb.vector if isinstance(emb, FrameEmbedding) else emb
    projected = weights.maps[block](vector.to(values.dtype))
    batch = batch or projected.shape[0]
    if projected.shape[0] == 1 and batch > 1:
        projected = projected.expand(batch, -1)
    positions = values.shape[0] // batch
    injected = values + repeat(projected, 'b c -> (b n) 1 c', n=positions)
    if isinstance(h_s, HiddenStates):
        return replace(h_s, values=injected)
    return injected


class AppearanceInjection:
    """Callable handed to the UNet: injects ``embeddings`` at every block."""

    def __init__(self, embeddings, weights):
        self.embeddings = embeddings
        self.weights = weights

    def __call__(self, hidden, block, batch):
        return inject_appearance(hidden, self.embeddings, self.weights, block, batch)


def random_frame_embeddings(frame_embeddings, generator):
    """
    Pick one frame per batch element, uniformly.

    Parameters:
    - frame_embeddings (Tensor): ``[b, f, d_img]``.

    Returns:
    - Tensor: ``[b, d_img]``.
    """
    batch, frames, _ = frame_embeddings.shape
    picks = torch.randint(frames, (batch,), generator=generator)
    return frame_embeddings[torch.arange(batch), picks]
