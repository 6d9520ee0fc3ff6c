"""
Tensors that move between the pipeline stages.

Layouts:
- VideoClip.frames is ``[f, H, W, 3]`` in [0, 1].
- LatentVideo.latents is ``[b, f, h, w, c]``.
- Spatial hidden states are ``[(b f), (h w), c]``; temporal hidden states are
  ``[(b h w), f, c]``.
"""
from dataclasses import dataclass, field, replace
from typing import Optional

import torch
from einops import rearrange

from apps.core.exceptions import MissingVerbIndexError, ShapeError


@dataclass
class VideoClip:
    """
    Pixel frames of one video.

    Attributes:
    - frames (Tensor): ``[f, H, W, 3]`` float values in [0, 1].
    - fps (float): frames per second.
    """
    frames: torch.Tensor
    fps: float = 8.0

    def __post_init__(self):
        if self.frames.ndim != 4 or self.frames.shape[-1] != 3:
            raise ShapeError(f"VideoClip frames must be [f, H, W, 3], got {tuple(self.frames.shape)}")
        if self.frames.shape[0] < 1:
            raise ShapeError("VideoClip needs at least one frame")
        if self.frames.numel() and (self.frames.min() < 0 or self.frames.max() > 1):
            raise ShapeError("VideoClip pixel values must lie in [0, 1]")

    @property
    def frame_count(self):
        return self.frames.shape[0]

    @property
    def height(self):
        return self.frames.shape[1]

    @property
    def width(self):
        return self.frames.shape[2]

    def reversed(self):
        return VideoClip(torch.flip(self.frames, dims=[0]), fps=self.fps)


@dataclass
class LatentVideo:
    """
    Latent-space video. ``timestep`` is None for clean latents (z0).
    """
    latents: torch.Tensor
    timestep: Optional[int] = None

    def __post_init__(self):
        if self.latents.ndim != 5:
            raise ShapeError(f"LatentVideo latents must be [b, f, h, w, c], got {tuple(self.latents.shape)}")

    @property
    def is_clean(self):
        return self.timestep is None


@dataclass
class ConditionEmbedding:
    """
    Per-token text embeddings for one prompt.

    Attributes:
    - token_embeddings (Tensor): ``[N_tokens, d_text]`` (padded to the encoder's max length).
    - tokens (list[str]): the prompt's word tokens; padding rows have no token.
    - verb_index (int | None): row of the motion verb.
    - enhanced (bool): True once the verb row carries a residual.
    """
    token_embeddings: torch.Tensor
    tokens: list = field(default_factory=list)
    verb_index: Optional[int] = None
    enhanced: bool = False

    def __post_init__(self):
        n_tokens = self.token_embeddings.shape[0]
        if self.verb_index is not None and not 0 <= self.verb_index < n_tokens:
            raise ShapeError(f"verb_index {self.verb_index} outside [0, {n_tokens})")
        if self.enhanced and self.verb_index is None:
            raise MissingVerbIndexError("An enhanced condition must carry a verb index")

    @property
    def verb_embedding(self):
        if self.verb_index is None:
            raise MissingVerbIndexError("Condition has no verb index")
        return self.token_embeddings[self.verb_index]

    def with_verb(self, verb_index):
        return replace(self, verb_index=verb_index)


@dataclass
class HiddenStates:
    """
    Hidden states of one UNet block plus the dims needed to switch layouts.
    """
    values: torch.Tensor
    layout: str
    batch: int
    frames: int
    height: int
    width: int
    block: Optional[str] = None

    def to_temporal(self):
        if self.layout == 'temporal':
            return self
        values = rearrange(self.values, '(b f) (h w) c -> (b h w) f c', b=self.batch, h=self.height)
        return replace(self, values=values, layout='temporal')

    def to_spatial(self):
        if self.layout == 'spatial':
            return self
        values = rearrange(self.values, '(b h w) f c -> (b f) (h w) c', b=self.batch, h=self.height)
        return replace(self, values=values, layout='spatial')
