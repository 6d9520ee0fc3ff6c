"""
Verb residual embeddings.

    pooled = mean over frames of the reference-video frame embeddings
    residual = W2 · GELU(W1 · [pooled, verb_row])
    verb_row = verb_row + residual

``W1`` starts as N(0, 0.02) and ``W2`` as zeros, so the enhanced condition
equals the plain one until training moves ``W2``.
"""
from dataclasses import dataclass, replace

import torch
import torch.nn.functional as F
from torch import nn

from apps.appearance.providers import FrameEmbedding
from apps.backbone.types import ConditionEmbedding
from apps.core.exceptions import (
    DimensionMismatchError,
    DoubleEnhancementError,
    EmptyInputError,
    MissingVerbIndexError,
    ShapeError,
)

W1_INIT_STD = 0.02


class EnhancerMlp(nn.Module):
    """Two bias-free linear layers around an exact GELU."""

    def __init__(self, image_dim, text_dim, hidden_dim=None, generator=None, dtype=torch.float32):
        super().__init__()
        self.image_dim = image_dim
        self.text_dim = text_dim
        hidden_dim = hidden_dim or text_dim
        self.fc1 = nn.Linear(image_dim + text_dim, hidden_dim, bias=False, dtype=dtype)
        self.fc2 = nn.Linear(hidden_dim, text_dim, bias=False, dtype=dtype)
        with torch.no_grad():
            self.fc1.weight.normal_(0.0, W1_INIT_STD, generator=generator)
            self.fc2.weight.zero_()

    def forward(self, pooled, base_embedding):
        if pooled.shape[-1] != self.image_dim or base_embedding.shape[-1] != self.text_dim:
            raise DimensionMismatchError(
                f"Enhancer takes ({self.image_dim}, {self.text_dim}) inputs, "
                f"got ({pooled.shape[-1]}, {base_embedding.shape[-1]})"
            )
        if pooled.ndim > base_embedding.ndim:
            base_embedding = base_embedding.expand(*pooled.shape[:-1], -1)
        elif base_embedding.ndim > pooled.ndim:
            pooled = pooled.expand(*base_embedding.shape[:-1], -1)
        hidden = torch.cat([pooled, base_embedding], dim=-1)
        return self.fc2(F.gelu(self.fc1(hidden)))


@dataclass
class ResidualEmbedding:
    """
    Attributes:
    - vector (Tensor): the residual, ``[d_text]``.
    - source_motion_id (str): motion the residual was learned from.
    """
    vector: torch.Tensor
    source_motion_id: str = ''

    def __post_init__(self):
        if self.vector.ndim != 1:
            raise ShapeError(f"Residual embedding must be 1-d, got {tuple(self.vector.shape)}")
        if not bool(torch.isfinite(self.vector).all()):
            raise ShapeError("Residual embedding has non-finite entries")

    def zeros_like(self):
        return replace(self, vector=torch.zeros_like(self.vector))


def pool_video_embedding(frame_embeddings):
    """
    Mean over the frame axis.

    Parameters:
    - frame_embeddings (Sequence[FrameEmbedding] | Tensor): embeddings, or a
      ``[..., f, d_img]`` tensor.

    Raises:
    - EmptyInputError: no embeddings.
    - DimensionMismatchError: embeddings of different widths.
    """
    if isinstance(frame_embeddings, torch.Tensor):
        if frame_embeddings.ndim < 2 or frame_embeddings.shape[-2] == 0:
            raise EmptyInputError("No frame embeddings to pool")
        return frame_embeddings.mean(dim=-2)
    vectors = [
        (item.vector if isinstance(item, FrameEmbedding) else item).reshape(-1)
        for item in frame_embeddings
    ]
    if not vectors:
        raise EmptyInputError("No frame embeddings to pool")
    if len({vector.shape[0] for vector in vectors}) > 1:
        raise DimensionMismatchError("Frame embeddings have different widths")
    return torch.stack(vectors).mean(dim=0)


def compute_residual(pooled, base_embedding, mlp, source_motion_id=''):
    """``W2 · GELU(W1 · [pooled, base_embedding])`` for one pooled vector."""
    return ResidualEmbedding(mlp(pooled, base_embedding), source_motion_id)


def enhance_tokens(token_embeddings, verb_index, residual):
    """
    Add ``residual`` to the verb row of ``token_embeddings``.

    Parameters:
    - token_embeddings (Tensor): ``[N, d]`` or ``[b, N, d]``.
    - verb_index (int | Tensor): one row, or one row per batch element.
    - residual (Tensor): ``[d]`` or ``[b, d]``.
    """
    rows = token_embeddings.shape[-2]
    mask = F.one_hot(torch.as_tensor(verb_index), rows).unsqueeze(-1).to(token_embeddings.dtype)
    return token_embeddings + mask * residual.unsqueeze(-2).to(token_embeddings.dtype)


def enhance_condition(cond, residual):
    """
    Add the residual to the verb row.

    Raises:
    - MissingVerbIndexError: ``cond`` has no verb index.
    - DoubleEnhancementError: ``cond`` is already enhanced.
    """
    if cond.enhanced:
        raise DoubleEnhancementError("Condition already carries a residual embedding")
    if cond.verb_index is None:
        raise MissingVerbIndexError("Cannot enhance a condition without a verb index")
    vector = residual.vector if isinstance(residual, ResidualEmbedding) else residual
    if vector.shape[-1] != cond.token_embeddings.shape[-1]:
        raise DimensionMismatchError(
            f"Residual width {vector.shape[-1]} vs text width {cond.token_embeddings.shape[-1]}"
        )
    embeddings = enhance_tokens(cond.token_embeddings, cond.verb_index, vector)
    return ConditionEmbedding(embeddings, tokens=list(cond.tokens), verb_index=cond.verb_index, enhanced=True)


def reg_loss(residual):
    """Squared L2 norm of the residual; batched residuals ``[b, d]`` average over the batch."""
    vector = residual.vector if isinstance(residual, ResidualEmbedding) else residual
    if vector.ndim == 1:
        return vector.pow(2).sum()
    return vector.pow(2).sum(dim=-1).mean()
