"""
Video metrics.

- clip_t: mean cosine between each frame and the prompt.
- clip_e: the same against the entity-only prompt.
- temp_cons: mean cosine between consecutive frames.
- motion_fidelity: mean cosine between a reference clip and each generated
  clip under a video embedder, averaged per motion and then over motions.

All cosines are computed in float64.
"""
import torch
import torch.nn.functional as F

from apps.appearance.providers import PALETTE_NAMES, embed_frames, palette_histogram
from apps.appearance.recaptioner import PromptSpec
from apps.core.exceptions import EmptyInputError, InvalidInputError, ProviderMismatchError, ShapeError
from apps.data.prompts import entity_prompt


def cosine(a, b):
    return float(F.cosine_similarity(a.double().reshape(1, -1), b.double().reshape(1, -1)))


def mean_cosine(vectors, target):
    """Mean cosine between every row of ``vectors`` ``[n, d]`` and ``target`` ``[d]``."""
    if vectors.shape[-1] != target.shape[-1]:
        raise ProviderMismatchError(
            f"Embedding widths differ: {vectors.shape[-1]} vs {target.shape[-1]}"
        )
    scores = F.cosine_similarity(vectors.double(), target.double().reshape(1, -1), dim=-1)
    return float(scores.mean())


def _text_provider(provider, text_provider):
    text_provider = text_provider or provider
    if text_provider.space != provider.space:
        raise ProviderMismatchError(
            f"{provider.name} embeds into {provider.space!r} but {text_provider.name} "
            f"embeds into {text_provider.space!r}"
        )
    return text_provider


def clip_t(clip, prompt, provider, text_provider=None):
    """
    Raises:
    - ProviderMismatchError: image and text embeddings live in different spaces.
    """
    text_provider = _text_provider(provider, text_provider)
    prompt = prompt.base_prompt if isinstance(prompt, PromptSpec) else prompt
    return mean_cosine(embed_frames(clip, provider), text_provider.embed_text(prompt))


def clip_e(clip, entity, provider, text_provider=None):
    """``clip_t`` against the entity-only prompt; a ``PromptSpec`` is reduced with ``entity_prompt``."""
    if isinstance(entity, PromptSpec):
        entity = entity_prompt(entity)
    return clip_t(clip, entity, provider, text_provider)


def consecutive_cosine(vectors):
    if vectors.shape[0] < 2:
        raise ShapeError("Temporal consistency needs at least two frames")
    return float(F.cosine_similarity(vectors[:-1].double(), vectors[1:].double(), dim=-1).mean())


def temp_cons(clip, provider):
    """
    Raises:
    - ShapeError: fewer than two frames.
    """
    frames = getattr(clip, 'frames', clip)
    if frames.shape[0] < 2:
        raise ShapeError("Temporal consistency needs at least two frames")
    return consecutive_cosine(embed_frames(frames, provider))


def motion_fidelity(generated, references, embedder):
    """
    Parameters:
    - generated (dict[str, list[VideoClip]]): generated clips per motion.
    - references (dict[str, VideoClip]): the chosen reference clip per motion.
    - embedder: object with ``embed(clip) -> Tensor [d]``.

    Raises:
    - EmptyInputError: a motion has no generated clips or no reference.
    """
    if not generated:
        raise EmptyInputError("No generated clips to score")
    per_motion = []
    for motion_id, clips in generated.items():
        if not clips:
            raise EmptyInputError(f"No generated clips for motion {motion_id!r}")
        if motion_id not in references:
            raise EmptyInputError(f"No reference clip for motion {motion_id!r}")
        anchor = embedder.embed(references[motion_id])
        scores = [cosine(anchor, embedder.embed(clip)) for clip in clips]
        per_motion.append(sum(scores) / len(scores))
    return sum(per_motion) / len(per_motion)


def color_histogram(clip):
    """Palette histogram per frame, ``[f, K]``."""
    return palette_histogram(getattr(clip, 'frames', clip))


def _palette_vector(color):
    if color not in PALETTE_NAMES:
        raise InvalidInputError(f"Unknown palette colour {color!r}; choose from {list(PALETTE_NAMES)}")
    return F.one_hot(torch.tensor(PALETTE_NAMES.index(color)), len(PALETTE_NAMES)).float()


def closer_color_fraction(clip, target, source):
    """Fraction of frames whose histogram is strictly closer (L1) to ``target`` than to ``source``."""
    histograms = color_histogram(clip)
    to_target = (histograms - _palette_vector(target)).abs().sum(dim=-1)
    to_source = (histograms - _palette_vector(source)).abs().sum(dim=-1)
    return float((to_target < to_source).float().mean())
