"""
Image/text embedding providers.

A provider maps frames and prompts into one shared embedding space. The
``toy`` provider is hermetic: an image embeds as its palette-colour histogram
and a prompt as the palette colour words it mentions. The ``clip`` provider
wraps a CLIP checkpoint through ``transformers`` and is loaded lazily.
"""
import logging
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from django.conf import settings

from apps.backbone.text import tokenize
from apps.core.exceptions import ProviderError

logger = logging.getLogger(__name__)

PALETTE = {
    'black': (0.0, 0.0, 0.0),
    'white': (1.0, 1.0, 1.0),
    'gray': (0.5, 0.5, 0.5),
    'red': (1.0, 0.0, 0.0),
    'green': (0.0, 1.0, 0.0),
    'blue': (0.0, 0.0, 1.0),
    'yellow': (1.0, 1.0, 0.0),
    'cyan': (0.0, 1.0, 1.0),
    'magenta': (1.0, 0.0, 1.0),
    'orange': (1.0, 0.5, 0.0),
}
PALETTE_NAMES = tuple(PALETTE)
_PALETTE_RGB = torch.tensor([PALETTE[name] for name in PALETTE_NAMES])


def palette_indices(frames):
    """Nearest palette colour per pixel; ``frames`` is ``[..., 3]``."""
    distances = torch.cdist(frames.reshape(-1, 3).float(), _PALETTE_RGB)
    return distances.argmin(dim=-1).reshape(frames.shape[:-1])


def palette_histogram(frames):
    """Per-frame palette histogram ``[f, K]`` summing to 1."""
    indices = palette_indices(frames).reshape(frames.shape[0], -1)
    counts = F.one_hot(indices, len(PALETTE_NAMES)).sum(dim=1).float()
    return counts / indices.shape[1]


@dataclass
class FrameEmbedding:
    """
    Attributes:
    - vector (Tensor): ``[1, d_img]``, unit norm.
    - source_frame_index (int): frame the embedding came from.
    """
    vector: torch.Tensor
    source_frame_index: int = 0


class EmbeddingProvider:
    """Base class; ``space`` names the shared embedding space."""
    name = 'base'
    space = None

    @property
    def image_dimension(self):
        raise NotImplementedError

    @property
    def text_dimension(self):
        return self.image_dimension

    def embed_images(self, frames):
        """Raw image embeddings ``[n, d]`` for frames ``[n, H, W, 3]``."""
        raise NotImplementedError

    def embed_text(self, text):
        """Raw text embedding ``[d]``."""
        raise NotImplementedError


class ToyColorProvider(EmbeddingProvider):
    name = 'toy'
    space = 'palette'

    @property
    def image_dimension(self):
        return len(PALETTE_NAMES)

    def embed_images(self, frames):
        return palette_histogram(frames)

    def embed_text(self, text):
        words = tokenize(text)
        vector = torch.tensor([float(words.count(name)) for name in PALETTE_NAMES])
        if vector.sum() == 0:
            vector = torch.ones(len(PALETTE_NAMES))
        return vector


class ClipProvider(EmbeddingProvider):
    name = 'clip'
    space = 'clip'

    def __init__(self, model_name=None):
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise ProviderError("The clip provider needs the 'transformers' package") from exc
        model_name = model_name or settings.MOTION_TRANSFER['PROVIDERS']['CLIP_MODEL']
        try:
            self.model = CLIPModel.from_pretrained(model_name).eval()
            self.processor = CLIPProcessor.from_pretrained(model_name)
        except OSError as exc:
            raise ProviderError(f"Could not load CLIP model {model_name!r}: {exc}") from exc
        logger.info("Loaded CLIP provider %s (dim %d)", model_name, self.image_dimension)

    @property
    def image_dimension(self):
        return self.model.config.projection_dim

    @torch.no_grad()
    def embed_images(self, frames):
        images = [(frame.clamp(0, 1) * 255).round().byte().numpy() for frame in frames]
        inputs = self.processor(images=images, return_tensors='pt')
        return self.model.get_image_features(**inputs).float()

    @torch.no_grad()
    def embed_text(self, text):
        inputs = self.processor(text=[text], return_tensors='pt', padding=True, truncation=True)
        return self.model.get_text_features(**inputs)[0].float()


PROVIDERS = {
    'toy': ToyColorProvider,
    'clip': ClipProvider,
}


def get_provider(name=None):
    name = name or settings.MOTION_TRANSFER['PROVIDERS']['IMAGE']
    try:
        provider_class = PROVIDERS[name]
    except KeyError:
        raise ProviderError(f"Unknown embedding provider {name!r}; choose from {sorted(PROVIDERS)}")
    return provider_class()


def embed_frames(frames, provider):
    """
    Unit-norm embeddings ``[f, d_img]`` for every frame of a clip.

    Raises:
    - ProviderError: the provider failed or returned a zero vector.
    """
    frames = getattr(frames, 'frames', frames)
    try:
        vectors = provider.embed_images(frames)
    except ProviderError:
        raise
    except Exception as exc:
        raise ProviderError(f"{provider.name} provider failed: {exc}") from exc
    norms = vectors.norm(dim=-1, keepdim=True)
    if bool((norms == 0).any()):
        raise ProviderError(f"{provider.name} provider returned a zero embedding")
    return vectors / norms


def embed_frame(frame, provider, index=0):
    """Embed one ``[H, W, 3]`` frame into a unit-norm ``FrameEmbedding``."""
    return FrameEmbedding(embed_frames(frame.unsqueeze(0), provider), source_frame_index=index)
