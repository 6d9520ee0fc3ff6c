"""
Video embedders for motion fidelity.

``trajectory`` follows the foreground centroid through the clip and describes
its motion with direction histograms, a stillness count and turning totals,
so appearance changes that keep the path leave the embedding unchanged.
``videomae`` wraps a VideoMAE checkpoint through ``transformers`` and is
loaded lazily.
"""
import logging
import math

import torch
import torch.nn.functional as F
from django.conf import settings

from apps.core.exceptions import ProviderError, ShapeError

logger = logging.getLogger(__name__)


def border_background(frames):
    """Per-frame median colour of the border pixels, ``[f, 3]``."""
    border = torch.cat([
        frames[:, 0, :, :], frames[:, -1, :, :],
        frames[:, 1:-1, 0, :], frames[:, 1:-1, -1, :],
    ], dim=1)
    return border.median(dim=1).values


def foreground_centroids(frames):
    """
    Centroid ``(y, x)`` per frame, weighting pixels by their colour distance
    to the border background. Frames with no foreground keep the previous
    centroid (the image centre for the first frame).
    """
    frames = frames.double()
    count, height, width, _ = frames.shape
    background = border_background(frames)
    weights = (frames - background[:, None, None, :]).norm(dim=-1) / math.sqrt(3)
    ys = torch.arange(height, dtype=torch.float64)[:, None].expand(height, width)
    xs = torch.arange(width, dtype=torch.float64)[None, :].expand(height, width)
    centroids = torch.empty(count, 2, dtype=torch.float64)
    previous = torch.tensor([(height - 1) / 2, (width - 1) / 2], dtype=torch.float64)
    for index in range(count):
        total = weights[index].sum()
        if total > 0:
            previous = torch.stack([(weights[index] * ys).sum(), (weights[index] * xs).sum()]) / total
        centroids[index] = previous
    return centroids


class VideoEmbedder:
    name = 'base'

    def embed(self, clip):
        """Embedding ``[d]`` of one clip."""
        raise NotImplementedError


class TrajectoryEmbedder(VideoEmbedder):
    """
    Attributes:
    - directions (int): direction bins over the full circle.
    - segments (int): equal temporal segments, each with its own histogram.
    - still_threshold (float): speeds below this many pixels per frame count
      as standing still.
    """
    name = 'trajectory'

    def __init__(self, directions=8, segments=2, still_threshold=0.25):
        self.directions = directions
        self.segments = segments
        self.still_threshold = still_threshold

    @property
    def dimension(self):
        return self.segments * (self.directions + 1) + 2

    def features(self, centroids):
        velocities = centroids[1:] - centroids[:-1]
        steps = velocities.shape[0]
        histograms = torch.zeros(self.segments, self.directions + 1, dtype=torch.float64)
        speeds = velocities.norm(dim=-1)
        # y grows downward, so negate it for a counter-clockwise angle
        angles = torch.atan2(-velocities[:, 0], velocities[:, 1])
        for step in range(steps):
            segment = step * self.segments // steps
            if speeds[step] < self.still_threshold:
                histograms[segment, self.directions] += 1.0
                continue
            # bins are centred on the directions, bin 0 on +x
            sector = math.floor(float(angles[step]) / (2 * math.pi) * self.directions + 0.5) % self.directions
            histograms[segment, sector] += float(speeds[step])
        turning = torch.zeros(2, dtype=torch.float64)
        for step in range(steps - 1):
            if speeds[step] < self.still_threshold or speeds[step + 1] < self.still_threshold:
                continue
            delta = float(angles[step + 1] - angles[step])
            delta = (delta + math.pi) % (2 * math.pi) - math.pi
            turning[0 if delta > 0 else 1] += abs(delta) / math.pi
        return torch.cat([histograms.flatten(), turning])

    def embed(self, clip):
        """
        Raises:
        - ShapeError: fewer than two frames.
        """
        frames = getattr(clip, 'frames', clip)
        if frames.shape[0] < 2:
            raise ShapeError("A trajectory embedding needs at least two frames")
        return F.normalize(self.features(foreground_centroids(frames)), dim=0)


class VideoMaeEmbedder(VideoEmbedder):
    name = 'videomae'

    def __init__(self, model_name=None):
        try:
            from transformers import VideoMAEImageProcessor, VideoMAEModel
        except ImportError as exc:
            raise ProviderError("The videomae embedder needs the 'transformers' package") from exc
        model_name = model_name or settings.MOTION_TRANSFER['PROVIDERS']['VIDEO_MODEL']
        try:
            self.model = VideoMAEModel.from_pretrained(model_name).eval()
            self.processor = VideoMAEImageProcessor.from_pretrained(model_name)
        except OSError as exc:
            raise ProviderError(f"Could not load VideoMAE model {model_name!r}: {exc}") from exc
        logger.info("Loaded VideoMAE embedder %s", model_name)

    @torch.no_grad()
    def embed(self, clip):
        frames = getattr(clip, 'frames', clip)
        picks = torch.linspace(0, frames.shape[0] - 1, self.model.config.num_frames).round().long()
        images = [(frames[i].clamp(0, 1) * 255).round().byte().numpy() for i in picks]
        inputs = self.processor(images, return_tensors='pt')
        return self.model(**inputs).last_hidden_state.mean(dim=1)[0].double()


EMBEDDERS = {
    'trajectory': TrajectoryEmbedder,
    'videomae': VideoMaeEmbedder,
}


def get_embedder(name='trajectory'):
    try:
        embedder_class = EMBEDDERS[name]
    except KeyError:
        raise ProviderError(f"Unknown video embedder {name!r}; choose from {sorted(EMBEDDERS)}")
    return embedder_class()
