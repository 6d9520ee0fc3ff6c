"""
Procedural motion videos.

A single shape moves over a flat background along a named trajectory. The
trajectory depends only on the trajectory name, the frame geometry, the shape
size and the jitter seed, never on shape or colour, so appearance and motion
can be varied independently. Shapes are rendered with 4x4 supersampled
coverage; every shape is centred on its trajectory point (the triangle by its
area centroid).
"""
import math
from dataclasses import dataclass

import torch

from apps.appearance.providers import PALETTE, PALETTE_NAMES
from apps.backbone.types import VideoClip
from apps.core.exceptions import InvalidInputError, TrajectoryOutOfFrameError
from apps.core.utils import make_generator
from apps.data.datasets import MotionDataset

SHAPES = ('square', 'triangle', 'disk')
TRAJECTORY_VERBS = {
    'circle': 'circling',
    'bounce': 'bouncing',
    'sweep': 'sweeping',
    'lift': 'lifting',
}
SUPERSAMPLE = 4


def resolve_color(color):
    """Palette name or RGB triple -> ``(name, rgb tensor)``."""
    if isinstance(color, str):
        if color not in PALETTE:
            raise InvalidInputError(f"Unknown colour {color!r}; choose from {sorted(PALETTE)}")
        return color, torch.tensor(PALETTE[color])
    rgb = torch.tensor([float(channel) for channel in color])
    if rgb.shape != (3,) or rgb.min() < 0 or rgb.max() > 1:
        raise InvalidInputError(f"Colour must be an RGB triple in [0, 1], got {color!r}")
    nearest = int(((torch.tensor([PALETTE[n] for n in PALETTE_NAMES]) - rgb) ** 2).sum(-1).argmin())
    return PALETTE_NAMES[nearest], rgb


@dataclass(frozen=True)
class SynthSpec:
    """
    Attributes:
    - shape (str): square, triangle or disk.
    - color (str | tuple): foreground palette name or RGB in [0, 1].
    - trajectory (str): circle, bounce, sweep or lift.
    - background (str | tuple): background colour.
    - jitter_seed (int): varies the trajectory phase and offset.
    - size (float): side length or diameter in pixels.
    """
    shape: str = 'square'
    color: object = 'red'
    trajectory: str = 'circle'
    background: object = 'white'
    jitter_seed: int = 0
    size: float = 8.0

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidInputError(f"Unknown shape {self.shape!r}; choose from {SHAPES}")
        if self.trajectory not in TRAJECTORY_VERBS:
            raise InvalidInputError(f"Unknown trajectory {self.trajectory!r}")
        if self.size <= 0:
            raise InvalidInputError("Shape size must be positive")
        resolve_color(self.color)
        resolve_color(self.background)

    @property
    def verb(self):
        return TRAJECTORY_VERBS[self.trajectory]

    @property
    def color_name(self):
        return resolve_color(self.color)[0]

    @property
    def background_name(self):
        return resolve_color(self.background)[0]

    def prompt(self):
        return f"a {self.color_name} {self.shape} is {self.verb} on a {self.background_name} background"


def shape_extent(shape, size):
    """Distances from the centre to the (top, bottom, left, right) edges."""
    half = size / 2
    if shape == 'triangle':
        return 2 * size / 3, size / 3, half, half
    return half, half, half, half


def trajectory_centers(trajectory, frames, height, width, size, jitter_seed=0):
    """
    Centre ``(y, x)`` in pixel coordinates for every frame, ``[f, 2]`` float64.

    - circle: one revolution of radius ``min(H, W)/2 - size/2 - 2`` around the
      frame centre, starting at a seeded phase.
    - bounce: left to right while hopping twice off the floor.
    - sweep: left to right at a seeded height near the middle.
    - lift: bottom to top at a seeded column near the middle.
    """
    generator = make_generator(jitter_seed)
    jitter = float(torch.rand(1, generator=generator, dtype=torch.float64)) * 2 - 1
    steps = torch.arange(frames, dtype=torch.float64)
    progress = steps / max(frames - 1, 1)
    cy, cx = height / 2, width / 2
    margin = size / 2 + 2
    if trajectory == 'circle':
        radius = min(height, width) / 2 - margin
        angles = (jitter + 1) * math.pi + 2 * math.pi * steps / frames
        ys, xs = cy + radius * torch.sin(angles), cx + radius * torch.cos(angles)
    elif trajectory == 'bounce':
        floor = height - margin
        ys = floor - (height / 2 - margin) * torch.abs(torch.sin(2 * math.pi * progress))
        xs = margin + (width - 2 * margin) * progress
    elif trajectory == 'sweep':
        xs = margin + (width - 2 * margin) * progress
        ys = torch.full_like(xs, cy + jitter)
    elif trajectory == 'lift':
        ys = (height - margin) - (height - 2 * margin) * progress
        xs = torch.full_like(ys, cx + jitter)
    else:
        raise InvalidInputError(f"Unknown trajectory {trajectory!r}")
    return torch.stack([ys, xs], dim=-1)


def _coverage(shape, size, center, height, width):
    ys = (torch.arange(height * SUPERSAMPLE, dtype=torch.float64) + 0.5) / SUPERSAMPLE
    xs = (torch.arange(width * SUPERSAMPLE, dtype=torch.float64) + 0.5) / SUPERSAMPLE
    dy = ys[:, None] - center[0]
    dx = xs[None, :] - center[1]
    half = size / 2
    if shape == 'square':
        inside = (dy.abs() <= half) & (dx.abs() <= half)
    elif shape == 'disk':
        inside = dy ** 2 + dx ** 2 <= half ** 2
    else:
        apex = -2 * size / 3
        depth = (dy - apex) / size
        inside = (depth >= 0) & (depth <= 1) & (dx.abs() <= half * depth)
    coverage = inside.to(torch.float64).reshape(height, SUPERSAMPLE, width, SUPERSAMPLE)
    return coverage.mean(dim=(1, 3))


def synth_motion_video(spec, frames=8, height=32, width=32, fps=8.0):
    """
    Render ``spec`` as a ``VideoClip``.

    Raises:
    - TrajectoryOutOfFrameError: some frame would clip the shape.
    """
    centers = trajectory_centers(spec.trajectory, frames, height, width, spec.size, spec.jitter_seed)
    top, bottom, left, right = shape_extent(spec.shape, spec.size)
    for index, (cy, cx) in enumerate(centers.tolist()):
        if cy - top < 0 or cy + bottom > height or cx - left < 0 or cx + right > width:
            raise TrajectoryOutOfFrameError(
                f"{spec.trajectory} leaves the {height}x{width} frame at frame {index}"
            )
    _, color = resolve_color(spec.color)
    _, background = resolve_color(spec.background)
    video = torch.empty(frames, height, width, 3)
    for index, center in enumerate(centers):
        coverage = _coverage(spec.shape, spec.size, center, height, width).float()[..., None]
        video[index] = background * (1 - coverage) + color * coverage
    return VideoClip(video.clamp(0, 1), fps=fps)


def synth_dataset(specs, motion_id, frames=8, height=32, width=32, fps=8.0):
    """
    A ``MotionDataset`` with one rendered clip per spec.

    Raises:
    - InvalidInputError: specs disagree on the trajectory.
    """
    trajectories = {spec.trajectory for spec in specs}
    if len(trajectories) > 1:
        raise InvalidInputError(f"One motion per dataset, got {sorted(trajectories)}")
    clips = [synth_motion_video(spec, frames, height, width, fps) for spec in specs]
    return MotionDataset(
        motion_id=motion_id,
        clips=clips,
        base_prompts=[spec.prompt() for spec in specs],
        verb=specs[0].verb if specs else '',
        names=[f'clip{index:02d}' for index in range(len(specs))],
    )


def synth_subject_images(spec, count=4, height=32, width=32):
    """
    ``count`` still images of the spec's shape at seeded positions, each as a
    one-frame clip. The trajectory field is ignored.
    """
    generator = make_generator(spec.jitter_seed)
    top, bottom, left, right = shape_extent(spec.shape, spec.size)
    _, color = resolve_color(spec.color)
    _, background = resolve_color(spec.background)
    images = []
    for _ in range(count):
        offset = torch.rand(2, generator=generator, dtype=torch.float64)
        center = torch.stack([
            top + offset[0] * (height - top - bottom),
            left + offset[1] * (width - left - right),
        ])
        coverage = _coverage(spec.shape, spec.size, center, height, width).float()[..., None]
        frame = background * (1 - coverage) + color * coverage
        images.append(VideoClip(frame.clamp(0, 1).unsqueeze(0)))
    return images
