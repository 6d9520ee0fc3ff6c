"""
Motion datasets on disk.

Layout of a dataset directory::

    meta.json        {"format_version": 1, "motion_id": "...", "verb": "...",
                      "clips": {"<name>": {"fps": 8.0}, ...}}
    prompts.txt      one "<name>\\t<base prompt>" line per clip; blank lines
                     and lines starting with "#" are ignored
    clips/<name>.frames/0000.png, 0001.png, ...

Clip names match ``[A-Za-z0-9_-]+``. Frames are 8-bit RGB PNGs numbered from
0000 without gaps.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

from apps.appearance.recaptioner import PromptSpec
from apps.backbone.text import tokenize
from apps.backbone.types import VideoClip
from apps.core.exceptions import DatasetEmptyError, DatasetValidationError
from apps.core.utils import ensure_dir
from apps.data.serializers import DATASET_FORMAT_VERSION, DatasetMetaSerializer

logger = logging.getLogger(__name__)

FRAME_SUFFIX = '.frames'


@dataclass
class MotionDataset:
    """
    Clips of one motion with one base prompt each.

    Raises on construction:
    - DatasetEmptyError: no clips.
    - DatasetValidationError: every violated invariant, listed together.
    """
    motion_id: str
    clips: list
    base_prompts: list
    verb: str
    names: list = field(default_factory=list)
    root: Optional[Path] = None

    def __post_init__(self):
        if not self.clips:
            raise DatasetEmptyError(f"Motion dataset {self.motion_id!r} has no clips")
        if not self.names:
            self.names = [f'clip{index:02d}' for index in range(len(self.clips))]
        violations = dataset_violations(self)
        if violations:
            raise DatasetValidationError(violations)

    def __len__(self):
        return len(self.clips)

    @property
    def fps(self):
        return self.clips[0].fps

    @property
    def frame_size(self):
        return self.clips[0].height, self.clips[0].width

    def prompt_specs(self):
        """One ``PromptSpec`` per clip with the verb located by word match."""
        return [
            PromptSpec(prompt, verb_index=tokenize(prompt).index(self.verb))
            for prompt in self.base_prompts
        ]


def dataset_violations(dataset):
    violations = []
    if len(dataset.base_prompts) != len(dataset.clips):
        violations.append(
            f"{len(dataset.clips)} clips but {len(dataset.base_prompts)} base prompts"
        )
    if len(dataset.names) != len(dataset.clips):
        violations.append(f"{len(dataset.clips)} clips but {len(dataset.names)} names")
    for name, prompt in zip(dataset.names, dataset.base_prompts):
        if dataset.verb not in tokenize(prompt):
            violations.append(f"{name}: prompt {prompt!r} does not contain the verb {dataset.verb!r}")
    rates = sorted({clip.fps for clip in dataset.clips})
    if len(rates) > 1:
        violations.append(f"mixed frame rates: {rates}")
    sizes = sorted({(clip.height, clip.width) for clip in dataset.clips})
    if len(sizes) > 1:
        violations.append(f"mixed resolutions: {sizes}")
    return violations


def _read_frames(directory, violations):
    paths = sorted(directory.glob('*.png'))
    if not paths:
        violations.append(f"{directory.name}: no frames")
        return None
    expected = [f'{index:04d}.png' for index in range(len(paths))]
    if [path.name for path in paths] != expected:
        violations.append(f"{directory.name}: frames must be numbered 0000.png .. {expected[-1]}")
        return None
    frames = []
    for path in paths:
        with Image.open(path) as image:
            frames.append(np.asarray(image.convert('RGB'), dtype=np.uint8))
    if len({frame.shape for frame in frames}) > 1:
        violations.append(f"{directory.name}: frames have different sizes")
        return None
    return torch.from_numpy(np.stack(frames)).float() / 255.0


def _read_prompts(path, violations):
    prompts = {}
    for number, line in enumerate(path.read_text().splitlines(), start=1):
        if not line.strip() or line.startswith('#'):
            continue
        name, tab, prompt = line.partition('\t')
        if not tab or not prompt.strip():
            violations.append(f"prompts.txt line {number}: expected '<name>\\t<prompt>'")
            continue
        if name in prompts:
            violations.append(f"prompts.txt line {number}: duplicate clip {name!r}")
        prompts[name] = prompt.strip()
    return prompts


def load_motion_dataset(directory):
    """
    Read and validate a dataset directory.

    Raises:
    - DatasetEmptyError: the dataset lists no clips.
    - DatasetValidationError: every problem found, not just the first.
    """
    root = Path(directory)
    violations = []
    meta_path = root / 'meta.json'
    try:
        raw_meta = json.loads(meta_path.read_text())
    except FileNotFoundError:
        raise DatasetValidationError([f"{root}: missing meta.json"])
    except json.JSONDecodeError as exc:
        raise DatasetValidationError([f"meta.json is not valid JSON: {exc}"])
    serializer = DatasetMetaSerializer(data=raw_meta)
    if not serializer.is_valid():
        raise DatasetValidationError(
            [f"meta.json {key}: {' '.join(map(str, errors))}" for key, errors in serializer.errors.items()]
        )
    meta = serializer.validated_data
    if not meta['clips']:
        raise DatasetEmptyError(f"{root}: dataset lists no clips")

    prompts_path = root / 'prompts.txt'
    prompts = {}
    if prompts_path.exists():
        prompts = _read_prompts(prompts_path, violations)
    else:
        violations.append("missing prompts.txt")

    clips_dir = root / 'clips'
    on_disk = {path.name[:-len(FRAME_SUFFIX)] for path in clips_dir.glob(f'*{FRAME_SUFFIX}')} \
        if clips_dir.is_dir() else set()
    for name in sorted(on_disk - set(meta['clips'])):
        violations.append(f"clips/{name}{FRAME_SUFFIX} is not listed in meta.json")
    for name in sorted(set(prompts) - set(meta['clips'])):
        violations.append(f"prompts.txt names unknown clip {name!r}")

    names, clips, base_prompts = [], [], []
    for name, clip_meta in meta['clips'].items():
        frames_dir = clips_dir / f'{name}{FRAME_SUFFIX}'
        if not frames_dir.is_dir():
            violations.append(f"{name}: missing clips/{name}{FRAME_SUFFIX}")
            continue
        if name not in prompts and prompts_path.exists():
            violations.append(f"{name}: no prompt in prompts.txt")
        frames = _read_frames(frames_dir, violations)
        if frames is None:
            continue
        names.append(name)
        clips.append(VideoClip(frames, fps=clip_meta['fps']))
        base_prompts.append(prompts.get(name, ''))

    if violations:
        raise DatasetValidationError(violations)
    dataset = MotionDataset(
        motion_id=meta['motion_id'], clips=clips, base_prompts=base_prompts,
        verb=meta['verb'], names=names, root=root,
    )
    logger.info("Loaded motion dataset %s: %d clips from %s", dataset.motion_id, len(dataset), root)
    return dataset


def save_motion_dataset(dataset, directory):
    """Write ``dataset`` in the directory layout ``load_motion_dataset`` reads."""
    root = ensure_dir(directory)
    clips_dir = ensure_dir(root / 'clips')
    meta = {
        'format_version': DATASET_FORMAT_VERSION,
        'motion_id': dataset.motion_id,
        'verb': dataset.verb,
        'clips': {name: {'fps': float(clip.fps)} for name, clip in zip(dataset.names, dataset.clips)},
    }
    (root / 'meta.json').write_text(json.dumps(meta, indent=2) + '\n')
    lines = [f'{name}\t{prompt}' for name, prompt in zip(dataset.names, dataset.base_prompts)]
    (root / 'prompts.txt').write_text('\n'.join(lines) + '\n')
    for name, clip in zip(dataset.names, dataset.clips):
        frames_dir = ensure_dir(clips_dir / f'{name}{FRAME_SUFFIX}')
        write_frames(clip, frames_dir)
    logger.info("Wrote motion dataset %s (%d clips) to %s", dataset.motion_id, len(dataset), root)
    return root


def write_frames(clip, directory):
    pixels = (clip.frames.clamp(0, 1) * 255).round().to(torch.uint8).numpy()
    for index, frame in enumerate(pixels):
        Image.fromarray(frame).save(Path(directory) / f'{index:04d}.png')


@dataclass
class SubjectImages:
    """
    Still images of one custom subject, each held as a one-frame clip, with a
    shared prompt such as "a photo of a blue triangle". Trains spatial
    adapters only.
    """
    subject_id: str
    clips: list
    prompt: str
    root: Optional[Path] = None

    def __post_init__(self):
        if not self.clips:
            raise DatasetEmptyError(f"Subject {self.subject_id!r} has no images")
        sizes = sorted({(clip.height, clip.width) for clip in self.clips})
        if len(sizes) > 1:
            raise DatasetValidationError([f"mixed resolutions: {sizes}"])

    def __len__(self):
        return len(self.clips)

    @property
    def motion_id(self):
        return self.subject_id

    def prompt_specs(self):
        return [PromptSpec(self.prompt) for _ in self.clips]


def load_subject_images(directory, prompt, subject_id=None):
    """
    Every ``*.png`` in ``directory`` as a one-frame clip.

    Raises:
    - DatasetEmptyError: no images.
    - DatasetValidationError: images of different sizes.
    """
    root = Path(directory)
    clips = []
    for path in sorted(root.glob('*.png')):
        with Image.open(path) as image:
            pixels = np.asarray(image.convert('RGB'), dtype=np.uint8)
        clips.append(VideoClip(torch.from_numpy(pixels.copy()).float().unsqueeze(0) / 255.0))
    return SubjectImages(subject_id or root.name, clips, prompt, root=root)


RECAPTION_CACHE = 'recaptions.json'


def save_recaption_cache(dataset, specs, path=None):
    """Write one ``PromptSpec`` per clip, keyed by clip name."""
    path = Path(path) if path else Path(dataset.root) / RECAPTION_CACHE
    record = {
        'format_version': DATASET_FORMAT_VERSION,
        'motion_id': dataset.motion_id,
        'prompts': {name: asdict(spec) for name, spec in zip(dataset.names, specs)},
    }
    path.write_text(json.dumps(record, indent=2) + '\n')
    logger.info("Wrote %d recaptions to %s", len(specs), path)
    return path


def load_recaption_cache(dataset, path=None):
    """
    Read a recaption cache in the dataset's clip order.

    Raises:
    - DatasetValidationError: the cache belongs to another motion or misses clips.
    """
    path = Path(path) if path else Path(dataset.root) / RECAPTION_CACHE
    record = json.loads(path.read_text())
    violations = []
    if record.get('motion_id') != dataset.motion_id:
        violations.append(f"{path.name} is for {record.get('motion_id')!r}, not {dataset.motion_id!r}")
    prompts = record.get('prompts', {})
    violations += [f"{path.name} has no entry for {name!r}" for name in dataset.names if name not in prompts]
    if violations:
        raise DatasetValidationError(violations)
    return [PromptSpec(**prompts[name]) for name in dataset.names]
