"""
Generated videos on disk::

    <dir>/frames/0000.png, 0001.png, ...
    <dir>/metadata.json   {"fps", "seed", "prompt", "config", "checkpoint_hashes"}
    <dir>/preview.gif     only with ``preview=True``
"""
import json
import logging
from pathlib import Path

from PIL import Image

from apps.core.utils import ensure_dir
from apps.data.datasets import write_frames

logger = logging.getLogger(__name__)


def write_preview(clip, path):
    pixels = (clip.frames.clamp(0, 1) * 255).round().byte().numpy()
    images = [Image.fromarray(frame) for frame in pixels]
    images[0].save(
        path, save_all=True, append_images=images[1:],
        duration=int(round(1000 / clip.fps)), loop=0,
    )
    return Path(path)


def save_generation(clip, directory, metadata, preview=False):
    """
    Write a generated clip and its metadata.

    Returns:
    - list[Path]: every file written.
    """
    root = ensure_dir(directory)
    frames_dir = ensure_dir(root / 'frames')
    write_frames(clip, frames_dir)
    written = sorted(frames_dir.glob('*.png'))
    record = {'fps': float(clip.fps), **metadata}
    meta_path = root / 'metadata.json'
    meta_path.write_text(json.dumps(record, indent=2, sort_keys=True, default=str) + '\n')
    written.append(meta_path)
    if preview:
        written.append(write_preview(clip, root / 'preview.gif'))
    logger.info("Saved %d frames to %s", clip.frame_count, root)
    return written
