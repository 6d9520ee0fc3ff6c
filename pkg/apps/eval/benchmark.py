"""
Benchmark evaluation: six prompts per motion, one generated video per
prompt, four scores per video and one reference clip per motion chosen with a
recorded seed.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import torch

from apps.core.exceptions import MissingCheckpointError
from apps.core.utils import make_generator
from apps.data.prompts import SYNTH_CONTEXTS, SYNTH_SUBJECTS, build_eval_prompts
from apps.eval.metrics import clip_e, clip_t, closer_color_fraction, cosine, temp_cons
from apps.sampling.config import SampleConfig
from apps.sampling.pipeline import generate
from apps.training.checkpoints import MotionCheckpoint, load_motion_checkpoint

logger = logging.getLogger(__name__)

SCORE_COLUMNS = ('clip_t', 'clip_e', 'temp_cons', 'mofid')


@dataclass
class EvalRow:
    motion: str
    template: int
    prompt: str
    clip_t: float
    clip_e: float
    temp_cons: float
    mofid: float


@dataclass
class EvalReport:
    """
    One row per (motion, template). ``metadata`` records the provider, the
    embedder, the reference seed and the chosen reference clips.
    """
    rows: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def aggregate(self):
        count = len(self.rows)
        means = {name: sum(getattr(row, name) for row in self.rows) / count for name in SCORE_COLUMNS}
        return EvalRow(motion='mean', template=-1, prompt='', **means)

    def motion_fidelity(self):
        """Mean over motions of each motion's mean ``mofid``."""
        per_motion = {}
        for row in self.rows:
            per_motion.setdefault(row.motion, []).append(row.mofid)
        return sum(sum(scores) / len(scores) for scores in per_motion.values()) / len(per_motion)

    def write_table(self, path):
        columns = [spec.name for spec in fields(EvalRow)]
        lines = [f'# {key}: {self.metadata[key]}' for key in sorted(self.metadata)]
        lines.append('\t'.join(columns))
        for row in [*self.rows, self.aggregate()]:
            values = asdict(row)
            lines.append('\t'.join(
                f'{values[name]:.6f}' if name in SCORE_COLUMNS else str(values[name]) for name in columns
            ))
        path = Path(path)
        path.write_text('\n'.join(lines) + '\n')
        logger.info("Wrote evaluation table with %d rows to %s", len(self.rows), path)
        return path


def select_reference(clips, generator):
    index = int(torch.randint(len(clips), (1,), generator=generator))
    return index, clips[index]


def generate_videos(backbone, prompts, config, motion=None, subject=None):
    """One video per prompt; template ``i`` samples with seed ``config.seed + i``."""
    return [
        generate(
            backbone, spec.base_prompt, motion=motion, subject=subject,
            config=replace(config, seed=config.seed + index), verb_index=spec.verb_index,
        )
        for index, spec in enumerate(prompts)
    ]


def score_videos(motion_id, prompts, videos, reference, provider, embedder, text_provider=None, workers=1):
    anchor = embedder.embed(reference)

    def score(item):
        index, (spec, video) = item
        return EvalRow(
            motion=motion_id,
            template=index,
            prompt=spec.base_prompt,
            clip_t=clip_t(video, spec, provider, text_provider),
            clip_e=clip_e(video, spec, provider, text_provider),
            temp_cons=temp_cons(video, provider),
            mofid=cosine(anchor, embedder.embed(video)),
        )

    items = list(enumerate(zip(prompts, videos)))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(score, items))
    return [score(item) for item in items]


def _checkpoint(checkpoints, motion_id):
    if motion_id not in checkpoints:
        raise MissingCheckpointError(f"No motion checkpoint for {motion_id!r}")
    checkpoint = checkpoints[motion_id]
    if isinstance(checkpoint, MotionCheckpoint):
        return checkpoint
    return load_motion_checkpoint(checkpoint)


def evaluate_benchmark(backbone, checkpoints, references, provider, embedder, subjects=SYNTH_SUBJECTS,
                       contexts=SYNTH_CONTEXTS, config=None, seed=0, workers=1, text_provider=None):
    """
    Parameters:
    - checkpoints (dict[str, MotionCheckpoint | path]): one per motion.
    - references (dict[str, list[VideoClip] | MotionDataset]): reference clips
      per motion; one is picked per motion with ``seed``.

    Returns:
    - EvalReport: six rows per motion.

    Raises:
    - MissingCheckpointError: a motion in ``references`` has no checkpoint.
    """
    config = config or SampleConfig.from_settings()
    generator = make_generator(seed)
    report = EvalReport(metadata={
        'provider': provider.name,
        'embedder': embedder.name,
        'reference_seed': seed,
        'sample_config': config.as_dict(),
    })
    for motion_id in sorted(references):
        checkpoint = _checkpoint(checkpoints, motion_id)
        clips = getattr(references[motion_id], 'clips', references[motion_id])
        index, reference = select_reference(clips, generator)
        report.metadata[f'reference.{motion_id}'] = index
        report.metadata[f'checkpoint.{motion_id}'] = checkpoint.checksum()
        prompts = build_eval_prompts(subjects, contexts, checkpoint.verb)
        logger.info("Evaluating motion %s on %d prompts", motion_id, len(prompts))
        videos = generate_videos(backbone, prompts, config, motion=checkpoint)
        report.rows.extend(
            score_videos(motion_id, prompts, videos, reference, provider, embedder, text_provider, workers)
        )
    return report


def decoupling_summary(backbone, checkpoint, reference_clips, prompts, embedder, target_color, source_color,
                       config=None, subject=None, seed=0):
    """
    Compare tuned and untuned generations: trajectory fidelity to a
    reference clip and the fraction of frames closer to ``target_color``
    than to ``source_color``.

    Returns:
    - dict: ``mofid``, ``mofid_untuned``, ``mofid_gain``, ``closer_to_target``
      and ``closer_to_target_untuned`` plus the reference index.
    """
    config = config or SampleConfig.from_settings()
    index, reference = select_reference(list(reference_clips), make_generator(seed))
    anchor = embedder.embed(reference)
    tuned = generate_videos(backbone, prompts, config, motion=checkpoint, subject=subject)
    untuned = generate_videos(backbone, prompts, config, subject=subject)

    def fidelity(videos):
        return sum(cosine(anchor, embedder.embed(video)) for video in videos) / len(videos)

    def closer(videos):
        return sum(closer_color_fraction(video, target_color, source_color) for video in videos) / len(videos)

    summary = {
        'reference_index': index,
        'mofid': fidelity(tuned),
        'mofid_untuned': fidelity(untuned),
        'closer_to_target': closer(tuned),
        'closer_to_target_untuned': closer(untuned),
    }
    summary['mofid_gain'] = summary['mofid'] - summary['mofid_untuned']
    logger.info("Decoupling summary for %s: %s", checkpoint.motion_id, summary)
    return summary
