"""
Video generation from a prompt with an optional motion checkpoint and an
optional subject (spatial) checkpoint.

Adapters are merged into a copy of the base weights and the UNet is called
functionally, so the shared backbone and the checkpoints are only read. The
appearance injector is never used here; there is no reference frame at
inference.
"""
import logging

import torch
from tqdm import tqdm

from apps.adapters.lora import merge_adapters
from apps.backbone.unet import unet_forward
from apps.core.exceptions import CheckpointVersionError, DimensionMismatchError, TimestepError
from apps.core.utils import make_generator
from apps.motion_enhancer.enhancer import enhance_condition
from apps.motion_enhancer.verbs import relocate_verb
from apps.sampling.config import SampleConfig
from apps.sampling.ddim import cfg_combine, ddim_step, ddim_timesteps

logger = logging.getLogger(__name__)


def _check_backbone(backbone, checkpoint, label):
    recorded = getattr(checkpoint, 'backbone_checksum', '')
    if recorded and recorded != backbone.checksum():
        raise CheckpointVersionError(f"The {label} checkpoint was trained on a different backbone")


def frame_size(backbone, config):
    """
    Sampled frame size, the backbone's own unless the config sets one.

    Raises:
    - DimensionMismatchError: a side does not divide into the UNet's coarsest grid.
    """
    height = config.height or backbone.config.height
    width = config.width or backbone.config.width
    step = backbone.config.downsample * 2 ** (len(backbone.config.channel_mult) - 1)
    if height % step or width % step:
        raise DimensionMismatchError(f"Frame size {height}x{width} must be a multiple of {step}")
    return height, width


def inference_weights(backbone, motion=None, subject=None):
    """Base UNet weights with the subject and motion adapters folded in."""
    sets = []
    if subject is not None:
        sets.append(subject.adapters)
    if motion is not None and motion.temporal is not None:
        sets.append(motion.temporal)
    weights = merge_adapters(backbone.unet.state_dict(), sets)
    if motion is not None and motion.temporal_weights:
        weights.update(motion.temporal_weights)
    return weights


def build_condition(backbone, prompt, motion=None, verb_index=None, tagger=None):
    """
    The conditional branch: the prompt's embedding with the cached residual on
    the verb row when a motion checkpoint is given.

    Raises:
    - VerbNotFoundError: the verb is not in the prompt and no override is given.
    """
    cond = backbone.text_encoder.encode(prompt)
    if motion is None:
        return cond.with_verb(verb_index) if verb_index is not None else cond
    if verb_index is None:
        verb_index = relocate_verb(cond.tokens, motion.verb, tagger)
    return enhance_condition(cond.with_verb(verb_index), motion.residual)


@torch.no_grad()
def generate(backbone, prompt, motion=None, subject=None, config=None, verb_index=None, tagger=None):
    """
    DDIM sampling with classifier-free guidance.

    Parameters:
    - motion (MotionCheckpoint | None): temporal adapters plus cached residual.
    - subject (SpatialCheckpoint | None): spatial adapters of a custom subject.
    - config (SampleConfig | None): defaults from settings.

    Returns:
    - VideoClip: ``config.frames`` decoded frames at ``config.fps``.

    Raises:
    - VerbNotFoundError: no verb in the prompt and no ``verb_index``.
    - CheckpointVersionError: a checkpoint belongs to another backbone.
    - TimestepError: more steps than the schedule has.
    - DimensionMismatchError: the frame size does not fit the UNet.
    """
    config = config or SampleConfig.from_settings()
    schedule = backbone.schedule
    if config.num_steps > schedule.timesteps:
        raise TimestepError(f"num_steps {config.num_steps} exceeds {schedule.timesteps} timesteps")
    height, width = frame_size(backbone, config)
    if motion is not None:
        _check_backbone(backbone, motion, 'motion')
    if subject is not None:
        _check_backbone(backbone, subject, 'subject')

    cond = build_condition(backbone, prompt, motion, verb_index, tagger)
    null = backbone.text_encoder.null_condition()
    context = torch.stack([null.token_embeddings, cond.token_embeddings])
    weights = inference_weights(backbone, motion, subject)

    generator = make_generator(config.seed)
    z = torch.randn(backbone.latent_shape(config.frames, height, width), generator=generator)
    timesteps = ddim_timesteps(config.num_steps, schedule.timesteps)
    logger.info("Generating %d frames of %dx%d for %r (%d steps, guidance %.1f, seed %d)",
                config.frames, height, width, prompt, config.num_steps, config.guidance_scale, config.seed)
    for index, t in enumerate(tqdm(timesteps, desc='sampling', disable=None, leave=False)):
        eps_uncond, eps_cond = unet_forward(
            backbone.unet, torch.cat([z, z]), t, context, weights=weights,
        ).chunk(2)
        eps = cfg_combine(eps_uncond, eps_cond, config.guidance_scale)
        t_prev = timesteps[index + 1] if index + 1 < len(timesteps) else None
        z = ddim_step(schedule, z, eps, t, t_prev, eta=config.eta, generator=generator)
    return backbone.decode_latents(z, fps=config.fps)
