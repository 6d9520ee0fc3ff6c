"""
Two-stage training.

Stage 1 (appearance) trains spatial adapters on single frames paired with
recaptioned prompts. Stage 2 (motion) keeps the stage-1 spatial adapters
installed and frozen, and trains temporal adapters, the enhancer MLP and the
injector maps on whole clips paired with base prompts, with the frame
embedding of one random frame injected before every temporal transformer.

Base weights are never trained: adapters are installed on the shared UNet
and removed again when a stage ends, and the full fine-tune baseline works
on a private copy.
"""
import copy
import json
import logging
import time
from typing import NamedTuple

import torch
import torch.nn.functional as F
from tqdm import tqdm

from apps.adapters.lora import attach_adapters, detach_adapters, install_adapters
from apps.appearance.injector import AppearanceInjection, InjectorWeights, random_frame_embeddings
from apps.appearance.providers import embed_frames, get_provider
from apps.appearance.recaptioner import get_recaptioner, recaption_dataset
from apps.backbone.unet import unet_forward
from apps.core.exceptions import (
    CheckpointVersionError,
    DatasetValidationError,
    MissingVerbIndexError,
    ShapeError,
    StageConfigError,
)
from apps.core.utils import make_generator
from apps.motion_enhancer.enhancer import (
    EnhancerMlp,
    ResidualEmbedding,
    enhance_tokens,
    pool_video_embedding,
    reg_loss,
)
from apps.motion_enhancer.verbs import relocate_verb
from apps.training.checkpoints import MotionCheckpoint, SpatialCheckpoint

logger = logging.getLogger(__name__)

ADAMW_BETAS = (0.9, 0.999)


class MotionLoss(NamedTuple):
    loss: torch.Tensor
    loss_t: torch.Tensor
    loss_reg: torch.Tensor


class TrainingLog:
    """Append-only JSON-lines record of every step."""

    def __init__(self, path=None, log_every=25):
        self.path = path
        self.log_every = log_every
        self.started = time.monotonic()
        self.records = []
        if path:
            open(path, 'w').close()

    def record(self, stage, step, loss, loss_t, loss_reg=0.0, residual_norm=0.0):
        entry = {
            'stage': stage,
            'step': step,
            'loss': float(loss),
            'loss_t': float(loss_t),
            'loss_reg': float(loss_reg),
            'residual_norm': float(residual_norm),
            'wallclock': round(time.monotonic() - self.started, 3),
        }
        self.records.append(entry)
        if self.path:
            with open(self.path, 'a') as handle:
                handle.write(json.dumps(entry) + '\n')
        if step % self.log_every == 0:
            logger.info("%s step %d: loss %.5f (temporal %.5f, reg %.3g, residual norm %.4f)",
                        stage, step, entry['loss'], entry['loss_t'], entry['loss_reg'],
                        entry['residual_norm'])
        return entry


def null_prompt_mask(batch, probability, generator):
    """True where a batch element's condition is replaced by the empty prompt."""
    return torch.rand(batch, generator=generator) < probability


def _apply_null_prompt(context, null_context, mask):
    if mask is None or not bool(mask.any()):
        return context
    return torch.where(mask[:, None, None], null_context.expand_as(context), context)


def _noised(backbone, z0, generator):
    batch = z0.shape[0]
    t = torch.randint(backbone.schedule.timesteps, (batch,), generator=generator)
    eps = torch.randn(z0.shape, generator=generator, dtype=z0.dtype)
    return backbone.schedule.add_noise(z0, t, eps), t, eps


def stage1_step(backbone, z0, context, spatial, generator, denoiser=None, unet=None):
    """
    Appearance loss: MSE between the added noise and the UNet's prediction
    under the recaptioned prompt, on single frames.

    Parameters:
    - z0 (Tensor): ``[b, 1, h, w, c]`` clean latents.
    - context (Tensor): ``[b, N, d]`` recaptioned-prompt conditions.
    - spatial (AdapterSet): the trainable set installed on the UNet.
    - denoiser (callable | None): ``(z_t, t, context) -> eps`` replacing the UNet.

    Raises:
    - StageConfigError: temporal adapters are trainable or ``spatial`` is frozen.
    - ShapeError: latents have more than one frame.
    """
    unet = unet or backbone.unet
    temporal = unet.adapter_sets.get('temporal')
    if temporal is not None and temporal.trainable:
        raise StageConfigError("Temporal adapters must be frozen during the appearance stage")
    if spatial is not None and not spatial.trainable:
        raise StageConfigError("Spatial adapters must be trainable during the appearance stage")
    if z0.shape[1] != 1:
        raise ShapeError(f"The appearance stage trains on single frames, got {z0.shape[1]}")
    z_t, t, eps = _noised(backbone, z0, generator)
    if denoiser is not None:
        prediction = denoiser(z_t, t, context)
    else:
        prediction = unet_forward(unet, z_t, t, context)
    return F.mse_loss(prediction, eps)


def stage2_step(backbone, z0, base_context, verb_index, frame_embeddings, temporal, mlp, injector,
                lam, generator, drop_mask=None, null_context=None, use_enhancer=True,
                use_injector=True, unet=None, denoiser=None):
    """
    Motion loss: temporal MSE plus ``lam`` times the residual norm penalty.

    The condition's verb row gets the residual ``mlp(pool(frame_embeddings), verb_row)``
    and one random frame embedding per clip is injected before each temporal
    transformer.

    Parameters:
    - z0 (Tensor): ``[b, f, h, w, c]`` clean latents, f >= 2.
    - base_context (Tensor): ``[b, N, d]`` base-prompt conditions.
    - verb_index (int | Tensor): verb row, or one per batch element.
    - frame_embeddings (Tensor): ``[b, f, d_img]`` unit-norm frame embeddings.
    - temporal (AdapterSet | None): trainable temporal set (None for the full
      fine-tune baseline).
    - drop_mask (Tensor | None): null-prompt dropout mask ``[b]``.

    Returns:
    - MotionLoss: ``(loss, loss_t, loss_reg)``.

    Raises:
    - StageConfigError: spatial adapters are trainable or ``temporal`` is frozen.
    - MissingVerbIndexError: enhancement requested without a verb index.
    """
    unet = unet or backbone.unet
    spatial = unet.adapter_sets.get('spatial')
    if spatial is not None and spatial.trainable:
        raise StageConfigError("Spatial adapters must be frozen during the motion stage")
    if temporal is not None and not temporal.trainable:
        raise StageConfigError("Temporal adapters must be trainable during the motion stage")
    if z0.shape[1] < 2:
        raise ShapeError("The motion stage trains on clips of at least two frames")
    batch = z0.shape[0]
    context = base_context
    residual = torch.zeros(batch, base_context.shape[-1], dtype=base_context.dtype)
    if use_enhancer:
        if verb_index is None:
            raise MissingVerbIndexError("The motion stage needs the verb index of every prompt")
        rows = torch.as_tensor(verb_index).expand(batch)
        base_embedding = base_context[torch.arange(batch), rows]
        residual = mlp(pool_video_embedding(frame_embeddings), base_embedding)
        context = enhance_tokens(base_context, rows, residual)
    if null_context is not None:
        context = _apply_null_prompt(context, null_context, drop_mask)
    injection = None
    if use_injector:
        injection = AppearanceInjection(random_frame_embeddings(frame_embeddings, generator), injector)
    z_t, t, eps = _noised(backbone, z0, generator)
    if denoiser is not None:
        prediction = denoiser(z_t, t, context)
    else:
        prediction = unet_forward(unet, z_t, t, context, injection=injection)
    loss_t = F.mse_loss(prediction, eps)
    loss_reg = reg_loss(residual)
    return MotionLoss(loss_t + lam * loss_reg, loss_t, loss_reg)


def _optimizer(parameters, config):
    return torch.optim.AdamW(parameters, lr=config.learning_rate, betas=ADAMW_BETAS,
                             weight_decay=config.weight_decay)


def _progress(steps, description):
    return tqdm(range(1, steps + 1), desc=description, disable=None, leave=False)


def _step(optimizer, loss, parameters, max_grad_norm):
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if max_grad_norm:
        torch.nn.utils.clip_grad_norm_(parameters, max_grad_norm)
    optimizer.step()


def _sample_window(latents, frames, generator):
    total = latents.shape[0]
    if total <= frames:
        return 0, total
    start = int(torch.randint(total - frames + 1, (1,), generator=generator))
    return start, start + frames


def train_appearance(backbone, dataset, config, client=None, instruction=None, log_path=None, prompts=None):
    """
    Stage 1: spatial adapters on single frames with recaptioned prompts.
    A stored recaption cache can be passed as ``prompts``.

    Returns:
    - tuple[SpatialCheckpoint, list[dict]]: the frozen spatial set plus the
      recaption cache, and the training log records.

    Raises:
    - RecaptionBudgetError: too many recaptions fell back to the base prompt.
    """
    unet = backbone.unet
    generator = make_generator(config.seed)
    specs = dataset.prompt_specs()
    if prompts is not None and config.use_recaptioner:
        specs = list(prompts)
        # same draws as recaption_dataset's frame picks, so the step stream matches
        for clip in dataset.clips:
            torch.randint(clip.frame_count, (1,), generator=generator)
    elif config.use_recaptioner:
        specs = recaption_dataset(
            specs, dataset.clips, client or get_recaptioner(), generator,
            instruction=instruction, max_tokens=backbone.config.max_tokens,
        )
    encoder = backbone.text_encoder
    contexts = torch.stack([encoder.encode(spec.training_prompt).token_embeddings for spec in specs])
    null_context = encoder.null_condition().token_embeddings
    latents = [backbone.encode_frames(clip).latents[0] for clip in dataset.clips]

    spatial = attach_adapters(unet, 'spatial', rank=config.lora_rank, alpha=config.lora_alpha,
                              generator=generator)
    parameters = list(spatial.parameters())
    optimizer = _optimizer(parameters, config)
    log = TrainingLog(log_path, config.log_every)
    logger.info("Appearance stage on %s: %d clips, %d steps", dataset.motion_id, len(dataset), config.max_steps)
    try:
        for step in _progress(config.max_steps, 'appearance'):
            picks = torch.randint(len(latents), (config.batch_size,), generator=generator).tolist()
            z0 = torch.stack([
                latents[i][int(torch.randint(latents[i].shape[0], (1,), generator=generator))].unsqueeze(0)
                for i in picks
            ])
            mask = null_prompt_mask(config.batch_size, config.null_prompt_probability, generator)
            context = _apply_null_prompt(contexts[picks], null_context, mask)
            loss = stage1_step(backbone, z0, context, spatial, generator)
            _step(optimizer, loss, parameters, config.max_grad_norm)
            log.record('appearance', step, loss.item(), loss.item())
    finally:
        detach_adapters(unet, 'spatial')
    return SpatialCheckpoint(
        adapters=spatial.freeze(),
        prompts=specs,
        source_id=dataset.motion_id,
        config=config.as_dict(),
        backbone_checksum=backbone.checksum(),
    ), log.records


def _verb_indices(dataset, config, tagger):
    if config.verb_index is not None:
        return [config.verb_index] * len(dataset)
    return [relocate_verb(spec.tokens, dataset.verb, tagger) for spec in dataset.prompt_specs()]


def _temporal_parameters(unet):
    return [
        parameter for name, parameter in unet.named_parameters()
        if '.temporal.' in f'.{name}'
    ]


def train_motion(backbone, dataset, spatial_checkpoint, config, provider=None, tagger=None, log_path=None):
    """
    Stage 2: temporal adapters, enhancer MLP and injector on whole clips.

    Returns the ``MotionCheckpoint`` and the training log records. The
    residual embedding cached in the checkpoint is the MLP applied to the
    mean of the per-clip pooled frame embeddings and the mean verb-row base
    embedding.

    Raises:
    - CheckpointVersionError: the spatial checkpoint was trained on another backbone.
    - DatasetValidationError: the spatial checkpoint belongs to another motion.
    - ShapeError: clips have fewer than two frames.
    - VerbNotFoundError: a prompt has no verb and no ``verb_index`` override is set.
    """
    if spatial_checkpoint.backbone_checksum and spatial_checkpoint.backbone_checksum != backbone.checksum():
        raise CheckpointVersionError("Spatial checkpoint was trained on a different backbone")
    if spatial_checkpoint.source_id and spatial_checkpoint.source_id != dataset.motion_id:
        raise DatasetValidationError([
            f"spatial checkpoint is for {spatial_checkpoint.source_id!r}, dataset is {dataset.motion_id!r}"
        ])
    if dataset.clips[0].frame_count < 2:
        raise ShapeError("The motion stage needs clips of at least two frames")
    provider = provider or get_provider()
    generator = make_generator(config.seed)
    encoder = backbone.text_encoder
    verb_rows = torch.tensor(_verb_indices(dataset, config, tagger))
    contexts = torch.stack([encoder.encode(prompt).token_embeddings for prompt in dataset.base_prompts])
    null_context = encoder.null_condition().token_embeddings
    latents = [backbone.encode_frames(clip).latents[0] for clip in dataset.clips]
    embeddings = [embed_frames(clip, provider) for clip in dataset.clips]

    unet = backbone.unet
    if config.full_temporal_finetune:
        unet = copy.deepcopy(backbone.unet)
        unet.adapter_sets = {}
    install_adapters(unet, spatial_checkpoint.adapters.clone(trainable=False))
    temporal = None
    try:
        if config.full_temporal_finetune:
            temporal_params = _temporal_parameters(unet)
            for parameter in temporal_params:
                parameter.requires_grad_(True)
        else:
            temporal = attach_adapters(unet, 'temporal', rank=config.lora_rank, alpha=config.lora_alpha,
                                       generator=generator)
            temporal_params = list(temporal.parameters())
        mlp = EnhancerMlp(provider.image_dimension, encoder.dim, generator=generator)
        injector = InjectorWeights.for_unet(unet, provider.image_dimension)
        parameters = list(temporal_params)
        if config.use_enhancer:
            parameters += list(mlp.parameters())
        if config.use_injector:
            parameters += list(injector.parameters())
        optimizer = _optimizer(parameters, config)
        log = TrainingLog(log_path, config.log_every)
        logger.info("Motion stage on %s: %d clips, %d steps, verb %r",
                    dataset.motion_id, len(dataset), config.max_steps, dataset.verb)
        for step in _progress(config.max_steps, 'motion'):
            picks = torch.randint(len(latents), (config.batch_size,), generator=generator).tolist()
            windows = [_sample_window(latents[i], config.frames_per_sample, generator) for i in picks]
            z0 = torch.stack([latents[i][a:b] for i, (a, b) in zip(picks, windows)])
            frame_embeddings = torch.stack([embeddings[i][a:b] for i, (a, b) in zip(picks, windows)])
            mask = null_prompt_mask(config.batch_size, config.null_prompt_probability, generator)
            losses = stage2_step(
                backbone, z0, contexts[picks], verb_rows[picks], frame_embeddings, temporal, mlp, injector,
                config.lambda_reg, generator, drop_mask=mask, null_context=null_context,
                use_enhancer=config.use_enhancer, use_injector=config.use_injector, unet=unet,
            )
            _step(optimizer, losses.loss, parameters, config.max_grad_norm)
            log.record('motion', step, losses.loss.item(), losses.loss_t.item(),
                       losses.loss_reg.item(), losses.loss_reg.sqrt().item())
    finally:
        for kind in list(unet.adapter_sets):
            detach_adapters(unet, kind)

    with torch.no_grad():
        pooled = torch.stack([pool_video_embedding(item) for item in embeddings]).mean(dim=0)
        base_embedding = contexts[torch.arange(len(dataset)), verb_rows].mean(dim=0)
        if config.use_enhancer:
            residual = mlp(pooled, base_embedding)
        else:
            residual = torch.zeros_like(base_embedding)
    temporal_weights = {}
    if config.full_temporal_finetune:
        temporal_weights = {
            name: tensor.detach().clone() for name, tensor in unet.state_dict().items()
            if '.temporal.' in f'.{name}'
        }
    return MotionCheckpoint(
        motion_id=dataset.motion_id,
        verb=dataset.verb,
        temporal=temporal.freeze() if temporal is not None else None,
        residual=ResidualEmbedding(residual, dataset.motion_id),
        mlp=mlp.requires_grad_(False),
        injector=injector.requires_grad_(False),
        provider=provider.name,
        config=config.as_dict(),
        backbone_checksum=backbone.checksum(),
        temporal_weights=temporal_weights,
    ), log.records
