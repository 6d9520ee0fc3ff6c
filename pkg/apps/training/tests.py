import json
import tempfile
from pathlib import Path

import torch
from django.test import SimpleTestCase, tag

from apps.adapters.lora import attach_adapters, detach_adapters, install_adapters
from apps.appearance.injector import InjectorWeights
from apps.appearance.providers import ToyColorProvider
from apps.appearance.recaptioner import MockRecaptionerClient
from apps.backbone.tests import SMALL, small_backbone
from apps.core.exceptions import (
    CheckpointVersionError,
    ConfigValidationError,
    DatasetValidationError,
    MissingCheckpointError,
    MissingVerbIndexError,
    ShapeError,
    StageConfigError,
)
from apps.core.utils import make_generator
from apps.data.synth import SynthSpec, synth_dataset
from apps.motion_enhancer.enhancer import EnhancerMlp
from apps.motion_enhancer.verbs import RuleTagger
from apps.training.checkpoints import (
    load_motion_checkpoint,
    load_spatial_checkpoint,
    save_motion_checkpoint,
    save_spatial_checkpoint,
)
from apps.training.config import TrainConfig, resolve_train_config
from apps.training.trainer import (
    TrainingLog,
    null_prompt_mask,
    stage1_step,
    stage2_step,
    train_appearance,
    train_motion,
)

DESK = TrainConfig(lora_rank=2, max_steps=2, frames_per_sample=4, log_every=1, learning_rate=1e-3)


def circle_dataset(colors=('red', 'blue')):
    specs = [SynthSpec(color=color, size=4.0, jitter_seed=index) for index, color in enumerate(colors)]
    return synth_dataset(specs, 'circle', frames=4, height=16, width=16)


class TrainConfigTestCase(SimpleTestCase):
    def test_invalid_values(self):
        with self.assertRaises(ConfigValidationError):
            TrainConfig(lambda_reg=-1.0)
        with self.assertRaises(ConfigValidationError):
            TrainConfig(null_prompt_probability=1.5)

    def test_layers_override_in_order(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.cfg'
            path.write_text("# desk run\nmax_steps = 40\nlora_rank = 4\nuse_injector = false\n")
            config, layers = resolve_train_config(path, {'lora_rank': 8, 'seed': None})
        self.assertEqual(config.max_steps, 40)
        self.assertEqual(config.lora_rank, 8)
        self.assertFalse(config.use_injector)
        self.assertEqual(config.learning_rate, 5e-4)
        self.assertEqual(layers['config_file']['lora_rank'], 4)
        self.assertEqual(layers['flags'], {'lora_rank': 8})

    def test_unknown_key_in_file(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'run.cfg'
            path.write_text("max_step = 40\n")
            with self.assertRaises(ConfigValidationError):
                resolve_train_config(path)


class NullPromptMaskTestCase(SimpleTestCase):
    def test_rate(self):
        mask = null_prompt_mask(200000, 0.1, torch.Generator().manual_seed(0))
        self.assertAlmostEqual(float(mask.float().mean()), 0.1, delta=0.005)

    def test_extremes(self):
        generator = torch.Generator().manual_seed(0)
        self.assertFalse(bool(null_prompt_mask(50, 0.0, generator).any()))
        self.assertTrue(bool(null_prompt_mask(50, 1.0, generator).all()))


class TrainingLogTestCase(SimpleTestCase):
    def test_writes_json_lines(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'log.jsonl'
            path.write_text('stale\n')
            log = TrainingLog(path, log_every=10)
            log.record('motion', 1, 0.5, 0.4, 1000.0, 0.1)
            lines = path.read_text().splitlines()
        self.assertEqual(len(lines), 1)
        entry = json.loads(lines[0])
        self.assertEqual(entry['stage'], 'motion')
        self.assertEqual(entry['loss_reg'], 1000.0)


class Stage1StepTestCase(SimpleTestCase):
    def setUp(self):
        self.backbone = small_backbone()
        self.z0 = torch.randn(2, 1, 4, 4, 4, generator=torch.Generator().manual_seed(0))
        cond = self.backbone.text_encoder.encode("a red square is circling")
        self.context = cond.token_embeddings.expand(2, -1, -1)

    def test_loss_matches_noise_oracle(self):
        loss = stage1_step(self.backbone, self.z0, self.context, None, torch.Generator().manual_seed(5),
                           denoiser=lambda z_t, t, context: torch.zeros_like(z_t))
        generator = torch.Generator().manual_seed(5)
        torch.randint(self.backbone.schedule.timesteps, (2,), generator=generator)
        eps = torch.randn(self.z0.shape, generator=generator)
        self.assertAlmostEqual(float(loss), float(eps.pow(2).mean()), places=6)

    def test_only_spatial_adapters_receive_gradients(self):
        unet = self.backbone.unet
        spatial = attach_adapters(unet, 'spatial', rank=2, generator=torch.Generator().manual_seed(0))
        loss = stage1_step(self.backbone, self.z0, self.context, spatial, torch.Generator().manual_seed(1))
        loss.backward()
        self.assertTrue(any(float(p.grad.abs().sum()) > 0 for p in spatial.parameters()))
        self.assertTrue(all(p.grad is None for p in unet.parameters()))

    def test_trainable_temporal_set_rejected(self):
        unet = self.backbone.unet
        spatial = attach_adapters(unet, 'spatial', rank=2)
        attach_adapters(unet, 'temporal', rank=2)
        with self.assertRaises(StageConfigError):
            stage1_step(self.backbone, self.z0, self.context, spatial, torch.Generator().manual_seed(1))

    def test_multi_frame_latents_rejected(self):
        with self.assertRaises(ShapeError):
            stage1_step(self.backbone, torch.zeros(1, 2, 4, 4, 4), self.context[:1], None,
                        torch.Generator().manual_seed(1))


class Stage2StepTestCase(SimpleTestCase):
    def setUp(self):
        self.backbone = small_backbone()
        generator = torch.Generator().manual_seed(0)
        self.z0 = torch.randn(2, 3, 4, 4, 4, generator=generator)
        cond = self.backbone.text_encoder.encode("a red square is circling")
        self.context = cond.token_embeddings.expand(2, -1, -1)
        self.null = self.backbone.text_encoder.null_condition().token_embeddings
        frames = torch.rand(2, 3, 10, generator=generator)
        self.frame_embeddings = frames / frames.norm(dim=-1, keepdim=True)
        self.mlp = EnhancerMlp(10, 16, generator=generator)
        self.injector = InjectorWeights.for_unet(self.backbone.unet, 10)

    def step(self, temporal=None, lam=1e-4, seed=1, **kwargs):
        return stage2_step(self.backbone, self.z0, self.context, 4, self.frame_embeddings, temporal,
                           self.mlp, self.injector, lam, torch.Generator().manual_seed(seed), **kwargs)

    def test_loss_decomposition(self):
        with torch.no_grad():
            self.mlp.fc2.weight.normal_(0.0, 0.5, generator=torch.Generator().manual_seed(2))
        losses = self.step(lam=0.5)
        self.assertGreater(float(losses.loss_reg), 0.0)
        self.assertAlmostEqual(float(losses.loss), float(losses.loss_t + 0.5 * losses.loss_reg), places=5)

    def test_fresh_enhancer_adds_no_regularization(self):
        self.assertEqual(float(self.step().loss_reg), 0.0)

    def test_disabled_enhancer(self):
        with torch.no_grad():
            self.mlp.fc2.weight.fill_(1.0)
        self.assertEqual(float(self.step(use_enhancer=False).loss_reg), 0.0)

    def test_same_seed_same_loss(self):
        self.assertEqual(float(self.step(seed=3).loss), float(self.step(seed=3).loss))

    def test_gradients_stay_in_stage_two_parameters(self):
        unet = self.backbone.unet
        attach_adapters(unet, 'spatial', rank=2, generator=torch.Generator().manual_seed(0))
        spatial = detach_adapters(unet, 'spatial').freeze()
        install_adapters(unet, spatial)
        temporal = attach_adapters(unet, 'temporal', rank=2, generator=torch.Generator().manual_seed(1))
        self.step(temporal=temporal).loss.backward()
        self.assertTrue(any(float(p.grad.abs().sum()) > 0 for p in temporal.parameters()))
        self.assertIsNotNone(self.mlp.fc2.weight.grad)
        self.assertGreater(float(self.injector.maps['down0'].weight.grad.abs().sum()), 0.0)
        self.assertTrue(all(p.grad is None for p in spatial.parameters()))
        self.assertTrue(all(p.grad is None for p in unet.parameters()))

    def test_trainable_spatial_set_rejected(self):
        attach_adapters(self.backbone.unet, 'spatial', rank=2)
        with self.assertRaises(StageConfigError):
            self.step()

    def test_dropped_prompts_see_null_condition(self):
        seen = []

        def denoiser(z_t, t, context):
            seen.append(context)
            return torch.zeros_like(z_t)

        self.step(drop_mask=torch.tensor([True, False]), null_context=self.null, denoiser=denoiser)
        self.assertTrue(torch.equal(seen[0][0], self.null))
        self.assertFalse(torch.equal(seen[0][1], self.null))

    def test_missing_verb_index(self):
        with self.assertRaises(MissingVerbIndexError):
            stage2_step(self.backbone, self.z0, self.context, None, self.frame_embeddings, None,
                        self.mlp, self.injector, 1e-4, torch.Generator().manual_seed(1))

    def test_single_frame_rejected(self):
        with self.assertRaises(ShapeError):
            stage2_step(self.backbone, self.z0[:, :1], self.context, 4, self.frame_embeddings[:, :1], None,
                        self.mlp, self.injector, 1e-4, torch.Generator().manual_seed(1))


@tag('slow')
class TrainingRunTestCase(SimpleTestCase):
    def setUp(self):
        self.backbone = small_backbone()
        self.dataset = circle_dataset()

    def appearance(self, backbone=None, **kwargs):
        return train_appearance(backbone or self.backbone, self.dataset, DESK,
                                client=MockRecaptionerClient(), instruction='', **kwargs)

    def test_appearance_stage(self):
        before = self.backbone.checksum()
        checkpoint, records = self.appearance()
        self.assertEqual(len(records), DESK.max_steps)
        self.assertEqual(checkpoint.adapters.kind, 'spatial')
        self.assertFalse(checkpoint.adapters.trainable)
        self.assertEqual(len(checkpoint.prompts), len(self.dataset))
        self.assertTrue(all('circling' in spec.recaptioned_prompt for spec in checkpoint.prompts))
        self.assertEqual(self.backbone.unet.adapter_sets, {})
        self.assertEqual(self.backbone.checksum(), before)

    def test_appearance_is_deterministic(self):
        first, _ = self.appearance()
        second, _ = self.appearance(backbone=small_backbone())
        self.assertEqual(first.checksum(), second.checksum())

    def test_cached_prompts_reproduce_the_run(self):
        first, _ = self.appearance()
        cached, _ = self.appearance(backbone=small_backbone(), prompts=first.prompts)
        self.assertEqual(first.checksum(), cached.checksum())

    def test_motion_stage(self):
        spatial, _ = self.appearance()
        before = self.backbone.checksum()
        with tempfile.TemporaryDirectory() as tmp:
            log_path = Path(tmp) / 'motion.jsonl'
            checkpoint, records = train_motion(self.backbone, self.dataset, spatial, DESK,
                                               provider=ToyColorProvider(), tagger=RuleTagger(),
                                               log_path=log_path)
            self.assertEqual(len(log_path.read_text().splitlines()), DESK.max_steps)
        self.assertEqual(checkpoint.motion_id, 'circle')
        self.assertEqual(checkpoint.verb, 'circling')
        self.assertEqual(checkpoint.temporal.kind, 'temporal')
        self.assertEqual(tuple(checkpoint.residual.vector.shape), (16,))
        self.assertEqual(set(checkpoint.injector.maps), set(self.backbone.unet.block_channels()))
        self.assertEqual(len(records), DESK.max_steps)
        self.assertEqual(self.backbone.unet.adapter_sets, {})
        self.assertEqual(self.backbone.checksum(), before)

    def test_full_temporal_finetune_baseline(self):
        spatial, _ = self.appearance()
        before = self.backbone.checksum()
        config = TrainConfig(**{**DESK.as_dict(), 'full_temporal_finetune': True})
        checkpoint, _ = train_motion(self.backbone, self.dataset, spatial, config,
                                     provider=ToyColorProvider(), tagger=RuleTagger())
        self.assertIsNone(checkpoint.temporal)
        self.assertTrue(checkpoint.temporal_weights)
        self.assertTrue(all('.temporal.' in f'.{name}' for name in checkpoint.temporal_weights))
        self.assertEqual(self.backbone.checksum(), before)

    def test_spatial_checkpoint_from_another_motion(self):
        spatial, _ = self.appearance()
        spatial.source_id = 'bounce'
        with self.assertRaises(DatasetValidationError):
            train_motion(self.backbone, self.dataset, spatial, DESK, provider=ToyColorProvider())

    def test_spatial_checkpoint_from_another_backbone(self):
        spatial, _ = self.appearance()
        spatial.backbone_checksum = 'f' * 64
        with self.assertRaises(CheckpointVersionError):
            train_motion(self.backbone, self.dataset, spatial, DESK, provider=ToyColorProvider())

    def test_checkpoints_save_and_load(self):
        spatial, _ = self.appearance()
        motion, _ = train_motion(self.backbone, self.dataset, spatial, DESK,
                                 provider=ToyColorProvider(), tagger=RuleTagger())
        with tempfile.TemporaryDirectory() as tmp:
            save_spatial_checkpoint(spatial, Path(tmp) / 'spatial.safetensors')
            save_motion_checkpoint(motion, Path(tmp) / 'motion.safetensors')
            spatial_loaded = load_spatial_checkpoint(Path(tmp) / 'spatial.safetensors')
            motion_loaded = load_motion_checkpoint(Path(tmp) / 'motion.safetensors')
            with self.assertRaises(CheckpointVersionError):
                load_motion_checkpoint(Path(tmp) / 'spatial.safetensors')
        self.assertEqual(spatial_loaded.checksum(), spatial.checksum())
        self.assertEqual(spatial_loaded.prompts, spatial.prompts)
        self.assertEqual(motion_loaded.checksum(), motion.checksum())
        self.assertEqual(motion_loaded.verb, 'circling')

    def test_missing_checkpoint(self):
        with self.assertRaises(MissingCheckpointError):
            load_motion_checkpoint('/nonexistent/motion.safetensors')


@tag('slow')
class StageIsolationTestCase(SimpleTestCase):
    """Ten steps of either stage move only that stage's trainable parameters."""
    config = TrainConfig(lora_rank=2, max_steps=10, frames_per_sample=4, log_every=5, use_recaptioner=False)

    def setUp(self):
        self.backbone = small_backbone()
        self.dataset = circle_dataset()
        self.base = self.backbone.checksum()

    def assertOnlyKindMoved(self, trained, kind):
        fresh = attach_adapters(small_backbone().unet, kind, rank=self.config.lora_rank,
                                generator=make_generator(self.config.seed))
        self.assertEqual(set(trained.placement), set(fresh.placement))
        for path, pair in trained.placement.items():
            self.assertIn(f'.{kind}.', f'.{path}.')
            self.assertFalse(torch.equal(pair.up, fresh.placement[path].up), path)

    def test_appearance_stage(self):
        spatial, _ = train_appearance(self.backbone, self.dataset, self.config)
        self.assertOnlyKindMoved(spatial.adapters, 'spatial')
        self.assertEqual(self.backbone.checksum(), self.base)

    def test_motion_stage(self):
        spatial, _ = train_appearance(self.backbone, self.dataset, self.config)
        spatial_before = spatial.checksum()
        provider = ToyColorProvider()
        motion, _ = train_motion(self.backbone, self.dataset, spatial, self.config,
                                 provider=provider, tagger=RuleTagger())
        self.assertOnlyKindMoved(motion.temporal, 'temporal')

        # same draws as train_motion: temporal adapters first, then the MLP
        generator = make_generator(self.config.seed)
        attach_adapters(small_backbone().unet, 'temporal', rank=self.config.lora_rank, generator=generator)
        fresh_mlp = EnhancerMlp(provider.image_dimension, SMALL.text_dim, generator=generator)
        self.assertFalse(torch.equal(motion.mlp.fc2.weight, fresh_mlp.fc2.weight))
        self.assertFalse(torch.equal(motion.mlp.fc1.weight, fresh_mlp.fc1.weight))
        for name, projection in motion.injector.maps.items():
            self.assertGreater(float(projection.weight.abs().sum()), 0.0, name)

        self.assertEqual(spatial.checksum(), spatial_before)
        self.assertEqual(self.backbone.checksum(), self.base)


@tag('slow')
class RegularizerRunTestCase(SimpleTestCase):
    """A heavy residual penalty pins the residual near zero; no penalty lets it grow."""

    def setUp(self):
        self.backbone = small_backbone()
        self.dataset = circle_dataset()
        config = TrainConfig(lora_rank=2, max_steps=10, frames_per_sample=4, use_recaptioner=False)
        self.spatial, _ = train_appearance(self.backbone, self.dataset, config)

    def residual_norms(self, lambda_reg):
        config = TrainConfig(lora_rank=2, max_steps=200, frames_per_sample=4, log_every=50,
                             lambda_reg=lambda_reg, use_recaptioner=False)
        _, records = train_motion(self.backbone, self.dataset, self.spatial, config,
                                  provider=ToyColorProvider(), tagger=RuleTagger())
        for entry in records:
            expected = entry['loss_t'] + lambda_reg * entry['loss_reg']
            self.assertAlmostEqual(entry['loss'], expected, delta=1e-5 * max(1.0, abs(expected)))
        return [entry['residual_norm'] for entry in records]

    def test_penalty_shrinks_the_residual(self):
        heavy = self.residual_norms(1e3)
        free = self.residual_norms(0.0)
        self.assertLess(heavy[-1], 0.1 * max(heavy))
        self.assertGreaterEqual(free[-1], 5 * heavy[-1])


@tag('slow')
class AppearanceConvergenceTestCase(SimpleTestCase):
    def test_loss_falls_over_a_full_run(self):
        config = TrainConfig(lora_rank=4, max_steps=600, log_every=100, use_recaptioner=False)
        _, records = train_appearance(small_backbone(), circle_dataset(), config)
        losses = [entry['loss'] for entry in records]
        self.assertEqual(len(losses), 600)
        self.assertLess(sum(losses[-10:]) / 10, sum(losses[:10]) / 10)
