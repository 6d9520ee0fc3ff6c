import json
import tempfile
from pathlib import Path

import torch
from django.test import SimpleTestCase
from PIL import Image

from apps.adapters.lora import attach_adapters, detach_adapters
from apps.adapters.tests import randomize_up
from apps.appearance.injector import InjectorWeights
from apps.backbone.schedule import DiffusionSchedule, q_sample
from apps.backbone.tests import small_backbone
from apps.backbone.types import VideoClip
from apps.core.exceptions import (
    CheckpointVersionError,
    ConfigValidationError,
    DimensionMismatchError,
    ShapeError,
    TimestepError,
    VerbNotFoundError,
)
from apps.motion_enhancer.enhancer import EnhancerMlp, ResidualEmbedding
from apps.motion_enhancer.verbs import RuleTagger
from apps.sampling.config import SampleConfig, resolve_sample_config
from apps.sampling.ddim import cfg_combine, ddim_step, ddim_timesteps, ddim_update
from apps.sampling.output import save_generation
from apps.sampling.pipeline import build_condition, generate, inference_weights
from apps.training.checkpoints import MotionCheckpoint

FAST = SampleConfig(num_steps=3, guidance_scale=7.5, frames=2, seed=0)


def crafted_motion(backbone, verb='circling'):
    unet = backbone.unet
    attach_adapters(unet, 'temporal', rank=2, generator=torch.Generator().manual_seed(0))
    temporal = randomize_up(detach_adapters(unet, 'temporal')).freeze()
    return MotionCheckpoint(
        motion_id='circle',
        verb=verb,
        temporal=temporal,
        residual=ResidualEmbedding(torch.linspace(-1.0, 1.0, 16), 'circle'),
        mlp=EnhancerMlp(10, 16),
        injector=InjectorWeights.for_unet(unet, 10),
        backbone_checksum=backbone.checksum(),
    )


class DdimUpdateTestCase(SimpleTestCase):
    def setUp(self):
        generator = torch.Generator().manual_seed(0)
        self.z0 = torch.randn(1, 2, 2, 2, 4, generator=generator, dtype=torch.float64)
        self.eps = torch.randn(1, 2, 2, 2, 4, generator=generator, dtype=torch.float64)
        self.schedule = DiffusionSchedule(timesteps=1000)

    def test_exact_noise_moves_along_the_forward_process(self):
        a_t, a_prev = self.schedule.alpha_bar(600), self.schedule.alpha_bar(300)
        z_t = q_sample(self.z0, a_t, self.eps)
        z_prev = ddim_update(z_t, self.eps, a_t, a_prev)
        self.assertLess(float((z_prev - q_sample(self.z0, a_prev, self.eps)).abs().max()), 1e-6)

    def test_final_step_recovers_clean_latent(self):
        z_t = q_sample(self.z0, self.schedule.alpha_bar(40), self.eps)
        z0_hat = ddim_step(self.schedule, z_t, self.eps, 40, None)
        self.assertLess(float((z0_hat - self.z0).abs().max()), 1e-6)

    def test_stochastic_step_is_seeded(self):
        z_t = q_sample(self.z0, self.schedule.alpha_bar(600), self.eps)
        first = ddim_step(self.schedule, z_t, self.eps, 600, 300, eta=1.0, generator=torch.Generator().manual_seed(1))
        again = ddim_step(self.schedule, z_t, self.eps, 600, 300, eta=1.0, generator=torch.Generator().manual_seed(1))
        plain = ddim_step(self.schedule, z_t, self.eps, 600, 300)
        self.assertTrue(torch.equal(first, again))
        self.assertFalse(torch.allclose(first, plain))

    def test_timesteps_must_decrease(self):
        with self.assertRaises(TimestepError):
            ddim_step(self.schedule, self.z0, self.eps, 300, 300)


class DdimTimestepsTestCase(SimpleTestCase):
    def test_even_stride_ending_at_zero(self):
        self.assertEqual(ddim_timesteps(4, 1000), [750, 500, 250, 0])
        self.assertEqual(ddim_timesteps(1, 10), [0])
        self.assertEqual(len(ddim_timesteps(30, 1000)), 30)

    def test_too_many_steps(self):
        with self.assertRaises(TimestepError):
            ddim_timesteps(11, 10)


class GuidanceTestCase(SimpleTestCase):
    def test_combination(self):
        uncond, cond = torch.tensor([1.0, 2.0]), torch.tensor([2.0, 0.0])
        self.assertTrue(torch.equal(cfg_combine(uncond, cond, 0.0), uncond))
        self.assertTrue(torch.equal(cfg_combine(uncond, cond, 1.0), cond))
        self.assertTrue(torch.equal(cfg_combine(uncond, cond, 3.0), torch.tensor([4.0, -4.0])))

    def test_shape_mismatch(self):
        with self.assertRaises(ShapeError):
            cfg_combine(torch.zeros(2), torch.zeros(3), 1.0)


class SampleConfigTestCase(SimpleTestCase):
    def test_defaults_from_settings(self):
        config, layers = resolve_sample_config(flags={'num_steps': 5})
        self.assertEqual((config.num_steps, config.guidance_scale, config.eta), (5, 12.0, 0.0))
        self.assertEqual(layers['flags'], {'num_steps': 5})

    def test_invalid_eta(self):
        with self.assertRaises(ConfigValidationError):
            resolve_sample_config(flags={'eta': 2.0})

    def test_desk_defaults_sample_at_the_backbone_size(self):
        config = SampleConfig.from_settings()
        self.assertEqual((config.frames, config.height, config.width), (8, None, None))

    def test_full_scale_defaults(self):
        config, layers = resolve_sample_config(full_scale=True)
        self.assertEqual((config.num_steps, config.guidance_scale), (30, 12.0))
        self.assertEqual((config.frames, config.fps, config.height, config.width), (24, 8.0, 320, 576))
        self.assertEqual(layers['defaults']['frames'], 24)

    def test_flags_override_full_scale_defaults(self):
        config, _ = resolve_sample_config(flags={'frames': 4, 'width': None}, full_scale=True)
        self.assertEqual((config.frames, config.width), (4, 576))


class GenerateTestCase(SimpleTestCase):
    def setUp(self):
        self.backbone = small_backbone()

    def test_shape_and_determinism(self):
        first = generate(self.backbone, "a red square is circling", config=FAST)
        second = generate(self.backbone, "a red square is circling", config=FAST)
        self.assertEqual(tuple(first.frames.shape), (2, 16, 16, 3))
        self.assertEqual(first.fps, FAST.fps)
        self.assertTrue(torch.equal(first.frames, second.frames))

    def test_seed_changes_output(self):
        other = SampleConfig(**{**FAST.as_dict(), 'seed': 1})
        first = generate(self.backbone, "a red square is circling", config=FAST)
        second = generate(self.backbone, "a red square is circling", config=other)
        self.assertFalse(torch.equal(first.frames, second.frames))

    def test_motion_checkpoint_leaves_backbone_untouched(self):
        motion = crafted_motion(self.backbone)
        before = self.backbone.checksum()
        plain = generate(self.backbone, "a green disk is circling", config=FAST)
        moved = generate(self.backbone, "a green disk is circling", motion=motion, config=FAST,
                         tagger=RuleTagger())
        self.assertEqual(self.backbone.checksum(), before)
        self.assertEqual(self.backbone.unet.adapter_sets, {})
        self.assertFalse(torch.equal(plain.frames, moved.frames))

    def test_condition_changes_only_the_verb_row(self):
        motion = crafted_motion(self.backbone)
        plain = self.backbone.text_encoder.encode("a dog by the pond is circling")
        cond = build_condition(self.backbone, "a dog by the pond is circling", motion, tagger=RuleTagger())
        self.assertEqual(cond.verb_index, 6)
        difference = cond.token_embeddings - plain.token_embeddings
        self.assertTrue(torch.allclose(difference[6], motion.residual.vector))
        difference[6] = 0
        self.assertEqual(float(difference.abs().max()), 0.0)

    def test_no_checkpoints_means_base_weights(self):
        weights = inference_weights(self.backbone)
        for key, value in self.backbone.unet.state_dict().items():
            self.assertTrue(torch.equal(weights[key], value))

    def test_prompt_without_verb(self):
        with self.assertRaises(VerbNotFoundError):
            generate(self.backbone, "a green disk", motion=crafted_motion(self.backbone), config=FAST,
                     tagger=RuleTagger())

    def test_checkpoint_from_another_backbone(self):
        motion = crafted_motion(self.backbone)
        motion.backbone_checksum = '0' * 64
        with self.assertRaises(CheckpointVersionError):
            generate(self.backbone, "a cat is circling", motion=motion, config=FAST)

    def test_more_steps_than_timesteps(self):
        with self.assertRaises(TimestepError):
            generate(self.backbone, "a cat is circling", config=SampleConfig(num_steps=101, frames=2))

    def test_explicit_frame_size(self):
        config = SampleConfig(**{**FAST.as_dict(), 'height': 24, 'width': 32})
        clip = generate(self.backbone, "a red square is circling", config=config)
        self.assertEqual(tuple(clip.frames.shape), (2, 24, 32, 3))

    def test_frame_size_must_fit_the_unet(self):
        config = SampleConfig(**{**FAST.as_dict(), 'height': 20})
        with self.assertRaises(DimensionMismatchError):
            generate(self.backbone, "a red square is circling", config=config)


class SaveGenerationTestCase(SimpleTestCase):
    def test_writes_frames_metadata_and_preview(self):
        clip = VideoClip(torch.rand(3, 8, 8, 3, generator=torch.Generator().manual_seed(0)), fps=4.0)
        with tempfile.TemporaryDirectory() as tmp:
            written = save_generation(clip, Path(tmp) / 'out', {'seed': 7, 'prompt': 'p'}, preview=True)
            names = [path.name for path in written]
            self.assertEqual(names, ['0000.png', '0001.png', '0002.png', 'metadata.json', 'preview.gif'])
            metadata = json.loads((Path(tmp) / 'out' / 'metadata.json').read_text())
            with Image.open(Path(tmp) / 'out' / 'preview.gif') as gif:
                self.assertEqual(gif.n_frames, 3)
                self.assertEqual(gif.info['duration'], 250)
        self.assertEqual(metadata, {'fps': 4.0, 'seed': 7, 'prompt': 'p'})
