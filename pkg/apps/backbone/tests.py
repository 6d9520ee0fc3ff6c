import tempfile
from pathlib import Path

import torch
from django.test import SimpleTestCase

from apps.backbone.autoencoder import ROUND_TRIP_MEAN_ABS_BOUND, ROUND_TRIP_PATCH_CONSTANT_BOUND
from apps.backbone.schedule import DiffusionSchedule
from apps.backbone.text import tokenize
from apps.backbone.types import ConditionEmbedding, HiddenStates, VideoClip
from apps.backbone.unet import grid_positions, unet_forward
from apps.backbone.weights import Backbone, BackboneConfig, load_backbone, save_backbone
from apps.core.exceptions import (
    CheckpointVersionError,
    ConditionLengthError,
    DimensionMismatchError,
    MissingVerbIndexError,
    ShapeError,
    TimestepError,
)

SMALL = BackboneConfig(model_width=16, heads=2, text_dim=16, height=16, width=16, frames=4, timesteps=100)


def small_backbone():
    return Backbone(SMALL)


class VideoClipTestCase(SimpleTestCase):
    def test_rejects_out_of_range_pixels(self):
        with self.assertRaises(ShapeError):
            VideoClip(torch.full((2, 4, 4, 3), 1.5))

    def test_rejects_wrong_layout(self):
        with self.assertRaises(ShapeError):
            VideoClip(torch.zeros(2, 3, 4, 4))

    def test_reversed_flips_frame_order(self):
        frames = torch.rand(3, 4, 4, 3)
        self.assertTrue(torch.equal(VideoClip(frames).reversed().frames[0], frames[2]))


class ConditionEmbeddingTestCase(SimpleTestCase):
    def test_enhanced_requires_verb_index(self):
        with self.assertRaises(MissingVerbIndexError):
            ConditionEmbedding(torch.zeros(4, 2), enhanced=True)

    def test_verb_index_must_be_in_range(self):
        with self.assertRaises(ShapeError):
            ConditionEmbedding(torch.zeros(4, 2), verb_index=4)


class HiddenStatesTestCase(SimpleTestCase):
    def test_layout_round_trip_is_identity(self):
        values = torch.randn(2 * 3, 4 * 5, 8)
        spatial = HiddenStates(values, 'spatial', batch=2, frames=3, height=4, width=5)
        temporal = spatial.to_temporal()
        self.assertEqual(tuple(temporal.values.shape), (2 * 4 * 5, 3, 8))
        self.assertTrue(torch.equal(temporal.to_spatial().values, values))


class AutoencoderTestCase(SimpleTestCase):
    def setUp(self):
        self.backbone = small_backbone()

    def test_zero_clip_encodes_to_encoder_bias(self):
        latents = self.backbone.encode_frames(VideoClip(torch.zeros(4, 16, 16, 3))).latents
        self.assertEqual(tuple(latents.shape), (1, 4, 4, 4, 4))
        bias = self.backbone.autoencoder.encoder_bias
        self.assertTrue(torch.allclose(latents, bias.expand_as(latents)))

    def test_single_frame_keeps_frame_axis(self):
        latents = self.backbone.encode_frames(VideoClip(torch.rand(1, 16, 16, 3))).latents
        self.assertEqual(tuple(latents.shape), (1, 1, 4, 4, 4))

    def test_round_trip_within_bound(self):
        frames = torch.rand(4, 16, 16, 3, generator=torch.Generator().manual_seed(0))
        decoded = self.backbone.decode_latents(self.backbone.encode_frames(VideoClip(frames)))
        self.assertLess(float((decoded.frames - frames).abs().mean()), ROUND_TRIP_MEAN_ABS_BOUND)

    def test_patch_constant_frames_survive_exactly(self):
        colours = torch.rand(2, 4, 4, 3, generator=torch.Generator().manual_seed(1))
        frames = colours.repeat_interleave(4, dim=1).repeat_interleave(4, dim=2)
        decoded = self.backbone.decode_latents(self.backbone.encode_frames(VideoClip(frames)))
        self.assertLess(float((decoded.frames - frames).abs().max()), ROUND_TRIP_PATCH_CONSTANT_BOUND)

    def test_zero_latent_decodes_to_constant_image(self):
        clip = self.backbone.decode_latents(torch.zeros(1, 2, 4, 4, 4))
        self.assertEqual(tuple(clip.frames.shape), (2, 16, 16, 3))
        self.assertTrue(torch.allclose(clip.frames, clip.frames[0, 0, 0].expand_as(clip.frames)))

    def test_indivisible_size_is_rejected(self):
        with self.assertRaises(DimensionMismatchError):
            self.backbone.encode_frames(VideoClip(torch.zeros(1, 15, 16, 3)))

    def test_wrong_channel_count_is_rejected(self):
        with self.assertRaises(ShapeError):
            self.backbone.decode_latents(torch.zeros(1, 1, 4, 4, 3))


class ScheduleTestCase(SimpleTestCase):
    def setUp(self):
        self.schedule = DiffusionSchedule(timesteps=1000)

    def test_alpha_bar_strictly_decreasing(self):
        self.assertTrue(bool((self.schedule.alphas_cumprod[1:] < self.schedule.alphas_cumprod[:-1]).all()))
        self.assertAlmostEqual(float(self.schedule.alpha_bar(-1)), 1.0)

    def test_unit_alpha_bar_returns_clean_latent(self):
        schedule = DiffusionSchedule(betas=torch.full((10,), 1e-12))
        z0 = torch.randn(1, 2, 2, 2, 4)
        noised = schedule.add_noise(z0, 0, torch.randn_like(z0))
        self.assertTrue(torch.allclose(noised, z0, atol=1e-5))

    def test_last_timestep_is_nearly_noise(self):
        z0 = torch.randn(1, 2, 2, 2, 4)
        eps = torch.randn_like(z0)
        noised = self.schedule.add_noise(z0, 999, eps)
        self.assertLess(float((noised - eps).abs().max()), 0.05 * float(z0.abs().max()) + 1e-3)

    def test_noised_second_moment_is_one(self):
        generator = torch.Generator().manual_seed(0)
        z0 = torch.randn(200000, 1, 1, 1, 1, generator=generator)
        eps = torch.randn(200000, 1, 1, 1, 1, generator=generator)
        noised = self.schedule.add_noise(z0, 400, eps)
        self.assertAlmostEqual(float(noised.pow(2).mean()), 1.0, delta=0.02)

    def test_out_of_range_timestep(self):
        z0 = torch.zeros(1, 1, 1, 1, 4)
        with self.assertRaises(TimestepError):
            self.schedule.add_noise(z0, 1000, z0)


class TextEncoderTestCase(SimpleTestCase):
    def test_tokenize_drops_punctuation(self):
        self.assertEqual(tokenize("A panda, skateboarding!"), ['a', 'panda', 'skateboarding'])

    def test_encode_pads_to_max_tokens(self):
        cond = small_backbone().text_encoder.encode("a red square is circling")
        self.assertEqual(tuple(cond.token_embeddings.shape), (32, 16))
        self.assertEqual(cond.tokens[4], 'circling')

    def test_too_long_prompt(self):
        with self.assertRaises(ConditionLengthError):
            small_backbone().text_encoder.encode(' '.join(['word'] * 33))


class UNetForwardTestCase(SimpleTestCase):
    def setUp(self):
        self.backbone = small_backbone()
        generator = torch.Generator().manual_seed(0)
        self.z = torch.randn(1, 4, 4, 4, 4, generator=generator)
        self.cond = self.backbone.text_encoder.encode("a red square is circling")

    def test_output_shape_and_determinism(self):
        first = unet_forward(self.backbone.unet, self.z, 10, self.cond, adapters=[])
        second = unet_forward(self.backbone.unet, self.z, 10, self.cond, adapters=[])
        self.assertEqual(first.shape, self.z.shape)
        self.assertTrue(torch.equal(first, second))

    def test_single_frame_matches_skipped_temporal_path(self):
        single = self.z[:, :1]
        plain = unet_forward(self.backbone.unet, single, 10, self.cond)
        bypassed = unet_forward(self.backbone.unet, single, 10, self.cond, skip_temporal=True)
        self.assertTrue(torch.equal(plain, bypassed))

    def test_functional_weights_match_module(self):
        weights = self.backbone.unet.state_dict()
        direct = unet_forward(self.backbone.unet, self.z, 10, self.cond)
        functional = unet_forward(self.backbone.unet, self.z, 10, self.cond, weights=weights)
        self.assertTrue(torch.allclose(direct, functional, atol=1e-6))

    def test_block_tells_positions_and_frames_apart(self):
        block = self.backbone.unet.blocks['down0']
        flat = torch.ones(1, 2, 2, 2, block.channels)
        out = block(flat, torch.zeros(1, 4 * SMALL.model_width), torch.zeros(1, 3, SMALL.text_dim))
        self.assertFalse(torch.allclose(out[0, 0, 0, 0], out[0, 0, 1, 1]))
        self.assertFalse(torch.allclose(out[0, 0, 0, 0], out[0, 1, 0, 0]))


class GridPositionsTestCase(SimpleTestCase):
    def test_rows_then_columns(self):
        grid = grid_positions(2, 3, 8)
        self.assertEqual(tuple(grid.shape), (6, 8))
        self.assertTrue(torch.equal(grid[0, :4], grid[2, :4]))
        self.assertTrue(torch.equal(grid[0, 4:], grid[3, 4:]))
        self.assertFalse(torch.equal(grid[0], grid[4]))


class BackboneArchiveTestCase(SimpleTestCase):
    def test_same_seed_same_weights(self):
        self.assertEqual(small_backbone().checksum(), small_backbone().checksum())

    def test_every_parameter_frozen(self):
        self.assertFalse(any(p.requires_grad for p in small_backbone().parameters()))

    def test_save_and_load(self):
        backbone = small_backbone()
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'backbone.safetensors'
            save_backbone(backbone, path)
            self.assertEqual(load_backbone(path).checksum(), backbone.checksum())

    def test_wrong_archive_kind(self):
        from apps.core.archive import write_archive
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'other.safetensors'
            write_archive(path, {'x': torch.zeros(1)}, 'adapter_set')
            with self.assertRaises(CheckpointVersionError):
                load_backbone(path)
