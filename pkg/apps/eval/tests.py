import math
import tempfile
from pathlib import Path

import torch
from django.test import SimpleTestCase, tag

from apps.appearance.providers import PALETTE_NAMES, EmbeddingProvider, ToyColorProvider
from apps.appearance.recaptioner import MockRecaptionerClient, PromptSpec
from apps.backbone.tests import small_backbone
from apps.backbone.types import VideoClip
from apps.core.exceptions import (
    EmptyInputError,
    InvalidInputError,
    MissingCheckpointError,
    ProviderError,
    ProviderMismatchError,
    ShapeError,
)
from apps.backbone.weights import Backbone, BackboneConfig
from apps.core.utils import make_generator
from apps.data.datasets import SubjectImages
from apps.data.synth import SynthSpec, synth_dataset, synth_motion_video, synth_subject_images
from apps.eval.benchmark import (
    EvalReport,
    EvalRow,
    decoupling_summary,
    evaluate_benchmark,
    generate_videos,
    select_reference,
)
from apps.eval.embedders import TrajectoryEmbedder, foreground_centroids, get_embedder
from apps.eval.metrics import (
    clip_e,
    clip_t,
    closer_color_fraction,
    color_histogram,
    consecutive_cosine,
    cosine,
    mean_cosine,
    motion_fidelity,
    temp_cons,
)
from apps.motion_enhancer.verbs import RuleTagger
from apps.sampling.config import SampleConfig
from apps.sampling.tests import FAST, crafted_motion
from apps.training.config import TrainConfig
from apps.training.trainer import train_appearance, train_motion


class ScriptedProvider(EmbeddingProvider):
    """Frame ``i`` embeds as ``frame_vectors[i]``; every prompt embeds as ``text_vector``."""
    name = 'scripted'
    space = 'scripted'

    def __init__(self, frame_vectors, text_vector=None, space='scripted'):
        self.frame_vectors = torch.tensor(frame_vectors, dtype=torch.float32)
        self.text_vector = None if text_vector is None else torch.tensor(text_vector, dtype=torch.float32)
        self.space = space
        self.texts = []

    @property
    def image_dimension(self):
        return self.frame_vectors.shape[-1]

    def embed_images(self, frames):
        return self.frame_vectors[:frames.shape[0]]

    def embed_text(self, text):
        self.texts.append(text)
        return self.text_vector


class PassThroughEmbedder:
    """Clips are their own embeddings."""
    name = 'identity'

    def embed(self, clip):
        return clip


def frames(count):
    return torch.zeros(count, 4, 4, 3)


class FrameMetricTestCase(SimpleTestCase):
    def test_identical_embeddings_score_one(self):
        provider = ScriptedProvider([[1.0, 0.0], [2.0, 0.0]], [3.0, 0.0])
        self.assertAlmostEqual(clip_t(frames(2), "a prompt", provider), 1.0)

    def test_orthogonal_embeddings_score_zero(self):
        provider = ScriptedProvider([[1.0, 0.0]], [0.0, 1.0])
        self.assertAlmostEqual(clip_t(frames(1), "a prompt", provider), 0.0)

    def test_clip_t_averages_frames(self):
        provider = ScriptedProvider([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]], [1.0, 0.0])
        self.assertAlmostEqual(clip_t(frames(3), "a prompt", provider), (1.0 + 0.0 + math.sqrt(0.5)) / 3)

    def test_clip_e_scores_the_entity_phrase(self):
        provider = ScriptedProvider([[1.0, 0.0]], [1.0, 0.0])
        clip_e(frames(1), PromptSpec("A panda is skateboarding in the park", verb_index=3), provider)
        self.assertEqual(provider.texts, ['a panda'])

    def test_temp_cons_uses_consecutive_pairs(self):
        provider = ScriptedProvider([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]])
        self.assertAlmostEqual(temp_cons(frames(4), provider), 2.0 / 3.0)

    def test_temp_cons_needs_two_frames(self):
        with self.assertRaises(ShapeError):
            temp_cons(frames(1), ScriptedProvider([[1.0, 0.0]]))
        with self.assertRaises(ShapeError):
            consecutive_cosine(torch.ones(1, 2))

    def test_text_from_another_space(self):
        provider = ScriptedProvider([[1.0, 0.0]], [1.0, 0.0])
        with self.assertRaises(ProviderMismatchError):
            clip_t(frames(1), "a prompt", provider, text_provider=ToyColorProvider())

    def test_width_mismatch(self):
        with self.assertRaises(ProviderMismatchError):
            mean_cosine(torch.ones(2, 3), torch.ones(4))

    def test_zero_frame_embedding(self):
        with self.assertRaises(ProviderError):
            clip_t(frames(1), "a prompt", ScriptedProvider([[0.0, 0.0]], [1.0, 0.0]))


class MotionFidelityTestCase(SimpleTestCase):
    def test_mean_of_per_motion_means(self):
        generated = {
            'circle': [torch.tensor([1.0, 0.0]), torch.tensor([0.0, 1.0])],
            'sweep': [torch.tensor([0.0, 2.0])],
        }
        references = {'circle': torch.tensor([1.0, 0.0]), 'sweep': torch.tensor([0.0, 1.0])}
        self.assertAlmostEqual(motion_fidelity(generated, references, PassThroughEmbedder()), 0.75)

    def test_missing_reference(self):
        with self.assertRaises(EmptyInputError):
            motion_fidelity({'circle': [torch.ones(2)]}, {}, PassThroughEmbedder())

    def test_no_clips(self):
        with self.assertRaises(EmptyInputError):
            motion_fidelity({}, {}, PassThroughEmbedder())
        with self.assertRaises(EmptyInputError):
            motion_fidelity({'circle': []}, {'circle': torch.ones(2)}, PassThroughEmbedder())


class ColorFractionTestCase(SimpleTestCase):
    def test_counts_frames_closer_to_target(self):
        video = torch.stack([
            torch.tensor([1.0, 0.0, 0.0]).expand(4, 4, 3),
            torch.tensor([0.0, 0.0, 1.0]).expand(4, 4, 3),
            torch.tensor([1.0, 0.0, 0.0]).expand(4, 4, 3),
            torch.tensor([0.0, 1.0, 0.0]).expand(4, 4, 3),
        ])
        self.assertEqual(closer_color_fraction(VideoClip(video), 'red', 'blue'), 0.5)

    def test_unknown_colour(self):
        with self.assertRaises(InvalidInputError):
            closer_color_fraction(VideoClip(torch.zeros(1, 4, 4, 3)), 'teal', 'blue')


class TrajectoryEmbedderTestCase(SimpleTestCase):
    def setUp(self):
        self.embedder = TrajectoryEmbedder()

    def sweep(self, color='red', background='white'):
        spec = SynthSpec(color=color, background=background, trajectory='sweep', size=6.0)
        return synth_motion_video(spec, frames=6, height=32, width=32)

    def test_single_pixel_centroid(self):
        video = torch.zeros(2, 5, 5, 3)
        video[0, 1, 3] = 1.0
        centroids = foreground_centroids(video)
        self.assertTrue(torch.allclose(centroids[0], torch.tensor([1.0, 3.0], dtype=torch.float64)))
        self.assertTrue(torch.equal(centroids[1], centroids[0]))

    def test_unit_norm_and_dimension(self):
        vector = self.embedder.embed(self.sweep())
        self.assertEqual(vector.shape[0], self.embedder.dimension)
        self.assertEqual(self.embedder.dimension, 20)
        self.assertAlmostEqual(float(vector.norm()), 1.0)

    def test_appearance_does_not_change_embedding(self):
        first = self.embedder.embed(self.sweep('red', 'white'))
        second = self.embedder.embed(self.sweep('blue', 'black'))
        self.assertLess(float((first - second).abs().max()), 1e-5)

    def test_reversed_motion_is_orthogonal(self):
        clip = self.sweep()
        forward = self.embedder.embed(clip)
        backward = self.embedder.embed(clip.reversed())
        self.assertAlmostEqual(float(forward @ backward), 0.0)

    def test_circle_turns_one_way(self):
        clip = synth_motion_video(SynthSpec(trajectory='circle', size=6.0), frames=8, height=32, width=32)
        features = self.embedder.features(foreground_centroids(clip.frames))
        turning = features[-2:]
        self.assertGreater(float(turning.abs().sum()), 0.0)
        self.assertEqual(float(turning.min()), 0.0)

    def test_single_frame(self):
        with self.assertRaises(ShapeError):
            self.embedder.embed(torch.zeros(1, 8, 8, 3))

    def test_unknown_embedder(self):
        with self.assertRaises(ProviderError):
            get_embedder('nope')


class EvalReportTestCase(SimpleTestCase):
    def setUp(self):
        self.report = EvalReport(
            rows=[
                EvalRow('circle', 0, 'p0', 0.2, 0.4, 0.9, 1.0),
                EvalRow('circle', 1, 'p1', 0.4, 0.6, 0.7, 0.5),
                EvalRow('sweep', 0, 'p2', 0.6, 0.2, 0.8, 0.0),
            ],
            metadata={'provider': 'toy', 'reference_seed': 3},
        )

    def test_aggregate(self):
        aggregate = self.report.aggregate()
        self.assertEqual(aggregate.motion, 'mean')
        self.assertAlmostEqual(aggregate.clip_t, 0.4)
        self.assertAlmostEqual(aggregate.mofid, 0.5)

    def test_motion_fidelity_weights_motions_equally(self):
        self.assertAlmostEqual(self.report.motion_fidelity(), (0.75 + 0.0) / 2)

    def test_write_table(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = self.report.write_table(Path(tmp) / 'table.tsv')
            lines = path.read_text().splitlines()
        self.assertEqual(lines[:2], ['# provider: toy', '# reference_seed: 3'])
        self.assertEqual(lines[2], 'motion\ttemplate\tprompt\tclip_t\tclip_e\ttemp_cons\tmofid')
        self.assertEqual(lines[3], 'circle\t0\tp0\t0.200000\t0.400000\t0.900000\t1.000000')
        self.assertTrue(lines[-1].startswith('mean\t-1\t\t0.400000'))
        self.assertEqual(len(lines), 7)

    def test_reference_choice_is_seeded(self):
        clips = list(range(10))
        self.assertEqual(select_reference(clips, torch.Generator().manual_seed(9)),
                         select_reference(clips, torch.Generator().manual_seed(9)))


@tag('slow')
class BenchmarkTestCase(SimpleTestCase):
    def setUp(self):
        self.backbone = small_backbone()
        self.motion = crafted_motion(self.backbone)
        spec = SynthSpec(trajectory='circle', size=4.0)
        self.references = [synth_motion_video(spec, frames=2, height=16, width=16)]

    def test_six_rows_per_motion(self):
        report = evaluate_benchmark(
            self.backbone, {'circle': self.motion}, {'circle': self.references},
            ToyColorProvider(), TrajectoryEmbedder(), config=FAST, seed=4, workers=2,
        )
        self.assertEqual(len(report.rows), 6)
        self.assertEqual([row.template for row in report.rows], list(range(6)))
        self.assertTrue(all('circling' in row.prompt for row in report.rows))
        self.assertEqual(report.metadata['reference.circle'], 0)
        self.assertEqual(report.metadata['checkpoint.circle'], self.motion.checksum())
        for row in report.rows:
            self.assertTrue(-1.0 <= row.mofid <= 1.0)
            self.assertTrue(0.0 <= row.clip_t <= 1.0)

    def test_missing_checkpoint(self):
        with self.assertRaises(MissingCheckpointError):
            evaluate_benchmark(self.backbone, {}, {'circle': self.references},
                               ToyColorProvider(), TrajectoryEmbedder(), config=FAST)

    def test_decoupling_summary(self):
        prompts = [PromptSpec("a blue triangle is circling", verb_index=4)]
        summary = decoupling_summary(self.backbone, self.motion, self.references, prompts,
                                     TrajectoryEmbedder(), 'blue', 'red', config=FAST)
        self.assertEqual(summary['reference_index'], 0)
        self.assertAlmostEqual(summary['mofid_gain'], summary['mofid'] - summary['mofid_untuned'])
        self.assertTrue(0.0 <= summary['closer_to_target'] <= 1.0)


@tag('slow')
class DecouplingRunTestCase(SimpleTestCase):
    """
    Default-setting runs on the full desk backbone: four red-square circle
    clips train the motion, eight green-triangle stills train a subject.
    """
    seeds = 4

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.backbone = Backbone(BackboneConfig())
        specs = [SynthSpec(color='red', jitter_seed=index) for index in range(4)]
        cls.dataset = synth_dataset(specs, 'circle')
        config = TrainConfig()
        spatial, _ = train_appearance(cls.backbone, cls.dataset, config,
                                      client=MockRecaptionerClient(), instruction='')
        cls.motion, _ = train_motion(cls.backbone, cls.dataset, spatial, config,
                                     provider=ToyColorProvider(), tagger=RuleTagger())
        stills = synth_subject_images(SynthSpec(shape='triangle', color='green', jitter_seed=7), count=8)
        cls.subject, _ = train_appearance(
            cls.backbone, SubjectImages('green-triangle', stills, "a green triangle"),
            TrainConfig(use_recaptioner=False),
        )
        cls.sample = SampleConfig.from_settings()
        cls.embedder = TrajectoryEmbedder()
        _, reference = select_reference(cls.dataset.clips, make_generator(0))
        cls.anchor = cls.embedder.embed(reference)

    def scores(self, motion=None, subject=None):
        prompts = [PromptSpec("a triangle is circling", verb_index=3)] * self.seeds
        videos = generate_videos(self.backbone, prompts, self.sample, motion=motion, subject=subject)
        green = PALETTE_NAMES.index('green')
        mofid = sum(cosine(self.anchor, self.embedder.embed(video)) for video in videos) / len(videos)
        share = sum(float(color_histogram(video)[:, green].mean()) for video in videos) / len(videos)
        return mofid, share

    def test_motion_transfers_without_the_training_appearance(self):
        prompts = [PromptSpec("a blue triangle is circling", verb_index=4)] * self.seeds
        summary = decoupling_summary(self.backbone, self.motion, self.dataset.clips, prompts,
                                     self.embedder, 'blue', 'red', config=self.sample)
        self.assertGreaterEqual(summary['mofid_gain'], 0.15)
        self.assertGreaterEqual(summary['closer_to_target'], 0.8)

    def test_subject_and_motion_compose(self):
        _, motion_green = self.scores(motion=self.motion)
        subject_mofid, _ = self.scores(subject=self.subject)
        both_mofid, both_green = self.scores(motion=self.motion, subject=self.subject)
        self.assertGreater(both_green, motion_green)
        self.assertGreater(both_mofid, subject_mofid)
