import json
import shutil
import tempfile
from pathlib import Path

import torch
from django.test import SimpleTestCase
from PIL import Image

from apps.appearance.recaptioner import PromptSpec
from apps.backbone.types import VideoClip
from apps.core.exceptions import (
    DatasetEmptyError,
    DatasetValidationError,
    EmptyInputError,
    InvalidInputError,
    TrajectoryOutOfFrameError,
)
from apps.data.datasets import (
    MotionDataset,
    load_motion_dataset,
    load_recaption_cache,
    load_subject_images,
    save_motion_dataset,
    save_recaption_cache,
)
from apps.data.prompts import SYNTH_CONTEXTS, SYNTH_SUBJECTS, build_eval_prompts, entity_prompt
from apps.data.synth import (
    SynthSpec,
    resolve_color,
    synth_dataset,
    synth_motion_video,
    synth_subject_images,
    trajectory_centers,
)
from apps.eval.embedders import foreground_centroids


def circle_specs():
    return [
        SynthSpec(shape='square', color='red', size=4.0, jitter_seed=0),
        SynthSpec(shape='disk', color='blue', size=4.0, jitter_seed=1),
    ]


class SynthTestCase(SimpleTestCase):
    def test_circle_follows_its_path(self):
        spec = SynthSpec(shape='disk', color='green', background='black', size=6.0, jitter_seed=2)
        clip = synth_motion_video(spec, frames=8, height=32, width=32)
        expected = trajectory_centers('circle', 8, 32, 32, 6.0, jitter_seed=2) - 0.5
        measured = foreground_centroids(clip.frames)
        self.assertLess(float((measured - expected).abs().max()), 0.5)
        radii = (measured - 15.5).norm(dim=-1)
        self.assertLess(float((radii - 11.0).abs().max()), 0.5)

    def test_trajectory_ignores_appearance(self):
        red = synth_motion_video(SynthSpec(shape='square', color='red', trajectory='lift'), frames=6)
        blue = synth_motion_video(SynthSpec(shape='square', color='blue', background='yellow',
                                            trajectory='lift'), frames=6)
        red_mask = (red.frames != torch.tensor([1.0, 1.0, 1.0])).any(dim=-1)
        blue_mask = (blue.frames != torch.tensor([1.0, 1.0, 0.0])).any(dim=-1)
        self.assertTrue(torch.equal(red_mask, blue_mask))

    def test_jitter_changes_the_path(self):
        first = trajectory_centers('sweep', 6, 32, 32, 8.0, jitter_seed=0)
        second = trajectory_centers('sweep', 6, 32, 32, 8.0, jitter_seed=1)
        self.assertFalse(torch.equal(first, second))
        self.assertTrue(torch.equal(first[:, 1], second[:, 1]))

    def test_prompt_names_the_motion_verb(self):
        spec = SynthSpec(color=(0.9, 0.1, 0.1), trajectory='bounce', background='white')
        self.assertEqual(spec.prompt(), "a red square is bouncing on a white background")

    def test_shape_too_large_for_frame(self):
        with self.assertRaises(TrajectoryOutOfFrameError):
            synth_motion_video(SynthSpec(size=20.0), frames=4, height=16, width=16)

    def test_bad_inputs(self):
        with self.assertRaises(InvalidInputError):
            resolve_color('teal')
        with self.assertRaises(InvalidInputError):
            SynthSpec(shape='hexagon')
        with self.assertRaises(InvalidInputError):
            synth_dataset([SynthSpec(trajectory='circle'), SynthSpec(trajectory='lift')], 'mixed')

    def test_dataset_prompts_and_verb(self):
        dataset = synth_dataset(circle_specs(), 'circle', frames=4, height=16, width=16)
        self.assertEqual(dataset.verb, 'circling')
        self.assertEqual(dataset.names, ['clip00', 'clip01'])
        self.assertEqual([spec.verb_index for spec in dataset.prompt_specs()], [4, 4])

    def test_subject_images(self):
        images = synth_subject_images(SynthSpec(shape='triangle', color='blue'), count=3)
        self.assertEqual(len(images), 3)
        self.assertTrue(all(image.frame_count == 1 for image in images))
        self.assertFalse(torch.equal(images[0].frames, images[1].frames))


class MotionDatasetTestCase(SimpleTestCase):
    def test_empty(self):
        with self.assertRaises(DatasetEmptyError):
            MotionDataset('circle', [], [], 'circling')

    def test_every_violation_is_reported(self):
        clips = [VideoClip(torch.zeros(2, 8, 8, 3)), VideoClip(torch.zeros(2, 4, 4, 3), fps=4.0)]
        with self.assertRaises(DatasetValidationError) as caught:
            MotionDataset('circle', clips, ["a square is circling", "a square is bouncing"], 'circling')
        self.assertEqual(len(caught.exception.violations), 3)


class DatasetDirectoryTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp)
        self.dataset = synth_dataset(circle_specs(), 'circle', frames=4, height=16, width=16)
        self.root = save_motion_dataset(self.dataset, self.tmp / 'circle')

    def test_save_and_load(self):
        loaded = load_motion_dataset(self.root)
        self.assertEqual(loaded.motion_id, 'circle')
        self.assertEqual(loaded.names, self.dataset.names)
        self.assertEqual(loaded.base_prompts, self.dataset.base_prompts)
        for original, clip in zip(self.dataset.clips, loaded.clips):
            self.assertLessEqual(float((original.frames - clip.frames).abs().max()), 0.5 / 255 + 1e-6)

    def test_frame_gap(self):
        (self.root / 'clips' / 'clip00.frames' / '0001.png').unlink()
        with self.assertRaises(DatasetValidationError) as caught:
            load_motion_dataset(self.root)
        self.assertIn('numbered', caught.exception.violations[0])

    def test_problems_are_collected(self):
        (self.root / 'clips' / 'stray.frames').mkdir()
        (self.root / 'prompts.txt').write_text("clip00\ta red square is circling on a white background\n")
        with self.assertRaises(DatasetValidationError) as caught:
            load_motion_dataset(self.root)
        violations = caught.exception.violations
        self.assertEqual(len(violations), 2)
        self.assertTrue(any('stray' in item for item in violations))
        self.assertTrue(any('clip01' in item for item in violations))

    def test_prompt_without_verb(self):
        (self.root / 'prompts.txt').write_text("clip00\ta red square\nclip01\ta blue disk is circling\n")
        with self.assertRaises(DatasetValidationError):
            load_motion_dataset(self.root)

    def test_bad_meta(self):
        meta = json.loads((self.root / 'meta.json').read_text())
        meta['clips']['bad name'] = {'fps': -1}
        (self.root / 'meta.json').write_text(json.dumps(meta))
        with self.assertRaises(DatasetValidationError):
            load_motion_dataset(self.root)

    def test_no_clips_listed(self):
        meta = json.loads((self.root / 'meta.json').read_text())
        meta['clips'] = {}
        (self.root / 'meta.json').write_text(json.dumps(meta))
        with self.assertRaises(DatasetEmptyError):
            load_motion_dataset(self.root)

    def test_missing_meta(self):
        (self.root / 'meta.json').unlink()
        with self.assertRaises(DatasetValidationError):
            load_motion_dataset(self.root)

    def test_recaption_cache(self):
        loaded = load_motion_dataset(self.root)
        specs = [PromptSpec(prompt, f"{prompt} in detail", 4) for prompt in loaded.base_prompts]
        save_recaption_cache(loaded, specs)
        self.assertEqual(load_recaption_cache(loaded), specs)

    def test_recaption_cache_missing_clip(self):
        loaded = load_motion_dataset(self.root)
        save_recaption_cache(loaded, loaded.prompt_specs()[:1])
        with self.assertRaises(DatasetValidationError) as caught:
            load_recaption_cache(loaded)
        self.assertIn('clip01', caught.exception.violations[0])


class SubjectImagesTestCase(SimpleTestCase):
    def test_load_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            for index, image in enumerate(synth_subject_images(SynthSpec(color='green'), count=2)):
                pixels = (image.frames[0] * 255).round().byte().numpy()
                Image.fromarray(pixels).save(Path(tmp) / f'image{index:02d}.png')
            subject = load_subject_images(tmp, "a photo of a green square", subject_id='green-square')
        self.assertEqual(len(subject), 2)
        self.assertEqual(subject.motion_id, 'green-square')
        self.assertEqual([spec.verb_index for spec in subject.prompt_specs()], [None, None])

    def test_empty_directory(self):
        with tempfile.TemporaryDirectory() as tmp:
            with self.assertRaises(DatasetEmptyError):
                load_subject_images(tmp, "a photo of nothing")


class EvalPromptsTestCase(SimpleTestCase):
    def test_six_prompts_cycle_subjects_within_contexts(self):
        specs = build_eval_prompts(SYNTH_SUBJECTS, SYNTH_CONTEXTS, 'circling')
        self.assertEqual(len(specs), 6)
        self.assertEqual(specs[0].base_prompt, "A blue triangle is circling on a white background")
        self.assertEqual(specs[3].base_prompt, "A blue triangle is circling on a black background")
        self.assertTrue(all(spec.tokens[spec.verb_index] == 'circling' for spec in specs))

    def test_fewer_pairs_repeat(self):
        specs = build_eval_prompts(['cat'], ['in the living room'], 'running')
        self.assertEqual({spec.base_prompt for spec in specs}, {"A cat is running in the living room"})

    def test_empty_inputs(self):
        with self.assertRaises(EmptyInputError):
            build_eval_prompts([], SYNTH_CONTEXTS, 'circling')

    def test_entity_prompt(self):
        self.assertEqual(entity_prompt("A panda is skateboarding in the park"), 'a panda')
        self.assertEqual(entity_prompt(PromptSpec("a dog runs fast", verb_index=2)), 'a dog')
