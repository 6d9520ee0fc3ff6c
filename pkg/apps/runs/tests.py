import io
import json
import shutil
import tempfile
from pathlib import Path
from unittest import mock

from django.conf import settings
from django.db import DatabaseError
from django.test import SimpleTestCase, TestCase, tag

from apps.backbone.tests import small_backbone
from apps.backbone.weights import build_backbone, load_backbone, save_backbone
from apps.core.exceptions import ConfigValidationError
from apps.data.datasets import RECAPTION_CACHE
from apps.data.prompts import SYNTH_CONTEXTS, SYNTH_SUBJECTS
from apps.runs.cli import COMMANDS, cli_dispatch
from apps.runs.manifest import RunRecorder, load_manifest, store_manifest
from apps.runs.models import RunArtifact, RunManifest
from apps.training.checkpoints import load_motion_checkpoint, load_spatial_checkpoint

SMALL_SYNTH = ['--clips', '2', '--frames', '4', '--height', '16', '--width', '16', '--size', '4']


def dispatch(argv):
    stdout, stderr = io.StringIO(), io.StringIO()
    status = cli_dispatch(argv, stdout=stdout, stderr=stderr)
    return status, stdout.getvalue(), stderr.getvalue()


class DispatchTestCase(SimpleTestCase):
    def test_no_arguments_prints_usage(self):
        status, _, stderr = dispatch([])
        self.assertEqual(status, 2)
        self.assertIn('usage: manage.py <subcommand>', stderr)
        for name in COMMANDS:
            self.assertIn(name, stderr)

    def test_help(self):
        status, stdout, _ = dispatch(['--help'])
        self.assertEqual(status, 0)
        self.assertIn('train-motion', stdout)

    def test_unknown_subcommand(self):
        status, _, stderr = dispatch(['dance'])
        self.assertEqual(status, 2)
        self.assertIn("Unknown subcommand 'dance'", stderr)

    def test_bad_option_is_a_usage_error(self):
        status, _, _ = dispatch(['synth-data', '--out', 'x', '--trajectory', 'spiral'])
        self.assertEqual(status, 2)

    def test_missing_required_option(self):
        status, _, _ = dispatch(['synth-data'])
        self.assertEqual(status, 2)


class SynthDataCommandTestCase(TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp)

    def test_writes_dataset_and_manifest(self):
        out = self.tmp / 'circle'
        status, stdout, _ = dispatch(['synth-data', '--out', str(out), '--seed', '5', *SMALL_SYNTH])
        self.assertEqual(status, 0)
        self.assertIn("Wrote 2 clips of 'circle'", stdout)
        self.assertTrue((out / 'meta.json').is_file())
        self.assertEqual(len(list((out / 'clips' / 'clip01.frames').glob('*.png'))), 4)
        manifest = load_manifest(out / 'manifest.json')
        self.assertEqual(manifest['command'], 'synth-data')
        self.assertEqual(manifest['exit_status'], 0)
        self.assertEqual(manifest['seeds'], {'jitter': 5})
        self.assertEqual(manifest['outputs'][0]['role'], 'dataset')
        run = RunManifest.objects.get()
        self.assertEqual(run.manifest_path, str(out / 'manifest.json'))
        self.assertEqual(run.artifacts.count(), 1)

    def test_underscore_name_is_accepted(self):
        status, _, _ = dispatch(['synth_data', '--out', str(self.tmp / 'lift'), '--trajectory', 'lift', *SMALL_SYNTH])
        self.assertEqual(status, 0)
        self.assertEqual(json.loads((self.tmp / 'lift' / 'meta.json').read_text())['motion_id'], 'lift')

    def test_invalid_input_exits_three_and_still_records(self):
        out = self.tmp / 'bad'
        status, _, stderr = dispatch(['synth-data', '--out', str(out), '--colors', 'teal', *SMALL_SYNTH])
        self.assertEqual(status, 3)
        self.assertIn('InvalidInputError', stderr)
        self.assertEqual(load_manifest(out / 'manifest.json')['exit_status'], 3)

    def test_subject_images(self):
        out = self.tmp / 'subject'
        status, _, _ = dispatch(['synth-data', '--out', str(out), '--subject', '--shapes', 'triangle', *SMALL_SYNTH])
        self.assertEqual(status, 0)
        self.assertEqual(sorted(path.name for path in out.glob('*.png')), ['image00.png', 'image01.png'])


class RunRecorderTestCase(TestCase):
    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp)
        self.recorder = RunRecorder('train-motion', {'motion_id': 'circle', 'out': self.tmp / 'ckpt'})
        self.recorder.manifest_path = self.tmp / 'manifest.json'

    def test_manifest_contents(self):
        artifact = self.tmp / 'weights.bin'
        artifact.write_bytes(b'abc')
        self.recorder.set_config({'lora_rank': 4}, {'defaults': {'lora_rank': 32}, 'flags': {'lora_rank': 4}})
        self.recorder.add_input('dataset', self.tmp / 'data')
        self.recorder.add_input('appearance', None)
        self.recorder.add_output('checkpoint', artifact)
        self.recorder.add_seed('train', 7)
        self.recorder.add_checkpoint('backbone', 'f' * 64)
        path = self.recorder.finish(0, 1.25)

        manifest = load_manifest(path)
        self.assertEqual(manifest['options']['out'], str(self.tmp / 'ckpt'))
        self.assertEqual(manifest['inputs'], {'dataset': str(self.tmp / 'data')})
        self.assertEqual(
            manifest['outputs'][0]['sha256'],
            'ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad',
        )
        self.assertEqual(manifest['config_layers']['flags'], {'lora_rank': 4})
        self.assertEqual(manifest['wallclock'], 1.25)

        run = RunManifest.objects.get()
        self.assertEqual(run.command, 'train-motion')
        self.assertEqual(run.seeds, {'train': 7})
        self.assertEqual(run.config_hash, manifest['config_hash'])
        self.assertEqual(RunArtifact.objects.get().role, 'checkpoint')

    def test_same_config_same_hash(self):
        other = RunRecorder('train-motion')
        self.recorder.set_config({'a': 1, 'b': 2})
        other.set_config({'b': 2, 'a': 1})
        self.assertEqual(self.recorder.record(0, 0)['config_hash'], other.record(0, 0)['config_hash'])

    def test_database_failure_keeps_the_json(self):
        with mock.patch.object(RunManifest.objects, 'create', side_effect=DatabaseError('no such table')):
            with self.assertLogs('apps.runs.manifest', level='WARNING'):
                path = self.recorder.finish(1, 0.5)
        self.assertEqual(load_manifest(path)['exit_status'], 1)
        self.assertFalse(RunManifest.objects.exists())

    def test_store_returns_the_row(self):
        record = self.recorder.record(0, 0.1)
        run = store_manifest(record, self.tmp / 'manifest.json')
        self.assertEqual(run.exit_status, 0)
        self.assertEqual(str(run), f"train-motion ({record['config_hash'][:12]}) -> 0")


class LoadManifestTestCase(SimpleTestCase):
    def test_rejects_wrong_version(self):
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / 'manifest.json'
            record = RunRecorder('generate').record(0, 0.0)
            record['format_version'] = 99
            path.write_text(json.dumps(record))
            with self.assertRaises(ConfigValidationError):
                load_manifest(path)


class ExportBackboneCommandTestCase(TestCase):
    def test_archive_reloads_to_the_same_weights(self):
        with tempfile.TemporaryDirectory() as tmp:
            out = Path(tmp) / 'backbone.safetensors'
            status, stdout, _ = dispatch(['export-backbone', '--out', str(out)])
            self.assertEqual(status, 0)
            checksum = build_backbone().checksum()
            self.assertIn(checksum[:12], stdout)
            self.assertEqual(load_backbone(str(out)).checksum(), checksum)
            manifest = load_manifest(out.with_suffix('.manifest.json'))
            self.assertEqual(manifest['checkpoint_hashes'], {'backbone': checksum})
            self.assertEqual(manifest['outputs'][0]['role'], 'backbone')


class PipelineCommandsTestCase(TestCase):
    """The commands end to end on a small backbone and a tiny synthetic dataset."""

    def setUp(self):
        self.tmp = Path(tempfile.mkdtemp())
        self.addCleanup(shutil.rmtree, self.tmp)
        self.backbone = self.tmp / 'backbone.safetensors'
        save_backbone(small_backbone(), self.backbone)
        self.dataset = self.tmp / 'circle'
        status, _, _ = dispatch(['synth-data', '--out', str(self.dataset), *SMALL_SYNTH])
        self.assertEqual(status, 0)

    def train_appearance(self, *extra):
        out = self.tmp / 'spatial.safetensors'
        status, _, stderr = dispatch([
            'train-appearance', '--dataset', str(self.dataset), '--out', str(out),
            '--backbone', str(self.backbone), '--steps', '2', '--rank', '2', *extra,
        ])
        self.assertEqual(status, 0, stderr)
        return out, load_manifest(out.with_suffix('.manifest.json'))

    def train_motion(self, spatial):
        out = self.tmp / 'motion.safetensors'
        status, stdout, stderr = dispatch([
            'train-motion', '--dataset', str(self.dataset), '--spatial', str(spatial), '--out', str(out),
            '--backbone', str(self.backbone), '--steps', '2', '--rank', '2', '--frames', '4',
        ])
        self.assertEqual(status, 0, stderr)
        self.assertIn("Wrote motion checkpoint for 'circle'", stdout)
        return out

    def test_recaption_writes_the_cache(self):
        status, stdout, _ = dispatch(['recaption', '--dataset', str(self.dataset)])
        self.assertEqual(status, 0)
        self.assertTrue((self.dataset / RECAPTION_CACHE).is_file())
        self.assertEqual(len([line for line in stdout.splitlines() if '\t' in line]), 2)
        manifest = load_manifest((self.dataset / RECAPTION_CACHE).with_suffix('.manifest.json'))
        self.assertEqual(manifest['config']['recaptioner'], 'mock')

    def test_train_appearance_records_flags_over_defaults(self):
        out, manifest = self.train_appearance()
        self.assertEqual(load_spatial_checkpoint(out).config['lora_rank'], 2)
        self.assertEqual(manifest['config_layers']['flags'], {'max_steps': 2, 'lora_rank': 2})
        self.assertEqual(manifest['config']['learning_rate'], settings.MOTION_TRANSFER['TRAIN']['learning_rate'])
        self.assertEqual(len(out.with_suffix('.log.jsonl').read_text().splitlines()), 2)
        self.assertNotIn('recaptions', manifest['inputs'])

    def test_train_appearance_uses_the_stored_recaptions(self):
        self.assertEqual(dispatch(['recaption', '--dataset', str(self.dataset)])[0], 0)
        _, manifest = self.train_appearance()
        self.assertEqual(manifest['inputs']['recaptions'], str(self.dataset / RECAPTION_CACHE))

    def test_stored_recaptions_are_ignored_without_the_recaptioner(self):
        self.assertEqual(dispatch(['recaption', '--dataset', str(self.dataset)])[0], 0)
        _, manifest = self.train_appearance('--no-recaptioner')
        self.assertNotIn('recaptions', manifest['inputs'])

    def test_train_motion(self):
        spatial, _ = self.train_appearance()
        out = self.train_motion(spatial)
        checkpoint = load_motion_checkpoint(out)
        self.assertEqual(checkpoint.motion_id, 'circle')
        manifest = load_manifest(out.with_suffix('.manifest.json'))
        self.assertEqual(manifest['config']['frames_per_sample'], 4)
        self.assertEqual(manifest['checkpoint_hashes']['spatial'], load_spatial_checkpoint(spatial).checksum())

    def test_generate_with_settings_defaults(self):
        out = self.tmp / 'default'
        status, stdout, stderr = dispatch([
            'generate', '--prompt', 'a red square is circling', '--out', str(out), '--backbone', str(self.backbone),
        ])
        self.assertEqual(status, 0, stderr)
        defaults = settings.MOTION_TRANSFER['SAMPLE']
        self.assertIn(f"Wrote {defaults['frames']} frames", stdout)
        manifest = load_manifest(out / 'manifest.json')
        self.assertEqual(manifest['config_layers']['flags'], {})
        for key, value in defaults.items():
            self.assertEqual(manifest['config'][key], value)
        self.assertEqual(len(list((out / 'frames').glob('*.png'))), defaults['frames'])

    def test_generate_flags(self):
        out = self.tmp / 'flags'
        status, _, stderr = dispatch([
            'generate', '--prompt', 'a red square is circling', '--out', str(out), '--backbone', str(self.backbone),
            '--steps', '30', '--cfg', '12', '--frames', '2', '--seed', '4',
        ])
        self.assertEqual(status, 0, stderr)
        manifest = load_manifest(out / 'manifest.json')
        self.assertEqual(manifest['config']['num_steps'], 30)
        self.assertEqual(manifest['config']['guidance_scale'], 12.0)
        self.assertEqual(manifest['seeds'], {'sample': 4})
        self.assertEqual(json.loads((out / 'metadata.json').read_text())['seed'], 4)

    def test_generate_full_scale_defaults(self):
        out = self.tmp / 'full'
        status, _, stderr = dispatch([
            'generate', '--prompt', 'a red square is circling', '--out', str(out), '--backbone', str(self.backbone),
            '--full-scale', '--frames', '2', '--height', '16', '--width', '16', '--steps', '2',
        ])
        self.assertEqual(status, 0, stderr)
        manifest = load_manifest(out / 'manifest.json')
        full_scale = settings.MOTION_TRANSFER['FULL_SCALE']
        self.assertEqual(manifest['config_layers']['defaults']['frames'], full_scale['FRAMES'])
        self.assertEqual(manifest['config_layers']['defaults']['height'], full_scale['HEIGHT'])
        self.assertEqual(manifest['config']['frames'], 2)
        self.assertEqual(manifest['config']['fps'], full_scale['FPS'])

    def test_generate_with_motion_checkpoint(self):
        spatial, _ = self.train_appearance()
        motion = self.train_motion(spatial)
        out = self.tmp / 'transfer'
        status, _, stderr = dispatch([
            'generate', '--prompt', 'a blue triangle is circling', '--out', str(out),
            '--backbone', str(self.backbone), '--motion', str(motion), '--frames', '4', '--steps', '2',
        ])
        self.assertEqual(status, 0, stderr)
        metadata = json.loads((out / 'metadata.json').read_text())
        self.assertEqual(metadata['checkpoint_hashes']['motion'], load_motion_checkpoint(motion).checksum())

    @tag('slow')
    def test_evaluate_uses_the_synthetic_subjects(self):
        spatial, _ = self.train_appearance()
        motion = self.train_motion(spatial)
        table = self.tmp / 'table.tsv'
        status, stdout, stderr = dispatch([
            'evaluate', '--checkpoint', str(motion), '--references', str(self.dataset), '--out', str(table),
            '--backbone', str(self.backbone), '--frames', '4', '--steps', '2',
        ])
        self.assertEqual(status, 0, stderr)
        self.assertIn('clip_t', stdout)
        lines = [line for line in table.read_text().splitlines() if not line.startswith('#')]
        header, *rows = [line.split('\t') for line in lines]
        self.assertEqual(header[:3], ['motion', 'template', 'prompt'])
        self.assertEqual(len(rows), len(SYNTH_SUBJECTS) * len(SYNTH_CONTEXTS) + 1)
        self.assertEqual(rows[-1][0], 'mean')
        prompts = [row[2] for row in rows[:-1]]
        for subject in SYNTH_SUBJECTS:
            self.assertTrue(any(subject in prompt for prompt in prompts), subject)
        manifest = load_manifest(table.with_suffix('.manifest.json'))
        self.assertEqual(manifest['config']['subjects'], list(SYNTH_SUBJECTS))
