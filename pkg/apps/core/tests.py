import tempfile
from pathlib import Path

import torch
from django.test import SimpleTestCase
from rest_framework import serializers
from safetensors.torch import save_file

from apps.core import exceptions
from apps.core.archive import read_archive, write_archive
from apps.core.config import parse_config_file, resolve_layers, validate_layer
from apps.core.utils import config_hash, seeded, tensor_checksum


class ToyConfigSerializer(serializers.Serializer):
    rank = serializers.IntegerField(min_value=1)
    rate = serializers.FloatField(required=False, allow_null=True)


class ConfigFileTestCase(SimpleTestCase):
    def write(self, text):
        handle = tempfile.NamedTemporaryFile('w', suffix='.cfg', delete=False)
        handle.write(text)
        handle.close()
        self.addCleanup(Path(handle.name).unlink)
        return handle.name

    def test_parses_comments_and_spaces(self):
        path = self.write("# stage two\nrank = 4   # small\n\nrate=0.5\n")
        self.assertEqual(parse_config_file(path), {'rank': '4', 'rate': '0.5'})

    def test_every_bad_line_is_reported(self):
        path = self.write("rank 4\nrate = 1\nrate = 2\n")
        with self.assertRaises(exceptions.ConfigValidationError) as caught:
            parse_config_file(path)
        self.assertEqual(set(caught.exception.errors), {'line 1', 'rate'})


class LayeringTestCase(SimpleTestCase):
    def test_flags_override_file_override_defaults(self):
        merged, layers = resolve_layers(ToyConfigSerializer, {'rank': 32, 'rate': 0.1},
                                        {'rank': '8'}, {'rate': 0.5, 'rank': None})
        self.assertEqual(merged, {'rank': 8, 'rate': 0.5})
        self.assertEqual(layers['flags'], {'rate': 0.5})
        self.assertEqual(layers['config_file'], {'rank': 8})

    def test_null_words(self):
        self.assertEqual(validate_layer(ToyConfigSerializer, {'rate': 'None'}), {'rate': None})

    def test_unknown_key(self):
        with self.assertRaises(exceptions.ConfigValidationError) as caught:
            validate_layer(ToyConfigSerializer, {'rnak': 4})
        self.assertEqual(caught.exception.errors, {'rnak': ['Unknown setting.']})

    def test_merged_result_must_be_complete(self):
        with self.assertRaises(exceptions.ConfigValidationError):
            resolve_layers(ToyConfigSerializer, {'rate': 0.1})

    def test_invalid_value(self):
        with self.assertRaises(exceptions.ConfigValidationError):
            validate_layer(ToyConfigSerializer, {'rank': 0})


class ExitStatusTestCase(SimpleTestCase):
    def test_input_errors_exit_three(self):
        for error in (exceptions.DatasetEmptyError, exceptions.ShapeError, exceptions.VerbNotFoundError,
                      exceptions.CheckpointVersionError, exceptions.MissingCheckpointError):
            self.assertEqual(error.exit_status, 3)

    def test_runtime_errors_exit_one(self):
        for error in (exceptions.PlacementError, exceptions.StageConfigError, exceptions.ProviderError,
                      exceptions.RecaptionBudgetError):
            self.assertEqual(error.exit_status, 1)

    def test_timeout_counts_retries(self):
        error = exceptions.RecaptionTimeoutError("caption request timed out", 3)
        self.assertEqual(error.retries, 3)
        self.assertIn('after 3 retries', str(error))


class ArchiveTestCase(SimpleTestCase):
    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.path = Path(self.tmp.name) / 'weights.safetensors'

    def test_round_trip_with_metadata(self):
        tensors = {'a': torch.arange(6.0).reshape(2, 3).t()}
        write_archive(self.path, tensors, 'adapters', rank=4, kinds=['temporal'])
        loaded, metadata = read_archive(self.path, 'adapters')
        self.assertTrue(torch.equal(loaded['a'], tensors['a']))
        self.assertEqual(metadata, {'rank': 4, 'kinds': ['temporal']})

    def test_wrong_kind(self):
        write_archive(self.path, {'a': torch.zeros(1)}, 'adapters')
        with self.assertRaises(exceptions.CheckpointVersionError):
            read_archive(self.path, 'motion')

    def test_unversioned_file(self):
        save_file({'a': torch.zeros(1)}, str(self.path), metadata={'kind': 'adapters'})
        with self.assertRaises(exceptions.CheckpointVersionError):
            read_archive(self.path, 'adapters')


class UtilsTestCase(SimpleTestCase):
    def test_checksum_ignores_insertion_order(self):
        a, b = torch.ones(2), torch.zeros(3)
        self.assertEqual(tensor_checksum({'a': a, 'b': b}), tensor_checksum({'b': b, 'a': a}))

    def test_checksum_sees_values_names_and_dtype(self):
        base = tensor_checksum({'a': torch.ones(2)})
        self.assertNotEqual(base, tensor_checksum({'a': torch.tensor([1.0, 2.0])}))
        self.assertNotEqual(base, tensor_checksum({'b': torch.ones(2)}))
        self.assertNotEqual(base, tensor_checksum({'a': torch.ones(2, dtype=torch.float64)}))

    def test_module_checksum_uses_state_dict(self):
        layer = torch.nn.Linear(2, 2)
        self.assertEqual(tensor_checksum(layer), tensor_checksum(layer.state_dict()))

    def test_config_hash_ignores_key_order(self):
        self.assertEqual(config_hash({'a': 1, 'b': [1, 2]}), config_hash({'b': [1, 2], 'a': 1}))
        self.assertNotEqual(config_hash({'a': 1}), config_hash({'a': 2}))

    def test_seeded_restores_global_state(self):
        torch.manual_seed(123)
        expected = torch.rand(1)
        torch.manual_seed(123)
        with seeded(0):
            inside = torch.rand(1)
        self.assertTrue(torch.equal(torch.rand(1), expected))
        with seeded(0):
            self.assertTrue(torch.equal(torch.rand(1), inside))
