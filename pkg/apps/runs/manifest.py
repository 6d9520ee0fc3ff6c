"""
Run manifests.

Every pipeline command writes one JSON manifest: the merged configuration and
its three layers (settings defaults, config file, flags), the inputs, the
outputs with their hashes, the seeds and the hashes of every checkpoint read
or written. The same record is stored as a ``RunManifest`` row when the
database is migrated.
"""
import json
import logging
import os
from pathlib import Path

from django.conf import settings
from django.db import DatabaseError, transaction
from django.utils import timezone

from apps.core.exceptions import ConfigValidationError
from apps.core.utils import config_hash, ensure_dir, file_sha256
from apps.runs.models import RunArtifact, RunManifest
from apps.runs.serializers import MANIFEST_FORMAT_VERSION, RunManifestSerializer

logger = logging.getLogger(__name__)


def _jsonable(value):
    return json.loads(json.dumps(value, default=str))


class RunRecorder:
    """
    Collects what a command does and writes the manifest when it finishes.

    ``manifest_path`` defaults to ``RUNS_DIR/<command>-<timestamp>-<pid>.json``;
    commands that write into an output location point it there instead.
    """

    def __init__(self, command, options=None):
        self.command = command
        self.options = _jsonable(options or {})
        self.started_at = timezone.now()
        stamp = self.started_at.strftime('%Y%m%dT%H%M%S')
        runs_dir = Path(settings.MOTION_TRANSFER['RUNS_DIR'])
        self.manifest_path = runs_dir / f'{command}-{stamp}-{os.getpid()}.json'
        self.config = {}
        self.config_layers = {}
        self.inputs = {}
        self.outputs = []
        self.seeds = {}
        self.checkpoint_hashes = {}

    def set_config(self, config, layers=None):
        self.config = _jsonable(config)
        self.config_layers = _jsonable(layers or {})

    def add_input(self, role, path):
        if path:
            self.inputs[role] = str(path)

    def add_output(self, role, path):
        path = Path(path)
        sha = file_sha256(path) if path.is_file() else ''
        self.outputs.append({'role': role, 'path': str(path), 'sha256': sha})

    def add_checkpoint(self, role, checksum):
        self.checkpoint_hashes[role] = checksum

    def add_seed(self, role, seed):
        self.seeds[role] = int(seed)

    def record(self, exit_status, wallclock):
        return {
            'format_version': MANIFEST_FORMAT_VERSION,
            'command': self.command,
            'options': self.options,
            'config': self.config,
            'config_hash': config_hash(self.config),
            'config_layers': self.config_layers,
            'inputs': self.inputs,
            'outputs': self.outputs,
            'seeds': self.seeds,
            'checkpoint_hashes': self.checkpoint_hashes,
            'started_at': self.started_at.isoformat(),
            'wallclock': round(float(wallclock), 6),
            'exit_status': int(exit_status),
        }

    def finish(self, exit_status, wallclock):
        """Write the JSON manifest, then mirror it into the database."""
        record = self.record(exit_status, wallclock)
        ensure_dir(self.manifest_path.parent)
        self.manifest_path.write_text(json.dumps(record, indent=2, sort_keys=True) + '\n')
        logger.info("Wrote %s manifest to %s", self.command, self.manifest_path)
        store_manifest(record, self.manifest_path)
        return self.manifest_path


def store_manifest(record, manifest_path):
    """Save ``record`` as a ``RunManifest`` row; a missing table only logs a warning."""
    try:
        with transaction.atomic():
            run = RunManifest.objects.create(
                command=record['command'],
                manifest_path=str(manifest_path),
                config_hash=record['config_hash'],
                config_layers=record['config_layers'],
                inputs=record['inputs'],
                seeds=record['seeds'],
                checkpoint_hashes=record['checkpoint_hashes'],
                wallclock=record['wallclock'],
                exit_status=record['exit_status'],
            )
            RunArtifact.objects.bulk_create([RunArtifact(run=run, **output) for output in record['outputs']])
    except DatabaseError as exc:
        logger.warning("Run manifest not stored in the database (%s); run 'migrate' to enable it", exc)
        return None
    return run


def load_manifest(path):
    """
    Read and validate a manifest file.

    Raises:
    - ConfigValidationError: the file does not hold a valid manifest.
    """
    serializer = RunManifestSerializer(data=json.loads(Path(path).read_text()))
    if not serializer.is_valid():
        raise ConfigValidationError(serializer.errors)
    return serializer.validated_data
