import logging
import time

from django.core.management.base import BaseCommand

from apps.core.exceptions import MotionTransferError
from apps.runs.manifest import RunRecorder

logger = logging.getLogger(__name__)

# Options every Django command carries; they are not part of a run's record.
DJANGO_OPTIONS = frozenset({
    'verbosity', 'settings', 'pythonpath', 'traceback', 'no_color', 'force_color', 'skip_checks',
})


class PipelineCommand(BaseCommand):
    """
    Base for the pipeline subcommands. Subclasses implement ``run``; the
    manifest is written whether ``run`` succeeds or raises.
    """
    requires_system_checks = []
    command_name = None

    def handle(self, *args, **options):
        recorded = {key: value for key, value in options.items() if key not in DJANGO_OPTIONS}
        self.recorder = RunRecorder(self.command_name, recorded)
        started = time.monotonic()
        status = 0
        try:
            self.run(**options)
        except MotionTransferError as exc:
            status = exc.exit_status
            raise
        except Exception:
            status = 1
            raise
        finally:
            self.recorder.finish(status, time.monotonic() - started)

    def run(self, **options):
        raise NotImplementedError

    def flags(self, options, mapping):
        """Config flags given on the command line, keyed by config field."""
        return {field: options.get(option) for option, field in mapping.items()}
