from django.db import models

from apps.core.models import ArtifactModel, TimestampModel


class RunManifest(TimestampModel):
    """
    Database copy of one command's run manifest. The JSON file written next to
    the outputs is the record of truth; this row makes runs searchable in the
    admin.

    Attributes:
        command (str): subcommand name, e.g. ``train-motion``.
        config_hash (str): hash of the merged configuration.
        config_layers (dict): defaults, config file and flag layers.
        inputs (dict): input paths by role.
        seeds (dict): every seed the run used.
        checkpoint_hashes (dict): content hashes of loaded and written checkpoints.
        wallclock (float): seconds spent in the command.
        exit_status (int): status returned to the shell.
    """

    command = models.CharField(max_length=64, help_text="Subcommand that produced the run.")
    manifest_path = models.CharField(max_length=1024, help_text="Location of the JSON manifest.")
    config_hash = models.CharField(max_length=64, help_text="Hash of the merged configuration.")
    config_layers = models.JSONField(default=dict, help_text="Defaults, config file and flag layers.")
    inputs = models.JSONField(default=dict, help_text="Input paths by role.")
    seeds = models.JSONField(default=dict, help_text="Seeds used by the run.")
    checkpoint_hashes = models.JSONField(default=dict, help_text="Hashes of loaded and written checkpoints.")
    wallclock = models.FloatField(default=0.0, help_text="Seconds spent in the command.")
    exit_status = models.IntegerField(default=0, help_text="Status returned to the shell.")

    def __str__(self):
        return f"{self.command} ({self.config_hash[:12]}) -> {self.exit_status}"

    class Meta:
        indexes = [
            models.Index(fields=['command', 'created_at'], name='runs_runman_command_4f1c2a_idx'),
        ]
        ordering = ['-created_at']


class RunArtifact(ArtifactModel):
    """An output file written by a run."""

    run = models.ForeignKey(RunManifest, on_delete=models.CASCADE, related_name="artifacts", help_text="Run that wrote the artifact.")
    role = models.CharField(max_length=64, help_text="What the artifact is, e.g. checkpoint or frames.")

    def __str__(self):
        return f"{self.role}: {self.path}"
