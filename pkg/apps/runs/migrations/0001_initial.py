# Generated by Django 4.2 on 2026-10-17 09:12

from django.db import migrations, models
import django.db.models.deletion


class Migration(migrations.Migration):

    initial = True

    dependencies = [
    ]

    operations = [
        migrations.CreateModel(
            name='RunManifest',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
                ('command', models.CharField(help_text='Subcommand that produced the run.', max_length=64)),
                ('manifest_path', models.CharField(help_text='Location of the JSON manifest.', max_length=1024)),
                ('config_hash', models.CharField(help_text='Hash of the merged configuration.', max_length=64)),
                ('config_layers', models.JSONField(default=dict, help_text='Defaults, config file and flag layers.')),
                ('inputs', models.JSONField(default=dict, help_text='Input paths by role.')),
                ('seeds', models.JSONField(default=dict, help_text='Seeds used by the run.')),
                ('checkpoint_hashes', models.JSONField(default=dict, help_text='Hashes of loaded and written checkpoints.')),
                ('wallclock', models.FloatField(default=0.0, help_text='Seconds spent in the command.')),
                ('exit_status', models.IntegerField(default=0, help_text='Status returned to the shell.')),
            ],
            options={
                'ordering': ['-created_at'],
                'indexes': [models.Index(fields=['command', 'created_at'], name='runs_runman_command_4f1c2a_idx')],
            },
        ),
        migrations.CreateModel(
            name='RunArtifact',
            fields=[
                ('id', models.BigAutoField(auto_created=True, primary_key=True, serialize=False, verbose_name='ID')),
                ('created_at', models.DateTimeField(auto_now_add=True)),
                ('updated_at', models.DateTimeField(auto_now=True)),
                ('path', models.CharField(help_text='Location of the artifact on disk.', max_length=1024)),
                ('sha256', models.CharField(blank=True, help_text='Content hash of the artifact.', max_length=64)),
                ('role', models.CharField(help_text='What the artifact is, e.g. checkpoint or frames.', max_length=64)),
                ('run', models.ForeignKey(help_text='Run that wrote the artifact.', on_delete=django.db.models.deletion.CASCADE, related_name='artifacts', to='runs.runmanifest')),
            ],
        ),
    ]
