from django.contrib import admin
from .models import RunManifest, RunArtifact


class RunArtifactInline(admin.TabularInline):
    model = RunArtifact
    extra = 0
    readonly_fields = ('role', 'path', 'sha256')


@admin.register(RunManifest)
class RunManifestAdmin(admin.ModelAdmin):
    list_display = ('command', 'id', 'config_hash', 'wallclock', 'exit_status', 'created_at')
    search_fields = ('command', 'config_hash', 'manifest_path')
    list_filter = ('command', 'exit_status')
    inlines = (RunArtifactInline,)


@admin.register(RunArtifact)
class RunArtifactAdmin(admin.ModelAdmin):
    list_display = ('role', 'id', 'path', 'run')
    search_fields = ('path', 'sha256')
    list_filter = ('role',)
