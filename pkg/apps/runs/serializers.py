from rest_framework import serializers

MANIFEST_FORMAT_VERSION = 1


class ArtifactSerializer(serializers.Serializer):
    role = serializers.CharField(max_length=64)
    path = serializers.CharField(max_length=1024)
    sha256 = serializers.CharField(max_length=64, allow_blank=True)


class RunManifestSerializer(serializers.Serializer):
    """
    The JSON run manifest. ``config_layers`` holds the ``defaults``,
    ``config_file`` and ``flags`` layers; ``config`` is their merge.
    """
    format_version = serializers.ChoiceField(choices=[MANIFEST_FORMAT_VERSION])
    command = serializers.CharField(max_length=64)
    options = serializers.DictField()
    config = serializers.DictField()
    config_hash = serializers.CharField(max_length=64)
    config_layers = serializers.DictField()
    inputs = serializers.DictField(child=serializers.CharField())
    outputs = ArtifactSerializer(many=True)
    seeds = serializers.DictField(child=serializers.IntegerField())
    checkpoint_hashes = serializers.DictField(child=serializers.CharField())
    started_at = serializers.DateTimeField()
    wallclock = serializers.FloatField(min_value=0)
    exit_status = serializers.IntegerField()
