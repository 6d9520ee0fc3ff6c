# serializers.py
from rest_framework import serializers

DATASET_FORMAT_VERSION = 1
CLIP_NAME_PATTERN = r'^[A-Za-z0-9_-]+$'


class ClipMetaSerializer(serializers.Serializer):
    fps = serializers.FloatField()

    def validate_fps(self, value):
        if value <= 0:
            raise serializers.ValidationError("fps must be positive.")
        return value


class DatasetMetaSerializer(serializers.Serializer):
    format_version = serializers.ChoiceField(choices=[DATASET_FORMAT_VERSION])
    motion_id = serializers.CharField(max_length=128)
    verb = serializers.RegexField(r'^[a-z]+$', max_length=64)
    clips = serializers.DictField(child=ClipMetaSerializer())

    def validate_clips(self, value):
        field = serializers.RegexField(CLIP_NAME_PATTERN)
        bad = []
        for name in value:
            try:
                field.run_validation(name)
            except serializers.ValidationError:
                bad.append(name)
        if bad:
            raise serializers.ValidationError(f"Invalid clip names: {', '.join(sorted(bad))}.")
        return value
