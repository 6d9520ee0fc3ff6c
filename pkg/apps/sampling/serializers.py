# serializers.py
from rest_framework import serializers


class SampleConfigSerializer(serializers.Serializer):
    num_steps = serializers.IntegerField(min_value=1, required=False)
    guidance_scale = serializers.FloatField(min_value=0, required=False)
    eta = serializers.FloatField(min_value=0, max_value=1, required=False)
    frames = serializers.IntegerField(min_value=1, required=False)
    fps = serializers.FloatField(required=False)
    seed = serializers.IntegerField(min_value=0, required=False)
    height = serializers.IntegerField(min_value=1, required=False, allow_null=True)
    width = serializers.IntegerField(min_value=1, required=False, allow_null=True)

    def validate_fps(self, value):
        if value <= 0:
            raise serializers.ValidationError("fps must be positive.")
        return value
