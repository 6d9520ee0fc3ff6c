# serializers.py
from rest_framework import serializers


class TrainConfigSerializer(serializers.Serializer):
    lora_rank = serializers.IntegerField(min_value=1, required=False)
    lora_alpha = serializers.FloatField(min_value=0, required=False, allow_null=True)
    learning_rate = serializers.FloatField(min_value=0, required=False)
    max_steps = serializers.IntegerField(min_value=1, required=False)
    lambda_reg = serializers.FloatField(min_value=0, required=False)
    batch_size = serializers.IntegerField(min_value=1, required=False)
    seed = serializers.IntegerField(min_value=0, required=False)
    frames_per_sample = serializers.IntegerField(min_value=1, required=False)
    null_prompt_probability = serializers.FloatField(min_value=0, max_value=1, required=False)
    weight_decay = serializers.FloatField(min_value=0, required=False)
    max_grad_norm = serializers.FloatField(min_value=0, required=False)
    log_every = serializers.IntegerField(min_value=1, required=False)
    use_recaptioner = serializers.BooleanField(required=False)
    use_injector = serializers.BooleanField(required=False)
    use_enhancer = serializers.BooleanField(required=False)
    full_temporal_finetune = serializers.BooleanField(required=False)
    verb_index = serializers.IntegerField(min_value=0, required=False, allow_null=True)
