from dataclasses import asdict, dataclass, fields
from typing import Optional

from django.conf import settings

from apps.core.config import parse_config_file, resolve_layers
from apps.core.exceptions import ConfigValidationError
from apps.training.serializers import TrainConfigSerializer


@dataclass(frozen=True)
class TrainConfig:
    """
    Hyperparameters for both training stages.

    ``use_recaptioner``, ``use_injector`` and ``use_enhancer`` switch the
    decoupling components off one at a time. ``full_temporal_finetune``
    trains the temporal transformer weights of a private UNet copy instead
    of temporal adapters. ``verb_index`` overrides verb location.
    """
    lora_rank: int = 32
    lora_alpha: Optional[float] = None
    learning_rate: float = 5e-4
    max_steps: int = 600
    lambda_reg: float = 1e-4
    batch_size: int = 1
    seed: int = 0
    frames_per_sample: int = 8
    null_prompt_probability: float = 0.1
    weight_decay: float = 1e-2
    max_grad_norm: float = 1.0
    log_every: int = 25
    use_recaptioner: bool = True
    use_injector: bool = True
    use_enhancer: bool = True
    full_temporal_finetune: bool = False
    verb_index: Optional[int] = None

    def __post_init__(self):
        errors = {}
        if self.lambda_reg < 0:
            errors['lambda_reg'] = ["Must be at least 0."]
        if self.max_steps < 1:
            errors['max_steps'] = ["Must be at least 1."]
        if self.lora_rank < 1:
            errors['lora_rank'] = ["Must be at least 1."]
        if not 0 <= self.null_prompt_probability <= 1:
            errors['null_prompt_probability'] = ["Must lie in [0, 1]."]
        if errors:
            raise ConfigValidationError(errors)

    @classmethod
    def from_values(cls, values):
        known = {spec.name for spec in fields(cls)}
        return cls(**{key: value for key, value in values.items() if key in known})

    def as_dict(self):
        return asdict(self)


def resolve_train_config(config_path=None, flags=None):
    """
    Settings defaults < config file < flags.

    Returns:
    - tuple[TrainConfig, dict]: the config and its recorded layers.
    """
    file_values = parse_config_file(config_path) if config_path else {}
    defaults = settings.MOTION_TRANSFER['TRAIN']
    merged, layers = resolve_layers(TrainConfigSerializer, defaults, file_values, flags)
    return TrainConfig.from_values(merged), layers
