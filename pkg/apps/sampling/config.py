from dataclasses import asdict, dataclass, fields
from typing import Optional

from django.conf import settings

from apps.core.config import parse_config_file, resolve_layers
from apps.core.exceptions import ConfigValidationError
from apps.sampling.serializers import SampleConfigSerializer


@dataclass(frozen=True)
class SampleConfig:
    """
    DDIM sampling settings. ``height`` and ``width`` of None sample at the
    backbone's own frame size; ``full_scale_defaults`` gives the frame count,
    rate and size of the full-size model.
    """
    num_steps: int = 30
    guidance_scale: float = 12.0
    eta: float = 0.0
    frames: int = 8
    fps: float = 8.0
    seed: int = 0
    height: Optional[int] = None
    width: Optional[int] = None

    def __post_init__(self):
        errors = {}
        if self.num_steps < 1:
            errors['num_steps'] = ["Must be at least 1."]
        if self.guidance_scale < 0:
            errors['guidance_scale'] = ["Must be at least 0."]
        if not 0 <= self.eta <= 1:
            errors['eta'] = ["Must lie in [0, 1]."]
        if self.frames < 1:
            errors['frames'] = ["Must be at least 1."]
        for name in ('height', 'width'):
            if getattr(self, name) is not None and getattr(self, name) < 1:
                errors[name] = ["Must be at least 1."]
        if errors:
            raise ConfigValidationError(errors)

    @classmethod
    def from_values(cls, values):
        known = {spec.name for spec in fields(cls)}
        return cls(**{key: value for key, value in values.items() if key in known})

    @classmethod
    def from_settings(cls):
        return cls.from_values(settings.MOTION_TRANSFER['SAMPLE'])

    def as_dict(self):
        return asdict(self)


def full_scale_defaults():
    section = settings.MOTION_TRANSFER['FULL_SCALE']
    return {
        'frames': section['FRAMES'],
        'fps': section['FPS'],
        'height': section['HEIGHT'],
        'width': section['WIDTH'],
    }


def resolve_sample_config(config_path=None, flags=None, full_scale=False):
    """
    Settings defaults < config file < flags. With ``full_scale`` the
    defaults layer takes the full-size frame count, rate and size.
    """
    file_values = parse_config_file(config_path) if config_path else {}
    defaults = dict(settings.MOTION_TRANSFER['SAMPLE'])
    if full_scale:
        defaults.update(full_scale_defaults())
    merged, layers = resolve_layers(SampleConfigSerializer, defaults, file_values, flags)
    return SampleConfig.from_values(merged), layers
