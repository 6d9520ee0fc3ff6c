"""
Flat ``key = value`` run configs and their layering.

A run config is resolved from three layers, lowest first: the defaults in
``settings.MOTION_TRANSFER``, an optional config file, and command-line flags. Each
layer is validated on its own by the same DRF serializer, then the merged
result is validated once more as a whole.
"""
from pathlib import Path

from apps.core.exceptions import ConfigValidationError

NULL_WORDS = {'none', 'null', ''}


def parse_config_file(path):
    """
    Read ``key = value`` lines; ``#`` starts a comment.

    Raises:
    - ConfigValidationError: a line without ``=`` or a repeated key.
    """
    values = {}
    errors = {}
    for number, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.split('#', 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition('=')
        key = key.strip()
        if not sep or not key:
            errors[f'line {number}'] = ["Expected 'key = value'."]
            continue
        if key in values:
            errors[key] = [f"Repeated on line {number}."]
        values[key] = value.strip()
    if errors:
        raise ConfigValidationError(errors)
    return values


def _error_dict(errors):
    return {key: [str(message) for message in messages] for key, messages in errors.items()}


def validate_layer(serializer_class, values, partial=True):
    """Validate one layer; unknown keys are errors."""
    values = {
        key: (None if isinstance(value, str) and value.lower() in NULL_WORDS else value)
        for key, value in (values or {}).items()
    }
    unknown = sorted(set(values) - set(serializer_class().fields))
    if unknown:
        raise ConfigValidationError({key: ["Unknown setting."] for key in unknown})
    serializer = serializer_class(data=values, partial=partial)
    if not serializer.is_valid():
        raise ConfigValidationError(_error_dict(serializer.errors))
    return dict(serializer.validated_data)


def resolve_layers(serializer_class, defaults, file_values=None, flags=None):
    """
    Returns:
    - tuple[dict, dict]: the merged values and ``{'defaults', 'config_file',
      'flags'}`` as recorded in the run manifest.
    """
    layers = {
        'defaults': validate_layer(serializer_class, defaults),
        'config_file': validate_layer(serializer_class, file_values),
        'flags': validate_layer(serializer_class, {k: v for k, v in (flags or {}).items() if v is not None}),
    }
    merged = {**layers['defaults'], **layers['config_file'], **layers['flags']}
    return validate_layer(serializer_class, merged, partial=False), layers
