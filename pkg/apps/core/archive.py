"""
Versioned named-tensor archives.

Every artifact the pipeline writes (backbone weights, adapter sets, spatial
and motion checkpoints) is a safetensors file. Structured metadata is stored
JSON-encoded under string keys, next to a ``format_version`` and a ``kind``.
"""
import json
import logging
from pathlib import Path

from safetensors.torch import load_file, save_file

from apps.core.exceptions import CheckpointVersionError

logger = logging.getLogger(__name__)

FORMAT_VERSION = '1'


def write_archive(path, tensors, kind, **metadata):
    """
    Write tensors plus metadata to ``path``.

    Parameters:
    - path (str | Path): destination file.
    - tensors (dict[str, Tensor]): named tensors; made contiguous before writing.
    - kind (str): archive kind, checked again on load.
    - metadata: JSON-serializable values stored under their keyword names.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {'format_version': FORMAT_VERSION, 'kind': kind}
    header.update({key: json.dumps(value, sort_keys=True) for key, value in metadata.items()})
    save_file({name: tensor.detach().cpu().contiguous() for name, tensor in tensors.items()},
              str(path), metadata=header)
    logger.info("Wrote %s archive %s (%d tensors)", kind, path, len(tensors))
    return path


def read_archive(path, kind):
    """
    Load an archive written by ``write_archive``.

    Returns:
    - tuple[dict[str, Tensor], dict]: tensors and decoded metadata.

    Raises:
    - CheckpointVersionError: wrong format version or wrong kind.
    """
    from safetensors import safe_open

    with safe_open(str(path), framework='pt') as handle:
        header = handle.metadata() or {}
    version = header.get('format_version')
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version!r}, expected {FORMAT_VERSION!r}"
        )
    if header.get('kind') != kind:
        raise CheckpointVersionError(f"{path}: archive kind {header.get('kind')!r}, expected {kind!r}")
    metadata = {
        key: json.loads(value)
        for key, value in header.items()
        if key not in ('format_version', 'kind')
    }
    return load_file(str(path)), metadata
