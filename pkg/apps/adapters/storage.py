"""
Adapter set persistence.

Tensors are stored as ``<prefix><layer path>.down`` / ``.up``; the metadata
entry ``adapters`` maps every layer path to its rank, alpha and scale.
"""
import torch

from apps.adapters.lora import AdapterSet, LoraPair
from apps.core.archive import read_archive, write_archive
from apps.core.exceptions import CheckpointVersionError

ARCHIVE_KIND = 'adapter_set'


def adapter_entries(adapter_set):
    return {
        path: {'rank': pair.rank, 'alpha': pair.alpha, 'scale': pair.scale}
        for path, pair in adapter_set.placement.items()
    }


def adapter_tensors(adapter_set, prefix=''):
    return {f'{prefix}{name}': tensor for name, tensor in adapter_set.named_tensors().items()}


def adapter_set_from_tensors(tensors, entries, kind, prefix='', trainable=False):
    """
    Rebuild an ``AdapterSet`` from stored tensors.

    Raises:
    - CheckpointVersionError: a listed layer has no tensors.
    """
    placement = {}
    for path, entry in entries.items():
        try:
            down = tensors[f'{prefix}{path}.down']
            up = tensors[f'{prefix}{path}.up']
        except KeyError:
            raise CheckpointVersionError(f"Adapter tensors for {path!r} are missing")
        pair = LoraPair(down.shape[1], up.shape[0], rank=entry['rank'], alpha=entry['alpha'],
                        dtype=down.dtype)
        with torch.no_grad():
            pair.down.copy_(down)
            pair.up.copy_(up)
        placement[path] = pair
    return AdapterSet(kind, placement, trainable=trainable)


def save_adapter_set(adapter_set, path, **metadata):
    return write_archive(
        path, adapter_tensors(adapter_set), ARCHIVE_KIND,
        adapter_kind=adapter_set.kind, adapters=adapter_entries(adapter_set), **metadata,
    )


def load_adapter_set(path, trainable=False):
    """Returns a frozen set unless ``trainable`` is requested."""
    tensors, metadata = read_archive(path, ARCHIVE_KIND)
    return adapter_set_from_tensors(tensors, metadata['adapters'], metadata['adapter_kind'],
                                    trainable=trainable)
