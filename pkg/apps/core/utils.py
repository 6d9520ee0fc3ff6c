import hashlib
import json
from contextlib import contextmanager
from pathlib import Path

import torch


def tensor_checksum(named_tensors):
    """
    SHA-256 over a mapping of named tensors, independent of insertion order.

    Parameters:
    - named_tensors (Mapping[str, Tensor] | nn.Module): tensors to hash; a
      module is hashed through its ``state_dict``.

    Returns:
    - str: hex digest.
    """
    if isinstance(named_tensors, torch.nn.Module):
        named_tensors = named_tensors.state_dict()
    digest = hashlib.sha256()
    for name in sorted(named_tensors):
        tensor = named_tensors[name].detach().cpu().contiguous()
        digest.update(name.encode())
        digest.update(str(tuple(tensor.shape)).encode())
        digest.update(str(tensor.dtype).encode())
        digest.update(tensor.numpy().tobytes())
    return digest.hexdigest()


def file_sha256(path):
    digest = hashlib.sha256()
    with open(path, 'rb') as handle:
        for block in iter(lambda: handle.read(1 << 20), b''):
            digest.update(block)
    return digest.hexdigest()


def config_hash(config):
    """Hash of a JSON-serializable config dict, stable across key order."""
    payload = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(payload).hexdigest()


def make_generator(seed):
    return torch.Generator().manual_seed(int(seed))


@contextmanager
def seeded(seed):
    """
    Run module construction under a fixed seed without touching the caller's
    global RNG state.
    """
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(int(seed))
        yield


def ensure_dir(path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path
