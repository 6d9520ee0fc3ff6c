"""
Stage checkpoints.

A spatial checkpoint holds the stage-1 adapter set and the recaption cache.
A motion checkpoint holds everything inference and resumed training need
without the reference videos: temporal adapters (or, for the full
fine-tune baseline, the temporal transformer weights), the enhancer MLP, the
cached residual embedding, the injector maps and the verb word.
"""
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

from apps.adapters.storage import adapter_entries, adapter_set_from_tensors, adapter_tensors
from apps.appearance.injector import InjectorWeights
from apps.appearance.recaptioner import PromptSpec
from apps.core.archive import read_archive, write_archive
from apps.core.exceptions import MissingCheckpointError
from apps.core.utils import tensor_checksum
from apps.motion_enhancer.enhancer import EnhancerMlp, ResidualEmbedding

logger = logging.getLogger(__name__)

SPATIAL_KIND = 'spatial_checkpoint'
MOTION_KIND = 'motion_checkpoint'


@dataclass
class SpatialCheckpoint:
    """
    Attributes:
    - adapters (AdapterSet): frozen spatial set.
    - prompts (list[PromptSpec]): the recaption cache, one entry per clip.
    - source_id (str): motion or subject the set was trained on.
    """
    adapters: object
    prompts: list = field(default_factory=list)
    source_id: str = ''
    config: dict = field(default_factory=dict)
    backbone_checksum: str = ''

    def checksum(self):
        return tensor_checksum(self.adapters.named_tensors())


@dataclass
class MotionCheckpoint:
    """
    Attributes:
    - motion_id (str): motion label of the training clips.
    - verb (str): verb word, re-located in new prompts at inference.
    - temporal (AdapterSet | None): frozen temporal set; None for the full
      fine-tune baseline.
    - residual (ResidualEmbedding): cached verb residual.
    - mlp (EnhancerMlp): enhancer weights, kept for resuming training.
    - injector (InjectorWeights): kept for resuming training; unused at inference.
    - provider (str): image-embedding provider the MLP and injector expect.
    - temporal_weights (dict): full fine-tune baseline only.
    """
    motion_id: str
    verb: str
    temporal: Optional[object]
    residual: ResidualEmbedding
    mlp: EnhancerMlp
    injector: InjectorWeights
    provider: str = 'toy'
    config: dict = field(default_factory=dict)
    backbone_checksum: str = ''
    temporal_weights: dict = field(default_factory=dict)

    def named_tensors(self):
        tensors = {'residual': self.residual.vector.detach()}
        if self.temporal is not None:
            tensors.update(adapter_tensors(self.temporal, prefix='temporal.'))
        tensors.update({f'mlp.{k}': v for k, v in self.mlp.state_dict().items()})
        tensors.update({f'injector.{k}': v for k, v in self.injector.state_dict().items()})
        tensors.update({f'full.{k}': v for k, v in self.temporal_weights.items()})
        return tensors

    def checksum(self):
        return tensor_checksum(self.named_tensors())


def _require(path):
    if not Path(path).exists():
        raise MissingCheckpointError(f"No checkpoint at {path}")


def save_spatial_checkpoint(checkpoint, path):
    return write_archive(
        path, adapter_tensors(checkpoint.adapters), SPATIAL_KIND,
        adapters=adapter_entries(checkpoint.adapters),
        adapter_kind=checkpoint.adapters.kind,
        prompts=[asdict(spec) for spec in checkpoint.prompts],
        source_id=checkpoint.source_id,
        config=checkpoint.config,
        backbone_checksum=checkpoint.backbone_checksum,
    )


def load_spatial_checkpoint(path):
    """
    Raises:
    - MissingCheckpointError: no file at ``path``.
    - CheckpointVersionError: wrong format version or not a spatial checkpoint.
    """
    _require(path)
    tensors, metadata = read_archive(path, SPATIAL_KIND)
    adapters = adapter_set_from_tensors(tensors, metadata['adapters'], metadata['adapter_kind'])
    return SpatialCheckpoint(
        adapters=adapters,
        prompts=[PromptSpec(**spec) for spec in metadata.get('prompts', [])],
        source_id=metadata.get('source_id', ''),
        config=metadata.get('config', {}),
        backbone_checksum=metadata.get('backbone_checksum', ''),
    )


def save_motion_checkpoint(checkpoint, path):
    metadata = {
        'motion_id': checkpoint.motion_id,
        'verb': checkpoint.verb,
        'provider': checkpoint.provider,
        'config': checkpoint.config,
        'backbone_checksum': checkpoint.backbone_checksum,
        'image_dim': checkpoint.mlp.image_dim,
        'text_dim': checkpoint.mlp.text_dim,
        'hidden_dim': checkpoint.mlp.fc1.out_features,
        'block_channels': {name: m.out_features for name, m in checkpoint.injector.maps.items()},
        'adapters': adapter_entries(checkpoint.temporal) if checkpoint.temporal is not None else None,
    }
    return write_archive(path, checkpoint.named_tensors(), MOTION_KIND, **metadata)


def load_motion_checkpoint(path):
    """
    Raises:
    - MissingCheckpointError: no file at ``path``.
    - CheckpointVersionError: wrong format version or not a motion checkpoint.
    """
    _require(path)
    tensors, metadata = read_archive(path, MOTION_KIND)
    temporal = None
    if metadata.get('adapters') is not None:
        temporal = adapter_set_from_tensors(tensors, metadata['adapters'], 'temporal', prefix='temporal.')
    mlp = EnhancerMlp(metadata['image_dim'], metadata['text_dim'], metadata['hidden_dim'])
    mlp.load_state_dict({k[len('mlp.'):]: v for k, v in tensors.items() if k.startswith('mlp.')})
    injector = InjectorWeights(metadata['block_channels'], metadata['image_dim'])
    injector.load_state_dict({k[len('injector.'):]: v for k, v in tensors.items() if k.startswith('injector.')})
    checkpoint = MotionCheckpoint(
        motion_id=metadata['motion_id'],
        verb=metadata['verb'],
        temporal=temporal,
        residual=ResidualEmbedding(tensors['residual'], metadata['motion_id']),
        mlp=mlp.requires_grad_(False),
        injector=injector.requires_grad_(False),
        provider=metadata.get('provider', 'toy'),
        config=metadata.get('config', {}),
        backbone_checksum=metadata.get('backbone_checksum', ''),
        temporal_weights={k[len('full.'):]: v for k, v in tensors.items() if k.startswith('full.')},
    )
    logger.info("Loaded motion checkpoint %s (%s, verb %r)", path, checkpoint.motion_id, checkpoint.verb)
    return checkpoint
