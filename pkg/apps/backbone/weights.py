"""
The frozen "pretrained" backbone: autoencoder, text encoder, video UNet and
noise schedule, built deterministically from a seed.
"""
import logging
from dataclasses import asdict, dataclass, fields

from django.conf import settings
from torch import nn

from apps.backbone.autoencoder import FrameAutoencoder
from apps.backbone.schedule import DiffusionSchedule
from apps.backbone.text import TextEncoder
from apps.backbone.unet import VideoUNet
from apps.core.archive import read_archive, write_archive
from apps.core.exceptions import CheckpointVersionError
from apps.core.utils import seeded, tensor_checksum

logger = logging.getLogger(__name__)

ARCHIVE_KIND = 'backbone'


@dataclass(frozen=True)
class BackboneConfig:
    seed: int = 20240521
    model_width: int = 64
    channel_mult: tuple = (1, 2)
    heads: int = 4
    latent_channels: int = 4
    downsample: int = 4
    text_dim: int = 32
    max_tokens: int = 32
    vocab_size: int = 4096
    frames: int = 8
    height: int = 32
    width: int = 32
    timesteps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2

    @classmethod
    def from_settings(cls):
        section = settings.MOTION_TRANSFER['BACKBONE']
        values = {}
        for spec in fields(cls):
            key = spec.name.upper()
            if key in section:
                values[spec.name] = section[key]
        values['channel_mult'] = tuple(values.get('channel_mult', cls.channel_mult))
        return cls(**values)

    def as_dict(self):
        data = asdict(self)
        data['channel_mult'] = list(self.channel_mult)
        return data


class Backbone(nn.Module):
    """
    Container for the frozen base model. Every parameter has
    ``requires_grad`` off; adapters carry the trainable state.
    """

    def __init__(self, config=None):
        super().__init__()
        self.config = config or BackboneConfig()
        with seeded(self.config.seed):
            self.text_encoder = TextEncoder(
                dim=self.config.text_dim,
                max_tokens=self.config.max_tokens,
                vocab_size=self.config.vocab_size,
                heads=self.config.heads,
            )
            self.unet = VideoUNet(
                latent_channels=self.config.latent_channels,
                model_width=self.config.model_width,
                channel_mult=self.config.channel_mult,
                heads=self.config.heads,
                context_dim=self.config.text_dim,
            )
        self.autoencoder = FrameAutoencoder(
            downsample=self.config.downsample,
            latent_channels=self.config.latent_channels,
            seed=self.config.seed,
        )
        self.schedule = DiffusionSchedule(
            timesteps=self.config.timesteps,
            beta_start=self.config.beta_start,
            beta_end=self.config.beta_end,
        )
        self.requires_grad_(False)
        self.eval()

    def encode_frames(self, clip):
        return self.autoencoder.encode_frames(clip)

    def decode_latents(self, latents, fps=8.0):
        return self.autoencoder.decode_latents(latents, fps=fps)

    def latent_shape(self, frames, height=None, width=None, batch=1):
        height = height or self.config.height
        width = width or self.config.width
        down = self.config.downsample
        return (batch, frames, height // down, width // down, self.config.latent_channels)

    def checksum(self):
        return tensor_checksum(self.state_dict())


def build_backbone(config=None):
    config = config or BackboneConfig.from_settings()
    return Backbone(config)


def save_backbone(backbone, path):
    return write_archive(
        path, backbone.state_dict(), ARCHIVE_KIND,
        config=backbone.config.as_dict(), seed=backbone.config.seed,
        checksum=backbone.checksum(),
    )


def load_backbone(path=None):
    """
    Load the backbone archive at ``path`` (or the configured one). Without an
    archive the backbone is rebuilt from the configured seed.

    Raises:
    - CheckpointVersionError: archive is malformed or its seed record does not
      reproduce the stored weights.
    """
    path = path or settings.MOTION_TRANSFER['BACKBONE']['ARCHIVE']
    if not path:
        return build_backbone()
    tensors, metadata = read_archive(path, ARCHIVE_KIND)
    config_data = dict(metadata['config'])
    config_data['channel_mult'] = tuple(config_data['channel_mult'])
    backbone = Backbone(BackboneConfig(**config_data))
    backbone.load_state_dict(tensors)
    if backbone.checksum() != metadata.get('checksum'):
        raise CheckpointVersionError(f"{path}: weights do not match the recorded checksum")
    logger.info("Loaded backbone from %s (seed %s)", path, metadata.get('seed'))
    return backbone
