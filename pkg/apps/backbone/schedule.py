import torch

from apps.backbone.types import LatentVideo
from apps.core.exceptions import ShapeError, TimestepError


class DiffusionSchedule:
    """
    Variance-preserving forward process with a linear beta schedule.

    Attributes:
    - timesteps (int): T.
    - betas (Tensor): ``[T]`` float64.
    - alphas_cumprod (Tensor): ``[T]`` float64, strictly decreasing.
    """

    def __init__(self, timesteps=1000, beta_start=1e-4, beta_end=2e-2, betas=None):
        if betas is None:
            betas = torch.linspace(beta_start, beta_end, timesteps, dtype=torch.float64)
        betas = torch.as_tensor(betas, dtype=torch.float64)
        if not bool(((betas > 0) & (betas < 1)).all()):
            raise ValueError("betas must lie strictly inside (0, 1)")
        self.timesteps = betas.shape[0]
        self.betas = betas
        self.alphas_cumprod = torch.cumprod(1.0 - betas, dim=0)

    def alpha_bar(self, t):
        """
        ᾱ_t for an int or a tensor of timesteps. ``t = -1`` (or None) stands
        for the fully denoised end of the chain, where ᾱ = 1.
        """
        if t is None:
            return torch.tensor(1.0, dtype=torch.float64)
        t = torch.as_tensor(t)
        if bool(((t < -1) | (t >= self.timesteps)).any()):
            raise TimestepError(f"Timestep outside [0, {self.timesteps}): {t.tolist()}")
        padded = torch.cat([torch.ones(1, dtype=torch.float64), self.alphas_cumprod])
        return padded[t.long() + 1]

    def add_noise(self, z0, t, eps):
        """
        q-sample: ``z_t = sqrt(ᾱ_t) z0 + sqrt(1 - ᾱ_t) eps``.

        Parameters:
        - z0 (LatentVideo | Tensor): clean latents ``[b, f, h, w, c]``.
        - t (int | Tensor): one timestep, or one per batch element.
        - eps (Tensor): noise with z0's shape.

        Raises:
        - TimestepError: t outside [0, T).
        """
        values = z0.latents if isinstance(z0, LatentVideo) else z0
        if eps.shape != values.shape:
            raise ShapeError(f"Noise shape {tuple(eps.shape)} != latent shape {tuple(values.shape)}")
        t = torch.as_tensor(t)
        if bool(((t < 0) | (t >= self.timesteps)).any()):
            raise TimestepError(f"Timestep outside [0, {self.timesteps}): {t.tolist()}")
        noised = q_sample(values, self.alpha_bar(t), eps)
        if isinstance(z0, LatentVideo):
            return LatentVideo(noised, timestep=int(t.reshape(-1)[0]))
        return noised


def q_sample(z0, alpha_bar, eps):
    """Closed-form forward process for an explicit ᾱ (scalar or one per batch element)."""
    alpha_bar = torch.as_tensor(alpha_bar, dtype=torch.float64)
    if alpha_bar.ndim == 1:
        alpha_bar = alpha_bar.view(-1, *([1] * (z0.ndim - 1)))
    signal = alpha_bar.sqrt().to(z0.dtype)
    noise = (1.0 - alpha_bar).sqrt().to(z0.dtype)
    return signal * z0 + noise * eps
