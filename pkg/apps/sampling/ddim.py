"""
DDIM updates and classifier-free guidance.

    z0_hat  = (z_t - sqrt(1 - a_t) eps) / sqrt(a_t)
    sigma   = eta sqrt((1 - a_prev) / (1 - a_t)) sqrt(1 - a_t / a_prev)
    z_prev  = sqrt(a_prev) z0_hat + sqrt(1 - a_prev - sigma^2) eps + sigma noise

``a`` is the cumulative alpha product. Stepping to ``t_prev = None`` (or -1)
uses ``a_prev = 1`` and returns ``z0_hat``.
"""
import torch

from apps.core.exceptions import ShapeError, TimestepError


def cfg_combine(eps_uncond, eps_cond, scale):
    """``eps_u + scale * (eps_c - eps_u)``."""
    if eps_uncond.shape != eps_cond.shape:
        raise ShapeError(f"Guidance inputs differ: {tuple(eps_uncond.shape)} vs {tuple(eps_cond.shape)}")
    return eps_uncond + scale * (eps_cond - eps_uncond)


def ddim_update(z_t, eps, alpha_bar_t, alpha_bar_prev, eta=0.0, noise=None):
    """One update for explicit ``alpha_bar`` values, computed in float64."""
    a_t = torch.as_tensor(alpha_bar_t, dtype=torch.float64)
    a_prev = torch.as_tensor(alpha_bar_prev, dtype=torch.float64)
    z = z_t.double()
    e = eps.double()
    z0_hat = (z - (1 - a_t).sqrt() * e) / a_t.sqrt()
    sigma = torch.zeros((), dtype=torch.float64)
    if eta > 0 and float(a_t) < 1:
        sigma = eta * ((1 - a_prev) / (1 - a_t)).sqrt() * (1 - a_t / a_prev).clamp(min=0).sqrt()
    direction = (1 - a_prev - sigma ** 2).clamp(min=0).sqrt() * e
    z_prev = a_prev.sqrt() * z0_hat + direction
    if noise is not None and float(sigma) > 0:
        z_prev = z_prev + sigma * noise.double()
    return z_prev.to(z_t.dtype)


def ddim_step(schedule, z_t, eps_hat, t, t_prev, eta=0.0, generator=None):
    """
    Move ``z_t`` from timestep ``t`` to ``t_prev``.

    Raises:
    - TimestepError: ``t_prev`` is not earlier than ``t``.
    """
    prev = -1 if t_prev is None else int(t_prev)
    if prev >= int(t):
        raise TimestepError(f"DDIM timesteps must decrease: {t} -> {t_prev}")
    noise = None
    if eta > 0:
        noise = torch.randn(z_t.shape, generator=generator, dtype=z_t.dtype)
    return ddim_update(z_t, eps_hat, schedule.alpha_bar(t), schedule.alpha_bar(prev), eta, noise)


def ddim_timesteps(num_steps, total):
    """
    ``num_steps`` timesteps in descending order, evenly strided over
    ``[0, total)`` and ending at 0.

    Raises:
    - TimestepError: more steps than the schedule has timesteps.
    """
    if not 1 <= num_steps <= total:
        raise TimestepError(f"num_steps must lie in [1, {total}], got {num_steps}")
    stride = total // num_steps
    return list(range(0, num_steps * stride, stride))[::-1]
