"""Squashed-Gaussian actor and twin Q critics for continuous control."""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from mcurl.encoder import ema_update, make_key_copy, orthogonal_init

LOG_2 = math.log(2.0)


def mlp(in_dim: int, hidden_dim: int, out_dim: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Linear(in_dim, hidden_dim), nn.ReLU(),
        nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
        nn.Linear(hidden_dim, out_dim),
    )


def gaussian_log_prob(noise: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """Log-density of ``mu + std * noise`` under N(mu, std^2), summed over the last dim."""
    return (-0.5 * noise.pow(2) - log_std - 0.5 * math.log(2 * math.pi)).sum(-1, keepdim=True)


def log1m_tanh_sq(u: torch.Tensor) -> torch.Tensor:
    """``log(1 - tanh(u)^2)`` without cancellation for large ``|u|``."""
    return 2.0 * (LOG_2 - u - F.softplus(-2.0 * u))


def squashed_log_prob(u: torch.Tensor, noise: torch.Tensor, log_std: torch.Tensor) -> torch.Tensor:
    """Log-density of ``tanh(u)`` where ``u = mu + std * noise``."""
    return gaussian_log_prob(noise, log_std) - log1m_tanh_sq(u).sum(-1, keepdim=True)


class Actor(nn.Module):
    """Three-layer MLP giving the mean and log-std of a tanh-squashed diagonal Gaussian.

    The raw log-std passes through ``tanh`` and is rescaled into
    ``[log_std_min, log_std_max]``.
    """

    def __init__(self, feature_dim: int, action_dim: int, hidden_dim: int = 256,
                 log_std_min: float = -10.0, log_std_max: float = 2.0):
        super().__init__()
        self.action_dim = action_dim
        self.log_std_min = log_std_min
        self.log_std_max = log_std_max
        self.trunk = mlp(feature_dim, hidden_dim, 2 * action_dim)
        self.apply(orthogonal_init)

    def distribution(self, feat: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        mu, log_std = self.trunk(feat).chunk(2, dim=-1)
        log_std = torch.tanh(log_std)
        log_std = self.log_std_min + 0.5 * (self.log_std_max - self.log_std_min) * (log_std + 1)
        return mu, log_std

    def forward(self, feat: torch.Tensor, generator: torch.Generator | None = None):
        """Returns ``(tanh(mu), sampled action, log pi(action), log_std)``."""
        mu, log_std = self.distribution(feat)
        noise = torch.randn(mu.shape, generator=generator, dtype=mu.dtype, device=mu.device)
        u = mu + noise * log_std.exp()
        log_pi = squashed_log_prob(u, noise, log_std)
        return torch.tanh(mu), torch.tanh(u), log_pi, log_std

    @torch.no_grad()
    def act(self, feat: torch.Tensor, deterministic: bool = False,
            generator: torch.Generator | None = None) -> torch.Tensor:
        if deterministic:
            mu, _ = self.distribution(feat)
            return torch.tanh(mu)
        _, pi, _, _ = self(feat, generator=generator)
        return pi


class Critic(nn.Module):
    """Two independent Q heads over ``(feature, action)``."""

    def __init__(self, feature_dim: int, action_dim: int, hidden_dim: int = 256):
        super().__init__()
        self.q1 = mlp(feature_dim + action_dim, hidden_dim, 1)
        self.q2 = mlp(feature_dim + action_dim, hidden_dim, 1)
        self.apply(orthogonal_init)

    def forward(self, feat: torch.Tensor, action: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        x = torch.cat([feat, action], dim=-1)
        return self.q1(x), self.q2(x)


class TwinCritic(nn.Module):
    """Online critics paired with their EMA target copies."""

    def __init__(self, critic: Critic):
        super().__init__()
        self.online = critic
        self.target = make_key_copy(critic)

    def update_targets(self, tau2: float) -> None:
        ema_update(self.target, self.online, tau2)
