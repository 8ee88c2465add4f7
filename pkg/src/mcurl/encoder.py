"""Convolutional pixel encoder and its momentum (EMA) key twin."""

from __future__ import annotations

import copy

import numpy as np
import torch
import torch.nn as nn

FEATURE_DIM = 50


def orthogonal_init(module: nn.Module) -> None:
    if isinstance(module, nn.Linear):
        nn.init.orthogonal_(module.weight)
        if module.bias is not None:
            nn.init.zeros_(module.bias)
    elif isinstance(module, nn.Conv2d):
        nn.init.orthogonal_(module.weight, gain=nn.init.calculate_gain("relu"))
        nn.init.zeros_(module.bias)


class PixelEncoder(nn.Module):
    """Four 3x3 conv layers with ReLU, a linear head and an output LayerNorm.

    Input is a channel-first stack ``(N, C, H, W)`` with values in ``[0, 1]``.
    """

    def __init__(self, obs_shape, feature_dim=FEATURE_DIM, num_layers=4, num_filters=32,
                 strides=(2, 1, 1, 1), ln_eps=1e-6):
        super().__init__()
        if len(strides) != num_layers:
            raise ValueError("need one stride per conv layer")
        self.obs_shape = tuple(obs_shape)
        self.feature_dim = feature_dim
        layers = []
        channels = self.obs_shape[0]
        for stride in strides:
            layers += [nn.Conv2d(channels, num_filters, 3, stride=stride), nn.ReLU()]
            channels = num_filters
        self.convs = nn.Sequential(*layers)
        size = np.array(self.obs_shape[1:])
        for stride in strides:
            size = (size - 3) // stride + 1
        if np.any(size < 1):
            raise ValueError(f"input {self.obs_shape} is too small for {num_layers} 3x3 conv layers "
                             f"with strides {tuple(strides)}")
        flat = num_filters * int(np.prod(size))
        self.fc = nn.Linear(flat, feature_dim)
        self.ln = nn.LayerNorm(feature_dim, eps=ln_eps)
        self.apply(orthogonal_init)

    def forward_conv(self, obs: torch.Tensor) -> torch.Tensor:
        if tuple(obs.shape[1:]) != self.obs_shape:
            raise ValueError(f"expected observations of shape (N, {self.obs_shape}), got {tuple(obs.shape)}")
        return self.convs(obs).flatten(1)

    def forward(self, obs: torch.Tensor, detach: bool = False) -> torch.Tensor:
        h = self.forward_conv(obs)
        if detach:
            h = h.detach()
        return self.ln(self.fc(h))


def make_key_copy(module: nn.Module) -> nn.Module:
    """Gradient-free copy used as the momentum twin of ``module``."""
    key = copy.deepcopy(module)
    for p in key.parameters():
        p.requires_grad_(False)
    return key


@torch.no_grad()
def ema_update(target: nn.Module, source: nn.Module, coef: float) -> None:
    """``target <- coef * source + (1 - coef) * target``, parameter-wise."""
    for t, s in zip(target.parameters(), source.parameters()):
        if t.shape != s.shape:
            raise ValueError("EMA target and source shapes differ")
        t.mul_(1.0 - coef).add_(s.detach(), alpha=coef)


class MomentumEncoder(nn.Module):
    """Query encoder ``f_theta`` paired with an EMA key encoder ``f_theta_k``."""

    def __init__(self, query: PixelEncoder, momentum: float = 0.05):
        super().__init__()
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        self.query = query
        self.key = make_key_copy(query)
        self.momentum = momentum

    def encode(self, obs: torch.Tensor, detach: bool = False) -> torch.Tensor:
        return self.query(obs, detach=detach)

    @torch.no_grad()
    def key_encode(self, obs: torch.Tensor) -> torch.Tensor:
        return self.key(obs)

    def momentum_update(self) -> None:
        ema_update(self.key, self.query, self.momentum)
