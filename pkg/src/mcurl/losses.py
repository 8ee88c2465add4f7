"""Masked InfoNCE, SAC critic/actor/temperature losses and the joint objective."""

from __future__ import annotations

import torch
import torch.nn.functional as F


def similarity(q: torch.Tensor, k: torch.Tensor, bilinear: torch.Tensor | None = None) -> torch.Tensor:
    """Pairwise ``q_i . k_j`` (or ``q_i^T W k_j``) over the last two dims."""
    if bilinear is not None:
        k = k @ bilinear.T
    return q @ k.transpose(-1, -2)


def masked_infonce_from_similarity(sim: torch.Tensor, mask: torch.Tensor, tau: float = 1.0) -> torch.Tensor:
    """Loss from a precomputed ``(..., T, T)`` similarity matrix.

    Sums ``-M_i log softmax_j(sim_ij / tau)[i]`` over positions and averages
    over any leading batch dimension.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    logits = sim / tau
    # log_softmax subtracts the row max internally
    log_prob = torch.diagonal(F.log_softmax(logits, dim=-1), dim1=-2, dim2=-1)
    mask = mask.to(log_prob.dtype)
    per_window = -(mask * log_prob).sum(-1)
    return per_window.mean() if per_window.ndim else per_window


def masked_infonce(q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor, tau: float = 1.0,
                   bilinear: torch.Tensor | None = None) -> torch.Tensor:
    """Masked InfoNCE between queries ``q`` and keys ``k`` of shape ``([B,] T, d)``.

    Negatives for position ``i`` are the other keys of the same window. Keys
    are detached, so no gradient reaches them.
    """
    if q.shape != k.shape or q.shape[:-1] != mask.shape:
        raise ValueError(f"shape mismatch: q {tuple(q.shape)}, k {tuple(k.shape)}, mask {tuple(mask.shape)}")
    return masked_infonce_from_similarity(similarity(q, k.detach(), bilinear), mask, tau)


@torch.no_grad()
def retrieval_accuracy(q: torch.Tensor, k: torch.Tensor, mask: torch.Tensor,
                       bilinear: torch.Tensor | None = None) -> tuple[int, int]:
    """(hits, count): masked positions whose best-scoring key is their own."""
    sim = similarity(q, k, bilinear)
    hits = sim.argmax(-1) == torch.arange(q.shape[-2], device=q.device)
    m = mask.bool()
    return int((hits & m).sum()), int(m.sum())


def critic_target(reward, done, next_q1, next_q2, next_log_pi, gamma: float, alpha) -> torch.Tensor:
    """Soft Bellman target ``r + gamma (1 - d) (min Q' - alpha log pi)``, gradient-free."""
    with torch.no_grad():
        soft_value = torch.min(next_q1, next_q2) - alpha * next_log_pi
        return reward + gamma * (1.0 - done) * soft_value


def sac_critic_loss(critic, target_critic, actor, feat, action, reward, next_feat, next_target_feat,
                    done, gamma: float, alpha, generator: torch.Generator | None = None):
    """Squared Bellman residual averaged over the batch and the two critics.

    ``feat`` carries gradient into the encoder; ``next_feat`` (online
    encoder) drives the fresh policy action and ``next_target_feat`` (momentum
    encoder) feeds the target critics. Returns ``(loss, target)``.
    """
    with torch.no_grad():
        _, next_action, next_log_pi, _ = actor(next_feat, generator=generator)
        tq1, tq2 = target_critic(next_target_feat, next_action)
        y = critic_target(reward.reshape(-1, 1), done.reshape(-1, 1).to(tq1.dtype), tq1, tq2,
                          next_log_pi, gamma, alpha)
    q1, q2 = critic(feat, action)
    loss = 0.5 * (F.mse_loss(q1, y) + F.mse_loss(q2, y))
    return loss, y


def sac_actor_loss(actor, critic, feat, alpha, generator: torch.Generator | None = None):
    """``E[alpha log pi(a|s) - min(Q1, Q2)(s, a)]`` with reparameterized actions.

    ``feat`` is detached, so the encoder receives no gradient from this loss.
    Returns ``(loss, log_pi)``.
    """
    _, pi, log_pi, _ = actor(feat.detach(), generator=generator)
    q1, q2 = critic(feat.detach(), pi)
    loss = (alpha * log_pi - torch.min(q1, q2)).mean()
    return loss, log_pi


def sac_temperature_loss(log_alpha: torch.Tensor, log_pi: torch.Tensor, target_entropy: float) -> torch.Tensor:
    """``E[-alpha (log pi + target_entropy)]``; gradient flows into ``log_alpha`` only."""
    return (-log_alpha.exp() * (log_pi.detach() + target_entropy)).mean()


def combine(l_rl, l_ct, lam: float = 1.0):
    return l_rl + lam * l_ct
