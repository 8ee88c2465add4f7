"""Bernoulli position masks and 80/10/10 observation corruption."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mcurl.env import crop_batch

UNMASKED, ZERO, RANDOM, KEEP = -1, 0, 1, 2
BRANCH_NAMES = {ZERO: "zero", RANDOM: "random", KEEP: "keep"}
DEFAULT_BRANCH_PROBS = (0.8, 0.1, 0.1)


@dataclass
class CorruptedSequence:
    states: np.ndarray
    branches: np.ndarray  # UNMASKED where mask == 0, else ZERO / RANDOM / KEEP

    def branch_taken(self) -> list[str | None]:
        return [BRANCH_NAMES.get(int(b)) for b in self.branches.reshape(-1)]


def draw_mask(T, rho_m: float, rng: np.random.Generator) -> np.ndarray:
    """``T`` i.i.d. Bernoulli(``rho_m``) bits; ``T`` may be a shape tuple."""
    if not 0.0 <= rho_m <= 1.0:
        raise ValueError(f"mask probability must lie in [0, 1], got {rho_m}")
    return (rng.random(T) < rho_m).astype(np.int64)


def corrupt(states: np.ndarray, mask: np.ndarray, buffer, rng: np.random.Generator,
            probs=DEFAULT_BRANCH_PROBS) -> CorruptedSequence:
    """Corrupt the masked positions of a state sequence.

    ``states`` has shape ``(T, C, H, W)`` (or ``(B, T, C, H, W)`` with a
    matching mask). Each masked position becomes an all-zero stack, a state
    drawn uniformly from ``buffer`` or stays as is, with probabilities
    ``probs``. Replacement states larger than ``states`` are randomly cropped
    to match. The input array is never modified.
    """
    states = np.asarray(states)
    mask = np.asarray(mask)
    if mask.shape != states.shape[:mask.ndim] or states.ndim - mask.ndim != 3:
        raise ValueError(f"mask shape {mask.shape} does not match sequence shape {states.shape}")
    if len(buffer) == 0:
        raise ValueError("replacement buffer is empty")
    p_zero, p_random, p_keep = probs
    if min(probs) < 0 or abs(p_zero + p_random + p_keep - 1.0) > 1e-9:
        raise ValueError(f"branch probabilities must be non-negative and sum to 1, got {probs}")

    out = states.copy()
    branches = np.full(mask.shape, UNMASKED, dtype=np.int64)
    masked = mask.astype(bool)
    u = rng.random(mask.shape)
    branches[masked & (u < p_zero)] = ZERO
    branches[masked & (u >= p_zero) & (u < p_zero + p_random)] = RANDOM
    branches[masked & (u >= p_zero + p_random)] = KEEP

    out[branches == ZERO] = 0
    n_random = int(np.sum(branches == RANDOM))
    if n_random:
        repl = buffer.sample_states(n_random, rng)
        if repl.shape[-2:] != states.shape[-2:]:
            repl = crop_batch(repl, states.shape[-2:], rng)
        out[branches == RANDOM] = repl
    return CorruptedSequence(out, branches)
