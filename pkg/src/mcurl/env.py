"""Synthetic pixel control tasks with frame stacking, action repeat and random crop.

Frames are ``(H, W, C)`` float32 arrays in ``[0, 1]``; an observation stack is a
``(K, H, W, C)`` array holding the ``K`` most recent frames, oldest first.
Rendered intensities are multiples of 1/255 so the replay buffer can store
them as ``uint8`` without loss.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Protocol

import numpy as np

TASKS = ("dot_chaser", "sparse_goal")

AGENT_LEVEL = 255
TARGET_LEVEL = 128


@dataclass
class EnvConfig:
    frame_size: tuple[int, int] = (64, 64)
    stack_k: int = 3
    action_repeat: int = 4
    crop_out: tuple[int, int] = (56, 56)
    episode_limit: int = 200  # counted in inner simulator steps
    task_id: str = "dot_chaser"

    def validate(self, prefix: str = "env") -> None:
        h, w = self.frame_size
        ch, cw = self.crop_out
        if h < 1 or w < 1:
            raise ValueError(f"{prefix}.frame_size must be positive, got {self.frame_size}")
        if not (1 <= ch <= h and 1 <= cw <= w):
            raise ValueError(f"{prefix}.crop_out {self.crop_out} must fit inside frame_size {self.frame_size}")
        if self.stack_k < 1:
            raise ValueError(f"{prefix}.stack_k must be >= 1, got {self.stack_k}")
        if self.action_repeat < 1:
            raise ValueError(f"{prefix}.action_repeat must be >= 1, got {self.action_repeat}")
        if self.episode_limit < 1:
            raise ValueError(f"{prefix}.episode_limit must be >= 1, got {self.episode_limit}")
        if self.task_id not in TASKS:
            raise ValueError(f"{prefix}.task_id must be one of {TASKS}, got {self.task_id!r}")


class Task(Protocol):
    action_dim: int

    def reset(self, rng: np.random.Generator) -> None: ...

    def step(self, action: np.ndarray) -> tuple[float, bool]: ...

    def render(self) -> np.ndarray: ...


class DotTask:
    """A point agent moving in the unit square toward a fixed target.

    ``dense=True`` gives reward ``-||agent - target||`` per inner step
    (dot_chaser); otherwise the reward is 1 inside ``goal_radius`` and 0
    elsewhere (sparse_goal). Neither variant has a terminal state.
    """

    action_dim = 2

    def __init__(self, frame_size=(64, 64), crop_out=(56, 56), dense=True,
                 speed=0.05, goal_radius=0.1, dot_radius=None):
        self.height, self.width = frame_size
        self.dense = dense
        self.speed = speed
        self.goal_radius = goal_radius
        if dot_radius is None:
            dot_radius = max(1.0, min(frame_size) / 10.0)
        self.dot_radius = dot_radius
        # keep both dots inside every possible crop window
        pad_h = (self.height - crop_out[0] + 1) // 2 + dot_radius
        pad_w = (self.width - crop_out[1] + 1) // 2 + dot_radius
        self._lo = np.array([pad_h, pad_w])
        self._span = np.array([self.height - 1 - 2 * pad_h, self.width - 1 - 2 * pad_w])
        self._rows, self._cols = np.mgrid[0:self.height, 0:self.width]
        self.agent = np.zeros(2)
        self.target = np.zeros(2)

    def reset(self, rng):
        self.agent = rng.uniform(0.0, 1.0, size=2)
        self.target = rng.uniform(0.0, 1.0, size=2)

    def distance(self) -> float:
        return float(np.linalg.norm(self.agent - self.target))

    def reward(self) -> float:
        d = self.distance()
        if self.dense:
            return -d
        return 1.0 if d <= self.goal_radius else 0.0

    def step(self, action):
        self.agent = np.clip(self.agent + self.speed * np.asarray(action, dtype=np.float64), 0.0, 1.0)
        return self.reward(), False

    def to_pixels(self, pos: np.ndarray) -> np.ndarray:
        return self._lo + pos * self._span

    def render(self):
        frame = np.zeros((self.height, self.width), dtype=np.uint8)
        for pos, level in ((self.target, TARGET_LEVEL), (self.agent, AGENT_LEVEL)):
            r, c = self.to_pixels(pos)
            disk = (self._rows - r) ** 2 + (self._cols - c) ** 2 <= self.dot_radius ** 2
            frame[disk] = level
        return (frame.astype(np.float32) / 255.0)[:, :, None]


def make_task(config: EnvConfig) -> DotTask:
    return DotTask(config.frame_size, config.crop_out, dense=config.task_id == "dot_chaser")


class PixelEnv:
    """Frame-stacked, action-repeated wrapper around a :class:`Task`."""

    def __init__(self, config: EnvConfig, task: Task | None = None):
        config.validate()
        self.config = config
        self.task = task if task is not None else make_task(config)
        self.action_dim = self.task.action_dim
        self._frames: deque[np.ndarray] = deque(maxlen=config.stack_k)
        self._inner_steps = 0
        self._done = True
        self._ready = False
        self._channels = self.task.render().shape[-1]

    @property
    def obs_shape(self) -> tuple[int, int, int, int]:
        h, w = self.config.frame_size
        return (self.config.stack_k, h, w, self._channels)

    @property
    def inner_steps(self) -> int:
        return self._inner_steps

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.task.reset(rng)
        frame = self.task.render()
        self._frames.clear()
        for _ in range(self.config.stack_k):
            self._frames.append(frame)
        self._inner_steps = 0
        self._done = False
        self._ready = True
        return self.observation()

    def observation(self) -> np.ndarray:
        return np.stack(self._frames)

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if not self._ready:
            raise RuntimeError("step() called before reset()")
        if self._done:
            raise RuntimeError("episode has terminated; call reset() before stepping again")
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (self.action_dim,):
            raise ValueError(f"action must have shape ({self.action_dim},), got {action.shape}")
        if np.any(np.abs(action) > 1.0 + 1e-6):
            raise ValueError("action components must lie in [-1, 1]")
        total = 0.0
        terminal = False
        for _ in range(self.config.action_repeat):
            reward, terminal = self.task.step(action)
            total += reward
            self._inner_steps += 1
            if terminal or self._inner_steps >= self.config.episode_limit:
                break
        self._frames.append(self.task.render())
        self._done = terminal or self._inner_steps >= self.config.episode_limit
        return self.observation(), total, self._done


def random_crop(frame: np.ndarray, out_hw, rng: np.random.Generator) -> np.ndarray:
    """Crop an ``(H, W, ...)`` array to ``out_hw`` at a uniformly random offset."""
    h, w = frame.shape[:2]
    oh, ow = out_hw
    if oh > h or ow > w:
        raise ValueError(f"crop {out_hw} is larger than input {(h, w)}")
    r = int(rng.integers(0, h - oh + 1))
    c = int(rng.integers(0, w - ow + 1))
    return frame[r:r + oh, c:c + ow].copy()


def crop_batch(obs: np.ndarray, out_hw, rng: np.random.Generator) -> np.ndarray:
    """Randomly crop channel-first stacks ``(N, C, H, W)``.

    One offset is drawn per stack, so all frames of a stack share it.
    """
    n, _, h, w = obs.shape
    oh, ow = out_hw
    if oh > h or ow > w:
        raise ValueError(f"crop {out_hw} is larger than input {(h, w)}")
    rows = rng.integers(0, h - oh + 1, size=n)
    cols = rng.integers(0, w - ow + 1, size=n)
    # (N, C, h-oh+1, w-ow+1, oh, ow) view, then pick one window per stack
    windows = np.lib.stride_tricks.sliding_window_view(obs, (oh, ow), axis=(2, 3))
    return windows[np.arange(n), :, rows, cols].copy()


def center_crop(obs: np.ndarray, out_hw) -> np.ndarray:
    h, w = obs.shape[-2:]
    oh, ow = out_hw
    r, c = (h - oh) // 2, (w - ow) // 2
    return obs[..., r:r + oh, c:c + ow]


def to_channels_first(stack: np.ndarray) -> np.ndarray:
    """``(K, H, W, C)`` stack -> ``(K*C, H, W)``."""
    k, h, w, c = stack.shape
    return stack.transpose(0, 3, 1, 2).reshape(k * c, h, w)
