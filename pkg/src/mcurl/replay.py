"""FIFO transition store with i.i.d. and consecutive-window sampling.

Observations are kept channel-first as ``uint8`` (``round(255 * x)``), which is
lossless for frames rendered by :mod:`mcurl.env`.

Snapshot format (``ReplayBuffer.save``): an uncompressed ``.npz`` archive with
``header`` (int64 ``[FORMAT_VERSION, capacity, size]``), ``obs`` and
``next_obs`` (``uint8``, ``(size, C, H, W)``), ``action`` (float32),
``reward`` (float32) and ``done`` (bool), all in insertion order, oldest first.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mcurl.env import to_channels_first

FORMAT_VERSION = 1


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    next_state: np.ndarray
    reward: float
    done: bool


@dataclass
class Batch:
    obs: np.ndarray
    action: np.ndarray
    reward: np.ndarray
    next_obs: np.ndarray
    done: np.ndarray
    indices: np.ndarray


@dataclass
class WindowSample:
    states: np.ndarray  # (T, C, H, W) float32, chronological
    actions: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    start_index: int

    @property
    def indices(self) -> np.ndarray:
        return np.arange(self.start_index, self.start_index + len(self.dones))


def _encode(stack: np.ndarray) -> np.ndarray:
    if stack.ndim == 4:
        stack = to_channels_first(stack)
    return np.rint(np.asarray(stack, dtype=np.float32) * 255.0).astype(np.uint8)


def _decode(obs: np.ndarray) -> np.ndarray:
    return obs.astype(np.float32) / 255.0


class ReplayBuffer:
    def __init__(self, capacity: int, obs_shape, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.obs_shape = tuple(obs_shape)
        self.action_dim = action_dim
        # np.empty leaves pages uncommitted until written
        self._obs = np.empty((capacity, *self.obs_shape), dtype=np.uint8)
        self._next_obs = np.empty((capacity, *self.obs_shape), dtype=np.uint8)
        self._action = np.empty((capacity, action_dim), dtype=np.float32)
        self._reward = np.empty(capacity, dtype=np.float32)
        self._done = np.empty(capacity, dtype=bool)
        self._head = 0  # physical slot of the oldest entry
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def _physical(self, logical):
        return (self._head + np.asarray(logical)) % self.capacity

    def append(self, transition: Transition) -> None:
        self.add(transition.state, transition.action, transition.reward,
                 transition.next_state, transition.done)

    def add(self, obs, action, reward, next_obs, done) -> None:
        action = np.asarray(action, dtype=np.float32)
        if action.shape != (self.action_dim,):
            raise ValueError(f"action must have shape ({self.action_dim},)")
        if self._size == self.capacity:
            slot = self._head
            self._head = (self._head + 1) % self.capacity
        else:
            slot = (self._head + self._size) % self.capacity
            self._size += 1
        self._obs[slot] = _encode(obs)
        self._next_obs[slot] = _encode(next_obs)
        self._action[slot] = action
        self._reward[slot] = reward
        self._done[slot] = bool(done)

    def get(self, index: int) -> Transition:
        if not -self._size <= index < self._size:
            raise IndexError(index)
        slot = int(self._physical(index % self._size))
        return Transition(_decode(self._obs[slot]), self._action[slot].copy(),
                          _decode(self._next_obs[slot]), float(self._reward[slot]),
                          bool(self._done[slot]))

    def dones(self) -> np.ndarray:
        """Done flags in insertion order."""
        return self._done[self._physical(np.arange(self._size))]

    def gather(self, indices) -> Batch:
        slots = self._physical(indices)
        return Batch(
            obs=_decode(self._obs[slots]),
            action=self._action[slots],
            reward=self._reward[slots],
            next_obs=_decode(self._next_obs[slots]),
            done=self._done[slots],
            indices=np.asarray(indices),
        )

    def sample_iid_indices(self, batch_size: int, rng: np.random.Generator) -> np.ndarray:
        if self._size == 0:
            raise ValueError("cannot sample from an empty replay buffer")
        return rng.integers(0, self._size, size=batch_size)

    def sample_iid(self, batch_size: int, rng: np.random.Generator) -> Batch:
        """Uniform sampling with replacement over the current entries."""
        return self.gather(self.sample_iid_indices(batch_size, rng))

    def sample_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` observations drawn uniformly from the whole buffer."""
        idx = self.sample_iid_indices(n, rng)
        return _decode(self._obs[self._physical(idx)])

    def valid_window_starts(self, T: int) -> np.ndarray:
        """Start indices of every length-``T`` window with no interior terminal.

        A terminal may sit in the window's last slot but nowhere before it.
        """
        if T < 1:
            raise ValueError("window length must be >= 1")
        n = self._size - T + 1
        if n <= 0:
            return np.zeros(0, dtype=np.int64)
        dones = self.dones().astype(np.int64)
        # csum[j] = number of terminals among the first j entries
        csum = np.concatenate([[0], np.cumsum(dones)])
        starts = np.arange(n)
        interior = csum[starts + T - 1] - csum[starts]
        return starts[interior == 0]

    def sample_window_starts(self, T: int, n: int, rng: np.random.Generator) -> np.ndarray:
        starts = self.valid_window_starts(T)
        if len(starts) == 0:
            raise ValueError(f"no valid window of length {T} in a buffer of {self._size} entries")
        return starts[rng.integers(0, len(starts), size=n)]

    def window(self, start: int, T: int) -> WindowSample:
        b = self.gather(np.arange(start, start + T))
        return WindowSample(b.obs, b.action, b.reward, b.done, int(start))

    def sample_window(self, T: int, rng: np.random.Generator) -> WindowSample:
        start = self.sample_window_starts(T, 1, rng)[0]
        return self.window(int(start), T)

    def save(self, path) -> None:
        order = self._physical(np.arange(self._size))
        header = np.array([FORMAT_VERSION, self.capacity, self._size], dtype=np.int64)
        with open(path, "wb") as fh:
            np.savez(fh, header=header, obs=self._obs[order], next_obs=self._next_obs[order],
                     action=self._action[order], reward=self._reward[order], done=self._done[order])

    @classmethod
    def load(cls, path) -> "ReplayBuffer":
        with np.load(path) as data:
            version, capacity, size = (int(v) for v in data["header"])
            if version != FORMAT_VERSION:
                raise ValueError(f"unsupported replay snapshot version {version}")
            buf = cls(capacity, data["obs"].shape[1:], data["action"].shape[1])
            buf._obs[:size] = data["obs"]
            buf._next_obs[:size] = data["next_obs"]
            buf._action[:size] = data["action"]
            buf._reward[:size] = data["reward"]
            buf._done[:size] = data["done"]
            buf._size = size
        return buf
