from __future__ import annotations

import numpy as np
import torch

from informed_dreamer.diffcore import DTYPE, ContractError
from informed_dreamer.worldmodel import Batch

FIELDS = ("action", "reward", "info", "obs", "cont", "mask")


class ReplayBuffer:
    """FIFO ring of fixed-length windows, sampled uniformly with replacement.

    Storage is allocated on the first insertion; untouched pages of the
    zero-initialised arrays are not committed by the OS.
    """

    def __init__(self, capacity: int, window: int):
        if capacity < 1 or window < 1:
            raise ContractError("capacity and window must be positive")
        self.capacity = capacity
        self.window = window
        self.data: dict[str, np.ndarray] | None = None
        self.size = 0
        self.ptr = 0
        self.added = 0

    def __len__(self) -> int:
        return self.size

    def add(self, window: dict[str, np.ndarray]) -> None:
        if window["reward"].shape[0] != self.window:
            raise ContractError(f"window length {window['reward'].shape[0]} != {self.window}")
        if self.data is None:
            self.data = {
                k: np.zeros((self.capacity, *np.shape(window[k])), dtype=np.float64) for k in FIELDS
            }
        for k in FIELDS:
            self.data[k][self.ptr] = window[k]
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.added += 1

    def oldest_first(self) -> np.ndarray:
        """Slot indices from oldest to newest."""
        if self.size < self.capacity:
            return np.arange(self.size)
        return (np.arange(self.capacity) + self.ptr) % self.capacity

    def sample_indices(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.size == 0:
            raise ContractError("cannot sample from an empty replay buffer")
        return rng.integers(0, self.size, size=n)

    def sample(self, n: int, rng: np.random.Generator) -> Batch:
        idx = self.sample_indices(n, rng)
        return Batch(**{k: torch.from_numpy(self.data[k][idx]).to(DTYPE) for k in FIELDS})


def make_window(slots: list[dict], window: int, action_dim: int) -> dict[str, np.ndarray]:
    """Stack the last ``window`` slots, left-padding short histories with masked null slots."""
    recent = slots[-window:]
    pad = window - len(recent)
    info_dim = recent[0]["info"].shape[0]
    obs_dim = recent[0]["obs"].shape[0]
    out = {
        "action": np.zeros((window, action_dim)),
        "reward": np.zeros(window),
        "info": np.zeros((window, info_dim)),
        "obs": np.zeros((window, obs_dim)),
        "cont": np.zeros(window),
        "mask": np.zeros(window),
    }
    for j, s in enumerate(recent, start=pad):
        out["action"][j] = s["action"]
        out["reward"][j] = s["reward"]
        out["info"][j] = s["info"]
        out["obs"][j] = s["obs"]
        out["cont"][j] = s["cont"]
        out["mask"][j] = 1.0
    return out
