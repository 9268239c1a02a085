"""Region InfoNCE with a FIFO queue of negatives and a momentum key encoder."""
from __future__ import annotations

import numpy as np

from . import tensorcore as tc
from .encoder import EncoderParams


class MemoryQueue:
    """Ring buffer of unit-norm key embeddings.

    Until ``capacity`` rows have been written only the filled prefix is used
    as negatives.
    """

    def __init__(self, capacity: int, dim: int):
        if capacity < 1:
            raise ValueError("queue capacity must be positive")
        self.capacity = capacity
        self.buffer = np.zeros((capacity, dim))
        self.cursor = 0
        self.filled = 0

    def enqueue(self, keys: np.ndarray) -> None:
        keys = np.atleast_2d(np.asarray(keys, dtype=np.float64))
        b = keys.shape[0]
        if b > self.capacity:
            raise ValueError(f"batch of {b} keys exceeds queue capacity {self.capacity}")
        idx = (self.cursor + np.arange(b)) % self.capacity
        self.buffer[idx] = keys
        self.cursor = (self.cursor + b) % self.capacity
        self.filled = min(self.capacity, self.filled + b)

    def negatives(self) -> np.ndarray:
        """Stored rows (read-only view); order is storage order, not age."""
        out = self.buffer[: self.filled]
        out.flags.writeable = False
        return out

    def oldest_first(self) -> np.ndarray:
        if self.filled < self.capacity:
            return self.buffer[: self.filled].copy()
        return np.roll(self.buffer, -self.cursor, axis=0)

    def __len__(self) -> int:
        return self.filled


def info_nce(q, k_pos, queue: MemoryQueue | np.ndarray, tau: float) -> tc.Tensor:
    """-log(exp(q.k+/tau) / (exp(q.k+/tau) + sum_i exp(q.k_i/tau))), batch-averaged.

    Gradients flow into ``q`` and ``k_pos`` (when they require them), never
    into the queue.
    """
    negatives = queue.negatives() if isinstance(queue, MemoryQueue) else queue
    return tc.info_nce(getattr(q, "vector", q), getattr(k_pos, "vector", k_pos), negatives, tau)


class MomentumState:
    def __init__(self, key_params: EncoderParams, momentum: float = 0.999):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"momentum must lie in [0, 1], got {momentum}")
        self.params = key_params
        self.momentum = momentum

    def update(self, query: EncoderParams) -> None:
        momentum_update(self, query)


def momentum_update(state: MomentumState, query: EncoderParams) -> None:
    m = state.momentum
    for name, key in state.params.arrays.items():
        q = query.arrays.get(name)
        if q is None or q.shape != key.shape:
            raise ValueError(f"momentum update shape mismatch at {name}")
        key *= m
        key += (1.0 - m) * q
