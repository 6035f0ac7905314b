"""Adam for the server-held model and for client-held embedding rows."""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, lr: float = 0.01, betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        """Update ``params`` in place."""
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for name in sorted(grads):
            g = grads[name]
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            params[name] -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


class RowAdam:
    """Independent Adam state per row, so each client keeps its own optimizer."""

    def __init__(self, n_rows: int, dim: int, lr: float = 0.01, betas=(0.9, 0.999), eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.t = np.zeros(n_rows, dtype=np.int64)
        self.m = np.zeros((n_rows, dim))
        self.v = np.zeros((n_rows, dim))

    def step(self, table: np.ndarray, rows: np.ndarray, grads: np.ndarray) -> None:
        self.t[rows] += 1
        t = self.t[rows][:, None]
        m = self.b1 * self.m[rows] + (1.0 - self.b1) * grads
        v = self.b2 * self.v[rows] + (1.0 - self.b2) * grads * grads
        self.m[rows], self.v[rows] = m, v
        table[rows] -= self.lr * (m / (1.0 - self.b1**t)) / (np.sqrt(v / (1.0 - self.b2**t)) + self.eps)
