"""Adam optimizer over named numpy parameter arrays.

State is kept per parameter name and can be remapped when surfels are split
or pruned, so moments follow surviving rows and fresh rows start cold.
"""

from __future__ import annotations

import numpy as np


class Adam:
    def __init__(self, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-15):
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, name: str, param: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
        """One update, in place on param. Returns param for chaining."""
        g = np.asarray(grad, dtype=np.float64)
        if g.shape != param.shape:
            raise ValueError(f"gradient shape {g.shape} != param shape {param.shape}")
        if name not in self.m:
            self.m[name] = np.zeros(param.shape, dtype=np.float64)
            self.v[name] = np.zeros(param.shape, dtype=np.float64)
            self.t[name] = 0
        self.t[name] += 1
        t = self.t[name]
        m = self.m[name]
        v = self.v[name]
        m *= self.beta1
        m += (1.0 - self.beta1) * g
        v *= self.beta2
        v += (1.0 - self.beta2) * g * g
        m_hat = m / (1.0 - self.beta1 ** t)
        v_hat = v / (1.0 - self.beta2 ** t)
        param -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(param.dtype)
        return param

    def remap(self, name: str, index: np.ndarray) -> None:
        """Reindex state rows along axis 0; index -1 rows start from zero."""
        if name not in self.m:
            return
        idx = np.asarray(index, dtype=np.int64)
        keep = idx >= 0
        src = np.where(keep, idx, 0)
        for store in (self.m, self.v):
            old = store[name]
            new = old[src]
            new[~keep] = 0.0
            store[name] = new

    def remap_all(self, index: np.ndarray) -> None:
        for name in list(self.m):
            self.remap(name, index)

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat dict for checkpointing: moments and step counters by name."""
        out: dict[str, np.ndarray] = {}
        for name in self.m:
            out[f"adam_m_{name}"] = self.m[name]
            out[f"adam_v_{name}"] = self.v[name]
            out[f"adam_t_{name}"] = np.asarray(self.t[name], dtype=np.int64)
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.m.clear()
        self.v.clear()
        self.t.clear()
        for key, val in arrays.items():
            if key.startswith("adam_m_"):
                self.m[key[len("adam_m_"):]] = np.array(val, dtype=np.float64)
            elif key.startswith("adam_v_"):
                self.v[key[len("adam_v_"):]] = np.array(val, dtype=np.float64)
            elif key.startswith("adam_t_"):
                self.t[key[len("adam_t_"):]] = int(val)
        if set(self.m) != set(self.v) or set(self.m) != set(self.t):
            raise ValueError("incomplete optimizer state")
