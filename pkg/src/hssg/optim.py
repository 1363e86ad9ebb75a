"""Adam with bias correction, in f32 like the rest of the engine."""

import numpy as np

from .errors import DimensionError
from .tensor import F32, Tensor


class AdamState:
    """First/second moment buffers plus the global step counter."""

    def __init__(self, params: dict):
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.step = 0

    def to_arrays(self) -> dict:
        out = {f"adam.m.{k}": v for k, v in self.m.items()}
        out.update({f"adam.v.{k}": v for k, v in self.v.items()})
        out["adam.step"] = np.array([self.step], dtype=np.float32)
        return out

    @classmethod
    def from_arrays(cls, params: dict, arrays: dict) -> "AdamState":
        state = cls(params)
        for k in params:
            state.m[k] = arrays[f"adam.m.{k}"].copy()
            state.v[k] = arrays[f"adam.v.{k}"].copy()
        state.step = int(arrays["adam.step"][0])
        return state


def adam_step(params: dict, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One in-place update; a missing gradient counts as zero."""
    state.step += 1
    t = state.step
    b1, b2 = F32(beta1), F32(beta2)
    c1 = F32(1.0 - beta1 ** t)
    c2 = F32(1.0 - beta2 ** t)
    lr, eps = F32(lr), F32(eps)
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[k].shape != p.data.shape:
            raise DimensionError(f"adam_step shape mismatch for {k!r}: {g.shape} vs {p.data.shape}")
        m = state.m[k] = b1 * state.m[k] + (F32(1) - b1) * g
        v = state.v[k] = b2 * state.v[k] + (F32(1) - b2) * (g * g)
        p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)


def collect_grads(params: dict) -> dict:
    return {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def clear_grads(params: dict):
    for p in params.values():
        p.grad = None


def clone_params(params: dict) -> dict:
    return {k: Tensor(p.data.copy(), requires_grad=True) for k, p in params.items()}
