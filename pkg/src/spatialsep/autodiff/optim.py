"""First-order optimization: Adam, gradient-norm clipping, plateau halving."""
from __future__ import annotations

import numpy as np

from .tensor import Parameter


def clip_grad_norm(params, max_norm: float) -> float:
    """Rescale gradients in place so their joint L2 norm is at most ``max_norm``.

    Returns the norm before clipping.
    """
    params = [p for p in params if p.trainable]
    total = float(np.sqrt(sum(float(np.sum(p.grad ** 2)) for p in params)))
    if max_norm is not None and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            p.grad = p.grad * scale
    return total


class Adam:
    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params) -> None:
        """Apply one bias-corrected update to every trainable parameter, then zero grads."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1 ** t
        c2 = 1.0 - self.beta2 ** t
        for p in params:
            if not p.trainable:
                p.zero_grad()
                continue
            m = self.m.get(p.name)
            if m is None:
                m = self.m[p.name] = np.zeros_like(p.value)
                self.v[p.name] = np.zeros_like(p.value)
            v = self.v[p.name]
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad ** 2
            p.value = p.value - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.zero_grad()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in self.m:
            out[f"adam.m/{name}"] = self.m[name]
            out[f"adam.v/{name}"] = self.v[name]
        return out

    def state_meta(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "step": self.step_count}

    def load_state(self, meta: dict, arrays: dict[str, np.ndarray]) -> None:
        self.lr = meta["lr"]
        self.beta1, self.beta2, self.eps = meta["beta1"], meta["beta2"], meta["eps"]
        self.step_count = meta["step"]
        self.m = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("adam.m/")}
        self.v = {k.split("/", 1)[1]: v.copy() for k, v in arrays.items() if k.startswith("adam.v/")}


class PlateauHalver:
    """Halve the optimizer's learning rate after ``patience`` evaluations without improvement.

    Higher scores are better (the trainer feeds it SI-SDRi or negative loss).
    """

    def __init__(self, optimizer: Adam, patience: int = 3, factor: float = 0.5):
        self.optimizer = optimizer
        self.patience = patience
        self.factor = factor
        self.best = -np.inf
        self.bad_evals = 0

    def update(self, score: float) -> bool:
        if score > self.best:
            self.best = score
            self.bad_evals = 0
            return False
        self.bad_evals += 1
        if self.bad_evals >= self.patience:
            self.optimizer.lr *= self.factor
            self.bad_evals = 0
            return True
        return False

    def state(self) -> dict:
        return {"best": None if not np.isfinite(self.best) else self.best,
                "bad_evals": self.bad_evals}

    def load_state(self, state: dict) -> None:
        self.best = -np.inf if state.get("best") is None else state["best"]
        self.bad_evals = state.get("bad_evals", 0)


def zero_grads(params) -> None:
    for p in params:
        if isinstance(p, Parameter):
            p.zero_grad()
