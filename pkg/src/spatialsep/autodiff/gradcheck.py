"""Central finite-difference verification of analytic gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tape


def relative_error(analytic, numeric) -> np.ndarray:
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def check_gradients(loss_fn, params, h: float = 1e-5, max_entries: int | None = None,
                    seed: int = 0) -> dict[str, float]:
    """Compare reverse-mode gradients of ``loss_fn()`` with central differences.

    ``loss_fn`` takes no arguments and returns a scalar tensor built from
    ``params``. For large parameters ``max_entries`` picks a random subset of
    coordinates to perturb. Returns the maximum relative error per parameter
    name.
    """
    params = [p for p in params if p.trainable]
    for p in params:
        p.zero_grad()
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic = {p.name: p.grad.copy() for p in params}

    rng = np.random.default_rng(seed)
    report = {}
    for p in params:
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, size=max_entries, replace=False))
        numeric = np.empty(idx.size)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + h
            f_plus = float(loss_fn().value)
            flat[i] = orig - h
            f_minus = float(loss_fn().value)
            flat[i] = orig
            numeric[j] = (f_plus - f_minus) / (2.0 * h)
        a = analytic[p.name].reshape(-1)[idx]
        report[p.name] = float(relative_error(a, numeric).max()) if idx.size else 0.0
        p.zero_grad()
    return report
