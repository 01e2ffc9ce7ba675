"""Central finite-difference comparison against reverse-mode gradients."""
from __future__ import annotations

import numpy as np

from .tensor import Tensor


def numeric_grad(fn, p: Tensor, step: float = 1e-5) -> np.ndarray:
    flat = p.data.reshape(-1)
    out = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fn().item()
        flat[i] = orig - step
        fm = fn().item()
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(p.shape)


# Below this gradient magnitude differences are finite-difference noise; an
# exactly-zero gradient (e.g. a softmax-invariant key bias) otherwise reads as 100% error.
GRAD_SCALE_FLOOR = 1e-5


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = GRAD_SCALE_FLOOR) -> float:
    """max |a - n| scaled by the larger of the two gradients' max magnitudes (at least ``floor``)."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0), floor)
    return float(np.abs(analytic - numeric).max(initial=0.0) / scale)


def check_gradients(fn, params: dict, step: float = 1e-5, max_entries: int | None = None, rng=None) -> dict:
    """Return ``{name: relative_error}`` for every tensor in ``params``.

    ``fn`` must rebuild and return a scalar loss from the current parameter
    values without any hidden randomness. With ``max_entries`` set, at most
    that many randomly chosen coordinates per tensor are probed.
    """
    for p in params.values():
        if p.dtype != np.float64:
            raise TypeError("gradient checks require float64 parameters")
        p.grad = None
    fn().backward()
    analytic = {k: (np.zeros_like(p.data) if p.grad is None else p.grad.copy()) for k, p in params.items()}
    report = {}
    for name, p in params.items():
        if max_entries is None or p.size <= max_entries:
            report[name] = relative_error(analytic[name], numeric_grad(fn, p, step))
            continue
        rng = rng if rng is not None else np.random.default_rng(0)
        idx = rng.choice(p.size, size=max_entries, replace=False)
        flat = p.data.reshape(-1)
        num = np.zeros(max_entries)
        for j, i in enumerate(idx):
            orig = flat[i]
            flat[i] = orig + step
            fp = fn().item()
            flat[i] = orig - step
            fm = fn().item()
            flat[i] = orig
            num[j] = (fp - fm) / (2.0 * step)
        report[name] = relative_error(analytic[name].reshape(-1)[idx], num)
    for p in params.values():
        p.grad = None
    return report
