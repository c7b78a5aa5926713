"""Central finite-difference checks for the autograd engine."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor


def numeric_grad(fn: Callable[..., Tensor], arrays: Sequence[np.ndarray], which: int, coords, step: float = 1e-3) -> np.ndarray:
    """Central differences of ``fn`` w.r.t. ``arrays[which]`` at flat indices ``coords``."""
    base = [np.array(a, dtype=np.float64) for a in arrays]
    out = np.zeros(len(coords))
    flat = base[which].reshape(-1)
    for n, idx in enumerate(coords):
        orig = flat[idx]
        flat[idx] = orig + step
        up = float(fn(*[Tensor(a) for a in base]).data)
        flat[idx] = orig - step
        down = float(fn(*[Tensor(a) for a in base]).data)
        flat[idx] = orig
        out[n] = (up - down) / (2 * step)
    return out


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    """||a - n|| / max(||a||, ||n||, floor).

    The floor keeps gradients that vanish identically (a bias feeding a batch
    norm, say) from turning differencing noise into a relative error of 1.
    """
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), floor)
    return float(np.linalg.norm(analytic - numeric) / scale)


def check_gradients(
    fn: Callable[..., Tensor],
    arrays: Sequence[np.ndarray],
    step: float = 1e-5,
    max_coords: int | None = 40,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Relative error of the analytic gradient for each input array.

    The arrays are rounded to float32 first (so the check sees values the f32
    path can hold) and the graph is then evaluated in float64.  At most
    ``max_coords`` randomly chosen entries per array are differenced.  Since
    the evaluation is in float64 a small step is safe; it keeps the O(step²)
    truncation error and the odds of straddling a relu kink low.
    """
    rng = rng or np.random.default_rng(0)
    arrays = [np.asarray(a, dtype=np.float32).astype(np.float64) for a in arrays]
    errors = []
    with T.precision(np.float64):
        leaves = [Tensor(a, requires_grad=True) for a in arrays]
        loss = fn(*leaves)
        grads = T.grad(loss, leaves)
        for i, (a, g) in enumerate(zip(arrays, grads)):
            n = a.size
            coords = np.arange(n) if max_coords is None or n <= max_coords else rng.choice(n, max_coords, replace=False)
            num = numeric_grad(fn, arrays, i, coords, step)
            errors.append(relative_error(g.reshape(-1)[coords], num))
    return errors
