"""Central finite differences for checking tape gradients."""
from __future__ import annotations

from typing import Callable, Dict, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numeric_grad(fn: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray],
                 which: int, flat_index: int, h: float = 1e-6) -> float:
    """d fn / d arrays[which].flat[flat_index] by central difference.

    ``fn`` takes plain arrays and returns a float; nothing here touches a tape.
    """
    plus = [a.copy() for a in arrays]
    minus = [a.copy() for a in arrays]
    plus[which].reshape(-1)[flat_index] += h
    minus[which].reshape(-1)[flat_index] -= h
    return (fn(plus) - fn(minus)) / (2.0 * h)


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(fn: Callable[[Sequence[Tensor]], Tensor], arrays: Sequence[np.ndarray],
                    samples: Optional[int] = None, h: float = 1e-6, floor: float = 1e-8,
                    rng: Optional[np.random.Generator] = None) -> Dict[str, float]:
    """Compare analytic and numeric gradients of scalar ``fn`` at ``arrays``.

    ``samples`` coordinates are drawn across all inputs (all coordinates when
    None). Returns the worst relative error and the number of checks.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    params = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape():
        loss = fn(params)
    grads = backward(loss)

    def scalar(arrs):
        return fn([Tensor(a) for a in arrs]).item()

    coords = [(w, i) for w, a in enumerate(arrays) for i in range(a.size)]
    if samples is not None and samples < len(coords):
        rng = rng or np.random.default_rng(0)
        pick = rng.choice(len(coords), size=samples, replace=False)
        coords = [coords[p] for p in sorted(pick)]
    worst = 0.0
    for w, i in coords:
        analytic = float(grads[params[w]].reshape(-1)[i])
        numeric = numeric_grad(scalar, arrays, w, i, h)
        worst = max(worst, relative_error(analytic, numeric, floor))
    return {"max_rel_error": worst, "checked": len(coords)}
