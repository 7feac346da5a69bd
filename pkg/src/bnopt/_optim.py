"""Bounded derivative-free minimization on the unit box."""

import numpy as np


def lhd_unit(n: int, dims: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, dims))
    for j in range(dims):
        out[:, j] = (rng.permutation(n) + rng.random(n)) / n
    return out


def pattern_search(f, x0, step=0.25, tol=1e-3, max_evals=2000, f0=None):
    """Coordinate-wise compass search on [0, 1]^P.

    Polls ``x +- step * e_i`` in order, moves to the first improving point
    and halves the step after a full unsuccessful sweep.  Returns the final
    point, its value and the number of evaluations used.
    """
    x = np.clip(np.asarray(x0, dtype=float), 0.0, 1.0)
    fx = f(x) if f0 is None else f0
    evals = 0 if f0 is not None else 1
    h = step
    while h >= tol and evals < max_evals:
        improved = False
        for i in range(x.size):
            for sign in (1.0, -1.0):
                xi = min(max(x[i] + sign * h, 0.0), 1.0)
                if xi == x[i]:
                    continue
                y = x.copy()
                y[i] = xi
                fy = f(y)
                evals += 1
                if fy < fx:
                    x, fx, improved = y, fy, True
                    break
            if evals >= max_evals:
                break
        if not improved:
            h *= 0.5
    return x, fx, evals
