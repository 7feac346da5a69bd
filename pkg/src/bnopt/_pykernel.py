"""Pure-numpy cross-correlation for the mixed kernel (fallback backend)."""

import numpy as np

SQRT3 = np.sqrt(3.0)
SQRT5 = np.sqrt(5.0)


def matern(r, nu_code):
    """Matérn profile at scaled distance ``r``; ``nu_code`` is 2*nu (1, 3 or 5)."""
    if nu_code == 1:
        return np.exp(-r)
    if nu_code == 3:
        s = SQRT3 * r
        return (1.0 + s) * np.exp(-s)
    s = SQRT5 * r
    return (1.0 + s + s * s / 3.0) * np.exp(-s)


def cross_corr(w1, z1, v1, w2, z2, v2, theta, gamma, phi, parent, level, qual, nu_code,
               symmetric=False):
    n1, n2 = w1.shape[0], w2.shape[0]
    poly = np.ones((n1, n2))
    expo = np.zeros((n1, n2))
    for i in range(w1.shape[1]):
        s = theta[i] * np.abs(w1[:, i, None] - w2[None, :, i])
        if nu_code == 3:
            s = SQRT3 * s
            poly *= 1.0 + s
        elif nu_code == 5:
            s = SQRT5 * s
            poly *= 1.0 + s + s * s / 3.0
        expo += s
    for k in range(z1.shape[1]):
        expo += gamma[k] * (z1[:, k, None] != z2[None, :, k])
    for t in range(v1.shape[1]):
        k = parent[t]
        both = (z1[:, k, None] == level[t]) & (z2[None, :, k] == level[t])
        if not both.any():
            continue
        diff = v1[:, t, None] - v2[None, :, t]
        dist = (diff != 0.0) if qual[t] else np.abs(diff)
        expo += np.where(both, phi[t] * dist, 0.0)
    return poly * np.exp(-expo)
