"""Proximity operators and Moreau-envelope gradients.

Each ``prox_*`` returns argmin_x lam*R(x) + 0.5*||x - z||^2 for its norm R.
All functions are pure and return fresh arrays.
"""

from __future__ import annotations

import numpy as np
from numpy.typing import ArrayLike

from src.core import Array, NumericalFault


def _threshold(lam: float, name: str = "lam") -> float:
    lam = float(lam)
    if not lam > 0.0:
        raise ValueError(f"{name} must be positive, got {lam}")
    return lam


def norm_l1(x: ArrayLike) -> float:
    """Sum of absolute entries."""
    return float(np.sum(np.abs(x)))


def norm_linf(x: ArrayLike) -> float:
    """Largest absolute entry, 0 for an empty array."""
    return float(np.max(np.abs(x))) if np.size(x) else 0.0


def tv_norm(x: ArrayLike) -> float:
    """Anisotropic 1-D total variation sum |x[i+1] - x[i]|."""
    return float(np.sum(np.abs(np.diff(np.asarray(x, dtype=np.float64)))))


def norm_nuclear(X: ArrayLike) -> float:
    """Sum of the singular values of a matrix."""
    try:
        return float(np.sum(np.linalg.svd(np.asarray(X, dtype=np.float64), compute_uv=False)))
    except np.linalg.LinAlgError as exc:
        raise NumericalFault(f"SVD did not converge: {exc}") from exc


def prox_l1(z: ArrayLike, lam: float) -> Array:
    """Soft-thresholding sign(z) * max(|z| - lam, 0), entrywise for any shape."""
    lam = _threshold(lam)
    z = np.asarray(z, dtype=np.float64)
    return np.sign(z) * np.maximum(np.abs(z) - lam, 0.0)


def project_l1_ball(z: ArrayLike, radius: float) -> Array:
    """Euclidean projection onto {x : ||x||_1 <= radius}.

    Sort-based thresholding: find theta with sum max(|z| - theta, 0) = radius.

    Args:
        z: Vector to project
        radius: Positive ball radius

    Returns:
        The projection; ``z`` itself (copied) when already feasible
    """
    radius = _threshold(radius, "radius")
    z = np.asarray(z, dtype=np.float64)
    mag = np.abs(z)
    if mag.sum() <= radius:
        return z.copy()
    u = np.sort(mag.ravel())[::-1]
    cssv = np.cumsum(u) - radius
    ind = np.arange(1, u.size + 1)
    rho = int(np.flatnonzero(u > cssv / ind)[-1])
    theta = cssv[rho] / (rho + 1)
    return np.sign(z) * np.maximum(mag - theta, 0.0)


def prox_linf(z: ArrayLike, lam: float) -> Array:
    """Prox of lam*||.||_inf through the Moreau decomposition with the l1 ball."""
    lam = _threshold(lam)
    z = np.asarray(z, dtype=np.float64)
    return z - lam * project_l1_ball(z / lam, 1.0)


def _fill(out: Array, start: int, last: int, value: float) -> int:
    # writes at least one sample, returns the next segment start
    stop = max(last, start) + 1
    out[start:stop] = value
    return stop


def prox_tv1d(z: ArrayLike, lam: float) -> Array:
    """Exact prox of lam * sum |x[i+1] - x[i]| (direct taut-string method).

    Scans the signal once, tracking the admissible range [vmin, vmax] of the
    current segment value and the dual variable bounds; a segment is closed
    as soon as one bound is violated. Linear in practice.
    """
    lam = _threshold(lam)
    signal = np.asarray(z, dtype=np.float64)
    if signal.ndim != 1:
        raise ValueError(f"prox_tv1d expects a vector, got shape {signal.shape}")
    n = signal.size
    out = np.empty(n)
    if n == 0:
        return out
    inp = signal.tolist()
    last = n - 1
    k = k0 = kplus = kminus = 0
    umin, umax = lam, -lam
    vmin, vmax = inp[0] - lam, inp[0] + lam
    twolam = 2.0 * lam

    while True:
        while k == last:
            if umin < 0.0:
                k0 = _fill(out, k0, kminus, vmin)
                vmin = inp[k0]
                kminus = k = k0
                umin = lam
                umax = vmin + umin - vmax
            elif umax > 0.0:
                k0 = _fill(out, k0, kplus, vmax)
                vmax = inp[k0]
                kplus = k = k0
                umax = -lam
                umin = vmax + umax - vmin
            else:
                vmin += umin / (k - k0 + 1)
                _fill(out, k0, k, vmin)
                return out
        umin += inp[k + 1] - vmin
        if umin < -lam:
            # negative jump
            k0 = _fill(out, k0, kminus, vmin)
            vmin = inp[k0]
            kplus = kminus = k = k0
            vmax = vmin + twolam
            umin, umax = lam, -lam
            continue
        umax += inp[k + 1] - vmax
        if umax > lam:
            # positive jump
            k0 = _fill(out, k0, kplus, vmax)
            vmax = inp[k0]
            kplus = kminus = k = k0
            vmin = vmax - twolam
            umin, umax = lam, -lam
            continue
        k += 1
        if umin >= lam:
            kminus = k
            vmin += (umin - lam) / (kminus - k0 + 1)
            umin = lam
        if umax <= -lam:
            kplus = k
            vmax += (umax + lam) / (kplus - k0 + 1)
            umax = -lam


def prox_nuclear(Z: ArrayLike, lam: float) -> Array:
    """Singular value thresholding U diag(max(s - lam, 0)) V^T.

    Raises:
        NumericalFault: if the SVD does not converge
    """
    lam = _threshold(lam)
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2:
        raise ValueError(f"prox_nuclear expects a matrix, got shape {Z.shape}")
    try:
        U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    except np.linalg.LinAlgError as exc:
        raise NumericalFault(f"SVD did not converge: {exc}") from exc
    shrunk = np.maximum(s - lam, 0.0)
    keep = shrunk > 0.0
    return (U[:, keep] * shrunk[keep]) @ Vt[keep, :]


def moreau_env_grad_l1(z: ArrayLike, mu: float) -> Array:
    """Gradient z - prox_l1(z, mu) of the index-1 Moreau envelope of mu*||.||_1.

    Equals the entrywise clip of z to [-mu, mu].
    """
    mu = _threshold(mu, "mu")
    z = np.asarray(z, dtype=np.float64)
    return z - prox_l1(z, mu)


def moreau_env_l1(z: ArrayLike, mu: float) -> float:
    """Value of the index-1 Moreau envelope of mu*||.||_1 (the Huber function)."""
    mu = _threshold(mu, "mu")
    z = np.asarray(z, dtype=np.float64)
    p = prox_l1(z, mu)
    return mu * norm_l1(p) + 0.5 * float(np.sum((p - z) ** 2))
