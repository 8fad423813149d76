"""Spectral analysis of FISTA-CD on quadratics.

For F(x) = 0.5*||Ax - b||^2 the error of the leading Hessian mode evolves
through 2x2 fixed-point matrices whose eigenvalue magnitude |rho| depends on
eta = 1 - alpha/L and the inertia a_k. Products of |rho| over k give the
envelope of the error; comparing envelopes of two d values gives the
lazy-start crossover figures.
"""

from __future__ import annotations

import logging
import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import pandas as pd
from numpy.typing import ArrayLike, NDArray
from scipy import linalg

from src.core import RunTrace

logger = logging.getLogger("fastfista.spectral")

# Offset after K_eq from which the closed-form ratio is trusted
RATIO_VALIDITY_OFFSET = 36

# Fitted law d*(tol) = FIT_INTERCEPT + FIT_SLOPE * (-tol - 2 - shift)
FIT_INTERCEPT = 10.75
FIT_SLOPE = 4.6


@dataclass(frozen=True)
class SpectralModel:
    """Eigenvalues of A^T A and the derived leading-mode quantities."""

    hessian_eigs: NDArray[np.float64]

    def __post_init__(self) -> None:
        eigs = np.sort(np.asarray(self.hessian_eigs, dtype=np.float64))
        if eigs.size == 0 or eigs[0] <= 0.0 or not np.isfinite(eigs).all():
            raise ValueError("hessian_eigs must be non-empty, finite and positive")
        object.__setattr__(self, "hessian_eigs", eigs)

    @classmethod
    def from_eigenvalues(cls, values: ArrayLike) -> SpectralModel:
        return cls(np.asarray(values, dtype=np.float64))

    @classmethod
    def from_matrix(cls, A: ArrayLike) -> SpectralModel:
        """Model of A^T A from a dense eigendecomposition."""
        A = np.asarray(A, dtype=np.float64)
        return cls(linalg.eigvalsh(A.T @ A))

    @property
    def L(self) -> float:
        return float(self.hessian_eigs[-1])

    @property
    def alpha(self) -> float:
        return float(self.hessian_eigs[0])

    @property
    def ratio(self) -> float:
        """alpha / L."""
        return self.alpha / self.L

    @property
    def eta(self) -> float:
        """Leading eigenvalue 1 - alpha/L of Id - (1/L) A^T A."""
        return 1.0 - self.ratio

    @property
    def a_star(self) -> float:
        s = math.sqrt(self.ratio)
        return (1.0 - s) / (1.0 + s)

    @property
    def rho_star(self) -> float:
        return 1.0 - math.sqrt(self.ratio)

    @property
    def cond_C(self) -> float:
        return self.L / self.alpha


def tridiag_spectrum(n: int) -> SpectralModel:
    """Model of the n x n tridiagonal matrix with 2 on the diagonal and -1 beside it.

    Uses the closed-form eigenvalues 2 - 2cos(j pi/(n+1)) = 4 sin^2(j pi/(2(n+1))),
    squared for A^T A.
    """
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    j = np.arange(1, n + 1, dtype=np.float64)
    eig_a = 4.0 * np.sin(j * np.pi / (2.0 * (n + 1))) ** 2
    return SpectralModel(eig_a**2)


def rho_magnitude(eta: ArrayLike, a: ArrayLike, a_star: ArrayLike) -> NDArray[np.float64] | float:
    """Magnitude of the leading eigenvalue of the 2x2 fixed-point matrix.

    For a <= a* both eigenvalues are real and the larger is
    ((1 + a) eta + sqrt((1 + a)^2 eta^2 - 4 a eta))/2; beyond a* they are
    complex with modulus sqrt(a eta). Vectorized over its arguments.
    """
    eta_arr = np.asarray(eta, dtype=np.float64)
    a_arr = np.asarray(a, dtype=np.float64)
    disc = np.maximum((1.0 + a_arr) ** 2 * eta_arr**2 - 4.0 * a_arr * eta_arr, 0.0)
    real = ((1.0 + a_arr) * eta_arr + np.sqrt(disc)) / 2.0
    out = np.where(a_arr <= a_star, real, np.sqrt(a_arr * eta_arr))
    return float(out) if out.ndim == 0 else out


def cd_coefficients(d: float, k_max: int) -> NDArray[np.float64]:
    """a_i = (i - 1)/(i + d) for i = 1..k_max."""
    i = np.arange(1, k_max + 1, dtype=np.float64)
    return (i - 1.0) / (i + d)


def _log_factors(d: float, count: int, model: SpectralModel) -> NDArray[np.float64]:
    # natural logs of |rho| for a_1..a_count
    a = cd_coefficients(d, count)
    return np.log(np.asarray(rho_magnitude(model.eta, a, model.a_star), dtype=np.float64))


def log_envelope(d: float, k: int, model: SpectralModel) -> float:
    """Natural log of the envelope E_{d,k}."""
    if k < 1:
        raise ValueError(f"k must be at least 1, got {k}")
    if d <= 0.0:
        raise ValueError(f"d must be positive, got {d}")
    if k == 1:
        return 0.0
    return math.fsum(_log_factors(d, k - 1, model).tolist())


def envelope(d: float, k: int, model: SpectralModel) -> float:
    """E_{d,k} = prod_{i=1}^{k-1} |rho(eta, a_i)| with T = 1.

    May underflow to 0.0 for long horizons; ratios should be formed from
    ``log_envelope``.
    """
    return math.exp(log_envelope(d, k, model))


def envelope_ratio(d_a: float, d_b: float, k: int, model: SpectralModel) -> float:
    """E_{d_a,k} / E_{d_b,k}."""
    return math.exp(log_envelope(d_a, k, model) - log_envelope(d_b, k, model))


def log_envelope_curve(d: float, k_max: int, model: SpectralModel) -> NDArray[np.float64]:
    """log10 E_{d,k} for k = 1..k_max."""
    if k_max < 1:
        raise ValueError(f"k_max must be at least 1, got {k_max}")
    curve = np.zeros(k_max)
    if k_max > 1:
        curve[1:] = np.cumsum(_log_factors(d, k_max - 1, model)) / math.log(10.0)
    return curve


def k_eq(d: float, a_star: float) -> int:
    """Smallest integer k with (k - 1)/(k + d) > a*, strictly.

    That is floor(X) + 1 with X = (1 + d a*)/(1 - a*); when X is an integer
    a_X equals a* and the result is X + 1.
    """
    if not 0.0 <= a_star < 1.0:
        raise ValueError(f"a_star must lie in [0, 1), got {a_star}")
    return math.floor((1.0 + d * a_star) / (1.0 - a_star)) + 1


def _a_star_from_cond(C: float) -> float:
    if C < 1.0:
        raise ValueError(f"condition number must be at least 1, got {C}")
    root = math.sqrt(C)
    return (root - 1.0) / (root + 1.0)


class RatioEstimate(NamedTuple):
    """Closed-form ratio and whether k is inside its validity range."""

    value: float
    valid: bool


def ratio_approx(C: float, k: int, d_slow: float = 20.0) -> RatioEstimate:
    """(2/(sqrt(C) + 1))^e ((k + d)/(d + 1))^e with e = (d - 2)/2.

    Approximates the envelope ratio between d = 2 and d = d_slow for
    k >= K_eq + 36; outside that range ``valid`` is False.
    """
    if d_slow <= 2.0:
        raise ValueError(f"d_slow must exceed 2, got {d_slow}")
    e = (d_slow - 2.0) / 2.0
    value = (2.0 / (math.sqrt(C) + 1.0)) ** e * ((k + d_slow) / (d_slow + 1.0)) ** e
    valid = k >= k_eq(d_slow, _a_star_from_cond(C)) + RATIO_VALIDITY_OFFSET
    if not valid:
        logger.warning(f"ratio_approx used at k={k}, below its validity range for C={C:.3g}")
    return RatioEstimate(value=value, valid=valid)


def ratio_exact(C: float, k: int, d_slow: float = 20.0) -> float:
    """prod_{i=K_eq}^{k} sqrt((i + d)/(i + 2)) evaluated in log space."""
    start = k_eq(d_slow, _a_star_from_cond(C))
    if k < start:
        return 1.0
    i = np.arange(start, k + 1, dtype=np.float64)
    logs = 0.5 * np.log1p((d_slow - 2.0) / (i + 2.0))
    return math.exp(math.fsum(logs.tolist()))


def iterations_for_ratio(C: float, R: float, d_slow: float = 20.0) -> float:
    """Iteration index at which ``ratio_approx`` reaches R."""
    if R <= 0.0:
        raise ValueError(f"R must be positive, got {R}")
    if d_slow <= 2.0:
        raise ValueError(f"d_slow must exceed 2, got {d_slow}")
    e = (d_slow - 2.0) / 2.0
    return (d_slow + 1.0) * (math.sqrt(C) + 1.0) / 2.0 * R ** (1.0 / e) - d_slow


def optimal_d_fit(tol: float, shift: float = 0.0) -> float:
    """Fitted optimal d for a target log10 tolerance, optionally shifted.

    Args:
        tol: log10 of the target envelope, at most -2
        shift: Offset between error and residual curves, non-negative

    Returns:
        10.75 + 4.6 * (-tol - 2 - shift)
    """
    if tol > -2.0:
        raise ValueError(f"tol must be at most -2, got {tol}")
    if shift < 0.0:
        raise ValueError(f"shift must be non-negative, got {shift}")
    return FIT_INTERCEPT + FIT_SLOPE * (-tol - 2.0 - shift)


def optimal_damping(lambda1: float, eps: float) -> float:
    """Damping omega = -2 sqrt(lambda1) log(eps) of the continuous-time model."""
    if lambda1 <= 0.0:
        raise ValueError(f"lambda1 must be positive, got {lambda1}")
    if not 0.0 < eps < 1.0:
        raise ValueError(f"eps must lie in ]0, 1[, got {eps}")
    return -2.0 * math.sqrt(lambda1) * math.log(eps)


def damping_to_d(omega: float) -> float:
    """The FISTA-CD d matching a damping omega (d = omega - 1)."""
    return omega - 1.0


def empirical_contraction(values: RunTrace | Sequence[float] | ArrayLike, window: int) -> float:
    """Observed per-step factor of the distance to the solution.

    Takes the last ``window`` values and returns (v_end/v_start)^(1/steps),
    the geometric mean of the step ratios. For a RunTrace the dist_to_ref
    column is used and steps are counted with the trace's k column.
    """
    if window < 2:
        raise ValueError(f"window must be at least 2, got {window}")
    if isinstance(values, RunTrace):
        dist = values.column("dist_to_ref")
        ks = values.column("k")
    else:
        dist = np.asarray(values, dtype=np.float64)
        ks = np.arange(dist.size, dtype=np.float64)
    if dist.size < window:
        raise ValueError(f"need {window} values, got {dist.size}")
    first, last = dist[-window], dist[-1]
    if first <= 0.0:
        raise ValueError("distances must be positive inside the window")
    steps = ks[-1] - ks[-window]
    return float((last / first) ** (1.0 / steps))


def iterations_to_tolerance(
    d: float, tol: float, model: SpectralModel, k_max: int = 10**6
) -> int | None:
    """Smallest k <= k_max with log10 E_{d,k} <= tol, or None."""
    curve = log_envelope_curve(d, k_max, model)
    hits = np.flatnonzero(curve <= tol)
    return int(hits[0]) + 1 if hits.size else None


class DScan(NamedTuple):
    """Result of ``optimal_d_scan``."""

    best_d: float | None
    best_k: int | None
    table: pd.DataFrame


def optimal_d_scan(
    model: SpectralModel, tol: float, d_values: Iterable[float], k_max: int = 10**6
) -> DScan:
    """Scan d values for the fewest envelope iterations to reach tol."""
    rows = []
    for d in d_values:
        k = iterations_to_tolerance(d, tol, model, k_max)
        rows.append({"d": float(d), "iterations": k})
    table = pd.DataFrame(rows, columns=["d", "iterations"])
    reached = table.dropna(subset=["iterations"])
    if reached.empty:
        logger.warning(f"no d reached log10 tolerance {tol} within {k_max} iterations")
        return DScan(best_d=None, best_k=None, table=table)
    best = reached.loc[reached["iterations"].astype(np.int64).idxmin()]
    return DScan(best_d=float(best["d"]), best_k=int(best["iterations"]), table=table)


def estimate_shift(residuals: ArrayLike, distances: ArrayLike, tail: float = 0.5) -> float:
    """Median of log10||x_k - x*|| - log10||x_k - x_{k-1}|| over the trailing fraction."""
    res = np.asarray(residuals, dtype=np.float64)
    dist = np.asarray(distances, dtype=np.float64)
    if res.shape != dist.shape or res.ndim != 1:
        raise ValueError("residuals and distances must be vectors of equal length")
    if not 0.0 < tail <= 1.0:
        raise ValueError(f"tail must lie in ]0, 1], got {tail}")
    start = int(math.floor(res.size * (1.0 - tail)))
    r, x = res[start:], dist[start:]
    mask = (r > 0.0) & (x > 0.0)
    if not mask.any():
        raise ValueError("no positive residual/distance pairs in the tail")
    return float(np.median(np.log10(x[mask]) - np.log10(r[mask])))
