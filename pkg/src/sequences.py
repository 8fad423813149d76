"""Inertial parameter recursions (t_k, theta_k, a_k), their limits and bounds.

Every rule produces the coefficient ``a_k`` multiplying the momentum term
``x_k - x_{k-1}``. Rules are small pydantic models that keep their recursion
state in private attributes; ``reset()`` rewinds them to ``t_0``.
"""

from __future__ import annotations

import logging
import math
from typing import Annotated, Literal, NamedTuple

from pydantic import BaseModel, Field, PrivateAttr, model_validator

from src.core import NumericalFault

logger = logging.getLogger("fastfista.sequences")

# Lazy-start ranges for FISTA-Mod (p, q) with r = 4, and for FISTA-CD (d)
LAZY_P_RANGE = (1.0 / 80.0, 1.0 / 10.0)
LAZY_Q_RANGE = (0.0, 1.0)
LAZY_D_RANGE = (10.0, 80.0)

# The lazy-start configuration used throughout the experiments
LAZY_START_P = 1.0 / 20.0
LAZY_START_Q = 1.0 / 2.0


class InertialRule(BaseModel):
    """Base class of the momentum schedules.

    Subclasses implement ``_step`` returning the new ``t_k`` (and may override
    ``_coefficient``). The iteration counter starts at 0 and is advanced by
    ``advance()``.
    """

    kind: str
    t0: float = Field(default=1.0, ge=1.0)

    _t: float = PrivateAttr(default=1.0)
    _k: int = PrivateAttr(default=0)

    def model_post_init(self, __context: object) -> None:
        self.reset()

    @property
    def k(self) -> int:
        """Number of coefficients produced since the last reset."""
        return self._k

    @property
    def t(self) -> float:
        """Current value of t_k."""
        return self._t

    def reset(self) -> None:
        """Rewind the recursion to its initial state."""
        self._t = self.t0
        self._k = 0

    def restart(self) -> None:
        """Momentum restart: t_k = 1, keep every other parameter."""
        self._t = 1.0

    def advance(self) -> tuple[float, float]:
        """Advance one step and return (t_k, a_k) with a_k = (t_{k-1} - 1)/t_k."""
        t_prev = self._t
        t = self._step(t_prev)
        a = self._coefficient(t_prev, t)
        self._k += 1
        if not (math.isfinite(t) and math.isfinite(a)):
            raise NumericalFault(f"{self.kind} rule produced t={t}, a={a}", iteration=self._k)
        self._t = t
        return t, a

    def _step(self, t_prev: float) -> float:
        raise NotImplementedError

    def _coefficient(self, t_prev: float, t: float) -> float:
        return (t_prev - 1.0) / t


class BTRule(InertialRule):
    """Original FISTA: t_k = (1 + sqrt(1 + 4 t_{k-1}^2)) / 2."""

    kind: Literal["bt"] = "bt"

    def _step(self, t_prev: float) -> float:
        return (1.0 + math.sqrt(1.0 + 4.0 * t_prev * t_prev)) / 2.0


class CDRule(InertialRule):
    """Chambolle-Dossal rule t_k = (k + d)/d, i.e. a_k = (k - 1)/(k + d)."""

    kind: Literal["cd"] = "cd"
    d: float = Field(ge=2.0)
    t0: float = Field(default=1.0, ge=1.0, le=1.0)

    _j: int = PrivateAttr(default=0)

    def reset(self) -> None:
        super().reset()
        self._j = 0

    def restart(self) -> None:
        self._t = 1.0
        self._j = 0

    def _step(self, t_prev: float) -> float:
        self._j += 1
        return (self._j + self.d) / self.d


class ModRule(InertialRule):
    """FISTA-Mod: t_k = (p + sqrt(q + r t_{k-1}^2)) / 2.

    ``r`` is mutable through ``rescale`` and ``retarget`` (adaptive restarting
    shrinks it).
    """

    kind: Literal["mod"] = "mod"
    p: float = Field(default=1.0, gt=0.0, le=1.0)
    q: float = Field(default=1.0, gt=0.0)
    r: float = Field(default=4.0, gt=0.0, le=4.0)

    _r: float = PrivateAttr(default=4.0)

    def reset(self) -> None:
        super().reset()
        self._r = self.r

    @property
    def current_r(self) -> float:
        """The r in use (differs from ``r`` after rescaling)."""
        return self._r

    def rescale(self, xi: float) -> float:
        """Shrink r by the factor xi in ]0, 1[ and return the new value."""
        if not 0.0 < xi < 1.0:
            raise ValueError(f"xi must lie in ]0, 1[, got {xi}")
        self._r *= xi
        return self._r

    def retarget(self, a_inf: float) -> float:
        """Set r so that a_k tends to a_inf and return the new value.

        Raises:
            ValueError: if no r in ]0, 4] has that limit for this (p, q)
        """
        r = r_for_limit(a_inf, self.p, self.q)
        if not 0.0 < r <= 4.0:
            raise ValueError(f"no admissible r for a_inf={a_inf}, p={self.p}, q={self.q}")
        self._r = r
        return r

    def _step(self, t_prev: float) -> float:
        return (self.p + math.sqrt(self.q + self._r * t_prev * t_prev)) / 2.0


class APGRule(InertialRule):
    """Nesterov's scheme in theta form (APG for sigma = 1, mAPG otherwise).

    theta_k solves theta^2 = (1 - sigma theta) theta_{k-1}^2 + tau theta and
    t_k is reported as 1/theta_k.
    """

    kind: Literal["apg"] = "apg"
    sigma: float = Field(default=1.0, gt=0.0, le=1.0)
    tau: float = Field(default=0.0, ge=0.0, le=1.0)
    theta0: float | None = Field(default=None, gt=0.0, le=1.0)

    _theta: float = PrivateAttr(default=1.0)

    @model_validator(mode="after")
    def _tau_below_sigma(self) -> APGRule:
        if self.tau > self.sigma:
            raise ValueError(f"tau={self.tau} must not exceed sigma={self.sigma}")
        return self

    @property
    def initial_theta(self) -> float:
        """theta_0: 1 when tau = 0, sqrt(tau/sigma) otherwise, unless given."""
        if self.theta0 is not None:
            return self.theta0
        return 1.0 if self.tau == 0.0 else math.sqrt(self.tau / self.sigma)

    @property
    def theta(self) -> float:
        return self._theta

    def reset(self) -> None:
        self._theta = self.initial_theta
        self._t = 1.0 / self._theta
        self._k = 0

    def restart(self) -> None:
        self._theta = 1.0
        self._t = 1.0

    def as_mod_rule(self) -> ModRule:
        """The FISTA-Mod rule (p, q, r) = (sigma, sigma^2, 4) with the same t_k.

        Only defined for tau = 0. The coefficients of that rule are
        mod_coefficient(theta_{k-1}, theta_k), not the APG a_k.
        """
        if self.tau != 0.0:
            raise ValueError(f"only tau = 0 maps to FISTA-Mod, got tau={self.tau}")
        return ModRule(p=self.sigma, q=self.sigma * self.sigma, r=4.0)

    def advance(self) -> tuple[float, float]:
        self._k += 1
        theta, a = next_theta(self.sigma, self.tau, self._theta, iteration=self._k)
        self._theta = theta
        self._t = 1.0 / theta
        return self._t, a


class ConstantRule(InertialRule):
    """Constant inertia a_k = a (a = 1 is the greedy scheme)."""

    kind: Literal["constant"] = "constant"
    a: float = Field(default=1.0, ge=0.0, le=1.0)

    def reset(self) -> None:
        self._t = math.inf if self.a >= 1.0 else 1.0 / (1.0 - self.a)
        self._k = 0

    def restart(self) -> None:
        pass

    def advance(self) -> tuple[float, float]:
        self._k += 1
        return self._t, self.a


AnyRule = Annotated[
    BTRule | CDRule | ModRule | APGRule | ConstantRule, Field(discriminator="kind")
]


class SequenceLimits(NamedTuple):
    """Limits of the FISTA-Mod recursion."""

    t_inf: float
    a_inf: float
    delta: float


def _check_pqr(p: float, q: float, r: float) -> None:
    if not 0.0 < p <= 1.0:
        raise ValueError(f"p must lie in ]0, 1], got {p}")
    if not q > 0.0:
        raise ValueError(f"q must be positive, got {q}")
    if not 0.0 < r <= 4.0:
        raise ValueError(f"r must lie in ]0, 4], got {r}")


def next_t(rule: InertialRule) -> tuple[float, float]:
    """Advance ``rule`` by one step and return (t_k, a_k)."""
    return rule.advance()


def limit_values(p: float, q: float, r: float) -> SequenceLimits:
    """Limits of t_k and a_k for FISTA-Mod.

    Args:
        p: In ]0, 1]
        q: Positive
        r: In ]0, 4]

    Returns:
        (t_inf, a_inf, delta) with delta = sqrt(r p^2 + (4 - r) q); for r = 4
        t_k diverges and a_k tends to 1
    """
    _check_pqr(p, q, r)
    delta = math.sqrt(r * p * p + (4.0 - r) * q)
    if r == 4.0:
        return SequenceLimits(t_inf=math.inf, a_inf=1.0, delta=delta)
    t_inf = (2.0 * p + delta) / (4.0 - r)
    return SequenceLimits(t_inf=t_inf, a_inf=1.0 - 1.0 / t_inf, delta=delta)


def default_ell(p: float, q: float) -> int:
    """Smallest truncation index admitted by the upper bound of t_k."""
    return max(0, math.ceil(q / (p * (2.0 - p))))


def t_bounds(k: int, p: float, q: float, ell: int | None = None) -> tuple[float, float]:
    """Linear lower and upper bounds of t_k for r = 4 and t_0 = 1.

    lower = (k + 1) p / 2 and upper = 1 + S_ell + (p/2 + q/(4p(ell + 1))) k with
    S_ell = q/(4p) * sum_{i=0}^{ell} 1/(1 + i). The sandwich is guaranteed for
    ell >= ceil(q / (p (2 - p))), which is also the default.
    """
    if k < 0:
        raise ValueError(f"k must be non-negative, got {k}")
    _check_pqr(p, q, 4.0)
    if ell is None:
        ell = default_ell(p, q)
    if ell < 0:
        raise ValueError(f"ell must be non-negative, got {ell}")
    s_ell = q / (4.0 * p) * math.fsum(1.0 / (1.0 + i) for i in range(ell + 1))
    lower = (k + 1) * p / 2.0
    upper = 1.0 + s_ell + (p / 2.0 + q / (4.0 * p * (ell + 1))) * k
    return lower, upper


def optimal_a(alpha: float, gamma: float) -> float:
    """a* = (1 - sqrt(gamma alpha)) / (1 + sqrt(gamma alpha))."""
    s = math.sqrt(gamma * alpha)
    return (1.0 - s) / (1.0 + s)


def r_for_limit(a_inf: float, p: float = 1.0, q: float = 1.0) -> float:
    """r = 4(1 - p) + 4 p a_inf + (p^2 - q)(1 - a_inf)^2, the r whose a_k limit is a_inf."""
    if not 0.0 <= a_inf <= 1.0:
        raise ValueError(f"a_inf must lie in [0, 1], got {a_inf}")
    return 4.0 * (1.0 - p) + 4.0 * p * a_inf + (p * p - q) * (1.0 - a_inf) ** 2


def optimal_r(alpha: float, gamma: float, p: float = 1.0, q: float = 1.0) -> float:
    """The r whose FISTA-Mod limit a_inf equals a*.

    r = 4(1 - p) + 4 p a* + (p^2 - q)(1 - a*)^2, equal to 4 when alpha = 0.

    Raises:
        ValueError: if gamma*alpha is outside [0, 1] or the result is not positive
    """
    if alpha < 0.0 or gamma <= 0.0:
        raise ValueError(f"need alpha >= 0 and gamma > 0, got alpha={alpha}, gamma={gamma}")
    if gamma * alpha > 1.0:
        raise ValueError(f"gamma*alpha must not exceed 1, got {gamma * alpha}")
    if alpha == 0.0:
        return 4.0
    r = r_for_limit(optimal_a(alpha, gamma), p, q)
    if not 0.0 < r <= 4.0:
        raise ValueError(f"no admissible r for p={p}, q={q}, gamma*alpha={gamma * alpha}")
    return r


def next_theta(
    sigma: float, tau: float, theta_prev: float, iteration: int | None = None
) -> tuple[float, float]:
    """One step of theta^2 = (1 - sigma theta) theta_prev^2 + tau theta.

    Returns:
        (theta_k, a_k) with a_k = theta_prev (1 - theta_prev)/(theta_prev^2 + theta_k).
        For sigma = 1 this equals (t_{k-1} - 1)/t_k under t = 1/theta; see
        mod_coefficient for the FISTA-Mod form of the same step.
    """
    if not (0.0 < sigma <= 1.0 and 0.0 <= tau <= sigma and 0.0 < theta_prev <= 1.0):
        raise ValueError(
            f"need 0 < sigma <= 1, 0 <= tau <= sigma, 0 < theta <= 1; "
            f"got sigma={sigma}, tau={tau}, theta={theta_prev}"
        )
    sq = theta_prev * theta_prev
    b = sigma * sq - tau
    disc = b * b + 4.0 * sq
    if disc < 0.0 or not math.isfinite(disc):
        raise NumericalFault(f"theta recursion discriminant is {disc}", iteration=iteration)
    root = math.sqrt(disc)
    # conjugate form avoids cancellation when b > 0
    theta = 2.0 * sq / (b + root) if b > 0.0 else (-b + root) / 2.0
    a = theta_prev * (1.0 - theta_prev) / (sq + theta)
    return theta, a


def mod_coefficient(theta_prev: float, theta: float) -> float:
    """(t_{k-1} - 1)/t_k written in theta = 1/t."""
    return theta * (1.0 - theta_prev) / theta_prev


def apg_limit(sigma: float, tau: float) -> tuple[float, float]:
    """(theta_inf, t_inf) of the theta recursion."""
    if tau == 0.0:
        return 0.0, math.inf
    theta_inf = math.sqrt(tau / sigma)
    return theta_inf, 1.0 / theta_inf


def is_lazy_start(p: float, q: float) -> bool:
    """Whether (p, q) with r = 4 lies in the lazy-start range."""
    return LAZY_P_RANGE[0] <= p <= LAZY_P_RANGE[1] and LAZY_Q_RANGE[0] < q <= LAZY_Q_RANGE[1]


def is_lazy_start_cd(d: float) -> bool:
    """Whether d lies in the lazy-start range of FISTA-CD."""
    return LAZY_D_RANGE[0] <= d <= LAZY_D_RANGE[1]


def mod_from_cd(d: float, q: float = LAZY_START_Q) -> ModRule:
    """FISTA-Mod rule roughly matching FISTA-CD with parameter d (p = 1/d)."""
    return ModRule(p=1.0 / d, q=q, r=4.0)


def lazy_start_rule() -> ModRule:
    """The lazy-start FISTA-Mod rule p = 1/20, q = 1/2, r = 4."""
    return ModRule(p=LAZY_START_P, q=LAZY_START_Q, r=4.0)
