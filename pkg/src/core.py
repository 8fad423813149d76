"""Problem abstraction, solver configuration and run traces."""

from __future__ import annotations

import logging
import math
from collections.abc import Callable
from dataclasses import dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from numpy.typing import NDArray
from pydantic import BaseModel, ConfigDict, Field

logger = logging.getLogger("fastfista.core")

Array = NDArray[np.float64]

# Iteration count above which the default trace stride switches from 1 to 100
DENSE_TRACE_LIMIT = 10_000

TRACE_COLUMNS = ("k", "residual", "obj", "a_k", "t_k", "gamma", "restarted")


class FastFistaError(Exception):
    """Base class for fastfista errors."""


class NumericalFault(FastFistaError):
    """Non-finite state, failed factorisation or non-convergent inner routine."""

    def __init__(self, message: str, iteration: int | None = None) -> None:
        self.iteration = iteration
        if iteration is not None:
            message = f"{message} (iteration {iteration})"
        super().__init__(message)


class OracleError(FastFistaError):
    """An oracle of a ProblemSpec raised during a run."""

    def __init__(self, message: str, iteration: int) -> None:
        self.iteration = iteration
        super().__init__(f"{message} (iteration {iteration})")


@dataclass(frozen=True)
class ProblemSpec:
    """One instance of min F(x) + R(x).

    The oracles must not keep state; solvers own every mutable quantity.
    """

    grad_F: Callable[[Array], Array]
    prox_R: Callable[[Array, float], Array]
    eval_F: Callable[[Array], float]
    eval_R: Callable[[Array], float]
    lipschitz_L: float
    shape: tuple[int, ...]
    strong_convexity_alpha: float = 0.0
    name: str = "problem"

    def __post_init__(self) -> None:
        if not (self.lipschitz_L > 0 and math.isfinite(self.lipschitz_L)):
            raise ValueError(f"lipschitz_L must be positive and finite, got {self.lipschitz_L}")
        if not 0.0 <= self.strong_convexity_alpha <= self.lipschitz_L:
            raise ValueError(
                "strong_convexity_alpha must lie in [0, lipschitz_L], "
                f"got {self.strong_convexity_alpha}"
            )
        if not self.shape or any(s <= 0 for s in self.shape):
            raise ValueError(f"shape must be non-empty with positive entries, got {self.shape}")

    @property
    def dimension(self) -> int:
        """Number of scalar unknowns."""
        return math.prod(self.shape)

    def check_point(self, x: Array) -> Array:
        """Return ``x`` as a float array of the problem's shape or raise ValueError."""
        arr = np.asarray(x, dtype=np.float64)
        if arr.shape != self.shape:
            raise ValueError(f"point has shape {arr.shape}, problem expects {self.shape}")
        return arr


def objective(problem: ProblemSpec, x: Array) -> float:
    """Evaluate Phi(x) = F(x) + R(x).

    Args:
        problem: The problem instance
        x: Point of shape ``problem.shape``

    Returns:
        The objective value
    """
    x = problem.check_point(x)
    return float(problem.eval_F(x)) + float(problem.eval_R(x))


class SolverConfig(BaseModel):
    """Run-level settings shared by every algorithm variant."""

    model_config = ConfigDict(arbitrary_types_allowed=True)

    step_gamma: float | None = Field(
        default=None,
        gt=0,
        description="Step size; None means 1/L of the problem being solved",
    )
    max_iters: int = Field(default=10_000, gt=0)
    tol_residual: float = Field(default=0.0, ge=0)
    trace_stride: int | None = Field(
        default=None,
        gt=0,
        description="Record every n-th iterate; None picks 1 up to 1e4 iterations, else 100",
    )
    initial_point: Any = Field(default=None, description="Starting point; None means zeros")

    def gamma_for(self, problem: ProblemSpec) -> float:
        """Resolve the step size against a problem, enforcing gamma <= 2/L."""
        gamma = self.step_gamma if self.step_gamma is not None else 1.0 / problem.lipschitz_L
        if gamma > 2.0 / problem.lipschitz_L * (1 + 1e-12):
            raise ValueError(
                f"step_gamma={gamma} exceeds the hard cap 2/L={2.0 / problem.lipschitz_L}"
            )
        return gamma

    def stride(self) -> int:
        """Resolve the trace stride."""
        if self.trace_stride is not None:
            return self.trace_stride
        return 1 if self.max_iters <= DENSE_TRACE_LIMIT else 100

    def start_for(self, problem: ProblemSpec) -> Array:
        """Resolve the initial point as a fresh array."""
        if self.initial_point is None:
            return np.zeros(problem.shape)
        return problem.check_point(np.array(self.initial_point, dtype=np.float64, copy=True))


@dataclass
class RunTrace:
    """Per-iteration record of one solver run plus its terminal state."""

    rows: dict[str, list[float]] = field(
        default_factory=lambda: {name: [] for name in TRACE_COLUMNS}
    )
    dist_to_ref: list[float] | None = None
    final_iterate: Array | None = None
    iterations: int = 0
    restarts: int = 0
    stop_reason: str = "max_iters"
    gamma_final: float = float("nan")
    final_residual: float = float("nan")
    final_obj: float = float("nan")
    flags: list[str] = field(default_factory=list)
    r_history: list[float] = field(default_factory=list)

    def record(
        self,
        k: int,
        residual: float,
        obj: float,
        a_k: float,
        t_k: float,
        gamma: float,
        restarted: bool,
        dist: float | None = None,
    ) -> None:
        """Append one row; k must be larger than every recorded k."""
        ks = self.rows["k"]
        if ks and k <= ks[-1]:
            raise ValueError(f"trace rows must have increasing k, got {k} after {ks[-1]}")
        self.rows["k"].append(k)
        self.rows["residual"].append(residual)
        self.rows["obj"].append(obj)
        self.rows["a_k"].append(a_k)
        self.rows["t_k"].append(t_k)
        self.rows["gamma"].append(gamma)
        self.rows["restarted"].append(restarted)
        if dist is not None:
            if self.dist_to_ref is None:
                self.dist_to_ref = []
            self.dist_to_ref.append(dist)

    def truncate(self, last_k: int) -> None:
        """Drop rows recorded after iteration ``last_k``."""
        keep = sum(1 for k in self.rows["k"] if k <= last_k)
        for values in self.rows.values():
            del values[keep:]
        if self.dist_to_ref is not None:
            del self.dist_to_ref[keep:]

    def __len__(self) -> int:
        return len(self.rows["k"])

    def column(self, name: str) -> NDArray[np.float64]:
        """Return one column as an array."""
        if name == "dist_to_ref":
            if self.dist_to_ref is None:
                raise KeyError("trace has no dist_to_ref column")
            return np.asarray(self.dist_to_ref, dtype=np.float64)
        return np.asarray(self.rows[name], dtype=np.float64)

    def to_frame(self) -> pd.DataFrame:
        """Trace rows as a DataFrame with the CSV column order."""
        df = pd.DataFrame({name: self.rows[name] for name in TRACE_COLUMNS})
        df["k"] = df["k"].astype(np.int64)
        df["restarted"] = df["restarted"].astype(bool)
        if self.dist_to_ref is not None:
            df["dist_to_ref"] = self.dist_to_ref
        return df

    def first_k_below(self, name: str, threshold: float) -> int | None:
        """First recorded iteration whose column value is <= threshold."""
        values = self.column(name)
        hits = np.flatnonzero(values <= threshold)
        if hits.size == 0:
            return None
        return int(self.rows["k"][hits[0]])

    def summary(self) -> dict[str, Any]:
        """Terminal fields as a JSON-ready dictionary."""
        return {
            "iterations": self.iterations,
            "restarts": self.restarts,
            "final_residual": self.final_residual,
            "final_obj": self.final_obj,
            "gamma_final": self.gamma_final,
            "stop_reason": self.stop_reason,
            "flags": list(self.flags),
        }


def finite_difference_gradient(
    f: Callable[[Array], float], x: Array, h: float = 1e-6
) -> Array:
    """Central-difference gradient of ``f`` at ``x`` (any array shape)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.empty_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        step = np.zeros_like(flat_x)
        step[i] = h
        plus = f((flat_x + step).reshape(x.shape))
        minus = f((flat_x - step).reshape(x.shape))
        flat_g[i] = (plus - minus) / (2 * h)
    return grad


def max_cocoercivity_violation(
    problem: ProblemSpec, rng: np.random.Generator, pairs: int = 100, scale: float = 1.0
) -> float:
    """Largest sampled value of (1/L)||g(x)-g(y)||^2 - <g(x)-g(y), x-y>.

    Non-positive when grad_F is (1/L)-cocoercive on the sampled pairs.
    """
    worst = -math.inf
    for _ in range(pairs):
        x = scale * rng.standard_normal(problem.shape)
        y = scale * rng.standard_normal(problem.shape)
        dg = problem.grad_F(x) - problem.grad_F(y)
        lhs = float(np.vdot(dg, x - y))
        rhs = float(np.vdot(dg, dg)) / problem.lipschitz_L
        worst = max(worst, (rhs - lhs) / max(1.0, abs(lhs)))
    return worst


def max_descent_lemma_violation(
    problem: ProblemSpec, rng: np.random.Generator, pairs: int = 1000, scale: float = 1.0
) -> float:
    """Largest sampled F(x) - [F(y) + <grad F(y), x-y> + (L/2)||x-y||^2], relative."""
    worst = -math.inf
    for _ in range(pairs):
        x = scale * rng.standard_normal(problem.shape)
        y = scale * rng.standard_normal(problem.shape)
        d = x - y
        bound = (
            problem.eval_F(y)
            + float(np.vdot(problem.grad_F(y), d))
            + 0.5 * problem.lipschitz_L * float(np.vdot(d, d))
        )
        fx = problem.eval_F(x)
        worst = max(worst, (fx - bound) / max(1.0, abs(bound)))
    return worst


def energy_gap(problem: ProblemSpec, y: Array, x: Array, y_plus: Array, gamma: float) -> float:
    """Phi(y+) + ||y+ - x||^2/(2 gamma) - Phi(x) - ||y - x||^2/(2 gamma).

    Non-positive for every x when y+ is the forward-backward step from y and
    gamma <= 1/L. With x = y this is the sufficient decrease of one step.
    """
    lhs = objective(problem, y_plus) + float(np.sum((y_plus - x) ** 2)) / (2 * gamma)
    rhs = objective(problem, x) + float(np.sum((y - x) ** 2)) / (2 * gamma)
    return lhs - rhs


def max_energy_violation(
    problem: ProblemSpec,
    rng: np.random.Generator,
    pairs: int = 100,
    scale: float = 1.0,
    gamma: float | None = None,
) -> float:
    """Largest sampled ``energy_gap`` relative to the objective scale.

    Non-positive when every sampled forward-backward step satisfies the
    energy inequality.
    """
    gamma = 1.0 / problem.lipschitz_L if gamma is None else gamma
    worst = -math.inf
    for _ in range(pairs):
        x = scale * rng.standard_normal(problem.shape)
        y = scale * rng.standard_normal(problem.shape)
        y_plus = problem.prox_R(y - gamma * problem.grad_F(y), gamma)
        gap = energy_gap(problem, y, x, y_plus, gamma)
        worst = max(worst, gap / max(1.0, abs(objective(problem, x))))
    return worst


def max_directional_derivative_error(
    problem: ProblemSpec,
    rng: np.random.Generator,
    points: int = 10,
    h: float = 1e-6,
    scale: float = 1.0,
) -> float:
    """Largest relative gap between <grad F(x), d> and a central difference along d.

    Cheap replacement for ``finite_difference_gradient`` on large instances.
    """
    worst = 0.0
    for _ in range(points):
        x = scale * rng.standard_normal(problem.shape)
        d = rng.standard_normal(problem.shape)
        d /= np.linalg.norm(d)
        exact = float(np.vdot(problem.grad_F(x), d))
        approx = (problem.eval_F(x + h * d) - problem.eval_F(x - h * d)) / (2 * h)
        worst = max(worst, abs(exact - approx) / max(1.0, abs(exact)))
    return worst
