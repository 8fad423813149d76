"""Inertial forward-backward engine with restart and step-size safeguards.

One loop covers every variant: the ``InertialRule`` supplies a_k, the
``RestartPolicy`` decides what happens when the iterates stop descending.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Annotated, Literal

import numpy as np
from pydantic import BaseModel, Field, PrivateAttr

from src.core import (
    Array,
    NumericalFault,
    OracleError,
    ProblemSpec,
    RunTrace,
    SolverConfig,
    objective,
)
from src.sequences import ConstantRule, InertialRule, ModRule, limit_values, r_for_limit

logger = logging.getLogger("fastfista.solvers")

# How often the iterate is checked for NaN/Inf
NAN_CHECK_EVERY = 100

# Relative slack when comparing a step size against 1/L
GAMMA_RTOL = 1e-12


class RestartPolicy(BaseModel):
    """What to do when <y_k - x_{k+1}, x_{k+1} - x_k> >= 0."""

    kind: str

    @property
    def restarts(self) -> bool:
        """Whether the restart test is evaluated at all."""
        return True

    def reset(self) -> None:
        """Clear per-run state."""

    def check_compatible(self, rule: InertialRule, gamma: float, L: float) -> None:
        """Reject rule/step combinations this policy cannot drive."""
        if isinstance(rule, ConstantRule):
            return
        if gamma > (1.0 + GAMMA_RTOL) / L:
            raise ValueError(
                f"step {gamma} exceeds 1/L={1.0 / L}; only the greedy scheme may use it"
            )

    def on_restart(self, rule: InertialRule, a_k: float, trace: RunTrace) -> None:
        """Update the rule after the restart test fired."""


class NoRestart(RestartPolicy):
    kind: Literal["none"] = "none"

    @property
    def restarts(self) -> bool:
        return False


class Restart(RestartPolicy):
    """Reset t_k = 1 and y_k = x_k."""

    kind: Literal["restart"] = "restart"

    def on_restart(self, rule: InertialRule, a_k: float, trace: RunTrace) -> None:
        rule.restart()


class Rada(RestartPolicy):
    """Restarting and adaptive FISTA-Mod.

    Every restart shrinks the limit a_inf of the rule's a_k by xi and moves r
    to the value with that limit (for p = q = 1 this is r <- xi r). Option 1
    keeps t_k, option 2 also resets t_k = 1. With ``auto_xi`` the factor
    becomes a_k ** (1/xi_root) at the first restart with a_k > 0.
    """

    kind: Literal["rada"] = "rada"
    option: Literal[1, 2] = 1
    xi: float = Field(default=0.96, gt=0.0, lt=1.0)
    auto_xi: bool = False
    xi_root: int = Field(default=50, gt=0)

    _xi: float = PrivateAttr(default=0.96)
    _xi_fixed: bool = PrivateAttr(default=False)
    _a_target: float | None = PrivateAttr(default=None)

    def model_post_init(self, __context: object) -> None:
        self.reset()

    @property
    def current_xi(self) -> float:
        return self._xi

    def reset(self) -> None:
        self._xi = self.xi
        self._xi_fixed = not self.auto_xi
        self._a_target = None

    def check_compatible(self, rule: InertialRule, gamma: float, L: float) -> None:
        if not isinstance(rule, ModRule):
            raise ValueError(f"adaptive restarting needs a FISTA-Mod rule, got {rule.kind}")
        super().check_compatible(rule, gamma, L)

    def on_restart(self, rule: InertialRule, a_k: float, trace: RunTrace) -> None:
        assert isinstance(rule, ModRule)
        if not self._xi_fixed and a_k > 0.0:
            self._xi = min(a_k ** (1.0 / self.xi_root), self.xi_cap)
            self._xi_fixed = True
            logger.debug(f"adaptive xi set to {self._xi:.6f} from a_k={a_k:.6f}")
        r = self._shrink(rule)
        trace.r_history.append(r)
        if self.option == 2:
            rule.restart()

    def _shrink(self, rule: ModRule) -> float:
        r_prev = rule.current_r
        if self._a_target is None:
            self._a_target = max(limit_values(rule.p, rule.q, r_prev).a_inf, 0.0)
        self._a_target *= self._xi
        if self._a_target > 0.0:
            r = r_for_limit(self._a_target, rule.p, rule.q)
            if 0.0 < r < r_prev:
                return rule.retarget(self._a_target)
        # no admissible r for the target: plain rescale keeps r decreasing
        return rule.rescale(self._xi)

    @property
    def xi_cap(self) -> float:
        # rescale() needs a factor strictly below 1
        return math.nextafter(1.0, 0.0)


class Greedy(RestartPolicy):
    """Greedy FISTA: a_k = 1, gamma in [1/L, 2/L[, restart plus step safeguard."""

    kind: Literal["greedy"] = "greedy"
    S: float = Field(default=1.0, gt=0.0)
    xi: float = Field(default=0.96, gt=0.0, lt=1.0)

    def check_compatible(self, rule: InertialRule, gamma: float, L: float) -> None:
        if not (isinstance(rule, ConstantRule) and rule.a == 1.0):
            raise ValueError(f"greedy scheme needs the constant rule a=1, got {rule!r}")
        if gamma < (1.0 - GAMMA_RTOL) / L:
            raise ValueError(f"greedy step {gamma} is below 1/L={1.0 / L}")


AnyPolicy = Annotated[
    NoRestart | Restart | Rada | Greedy, Field(discriminator="kind")
]


@dataclass
class IterateState:
    """Mutable iterate triple plus step bookkeeping of one run."""

    x: Array
    x_prev: Array
    y: Array
    gamma: float
    first_residual: float = math.nan
    residual: float = math.nan
    restart_count: int = 0


def fb_step(problem: ProblemSpec, y: Array, gamma: float) -> Array:
    """Forward-backward step prox_{gamma R}(y - gamma grad F(y))."""
    if not gamma > 0.0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return problem.prox_R(y - gamma * problem.grad_F(y), gamma)


def restart_test(y: Array, x_next: Array, x: Array) -> bool:
    """True iff <y - x_next, x_next - x> >= 0."""
    return float(np.vdot(y - x_next, x_next - x)) >= 0.0


def safeguard(state: IterateState, S: float, xi: float, L: float) -> float:
    """Shrink gamma to max(xi*gamma, 1/L) when the residual grew past S*first_residual."""
    if math.isnan(state.first_residual):
        raise ValueError("safeguard needs the first residual")
    if state.residual >= S * state.first_residual:
        return max(xi * state.gamma, 1.0 / L)
    return state.gamma


def _all_finite(x: Array) -> bool:
    return bool(np.isfinite(x).all())


def run(
    problem: ProblemSpec,
    rule: InertialRule,
    policy: RestartPolicy | None = None,
    config: SolverConfig | None = None,
    reference: Array | None = None,
) -> RunTrace:
    """Run the inertial forward-backward scheme.

    Each iteration computes y_k = x_k + a_k (x_k - x_{k-1}) and
    x_{k+1} = prox_{gamma R}(y_k - gamma grad F(y_k)), then applies the policy.
    The rule and policy passed in are copied, so they can be reused.

    Args:
        problem: Problem instance
        rule: Momentum schedule
        policy: Restart behaviour, no restarts by default
        config: Step, stopping and trace settings
        reference: Optional x*; adds a dist_to_ref trace column

    Returns:
        RunTrace with stop_reason "converged", "max_iters" or "numerical_fault"

    Raises:
        ValueError: incompatible rule, policy and step size
        NumericalFault: an oracle reported a numerical failure, tagged with k
        OracleError: any other exception raised by an oracle inside the loop
    """
    config = config or SolverConfig()
    policy = policy or NoRestart()
    rule = rule.model_copy(deep=True)
    rule.reset()
    policy = policy.model_copy(deep=True)
    policy.reset()

    L = problem.lipschitz_L
    gamma = config.gamma_for(problem)
    policy.check_compatible(rule, gamma, L)
    if reference is not None:
        reference = problem.check_point(reference)

    x0 = config.start_for(problem)
    state = IterateState(x=x0, x_prev=x0.copy(), y=x0.copy(), gamma=gamma)
    stride = config.stride()
    greedy = isinstance(policy, Greedy)
    trace = RunTrace()
    last_good_k = 0
    last_good_x = x0.copy()

    logger.info(
        f"{problem.name}: {rule.kind} rule, {policy.kind} policy, "
        f"gamma={gamma:.6g}, max_iters={config.max_iters}"
    )

    k = 0
    for k in range(1, config.max_iters + 1):
        t_k, a_k = rule.advance()
        state.y = state.x + a_k * (state.x - state.x_prev)
        try:
            x_next = fb_step(problem, state.y, state.gamma)
        except NumericalFault as exc:
            if exc.iteration is not None:
                raise
            raise NumericalFault(str(exc), iteration=k) from exc
        except Exception as exc:
            raise OracleError(f"oracle failed: {exc}", iteration=k) from exc

        state.residual = float(np.linalg.norm(x_next - state.x))
        if k == 1:
            state.first_residual = state.residual

        restarted = policy.restarts and restart_test(state.y, x_next, state.x)
        if restarted:
            state.restart_count += 1
            policy.on_restart(rule, a_k, trace)
            logger.debug(f"restart {state.restart_count} at iteration {k}")

        step_used = state.gamma
        if greedy and k >= 2:
            assert isinstance(policy, Greedy)
            shrunk = safeguard(state, policy.S, policy.xi, L)
            if shrunk != state.gamma:
                logger.debug(f"safeguard: gamma {state.gamma:.6g} -> {shrunk:.6g} at {k}")
            state.gamma = shrunk

        state.x_prev, state.x = state.x, x_next
        if restarted:
            state.x_prev = state.x

        converged = state.residual <= config.tol_residual
        final = converged or k == config.max_iters

        if k % NAN_CHECK_EVERY == 0 or final:
            if not (_all_finite(state.x) and math.isfinite(state.residual)):
                logger.error(
                    f"{problem.name}: non-finite iterate detected at iteration {k}, "
                    f"keeping state of iteration {last_good_k}"
                )
                trace.truncate(last_good_k)
                return _finish(
                    trace, problem, last_good_x, last_good_k, state, "numerical_fault", L
                )
            last_good_k = k
            last_good_x = state.x.copy()

        if k == 1 or k % stride == 0 or final:
            dist = None
            if reference is not None:
                dist = float(np.linalg.norm(state.x - reference))
            trace.record(
                k,
                state.residual,
                objective(problem, state.x),
                a_k,
                t_k,
                step_used,
                restarted,
                dist,
            )

        if converged:
            return _finish(trace, problem, state.x, k, state, "converged", L)

    return _finish(trace, problem, state.x, k, state, "max_iters", L)


def _finish(
    trace: RunTrace,
    problem: ProblemSpec,
    x: Array,
    k: int,
    state: IterateState,
    reason: str,
    L: float,
) -> RunTrace:
    trace.final_iterate = x.copy()
    trace.iterations = k
    trace.restarts = state.restart_count
    trace.stop_reason = reason
    trace.gamma_final = state.gamma
    if reason == "numerical_fault":
        trace.final_residual = trace.rows["residual"][-1] if len(trace) else math.nan
        trace.flags.append("numerical_fault")
    else:
        trace.final_residual = state.residual
    trace.final_obj = objective(problem, x) if _all_finite(x) else math.nan
    if state.gamma > (1.0 + GAMMA_RTOL) / L:
        trace.flags.append("gamma_above_inverse_L")
    logger.info(
        f"{problem.name}: stopped ({reason}) after {k} iterations, "
        f"{state.restart_count} restarts, residual={trace.final_residual:.3e}"
    )
    return trace
