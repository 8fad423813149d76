"""Tests for the inertial forward-backward engine and its restart policies."""

import math

import numpy as np
import pytest

from src.core import (
    NumericalFault,
    OracleError,
    ProblemSpec,
    SolverConfig,
    energy_gap,
    objective,
)
from src.problems import make_quadratic
from src.prox import prox_l1
from src.sequences import (
    BTRule,
    ConstantRule,
    ModRule,
    lazy_start_rule,
    limit_values,
    optimal_a,
    optimal_r,
)
from src.solvers import (
    Greedy,
    IterateState,
    NoRestart,
    Rada,
    Restart,
    fb_step,
    restart_test,
    run,
    safeguard,
)
from src.spectral import empirical_contraction


def _greedy_reference(problem):
    L = problem.lipschitz_L
    trace = run(
        problem,
        ConstantRule(a=1.0),
        Greedy(),
        SolverConfig(step_gamma=1.3 / L, max_iters=200_000, tol_residual=1e-13),
    )
    assert trace.stop_reason == "converged"
    return trace.final_iterate


@pytest.fixture
def lasso_reference(lasso_problem):
    """High-accuracy minimiser of the LASSO fixture from a greedy run."""
    return _greedy_reference(lasso_problem)


def _scalar_problem(grad, prox=None, L=1.0):
    return ProblemSpec(
        grad_F=grad,
        prox_R=prox or (lambda z, gamma: z),
        eval_F=lambda x: 0.0,
        eval_R=lambda x: 0.0,
        lipschitz_L=L,
        shape=(1,),
    )


class TestStepPrimitives:
    """Test suite for fb_step, restart_test and safeguard."""

    def test_fb_step_gradient_only(self):
        """R = 0 gives a plain gradient step."""
        problem = _scalar_problem(lambda x: 2.0 * x, L=2.0)
        assert np.allclose(fb_step(problem, np.array([1.0]), 0.25), [0.5])

    def test_fb_step_identity_hessian(self):
        """F = 0.5||x||^2 with gamma = 1 lands on zero."""
        problem = _scalar_problem(lambda x: x)
        assert np.allclose(fb_step(problem, np.array([3.7]), 1.0), [0.0])

    def test_fb_step_lasso_scalar(self):
        """F = 0.5(x - 2)^2, R = |x|, y = 0, gamma = 1 gives 1."""
        problem = _scalar_problem(lambda x: x - 2.0, prox=prox_l1)
        assert np.allclose(fb_step(problem, np.array([0.0]), 1.0), [1.0])

    def test_fb_step_rejects_non_positive_gamma(self):
        """gamma must be positive."""
        with pytest.raises(ValueError):
            fb_step(_scalar_problem(lambda x: x), np.array([1.0]), 0.0)

    def test_restart_test_examples(self):
        """Boundary and sign cases of the restart condition."""
        x = np.zeros(2)
        y = np.array([1.0, 0.0])
        assert restart_test(y, x, x)
        assert restart_test(y, y, x)
        assert restart_test(y, np.array([0.5, 0.0]), x)
        assert not restart_test(y, np.array([2.0, 0.0]), x)

    def test_safeguard_shrinks_and_clamps(self):
        """Repeated triggers shrink gamma down to exactly 1/L."""
        state = IterateState(
            x=np.zeros(1), x_prev=np.zeros(1), y=np.zeros(1), gamma=1.3,
            first_residual=1.0, residual=2.0,
        )
        seen = []
        for _ in range(20):
            state.gamma = safeguard(state, S=1.0, xi=0.96, L=1.0)
            seen.append(state.gamma)
        assert seen[0] == pytest.approx(1.3 * 0.96)
        assert all(b <= a for a, b in zip(seen, seen[1:]))
        assert seen[-1] == 1.0

    def test_safeguard_untriggered(self):
        """Residual below S*first_residual keeps gamma."""
        state = IterateState(
            x=np.zeros(1), x_prev=np.zeros(1), y=np.zeros(1), gamma=1.3,
            first_residual=1.0, residual=0.5,
        )
        assert safeguard(state, S=1.0, xi=0.96, L=1.0) == 1.3

    def test_safeguard_needs_first_residual(self):
        """Calling before the first step is an error."""
        state = IterateState(x=np.zeros(1), x_prev=np.zeros(1), y=np.zeros(1), gamma=1.0)
        with pytest.raises(ValueError):
            safeguard(state, S=1.0, xi=0.96, L=1.0)


class TestCompatibility:
    """Test suite for rule/policy/step validation."""

    def test_greedy_requires_constant_one(self, quadratic_problem):
        """Greedy rejects any other rule."""
        with pytest.raises(ValueError):
            run(quadratic_problem, BTRule(), Greedy(), SolverConfig(step_gamma=1.0))

    def test_greedy_requires_large_step(self, quadratic_problem):
        """Greedy steps start at or above 1/L."""
        with pytest.raises(ValueError):
            run(quadratic_problem, ConstantRule(a=1.0), Greedy(), SolverConfig(step_gamma=0.5))

    def test_rada_requires_mod(self, quadratic_problem):
        """Adaptive restarting needs an r to rescale."""
        with pytest.raises(ValueError):
            run(quadratic_problem, BTRule(), Rada())

    def test_bt_rejects_large_step(self, quadratic_problem):
        """Momentum rules are limited to gamma <= 1/L."""
        with pytest.raises(ValueError):
            run(quadratic_problem, BTRule(), Restart(), SolverConfig(step_gamma=1.5))

    def test_hard_cap(self, quadratic_problem):
        """gamma > 2/L is rejected for every scheme."""
        with pytest.raises(ValueError):
            run(quadratic_problem, ConstantRule(a=1.0), Greedy(), SolverConfig(step_gamma=2.5))


class TestRun:
    """Test suite for full runs."""

    def test_bt_equals_mod_bit_exact(self, lasso_problem):
        """Mod(1, 1, 4) and BT produce identical traces over 1e4 iterations."""
        config = SolverConfig(max_iters=10_000)
        bt = run(lasso_problem, BTRule(), config=config)
        mod = run(lasso_problem, ModRule(p=1.0, q=1.0, r=4.0), config=config)
        assert bt.to_frame().equals(mod.to_frame())
        assert np.array_equal(bt.final_iterate, mod.final_iterate)

    def test_deterministic(self, lasso_problem):
        """Identical inputs give identical traces."""
        config = SolverConfig(max_iters=2000)
        first = run(lasso_problem, lazy_start_rule(), Rada(option=2), config)
        second = run(lasso_problem, lazy_start_rule(), Rada(option=2), config)
        assert first.to_frame().equals(second.to_frame())
        assert first.r_history == second.r_history

    def test_rule_is_not_mutated(self, lasso_problem):
        """run() works on copies of the rule and policy."""
        rule = ModRule(p=0.05, q=0.5)
        policy = Rada()
        run(lasso_problem, rule, policy, SolverConfig(max_iters=500))
        assert rule.k == 0
        assert rule.current_r == 4.0

    def test_trace_rows(self, quadratic_problem):
        """Rows at k = 1, every stride and the final iteration."""
        config = SolverConfig(max_iters=250, trace_stride=100, initial_point=np.ones(50))
        trace = run(quadratic_problem, BTRule(), config=config)
        assert trace.rows["k"] == [1, 100, 200, 250]
        assert trace.iterations == 250
        assert trace.stop_reason == "max_iters"

    def test_converged_stop(self, quadratic_problem):
        """Residual tolerance ends the run early."""
        config = SolverConfig(max_iters=100_000, tol_residual=1e-9, initial_point=np.ones(50))
        trace = run(quadratic_problem, BTRule(), Restart(), config)
        assert trace.stop_reason == "converged"
        assert trace.final_residual <= 1e-9
        assert trace.iterations < 100_000

    def test_restart_resets_momentum(self, lasso_problem):
        """After a restart the next coefficient is zero."""
        trace = run(lasso_problem, BTRule(), Restart(), SolverConfig(max_iters=3000))
        df = trace.to_frame()
        hits = np.flatnonzero(df["restarted"].to_numpy())
        assert hits.size > 0
        after = hits[hits + 1 < len(df)] + 1
        assert (df["a_k"].to_numpy()[after] == 0.0).all()

    def test_theorem_bound(self, lasso_problem, lasso_reference):
        """Phi(x_k) - Phi* <= 2L||x0 - x*||^2 / (p^2 (k+1)^2) for k <= 20000."""
        L = lasso_problem.lipschitz_L
        phi_star = objective(lasso_problem, lasso_reference)
        dist0 = float(np.sum(lasso_reference**2))
        for p, q in ((1.0, 1.0), (1.0 / 20.0, 1.0 / 2.0)):
            config = SolverConfig(max_iters=20_000, trace_stride=1)
            trace = run(lasso_problem, ModRule(p=p, q=q, r=4.0), config=config)
            k = trace.column("k")
            gap = trace.column("obj") - phi_star
            bound = 2.0 * L * dist0 / (p * p * (k + 1.0) ** 2)
            assert (gap <= bound + 1e-10).all()

    def test_energy_inequality_each_step(self, lasso_problem):
        """The forward-backward step satisfies the energy inequality at x = x_k."""
        gamma = 1.0 / lasso_problem.lipschitz_L
        rule = lazy_start_rule()
        x = x_prev = np.zeros(lasso_problem.shape)
        for _ in range(2000):
            _, a = rule.advance()
            y = x + a * (x - x_prev)
            x_next = fb_step(lasso_problem, y, gamma)
            gap = energy_gap(lasso_problem, y, x, x_next, gamma)
            assert gap <= 1e-10 * max(1.0, abs(objective(lasso_problem, x)))
            x_prev, x = x, x_next

    def test_residual_decay(self, lasso_problem):
        """k * ||x_k - x_{k-1}|| stays bounded and trends down for the lazy start."""
        trace = run(lasso_problem, lazy_start_rule(), config=SolverConfig(max_iters=10_000))
        k = trace.column("k")
        scaled = k * trace.column("residual")
        quarter = len(scaled) // 4
        assert np.isfinite(scaled).all()
        assert scaled[-quarter:].mean() <= scaled[:quarter].max()

    def test_rada_r_non_increasing(self, lasso_problem):
        """Every restart shrinks r; r stays positive."""
        for option in (1, 2):
            trace = run(
                lasso_problem, lazy_start_rule(), Rada(option=option), SolverConfig(max_iters=3000)
            )
            assert trace.restarts > 0
            r = np.array([4.0] + trace.r_history)
            assert (np.diff(r) < 0.0).all()
            assert (r > 0.0).all()
            assert len(trace.r_history) == trace.restarts

    def test_rada_auto_xi(self, lasso_problem):
        """Auto xi is fixed at the first restart and then reused."""
        trace = run(lasso_problem, ModRule(), Rada(auto_xi=True), SolverConfig(max_iters=3000))
        r = np.array([4.0] + trace.r_history)
        ratios = r[1:] / r[:-1]
        assert ratios.size > 0
        assert np.allclose(ratios[1:], ratios[0])
        assert 0.0 < ratios[0] < 1.0

    def test_rada_shrinks_limit_inertia(self, lasso_problem):
        """Each restart multiplies the limit of a_k by xi, also for the lazy start."""
        trace = run(
            lasso_problem, lazy_start_rule(), Rada(xi=0.96), SolverConfig(max_iters=3000)
        )
        assert trace.restarts > 0
        expected = 0.96 ** np.arange(1, len(trace.r_history) + 1)
        count = int(np.count_nonzero(expected >= 1e-3))
        limits = [limit_values(0.05, 0.5, r).a_inf for r in trace.r_history[:count]]
        expected = expected[:count]
        assert np.allclose(limits, expected, rtol=1e-9, atol=1e-12)

    @pytest.mark.parametrize("fixture", ["lasso_problem", "linf_problem", "logistic_problem"])
    def test_restart_ordering(self, fixture, request):
        """greedy <= Rada-I <= restart <= BT in iterations to reach 1e-6 (10% slack)."""
        problem = request.getfixturevalue(fixture)
        L = problem.lipschitz_L
        reference = _greedy_reference(problem)
        config = SolverConfig(max_iters=20_000, trace_stride=1)

        def hit(rule, policy, step=None):
            cfg = config.model_copy(update={"step_gamma": step})
            trace = run(problem, rule, policy, cfg, reference=reference)
            return trace.first_k_below("dist_to_ref", 1e-6)

        k_greedy = hit(ConstantRule(a=1.0), Greedy(), 1.3 / L)
        k_rada = hit(ModRule(), Rada(option=1, auto_xi=True))
        k_restart = hit(BTRule(), Restart())
        k_bt = hit(BTRule(), NoRestart())
        counts = (k_greedy, k_rada, k_restart, k_bt)
        assert None not in counts, counts
        assert k_greedy <= 1.1 * k_rada, counts
        assert k_rada <= 1.1 * k_restart, counts
        assert k_restart <= 1.1 * k_bt, counts

    def test_alpha_fista_contraction(self):
        """Mod with the optimal r contracts at 1 - sqrt(gamma alpha)."""
        problem = make_quadratic(np.linspace(0.01, 1.0, 50))
        alpha, gamma = 0.01, 1.0
        rule = ModRule(p=1.0, q=1.0, r=optimal_r(alpha, gamma))
        config = SolverConfig(max_iters=5000, initial_point=np.ones(50) / math.sqrt(50))
        trace = run(problem, rule, config=config, reference=np.zeros(50))
        factor = empirical_contraction(trace, window=500)
        assert factor <= (1.0 - math.sqrt(gamma * alpha)) + 0.01
        assert abs(trace.column("a_k")[-1] - optimal_a(alpha, gamma)) <= 1e-6

    def test_greedy_safeguard_run(self):
        """gamma starts at 1.3/L, never drops below 1/L and the run converges."""
        problem = make_quadratic(np.logspace(-3, 0, 50))
        L = problem.lipschitz_L
        config = SolverConfig(
            step_gamma=1.3 / L,
            max_iters=100_000,
            tol_residual=1e-10,
            initial_point=np.ones(50) / math.sqrt(50),
        )
        trace = run(problem, ConstantRule(a=1.0), Greedy(S=1.0, xi=0.96), config)
        gammas = trace.column("gamma")
        assert gammas[0] == pytest.approx(1.3 / L)
        assert (gammas >= (1.0 - 1e-12) / L).all()
        assert (np.diff(gammas) <= 0.0).all()
        assert trace.stop_reason == "converged"
        assert trace.final_residual <= 1e-10

    def test_gamma_flag(self):
        """Runs ending with gamma above 1/L are flagged."""
        problem = make_quadratic(np.array([1.0]))
        config = SolverConfig(step_gamma=1.3, max_iters=3, initial_point=np.ones(1))
        trace = run(problem, ConstantRule(a=1.0), Greedy(), config)
        assert "gamma_above_inverse_L" in trace.flags


class TestFaults:
    """Test suite for numerical faults and oracle errors."""

    def test_divergence_is_caught(self):
        """An underestimated L blows up; the trace keeps the last finite state."""
        problem = ProblemSpec(
            grad_F=lambda x: 10.0 * x,
            prox_R=lambda z, gamma: z,
            eval_F=lambda x: 5.0 * float(np.dot(x, x)),
            eval_R=lambda x: 0.0,
            lipschitz_L=1.0,
            shape=(3,),
        )
        config = SolverConfig(max_iters=5000, initial_point=np.ones(3))
        with np.errstate(all="ignore"):
            trace = run(problem, BTRule(), config=config)
        assert trace.stop_reason == "numerical_fault"
        assert "numerical_fault" in trace.flags
        assert trace.iterations % 100 == 0
        assert np.isfinite(trace.final_iterate).all()
        assert max(trace.rows["k"]) <= trace.iterations

    def test_oracle_exception_wrapped(self):
        """Exceptions from the oracles carry the iteration."""
        calls = {"n": 0}

        def grad(x):
            calls["n"] += 1
            if calls["n"] == 3:
                raise RuntimeError("oracle exploded")
            return x

        problem = _scalar_problem(grad, L=2.0)
        with pytest.raises(OracleError) as excinfo:
            run(problem, BTRule(), config=SolverConfig(initial_point=np.ones(1)))
        assert excinfo.value.iteration == 3

    def test_prox_fault_tagged_with_iteration(self):
        """A NumericalFault from the prox is re-raised with the iteration."""
        calls = {"n": 0}

        def prox(z, gamma):
            calls["n"] += 1
            if calls["n"] == 4:
                raise NumericalFault("SVD did not converge")
            return z

        problem = _scalar_problem(lambda x: x, prox=prox, L=2.0)
        with pytest.raises(NumericalFault) as excinfo:
            run(problem, BTRule(), config=SolverConfig(initial_point=np.ones(1)))
        assert excinfo.value.iteration == 4
        assert "(iteration 4)" in str(excinfo.value)
        assert isinstance(excinfo.value.__cause__, NumericalFault)
        assert excinfo.value.__cause__.iteration is None
