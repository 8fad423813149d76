"""Tests for instance generators, problem builders and LIBSVM ingestion."""

import io
import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.core import (
    NumericalFault,
    SolverConfig,
    finite_difference_gradient,
    max_cocoercivity_violation,
    max_descent_lemma_violation,
    max_directional_derivative_error,
    objective,
)
from src.problems import (
    LassoRecipe,
    LibsvmFormatError,
    LinfRecipe,
    LogisticRecipe,
    PCPRecipe,
    QuadraticRecipe,
    TridiagRecipe,
    TVRecipe,
    build_instance,
    load_instance,
    make_linear_inverse,
    make_logistic,
    make_pcp,
    make_rng,
    make_tridiag_lsq,
    parse_libsvm,
    pcp_sparse_part,
    power_iteration,
    recipe_from_dict,
    save_instance,
    standardize_columns,
    write_libsvm,
)
from src.sequences import BTRule, ConstantRule
from src.solvers import Greedy, Restart, run


class TestTridiag:
    """Test suite for the tridiagonal least squares problem."""

    def test_constants(self):
        """n = 201 gives L = 16 and alpha = 5.85e-8."""
        problem = make_tridiag_lsq(201)
        assert problem.lipschitz_L == pytest.approx(16.0, rel=5e-4)
        assert problem.strong_convexity_alpha == pytest.approx(5.85e-8, rel=1e-3)

    def test_gradient_at_minimiser(self):
        """grad(0) = 0."""
        assert np.array_equal(make_tridiag_lsq(201).grad_F(np.zeros(201)), np.zeros(201))

    def test_gradient_matches_differences(self, rng):
        """Directional differences agree at 10 random points."""
        problem = make_tridiag_lsq(201)
        assert max_directional_derivative_error(problem, rng, points=10) <= 1e-6

    def test_full_finite_difference(self, tridiag_small, rng):
        """Central differences agree on every coordinate."""
        x = rng.standard_normal(25)
        fd = finite_difference_gradient(tridiag_small.eval_F, x)
        assert np.allclose(fd, tridiag_small.grad_F(x), rtol=1e-6, atol=1e-6)

    def test_instance(self):
        """Known solution is zero and the default start has unit distance."""
        instance = build_instance(TridiagRecipe(n=30))
        assert np.array_equal(instance.known_solution, np.zeros(30))
        assert np.linalg.norm(instance.default_start) == pytest.approx(1.0)
        assert instance.dims == (30,)


class TestPowerIteration:
    """Test suite for power_iteration."""

    def test_diagonal(self):
        """Largest eigenvalue of diag(1, 2, 3)."""
        D = np.diag([1.0, 2.0, 3.0])
        assert power_iteration(lambda v: D @ v, 3) == pytest.approx(3.0, rel=1e-6)

    def test_zero_operator(self):
        """The zero operator returns 0."""
        assert power_iteration(lambda v: 0.0 * v, 4) == 0.0

    def test_non_convergence(self):
        """Running out of steps is a numerical fault."""
        D = np.diag([1.0, 2.0, 3.0])
        with pytest.raises(NumericalFault):
            power_iteration(lambda v: D @ v, 3, max_iter=1)

    def test_lasso_lipschitz(self, lasso_instance):
        """Matches the squared spectral norm of K."""
        K = lasso_instance.arrays["K"]
        assert lasso_instance.lipschitz == pytest.approx(np.linalg.norm(K, 2) ** 2, rel=1e-6)


class TestRecipes:
    """Test suite for recipe validation and defaults."""

    def test_linf_defaults(self):
        """(m, n, saturated) = (1020, 1024, 32)."""
        recipe = LinfRecipe()
        assert (recipe.m, recipe.n, recipe.saturation_count) == (1020, 1024, 32)

    def test_tv_defaults(self):
        """(m, n, jumps) = (256, 1024, 32)."""
        recipe = TVRecipe()
        assert (recipe.m, recipe.n, recipe.jump_count) == (256, 1024, 32)

    def test_from_dict(self):
        """The kind key selects the recipe class."""
        recipe = recipe_from_dict({"kind": "lasso", "m": 10, "n": 20, "seed": 3})
        assert isinstance(recipe, LassoRecipe)
        assert (recipe.m, recipe.n, recipe.seed) == (10, 20, 3)

    def test_unknown_kind(self):
        """Unknown families are rejected."""
        with pytest.raises(ValidationError):
            recipe_from_dict({"kind": "sudoku"})

    def test_negative_seed(self):
        """Seeds are unsigned."""
        with pytest.raises(ValidationError):
            LassoRecipe(seed=-1)

    def test_pcp_mu_default(self):
        """mu defaults to nu / sqrt(max(m, n))."""
        assert PCPRecipe(m=60, n=40, nu=0.3).resolved_mu() == pytest.approx(0.3 / math.sqrt(60))


class TestGenerators:
    """Test suite for the seeded instance generators."""

    @pytest.mark.parametrize(
        "recipe",
        [
            LassoRecipe(m=20, n=40, seed=5),
            LinfRecipe(m=30, n=32, saturation_count=4, seed=5),
            TVRecipe(m=16, n=40, jump_count=5, seed=5),
            LogisticRecipe(m=50, n=10, nonzeros=3, seed=5),
            PCPRecipe(m=12, n=10, seed=5),
        ],
    )
    def test_deterministic(self, recipe):
        """Same recipe and seed give identical arrays."""
        first = build_instance(recipe)
        second = build_instance(recipe)
        assert first.arrays.keys() == second.arrays.keys()
        for name in first.arrays:
            assert np.array_equal(first.arrays[name], second.arrays[name])

    def test_seed_changes_data(self):
        """Different seeds give different operators."""
        a = build_instance(LassoRecipe(m=20, n=40, seed=1))
        b = build_instance(LassoRecipe(m=20, n=40, seed=2))
        assert not np.array_equal(a.arrays["K"], b.arrays["K"])

    def test_lasso_support(self):
        """x_ob has exactly the requested number of nonzeros."""
        instance = build_instance(LassoRecipe(m=20, n=40, nonzeros=6, seed=1))
        assert np.count_nonzero(instance.arrays["x_ob"]) == 6

    def test_linf_saturation(self):
        """At least saturation_count entries sit at +-1."""
        instance = build_instance(LinfRecipe(m=30, n=32, saturation_count=4, seed=1))
        x_ob = instance.arrays["x_ob"]
        assert np.count_nonzero(np.abs(x_ob) == 1.0) >= 4
        assert np.abs(x_ob).max() <= 1.0

    def test_tv_piecewise_constant(self):
        """x_ob has at most jump_count jumps."""
        instance = build_instance(TVRecipe(m=16, n=40, jump_count=5, seed=1))
        assert np.count_nonzero(np.diff(instance.arrays["x_ob"])) <= 5

    def test_calibrated_mu(self, lasso_instance):
        """mu = 0.1 ||K^T f||_inf when not given."""
        K, f = lasso_instance.arrays["K"], lasso_instance.arrays["f"]
        assert lasso_instance.mu == pytest.approx(0.1 * np.max(np.abs(K.T @ f)))

    def test_calibration_needs_data(self):
        """Zero observations cannot calibrate mu."""
        with pytest.raises(ValueError):
            build_instance(LassoRecipe(m=10, n=20, nonzeros=0, seed=1))

    def test_explicit_mu_kept(self):
        """A given mu is used as is."""
        assert build_instance(LassoRecipe(m=10, n=20, mu=0.25, seed=1)).mu == 0.25

    def test_quadratic_alpha_above_L(self):
        """alpha > L is rejected."""
        with pytest.raises(ValueError):
            build_instance(QuadraticRecipe(alpha=2.0, L=1.0))

    def test_linear_inverse(self):
        """make_linear_inverse returns the problem and x_ob."""
        problem, x_ob = make_linear_inverse(TVRecipe(m=16, n=40, jump_count=5, seed=1))
        assert problem.shape == (40,)
        assert x_ob.shape == (40,)

    @pytest.mark.parametrize(
        "recipe",
        [
            LassoRecipe(m=20, n=40, seed=3),
            LinfRecipe(m=30, n=32, saturation_count=4, seed=3),
            TVRecipe(m=16, n=40, jump_count=5, seed=3),
            LogisticRecipe(m=50, n=10, nonzeros=3, seed=3),
            PCPRecipe(m=8, n=6, seed=3),
        ],
    )
    def test_smooth_part_oracles(self, recipe, rng):
        """Gradients are (1/L)-cocoercive and obey the descent lemma."""
        problem = build_instance(recipe).problem()
        assert max_cocoercivity_violation(problem, rng, pairs=50) <= 1e-9
        assert max_descent_lemma_violation(problem, rng, pairs=100) <= 1e-9
        assert max_directional_derivative_error(problem, rng) <= 1e-5


class TestLeastSquaresSanity:
    """Test suite for the consistent unregularised limit."""

    def test_recovers_x_ob(self):
        """Noise-free, tiny mu, m >= n: the solver limit is x_ob."""
        problem, x_ob = make_linear_inverse(
            LinfRecipe(m=40, n=20, saturation_count=4, mu=1e-8, seed=11)
        )
        config = SolverConfig(max_iters=50_000, tol_residual=1e-10)
        trace = run(problem, BTRule(), Restart(), config)
        assert trace.stop_reason == "converged"
        error = np.linalg.norm(trace.final_iterate - x_ob) / np.linalg.norm(x_ob)
        assert error <= 1e-3


class TestLogistic:
    """Test suite for sparse logistic regression."""

    def test_value_at_zero(self, rng):
        """F(0) = log 2."""
        H = rng.standard_normal((7, 3))
        problem = make_logistic(H, np.array([1, -1, 1, 1, -1, -1, 1.0]))
        assert problem.eval_F(np.zeros(3)) == pytest.approx(math.log(2.0))

    def test_single_sample_gradient(self):
        """h = (1), l = +1, x = 0 gives grad = -0.5."""
        problem = make_logistic(np.array([[1.0]]), np.array([1.0]))
        assert problem.grad_F(np.zeros(1)) == pytest.approx(np.array([-0.5]))

    def test_finite_difference(self, rng):
        """Gradient matches central differences."""
        H = rng.standard_normal((12, 4))
        labels = np.where(rng.standard_normal(12) > 0, 1.0, -1.0)
        problem = make_logistic(H, labels)
        x = rng.standard_normal(4)
        fd = finite_difference_gradient(problem.eval_F, x)
        assert np.allclose(fd, problem.grad_F(x), rtol=1e-6, atol=1e-8)

    def test_lipschitz_quarter_bound(self, rng):
        """L = ||H||^2 / (4m)."""
        H = rng.standard_normal((12, 4))
        problem = make_logistic(H, np.ones(12))
        assert problem.lipschitz_L == pytest.approx(np.linalg.norm(H, 2) ** 2 / 48.0, rel=1e-6)

    def test_rejects_zero_one_labels(self):
        """Builder labels must already be +-1."""
        with pytest.raises(ValueError):
            make_logistic(np.ones((2, 2)), np.array([0.0, 1.0]))

    def test_from_libsvm_file(self, tmp_path, rng):
        """A dataset path is parsed into H and labels."""
        H = np.round(rng.standard_normal((6, 3)), 3)
        labels = np.array([1.0, -1.0, 1.0, -1.0, 1.0, 1.0])
        path = tmp_path / "tiny.libsvm"
        with open(path, "w", encoding="utf-8") as stream:
            write_libsvm(H, labels, stream)
        instance = build_instance(LogisticRecipe(dataset=path))
        assert np.array_equal(instance.arrays["H"], H)
        assert np.array_equal(instance.arrays["labels"], labels)

    def test_standardize_columns(self):
        """Columns get zero mean and unit variance; constant ones stay finite."""
        H = np.array([[1.0, 5.0], [2.0, 5.0], [3.0, 5.0], [6.0, 5.0]])
        out = standardize_columns(H)
        assert np.allclose(out.mean(axis=0), 0.0)
        assert out[:, 0].std() == pytest.approx(1.0)
        assert np.array_equal(out[:, 1], np.zeros(4))


class TestPCP:
    """Test suite for Moreau-smoothed principal component pursuit."""

    def test_unit_lipschitz(self):
        """L = 1 exactly."""
        assert make_pcp(np.ones((3, 4)), 0.1, 0.2).lipschitz_L == 1.0

    def test_zero_data_fixed_point(self):
        """f = 0 makes x_l = 0 a fixed point of the forward-backward map."""
        problem = make_pcp(np.zeros((5, 4)), 0.1, 0.2)
        x = np.zeros((5, 4))
        step = problem.prox_R(x - problem.grad_F(x), 1.0)
        assert np.array_equal(step, x)

    def test_matrix_finite_difference(self, rng):
        """Gradient over a matrix variable matches central differences."""
        f = rng.standard_normal((4, 3))
        problem = make_pcp(f, 0.3, 0.1)
        x = rng.standard_normal((4, 3))
        fd = finite_difference_gradient(problem.eval_F, x)
        assert np.allclose(fd, problem.grad_F(x), atol=1e-6)

    def test_recovery(self):
        """Greedy FISTA separates a 60x60 rank-2 plus 5% sparse matrix."""
        instance = build_instance(PCPRecipe(m=60, n=60, rank=2, sparsity=0.05, seed=4))
        problem = instance.problem()
        config = SolverConfig(step_gamma=1.3, max_iters=20_000, tol_residual=1e-8)
        trace = run(problem, ConstantRule(a=1.0), Greedy(), config)
        assert trace.stop_reason == "converged"
        low_rank = trace.final_iterate
        sparse_part = pcp_sparse_part(instance.arrays["f"], low_rank, instance.mu)
        truth_l, truth_s = instance.arrays["low_rank"], instance.arrays["sparse"]
        assert np.linalg.norm(low_rank - truth_l) / np.linalg.norm(truth_l) <= 5e-2
        assert np.linalg.norm(sparse_part - truth_s) / np.linalg.norm(truth_s) <= 5e-2


class TestLibsvm:
    """Test suite for LIBSVM parsing and writing."""

    def test_basic_line(self):
        """'+1 1:0.5 3:2' is label +1 and row (0.5, 0, 2)."""
        features, labels = parse_libsvm(io.StringIO("+1 1:0.5 3:2\n"))
        assert labels.tolist() == [1.0]
        assert features.toarray().tolist() == [[0.5, 0.0, 2.0]]

    def test_empty_feature_list(self):
        """'-1' alone is an all-zero row."""
        features, labels = parse_libsvm(io.StringIO("-1\n+1 2:1\n"), n_features=3)
        assert labels.tolist() == [-1.0, 1.0]
        assert features.toarray()[0].tolist() == [0.0, 0.0, 0.0]

    def test_zero_one_labels_mapped(self):
        """{0, 1} labels become {-1, +1}."""
        _, labels = parse_libsvm(io.StringIO("0 1:1\n1 1:2\n"))
        assert labels.tolist() == [-1.0, 1.0]

    def test_comments_and_blank_lines(self):
        """Blank and comment lines are skipped."""
        text = "# header\n\n+1 1:1 # trailing\n-1 2:3\n"
        features, labels = parse_libsvm(io.StringIO(text))
        assert features.shape == (2, 2)
        assert labels.tolist() == [1.0, -1.0]

    @pytest.mark.parametrize(
        "text, line_number",
        [
            ("abc 1:2\n", 1),
            ("+1 1:0.5\n+1 3\n", 2),
            ("+1 1:0.5\n\n-1 x:1\n", 3),
            ("+1 0:1\n", 1),
            ("+1 2:1 2:3\n", 1),
            ("+1 1:1\n2 1:1\n", 2),
        ],
    )
    def test_errors_carry_line_number(self, text, line_number):
        """Malformed lines raise with their 1-based number."""
        with pytest.raises(LibsvmFormatError) as excinfo:
            parse_libsvm(io.StringIO(text))
        assert excinfo.value.line_number == line_number
        assert f"line {line_number}" in str(excinfo.value)

    def test_index_beyond_declared_width(self):
        """Indices past n_features are rejected."""
        with pytest.raises(LibsvmFormatError):
            parse_libsvm(io.StringIO("+1 5:1\n"), n_features=4)

    def test_round_trip(self, rng):
        """Writing then parsing reproduces the matrix exactly."""
        dense = rng.standard_normal((8, 6))
        dense[np.abs(dense) < 0.7] = 0.0
        labels = np.where(rng.standard_normal(8) > 0, 1.0, -1.0)
        buffer = io.StringIO()
        write_libsvm(dense, labels, buffer)
        buffer.seek(0)
        features, parsed = parse_libsvm(buffer, n_features=6)
        assert np.array_equal(features.toarray(), dense)
        assert np.array_equal(parsed, labels)


class TestInstanceFiles:
    """Test suite for save_instance and load_instance."""

    def test_round_trip(self, tmp_path, lasso_instance, rng):
        """Arrays, constants and the recipe survive a save/load cycle."""
        path = save_instance(lasso_instance, tmp_path / "nested" / "lasso.npz")
        loaded = load_instance(path)
        assert loaded.recipe == lasso_instance.recipe
        assert loaded.mu == lasso_instance.mu
        assert loaded.lipschitz == lasso_instance.lipschitz
        for name, array in lasso_instance.arrays.items():
            assert np.array_equal(loaded.arrays[name], array)
        x = rng.standard_normal(64)
        assert objective(loaded.problem(), x) == objective(lasso_instance.problem(), x)

    def test_header_fields(self, lasso_instance):
        """Header carries family, seed, dims and constants."""
        header = lasso_instance.header()
        assert header["family"] == "lasso"
        assert header["seed"] == 7
        assert header["dims"] == [32, 64]
        assert header["recipe"]["kind"] == "lasso"

    def test_missing_header(self, tmp_path):
        """An npz without a header is not an instance."""
        path = tmp_path / "plain.npz"
        np.savez(path, K=np.zeros(2))
        with pytest.raises(ValueError):
            load_instance(path)

    def test_rng_is_philox(self):
        """The shared generator is Philox-backed and reproducible."""
        rng = make_rng(99)
        assert isinstance(rng.bit_generator, np.random.Philox)
        assert np.array_equal(rng.standard_normal(3), make_rng(99).standard_normal(3))
