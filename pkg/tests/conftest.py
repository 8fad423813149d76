"""Shared fixtures: small seeded instances."""

import numpy as np
import pytest

from src.problems import (
    LassoRecipe,
    LinfRecipe,
    LogisticRecipe,
    QuadraticRecipe,
    build_instance,
    make_quadratic,
    make_rng,
    make_tridiag_lsq,
)


@pytest.fixture
def rng():
    return make_rng(1234)


@pytest.fixture
def lasso_instance():
    return build_instance(LassoRecipe(m=32, n=64, seed=7))


@pytest.fixture
def lasso_problem(lasso_instance):
    return lasso_instance.problem()


@pytest.fixture
def linf_problem():
    """l-infinity inverse problem, 120 x 128 with saturated entries."""
    return build_instance(LinfRecipe(m=120, n=128, seed=1)).problem()


@pytest.fixture
def logistic_problem():
    """Planted sparse logistic regression, 300 samples of 200 features."""
    return build_instance(LogisticRecipe(m=300, n=200, seed=1)).problem()


@pytest.fixture
def quadratic_problem():
    """Diagonal quadratic with eigenvalues spread over [0.01, 1]."""
    return make_quadratic(np.linspace(0.01, 1.0, 50))


@pytest.fixture
def quadratic_instance():
    return build_instance(QuadraticRecipe(n=50, alpha=0.01, L=1.0))


@pytest.fixture
def tridiag_small():
    return make_tridiag_lsq(25)
