"""Experiment instance generators, LIBSVM ingestion and instance files.

Every generator draws from ``numpy.random.Generator(numpy.random.Philox(seed))``
so that a (recipe, seed) pair always yields the same arrays.
"""

from __future__ import annotations

import json
import logging
import math
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field
from pathlib import Path
from typing import Annotated, Any, Literal, TextIO

import numpy as np
from numpy.typing import ArrayLike
from pydantic import BaseModel, Field, TypeAdapter
from scipy import sparse
from scipy.special import expit

from src.core import Array, NumericalFault, ProblemSpec
from src.prox import (
    moreau_env_grad_l1,
    moreau_env_l1,
    norm_l1,
    norm_linf,
    norm_nuclear,
    prox_l1,
    prox_linf,
    prox_nuclear,
    prox_tv1d,
    tv_norm,
)
from src.spectral import tridiag_spectrum

logger = logging.getLogger("fastfista.problems")

# Power iteration stopping rule for Lipschitz estimates
POWER_RTOL = 1e-9
POWER_MAX_ITER = 100_000

# mu = MU_CALIBRATION * ||K^T f||_inf when no mu is given
MU_CALIBRATION = 0.1

FORMAT_VERSION = 1


class LibsvmFormatError(ValueError):
    """A LIBSVM line could not be parsed."""

    def __init__(self, message: str, line_number: int) -> None:
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator used by every recipe."""
    return np.random.Generator(np.random.Philox(seed))


# =============================================================================
# Recipes
# =============================================================================


class InstanceRecipe(BaseModel):
    """Parameters of one generated instance."""

    kind: str
    seed: int = Field(default=0, ge=0, lt=2**64)


class TridiagRecipe(InstanceRecipe):
    """0.5*||Ax||^2 with A = tridiag(-1, 2, -1)."""

    kind: Literal["tridiag"] = "tridiag"
    n: int = Field(default=201, ge=1)


class QuadraticRecipe(InstanceRecipe):
    """0.5 * sum lambda_i x_i^2 with lambda evenly spread over [alpha, L]."""

    kind: Literal["quadratic"] = "quadratic"
    n: int = Field(default=50, ge=1)
    alpha: float = Field(default=0.01, gt=0)
    L: float = Field(default=1.0, gt=0)


class LassoRecipe(InstanceRecipe):
    kind: Literal["lasso"] = "lasso"
    m: int = Field(default=32, ge=1)
    n: int = Field(default=64, ge=1)
    nonzeros: int = Field(default=8, ge=0)
    noise_sigma: float = Field(default=0.0, ge=0)
    mu: float | None = Field(default=None, gt=0)


class LinfRecipe(InstanceRecipe):
    kind: Literal["linf"] = "linf"
    m: int = Field(default=1020, ge=1)
    n: int = Field(default=1024, ge=1)
    saturation_count: int = Field(default=32, ge=0)
    noise_sigma: float = Field(default=0.0, ge=0)
    mu: float | None = Field(default=None, gt=0)


class TVRecipe(InstanceRecipe):
    kind: Literal["tv"] = "tv"
    m: int = Field(default=256, ge=1)
    n: int = Field(default=1024, ge=2)
    jump_count: int = Field(default=32, ge=0)
    noise_sigma: float = Field(default=0.0, ge=0)
    mu: float | None = Field(default=None, gt=0)


class LogisticRecipe(InstanceRecipe):
    """Sparse logistic regression, from a LIBSVM file or a planted model."""

    kind: Literal["logistic"] = "logistic"
    dataset: Path | None = None
    m: int = Field(default=500, ge=1)
    n: int = Field(default=200, ge=1)
    nonzeros: int = Field(default=20, ge=0)
    mu: float = Field(default=1e-2, gt=0)
    standardize: bool = False


class PCPRecipe(InstanceRecipe):
    """Low-rank plus sparse matrix, Moreau-smoothed principal component pursuit."""

    kind: Literal["pcp"] = "pcp"
    m: int = Field(default=60, ge=1)
    n: int = Field(default=60, ge=1)
    rank: int = Field(default=2, ge=1)
    sparsity: float = Field(default=0.05, ge=0, le=1)
    nu: float = Field(default=0.05, gt=0)
    mu: float | None = Field(default=None, gt=0)

    def resolved_mu(self) -> float:
        """mu, defaulting to nu / sqrt(max(m, n))."""
        return self.mu if self.mu is not None else self.nu / math.sqrt(max(self.m, self.n))


AnyRecipe = Annotated[
    TridiagRecipe
    | QuadraticRecipe
    | LassoRecipe
    | LinfRecipe
    | TVRecipe
    | LogisticRecipe
    | PCPRecipe,
    Field(discriminator="kind"),
]

RECIPE_ADAPTER: TypeAdapter[Any] = TypeAdapter(AnyRecipe)


def recipe_from_dict(data: dict[str, Any]) -> InstanceRecipe:
    """Validate a recipe dictionary with a ``kind`` key."""
    recipe: InstanceRecipe = RECIPE_ADAPTER.validate_python(data)
    return recipe


# =============================================================================
# Problem builders
# =============================================================================


def power_iteration(
    apply: Callable[[Array], Array],
    n: int,
    rtol: float = POWER_RTOL,
    max_iter: int = POWER_MAX_ITER,
    seed: int = 0,
) -> float:
    """Largest eigenvalue of a symmetric positive semidefinite operator.

    Iterates v <- Av/||Av|| until the Rayleigh quotient changes by at most
    ``rtol`` relative.

    Raises:
        NumericalFault: when ``max_iter`` steps do not reach the tolerance
    """
    v = make_rng(seed).standard_normal(n)
    v /= np.linalg.norm(v)
    estimate = 0.0
    for step in range(1, max_iter + 1):
        w = apply(v)
        quotient = float(np.dot(v, w))
        norm_w = float(np.linalg.norm(w))
        if norm_w == 0.0:
            return 0.0
        if not math.isfinite(norm_w):
            raise NumericalFault("power iteration produced a non-finite vector", iteration=step)
        v = w / norm_w
        if abs(quotient - estimate) <= rtol * abs(quotient):
            return max(quotient, norm_w)
        estimate = quotient
    raise NumericalFault(f"power iteration did not reach rtol={rtol} in {max_iter} steps")


def tridiag_matrix(n: int) -> sparse.csr_matrix:
    """The n x n matrix with 2 on the diagonal and -1 on both off-diagonals."""
    return sparse.diags([-1.0, 2.0, -1.0], [-1, 0, 1], shape=(n, n), format="csr")


def make_tridiag_lsq(n: int = 201) -> ProblemSpec:
    """F(x) = 0.5*||Ax||^2, R = 0, with analytic L and alpha; minimiser x* = 0."""
    if n < 1:
        raise ValueError(f"n must be at least 1, got {n}")
    A = tridiag_matrix(n)
    model = tridiag_spectrum(n)

    def grad_F(x: Array) -> Array:
        return np.asarray(A @ (A @ x))

    def eval_F(x: Array) -> float:
        r = A @ x
        return 0.5 * float(np.dot(r, r))

    return ProblemSpec(
        grad_F=grad_F,
        prox_R=_identity_prox,
        eval_F=eval_F,
        eval_R=_zero,
        lipschitz_L=model.L,
        shape=(n,),
        strong_convexity_alpha=model.alpha,
        name=f"tridiag-{n}",
    )


def make_quadratic(eigenvalues: ArrayLike) -> ProblemSpec:
    """F(x) = 0.5 * sum lambda_i x_i^2, R = 0; minimiser x* = 0."""
    lam = np.asarray(eigenvalues, dtype=np.float64)
    if lam.ndim != 1 or lam.size == 0 or (lam <= 0).any():
        raise ValueError("eigenvalues must be a non-empty vector of positive values")

    def grad_F(x: Array) -> Array:
        return lam * x

    def eval_F(x: Array) -> float:
        return 0.5 * float(np.dot(lam * x, x))

    return ProblemSpec(
        grad_F=grad_F,
        prox_R=_identity_prox,
        eval_F=eval_F,
        eval_R=_zero,
        lipschitz_L=float(lam.max()),
        shape=lam.shape,
        strong_convexity_alpha=float(lam.min()),
        name=f"quadratic-{lam.size}",
    )


def _identity_prox(z: Array, gamma: float) -> Array:
    return z


def _zero(x: Array) -> float:
    return 0.0


_REGULARIZERS: dict[str, tuple[Callable[[Array, float], Array], Callable[[Array], float]]] = {
    "lasso": (prox_l1, norm_l1),
    "linf": (prox_linf, norm_linf),
    "tv": (prox_tv1d, tv_norm),
}


def make_least_squares(
    K: Array, f: Array, mu: float, regularizer: str, lipschitz: float | None = None
) -> ProblemSpec:
    """mu*R(x) + 0.5*||Kx - f||^2 with R one of l1, l_inf or 1-D TV.

    Args:
        K: Measurement matrix (m x n)
        f: Observations (m,)
        mu: Regularisation weight
        regularizer: "lasso", "linf" or "tv"
        lipschitz: Known ||K||^2; estimated by power iteration when omitted
    """
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    try:
        prox, norm = _REGULARIZERS[regularizer]
    except KeyError:
        raise ValueError(f"unknown regularizer: {regularizer}") from None
    if lipschitz is None:
        lipschitz = power_iteration(lambda v: K.T @ (K @ v), K.shape[1])

    def grad_F(x: Array) -> Array:
        return K.T @ (K @ x - f)

    def eval_F(x: Array) -> float:
        r = K @ x - f
        return 0.5 * float(np.dot(r, r))

    return ProblemSpec(
        grad_F=grad_F,
        prox_R=lambda z, gamma: prox(z, gamma * mu),
        eval_F=eval_F,
        eval_R=lambda x: mu * norm(x),
        lipschitz_L=lipschitz,
        shape=(K.shape[1],),
        name=f"{regularizer}-{K.shape[0]}x{K.shape[1]}",
    )


def make_logistic(
    features: ArrayLike | sparse.spmatrix, labels: ArrayLike, mu: float = 1e-2
) -> ProblemSpec:
    """mu*||x||_1 + (1/m) sum log(1 + exp(-l_i h_i^T x)).

    L = ||H||_2^2 / (4m) from the 1/4 bound on the logistic derivative.
    """
    H = features if sparse.issparse(features) else np.asarray(features, dtype=np.float64)
    lab = np.asarray(labels, dtype=np.float64)
    m = H.shape[0]
    if lab.shape != (m,):
        raise ValueError(f"expected {m} labels, got shape {lab.shape}")
    if not np.isin(lab, (-1.0, 1.0)).all():
        raise ValueError("labels must be -1 or +1")
    if not mu > 0:
        raise ValueError(f"mu must be positive, got {mu}")
    norm_sq = power_iteration(lambda v: np.asarray(H.T @ (H @ v)), H.shape[1])

    def grad_F(x: Array) -> Array:
        margins = lab * np.asarray(H @ x)
        return -np.asarray(H.T @ (lab * expit(-margins))) / m

    def eval_F(x: Array) -> float:
        margins = lab * np.asarray(H @ x)
        return float(np.mean(np.logaddexp(0.0, -margins)))

    return ProblemSpec(
        grad_F=grad_F,
        prox_R=lambda z, gamma: prox_l1(z, gamma * mu),
        eval_F=eval_F,
        eval_R=lambda x: mu * norm_l1(x),
        lipschitz_L=max(norm_sq / (4.0 * m), np.finfo(np.float64).tiny),
        shape=(H.shape[1],),
        name=f"logistic-{m}x{H.shape[1]}",
    )


def make_pcp(f: ArrayLike, mu: float, nu: float) -> ProblemSpec:
    """Smoothed pursuit over x_l: env_mu(f - x_l) + nu*||x_l||_*, L = 1."""
    data = np.asarray(f, dtype=np.float64)
    if data.ndim != 2:
        raise ValueError(f"f must be a matrix, got shape {data.shape}")
    if not (mu > 0 and nu > 0):
        raise ValueError(f"mu and nu must be positive, got mu={mu}, nu={nu}")

    return ProblemSpec(
        grad_F=lambda x: -moreau_env_grad_l1(data - x, mu),
        prox_R=lambda z, gamma: prox_nuclear(z, gamma * nu),
        eval_F=lambda x: moreau_env_l1(data - x, mu),
        eval_R=lambda x: nu * norm_nuclear(x),
        lipschitz_L=1.0,
        shape=data.shape,
        name=f"pcp-{data.shape[0]}x{data.shape[1]}",
    )


def pcp_sparse_part(f: ArrayLike, low_rank: ArrayLike, mu: float) -> Array:
    """x_s = prox_l1(f - x_l, mu)."""
    return prox_l1(np.asarray(f) - np.asarray(low_rank), mu)


# =============================================================================
# Instances
# =============================================================================


@dataclass
class Instance:
    """A generated instance: its recipe, arrays and resolved constants."""

    recipe: InstanceRecipe
    arrays: dict[str, np.ndarray] = field(default_factory=dict)
    lipschitz: float | None = None
    mu: float | None = None
    nu: float | None = None

    @property
    def family(self) -> str:
        return self.recipe.kind

    def problem(self) -> ProblemSpec:
        """Build the ProblemSpec for this instance."""
        recipe = self.recipe
        if isinstance(recipe, TridiagRecipe):
            return make_tridiag_lsq(recipe.n)
        if isinstance(recipe, QuadraticRecipe):
            return make_quadratic(self.arrays["eigenvalues"])
        if isinstance(recipe, LassoRecipe | LinfRecipe | TVRecipe):
            assert self.mu is not None
            return make_least_squares(
                self.arrays["K"], self.arrays["f"], self.mu, recipe.kind, self.lipschitz
            )
        if isinstance(recipe, LogisticRecipe):
            assert self.mu is not None
            return make_logistic(self.arrays["H"], self.arrays["labels"], self.mu)
        if isinstance(recipe, PCPRecipe):
            assert self.mu is not None and self.nu is not None
            return make_pcp(self.arrays["f"], self.mu, self.nu)
        raise ValueError(f"unknown instance family: {recipe.kind}")

    @property
    def dims(self) -> tuple[int, ...]:
        """(m, n) of the data matrix, or (n,) for the quadratics."""
        for key in ("K", "H", "f"):
            if key in self.arrays:
                return tuple(self.arrays[key].shape)
        return self.problem_shape

    @property
    def known_solution(self) -> Array | None:
        """Analytic minimiser where one exists."""
        if isinstance(self.recipe, TridiagRecipe | QuadraticRecipe):
            return np.zeros(self.recipe.n)
        return None

    @property
    def ground_truth(self) -> Array | None:
        """The planted signal (x_ob, planted weights or low-rank part)."""
        for key in ("x_ob", "low_rank"):
            if key in self.arrays:
                return self.arrays[key]
        return None

    @property
    def default_start(self) -> Array:
        """ones/sqrt(n) for the quadratics (unit distance to x* = 0), zeros otherwise."""
        if isinstance(self.recipe, TridiagRecipe | QuadraticRecipe):
            n = self.recipe.n
            return np.ones(n) / math.sqrt(n)
        return np.zeros(self.problem_shape)

    @property
    def problem_shape(self) -> tuple[int, ...]:
        """Shape of the optimisation variable."""
        recipe = self.recipe
        if isinstance(recipe, TridiagRecipe | QuadraticRecipe):
            return (recipe.n,)
        if isinstance(recipe, PCPRecipe):
            return tuple(self.arrays["f"].shape)
        matrix = self.arrays["H"] if isinstance(recipe, LogisticRecipe) else self.arrays["K"]
        return (matrix.shape[1],)

    def header(self) -> dict[str, Any]:
        """JSON-ready description stored alongside the arrays."""
        return {
            "format_version": FORMAT_VERSION,
            "family": self.family,
            "seed": self.recipe.seed,
            "dims": list(self.dims),
            "mu": self.mu,
            "nu": self.nu,
            "lipschitz": self.lipschitz,
            "recipe": self.recipe.model_dump(mode="json"),
        }


def _calibrate_mu(K: Array, f: Array) -> float:
    scale = float(np.max(np.abs(K.T @ f))) if f.size else 0.0
    if scale == 0.0:
        raise ValueError("cannot calibrate mu from zero data; pass mu explicitly")
    return MU_CALIBRATION * scale


def _gaussian_operator(rng: np.random.Generator, m: int, n: int) -> Array:
    return rng.standard_normal((m, n)) / math.sqrt(m)


def _observe(rng: np.random.Generator, K: Array, x_ob: Array, sigma: float) -> Array:
    f = K @ x_ob
    if sigma > 0:
        f = f + sigma * rng.standard_normal(f.shape)
    return f


def _finish_linear(
    recipe: LassoRecipe | LinfRecipe | TVRecipe, rng: np.random.Generator, K: Array, x_ob: Array
) -> Instance:
    f = _observe(rng, K, x_ob, recipe.noise_sigma)
    mu = recipe.mu if recipe.mu is not None else _calibrate_mu(K, f)
    lipschitz = power_iteration(lambda v: K.T @ (K @ v), K.shape[1])
    return Instance(
        recipe=recipe,
        arrays={"K": K, "f": f, "x_ob": x_ob},
        lipschitz=lipschitz,
        mu=mu,
    )


def _generate_tridiag(recipe: TridiagRecipe) -> Instance:
    return Instance(recipe=recipe, lipschitz=tridiag_spectrum(recipe.n).L)


def _generate_quadratic(recipe: QuadraticRecipe) -> Instance:
    if recipe.alpha > recipe.L:
        raise ValueError(f"alpha={recipe.alpha} exceeds L={recipe.L}")
    eigs = np.linspace(recipe.alpha, recipe.L, recipe.n)
    return Instance(recipe=recipe, arrays={"eigenvalues": eigs}, lipschitz=float(eigs.max()))


def _generate_lasso(recipe: LassoRecipe) -> Instance:
    rng = make_rng(recipe.seed)
    K = _gaussian_operator(rng, recipe.m, recipe.n)
    x_ob = np.zeros(recipe.n)
    support = rng.choice(recipe.n, size=min(recipe.nonzeros, recipe.n), replace=False)
    x_ob[support] = rng.standard_normal(support.size)
    return _finish_linear(recipe, rng, K, x_ob)


def _generate_linf(recipe: LinfRecipe) -> Instance:
    rng = make_rng(recipe.seed)
    K = _gaussian_operator(rng, recipe.m, recipe.n)
    x_ob = rng.uniform(-1.0, 1.0, recipe.n)
    count = min(recipe.saturation_count, recipe.n)
    saturated = rng.choice(recipe.n, size=count, replace=False)
    x_ob[saturated] = rng.choice((-1.0, 1.0), size=count)
    return _finish_linear(recipe, rng, K, x_ob)


def _generate_tv(recipe: TVRecipe) -> Instance:
    rng = make_rng(recipe.seed)
    K = _gaussian_operator(rng, recipe.m, recipe.n)
    count = min(recipe.jump_count, recipe.n - 1)
    jumps = np.zeros(recipe.n)
    positions = rng.choice(np.arange(1, recipe.n), size=count, replace=False)
    jumps[positions] = rng.standard_normal(count)
    x_ob = np.cumsum(jumps)
    return _finish_linear(recipe, rng, K, x_ob)


def _generate_logistic(recipe: LogisticRecipe) -> Instance:
    arrays: dict[str, np.ndarray]
    if recipe.dataset is not None:
        with open(recipe.dataset, encoding="utf-8") as stream:
            features, labels = parse_libsvm(stream)
        H = features.toarray()
        arrays = {"H": H, "labels": labels}
    else:
        rng = make_rng(recipe.seed)
        H = rng.standard_normal((recipe.m, recipe.n))
        w = np.zeros(recipe.n)
        support = rng.choice(recipe.n, size=min(recipe.nonzeros, recipe.n), replace=False)
        w[support] = rng.standard_normal(support.size)
        scores = H @ w + 0.1 * rng.standard_normal(recipe.m)
        labels = np.where(scores >= 0.0, 1.0, -1.0)
        arrays = {"H": H, "labels": labels, "x_ob": w}
    if recipe.standardize:
        arrays["H"] = standardize_columns(arrays["H"])
    return Instance(recipe=recipe, arrays=arrays, mu=recipe.mu)


def _generate_pcp(recipe: PCPRecipe) -> Instance:
    rng = make_rng(recipe.seed)
    U = rng.standard_normal((recipe.m, recipe.rank))
    V = rng.standard_normal((recipe.n, recipe.rank))
    low_rank = U @ V.T
    sparse_part = np.zeros((recipe.m, recipe.n))
    count = int(round(recipe.sparsity * recipe.m * recipe.n))
    support = rng.choice(recipe.m * recipe.n, size=count, replace=False)
    sparse_part.flat[support] = rng.uniform(-5.0, 5.0, count)
    return Instance(
        recipe=recipe,
        arrays={"f": low_rank + sparse_part, "low_rank": low_rank, "sparse": sparse_part},
        lipschitz=1.0,
        mu=recipe.resolved_mu(),
        nu=recipe.nu,
    )


_GENERATORS: dict[str, Callable[[Any], Instance]] = {
    "tridiag": _generate_tridiag,
    "quadratic": _generate_quadratic,
    "lasso": _generate_lasso,
    "linf": _generate_linf,
    "tv": _generate_tv,
    "logistic": _generate_logistic,
    "pcp": _generate_pcp,
}


def build_instance(recipe: InstanceRecipe) -> Instance:
    """Generate the arrays of a recipe."""
    try:
        generator = _GENERATORS[recipe.kind]
    except KeyError:
        raise ValueError(f"unknown instance family: {recipe.kind}") from None
    instance = generator(recipe)
    logger.info(f"Built {recipe.kind} instance (seed={recipe.seed}, dims={instance.dims})")
    return instance


def make_linear_inverse(recipe: LassoRecipe | LinfRecipe | TVRecipe) -> tuple[ProblemSpec, Array]:
    """Problem and ground truth x_ob of a linear inverse recipe."""
    if not isinstance(recipe, LassoRecipe | LinfRecipe | TVRecipe):
        raise ValueError(f"not a linear inverse recipe: {recipe.kind}")
    instance = build_instance(recipe)
    return instance.problem(), instance.arrays["x_ob"]


def standardize_columns(H: Array) -> Array:
    """Zero-mean, unit-variance columns; constant columns are only centred."""
    centred = H - H.mean(axis=0)
    std = centred.std(axis=0)
    std[std == 0.0] = 1.0
    return centred / std


def save_instance(instance: Instance, path: Path) -> Path:
    """Write an instance to ``.npz`` with a JSON ``header`` entry."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.array(json.dumps(instance.header(), sort_keys=True))
    with open(path, "wb") as handle:
        np.savez(handle, header=header, **instance.arrays)
    logger.info(f"Saved {instance.family} instance to {path}")
    return path


def load_instance(path: Path) -> Instance:
    """Read an instance written by ``save_instance``."""
    with np.load(Path(path), allow_pickle=False) as data:
        if "header" not in data.files:
            raise ValueError(f"{path} has no instance header")
        header = json.loads(str(data["header"]))
        arrays = {name: data[name] for name in data.files if name != "header"}
    recipe = recipe_from_dict(header["recipe"])
    return Instance(
        recipe=recipe,
        arrays=arrays,
        lipschitz=header.get("lipschitz"),
        mu=header.get("mu"),
        nu=header.get("nu"),
    )


# =============================================================================
# LIBSVM
# =============================================================================


def parse_libsvm(
    stream: Iterable[str], n_features: int | None = None
) -> tuple[sparse.csr_matrix, Array]:
    """Parse "<label> <idx>:<val> ..." lines with 1-based indices.

    Blank lines and lines starting with ``#`` are skipped. Labels in {0, 1}
    are mapped to {-1, +1}.

    Returns:
        (features as CSR matrix, labels in {-1, +1})

    Raises:
        LibsvmFormatError: on a malformed line, with its 1-based number
    """
    data: list[float] = []
    indices: list[int] = []
    indptr = [0]
    raw_labels: list[float] = []
    label_lines: list[int] = []
    max_index = 0

    for line_number, line in enumerate(stream, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        tokens = text.split()
        try:
            label = float(tokens[0])
        except ValueError:
            raise LibsvmFormatError(f"non-numeric label {tokens[0]!r}", line_number) from None
        seen: set[int] = set()
        for token in tokens[1:]:
            idx_text, sep, val_text = token.partition(":")
            if not sep:
                raise LibsvmFormatError(f"expected <index>:<value>, got {token!r}", line_number)
            try:
                idx = int(idx_text)
                value = float(val_text)
            except ValueError:
                raise LibsvmFormatError(f"malformed feature {token!r}", line_number) from None
            if idx < 1:
                raise LibsvmFormatError(f"feature index must be >= 1, got {idx}", line_number)
            if idx in seen:
                raise LibsvmFormatError(f"duplicate feature index {idx}", line_number)
            if n_features is not None and idx > n_features:
                raise LibsvmFormatError(
                    f"feature index {idx} exceeds n_features={n_features}", line_number
                )
            seen.add(idx)
            indices.append(idx - 1)
            data.append(value)
            max_index = max(max_index, idx)
        indptr.append(len(indices))
        raw_labels.append(label)
        label_lines.append(line_number)

    labels = np.asarray(raw_labels, dtype=np.float64)
    if labels.size and np.isin(labels, (0.0, 1.0)).all():
        labels = np.where(labels == 0.0, -1.0, 1.0)
    bad = np.flatnonzero(~np.isin(labels, (-1.0, 1.0)))
    if bad.size:
        first = int(bad[0])
        raise LibsvmFormatError(
            f"label {raw_labels[first]} is not in {{-1, +1}} or {{0, 1}}", label_lines[first]
        )

    columns = n_features if n_features is not None else max_index
    features = sparse.csr_matrix(
        (np.asarray(data, dtype=np.float64), np.asarray(indices, dtype=np.int64), indptr),
        shape=(len(raw_labels), columns),
    )
    return features, labels


def write_libsvm(features: ArrayLike | sparse.spmatrix, labels: ArrayLike, stream: TextIO) -> None:
    """Serialise rows as LIBSVM text; values are written with full precision."""
    matrix = sparse.csr_matrix(features)
    lab = np.asarray(labels, dtype=np.float64)
    if lab.shape != (matrix.shape[0],):
        raise ValueError(f"expected {matrix.shape[0]} labels, got shape {lab.shape}")
    for i in range(matrix.shape[0]):
        start, stop = matrix.indptr[i], matrix.indptr[i + 1]
        parts = ["+1" if lab[i] > 0 else "-1"]
        for j, value in zip(matrix.indices[start:stop], matrix.data[start:stop], strict=True):
            if value != 0.0:
                parts.append(f"{int(j) + 1}:{float(value)!r}")
        stream.write(" ".join(parts) + "\n")
