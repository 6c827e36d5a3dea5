"""dirichlet.py
Dirichlet priors: construction, log density, Beta marginals, aggregation and sampling."""

from __future__ import annotations

from typing import Callable, Iterable, List, Sequence, Union

import numpy as np
import pandas as pd
from scipy import special

from common import DEFAULT_CLAMP_EPS, ConfigError, DomainError, ShapeMismatchError, check_positive_vector
from specfun import BetaParams, beta_cdf, beta_pdf, log_gamma

SIMPLEX_TOLERANCE = 1e-9


class DirichletPrior:
    """A Dirichlet distribution over the K-simplex, given by its concentration vector."""

    def __init__(self, alpha: Iterable[float]) -> None:
        """Initialises the prior.

        Args:
            alpha (Iterable[float]): The K >= 2 positive concentration parameters.

        Raises:
            DomainError: If K < 2 or any component is not positive.
        """
        self.alpha = check_positive_vector(alpha, "alpha")
        self.alpha.setflags(write=False)
        if len(self.alpha) < 2:
            raise DomainError("A Dirichlet prior needs at least 2 components.")
        self.A = float(np.sum(self.alpha))

    @classmethod
    def symmetric(cls, k: int, alpha: float) -> DirichletPrior:
        """Creates Dir(alpha, ..., alpha) with k components."""
        return cls(np.full(int(k), float(alpha)))

    @classmethod
    def from_config(cls, value: Union[list, dict]) -> DirichletPrior:
        """Creates a prior from its config representation.

        Accepted forms are an array of positive numbers or `{"symmetric": {"k": K, "alpha": a}}`.

        Args:
            value (Union[list, dict]): The value from the JSON document.

        Raises:
            ConfigError: If the value has neither form.

        Returns:
            DirichletPrior: The prior.
        """
        try:
            if isinstance(value, dict):
                if set(value) != {"symmetric"} or set(value["symmetric"]) != {"k", "alpha"}:
                    raise ConfigError(f"Unrecognised prior specification {value}.")
                return cls.symmetric(value["symmetric"]["k"], value["symmetric"]["alpha"])
            return cls(value)
        except (DomainError, TypeError) as e:
            raise ConfigError(f"Invalid prior {value}: {e}") from e

    def as_config(self) -> list:
        return [float(a) for a in self.alpha]

    @property
    def K(self) -> int:
        return len(self.alpha)

    def mean(self) -> np.ndarray:
        """Expected probability vector alpha / A."""
        return self.alpha / self.A

    def __eq__(self, other: object) -> bool:
        return isinstance(other, DirichletPrior) and np.array_equal(self.alpha, other.alpha)

    def __repr__(self) -> str:
        return f"Dir({', '.join(f'{a:g}' for a in self.alpha)})"


class SimplexPoint:
    """A probability vector on the simplex."""

    def __init__(self, p: Iterable[float]) -> None:
        p = np.asarray(list(p) if not isinstance(p, np.ndarray) else p, dtype=np.float64)
        if p.ndim != 1:
            raise ShapeMismatchError("A simplex point must be a vector.")
        if np.any(p < 0) or np.any(p > 1) or abs(np.sum(p) - 1.0) > SIMPLEX_TOLERANCE:
            raise DomainError(f"{p.tolist()} is not on the probability simplex.")
        self.p = p

    def __len__(self) -> int:
        return len(self.p)

    def __repr__(self) -> str:
        return f"SimplexPoint({self.p.tolist()})"


def marginal(prior: DirichletPrior, k: int) -> BetaParams:
    """Beta marginal of component k, Beta(alpha_k, A - alpha_k).

    Args:
        prior (DirichletPrior): The prior.
        k (int): The category index.

    Raises:
        IndexError: If k is out of range.

    Returns:
        BetaParams: The marginal's shapes.
    """
    if not 0 <= k < prior.K:
        raise IndexError(f"Category {k} is out of range for a prior with {prior.K} components.")
    alpha_k = float(prior.alpha[k])
    return BetaParams(alpha_k, prior.A - alpha_k)


def log_multivariate_beta(alpha: np.ndarray) -> float:
    """ln B(alpha) = sum ln Gamma(alpha_k) - ln Gamma(sum alpha_k)."""
    return float(np.sum(log_gamma(alpha)) - log_gamma(float(np.sum(alpha))))


def log_pdf(prior: DirichletPrior, point: Union[SimplexPoint, Sequence[float]]) -> float:
    """Log density of the prior at a point on the simplex.

    Args:
        prior (DirichletPrior): The prior.
        point (Union[SimplexPoint, Sequence[float]]): The point.

    Raises:
        ShapeMismatchError: If the point does not have K components.

    Returns:
        float: sum_k (alpha_k - 1) ln p_k - ln B(alpha).
    """
    p = point.p if isinstance(point, SimplexPoint) else np.asarray(point, dtype=np.float64)
    if p.shape != prior.alpha.shape:
        raise ShapeMismatchError(f"Point has {p.size} components, prior has {prior.K}.")
    p = np.clip(p, DEFAULT_CLAMP_EPS, 1.0)
    return float(np.sum((prior.alpha - 1.0) * np.log(p)) - log_multivariate_beta(prior.alpha))


def aggregate(prior: DirichletPrior, groups: Sequence[Iterable[int]]) -> DirichletPrior:
    """Sums the concentration parameters over each group of a partition of the categories.

    Args:
        prior (DirichletPrior): The prior.
        groups (Sequence[Iterable[int]]): A partition of {0, ..., K-1} into at least 2 groups.

    Raises:
        DomainError: If the groups do not form such a partition.

    Returns:
        DirichletPrior: The aggregated prior, one component per group in the order given.
    """
    groups = [list(g) for g in groups]
    if len(groups) < 2:
        raise DomainError("Aggregation needs at least 2 groups.")
    if any(len(g) == 0 for g in groups):
        raise DomainError("Aggregation groups must not be empty.")
    flat = [i for g in groups for i in g]
    if sorted(flat) != list(range(prior.K)):
        raise DomainError(f"Groups {groups} are not a partition of the {prior.K} categories.")
    return DirichletPrior([float(np.sum(prior.alpha[g])) for g in groups])


def marsaglia_tsang_log_gamma(shape: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draws the log of one Gamma(shape, 1) variate per entry using the Marsaglia-Tsang method.

    Shapes below 1 are drawn at shape + 1 and boosted by adding log(U) / shape. Working in log
    space keeps tiny shapes finite where U^(1 / shape) would underflow to 0.

    Args:
        shape (np.ndarray): Positive shape parameters (any array shape).
        rng (np.random.Generator): The generator to draw from.

    Returns:
        np.ndarray: The log variates, same array shape as `shape`.
    """
    shape = np.asarray(shape, dtype=np.float64)
    flat = shape.ravel()
    boost = flat < 1.0
    a = np.where(boost, flat + 1.0, flat)
    d = a - 1.0 / 3.0
    c = 1.0 / np.sqrt(9.0 * d)

    out = np.empty_like(flat)
    pending = np.arange(flat.size)
    while pending.size:
        z = rng.standard_normal(pending.size)
        u = rng.random(pending.size)
        v = (1.0 + c[pending] * z) ** 3
        positive = v > 0
        log_v = np.log(np.where(positive, v, 1.0))
        dp = d[pending]
        accept = positive & (np.log(u) < 0.5 * z * z + dp - dp * v + dp * log_v)
        out[pending[accept]] = (np.log(dp) + log_v)[accept]
        pending = pending[~accept]

    if np.any(boost):
        boosted = np.flatnonzero(boost)
        # 1 - U lies in (0, 1], so the log stays finite.
        out[boosted] += np.log1p(-rng.random(boosted.size)) / flat[boosted]
    return out.reshape(shape.shape)


def marsaglia_tsang_gamma(shape: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Draws one Gamma(shape, 1) variate per entry. May underflow to 0 for very small shapes."""
    return np.exp(marsaglia_tsang_log_gamma(shape, rng))


LogGammaSampler = Callable[[np.ndarray, np.random.Generator], np.ndarray]


def sample(
    prior: DirichletPrior,
    rng: np.random.Generator,
    size: Union[int, None] = None,
    log_gamma_sampler: LogGammaSampler = marsaglia_tsang_log_gamma,
) -> Union[SimplexPoint, np.ndarray]:
    """Draws from the prior by normalising independent Gamma(alpha_k, 1) variates.

    The normalisation is a softmax over the log variates, so every row is finite and sums to 1
    even when all of its variates are far below the smallest double.

    Args:
        prior (DirichletPrior): The prior.
        rng (np.random.Generator): The generator. Needs exclusive access while sampling.
        size (Union[int, None], optional): Number of draws. None draws a single SimplexPoint. Defaults to None.
        log_gamma_sampler (LogGammaSampler, optional): Source of log Gamma variates.
            Defaults to marsaglia_tsang_log_gamma.

    Returns:
        Union[SimplexPoint, np.ndarray]: A single point, or a (size, K) matrix of rows on the simplex.
    """
    n = 1 if size is None else int(size)
    shapes = np.broadcast_to(prior.alpha, (n, prior.K))
    points = special.softmax(log_gamma_sampler(shapes, rng), axis=1)
    if size is None:
        return SimplexPoint(points[0])
    return points


def marginal_table(prior: DirichletPrior, n_points: int = 199) -> pd.DataFrame:
    """Tabulates every component's Beta marginal density and CDF.

    Args:
        prior (DirichletPrior): The prior.
        n_points (int, optional): Number of x values strictly inside (0, 1). Defaults to 199.

    Returns:
        pd.DataFrame: Columns x, pdf_0..pdf_{K-1}, cdf_0..cdf_{K-1}.
    """
    x = np.linspace(0.0, 1.0, n_points + 2)[1:-1]
    table = {"x": x}
    for k in range(prior.K):
        table[f"pdf_{k}"] = np.asarray(beta_pdf(x, marginal(prior, k)))
    for k in range(prior.K):
        table[f"cdf_{k}"] = np.asarray(beta_cdf(x, marginal(prior, k)))
    return pd.DataFrame(table)


def component_sums(points: np.ndarray, groups: List[List[int]]) -> np.ndarray:
    """Sums sampled components over each group, mirroring `aggregate` on samples."""
    return np.stack([np.sum(points[:, g], axis=1) for g in groups], axis=1)
