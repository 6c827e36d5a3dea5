"""shaping.py
The Dirichlet-prior shaping loss: per-category empirical CDFs of a batch of categorical
probabilities are matched against the Beta marginals of a Dirichlet prior with a
Cramer-von Mises style squared distance.

The empirical CDF takes the value j/B at the j-th smallest of B samples. Ranks are
treated as constants of the current ordering when differentiating, so the gradient only
flows through the Beta CDF, whose derivative is the Beta PDF.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Dict, Iterable, List, Mapping, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from common import (
    DEFAULT_CLAMP_EPS,
    Config,
    ConfigError,
    DomainError,
    ShapeMismatchError,
    as_float_matrix,
)
from dirichlet import DirichletPrior, marginal
from specfun import BetaParams, beta_cdf, beta_pdf

DEFAULT_TAG = "default"
ROW_SUM_TOLERANCE = 1e-6
DEFAULT_LAMBDA = 0.01
LAYER_REDUCTIONS = ("sum", "mean")


class ProbBatch:
    """A B x K matrix of categorical probabilities with optional per-row source tags."""

    def __init__(self, probs: np.ndarray, source_tags: Union[Sequence[str], None] = None) -> None:
        """Initialises and validates the batch.

        Args:
            probs (np.ndarray): B x K row-stochastic matrix.
            source_tags (Union[Sequence[str], None], optional): One tag per row. Defaults to None.

        Raises:
            ShapeMismatchError: If the matrix or tags have the wrong shape.
            DomainError: If a row is not on the simplex.
        """
        probs = as_float_matrix(probs, "probs")
        if probs.shape[0] < 1 or probs.shape[1] < 2:
            raise ShapeMismatchError(f"A batch needs B >= 1 and K >= 2, got {probs.shape}.")
        if np.any(~np.isfinite(probs)) or np.any(probs < 0):
            raise DomainError("Probabilities must be finite and non-negative.")
        if np.any(np.abs(np.sum(probs, axis=1) - 1.0) > ROW_SUM_TOLERANCE):
            raise DomainError("Every row of a probability batch must sum to 1.")
        if source_tags is not None:
            source_tags = [str(t) for t in source_tags]
            if len(source_tags) != probs.shape[0]:
                raise ShapeMismatchError(f"Got {len(source_tags)} tags for {probs.shape[0]} rows.")
        self.probs = probs
        self.source_tags = source_tags

    @property
    def B(self) -> int:
        return self.probs.shape[0]

    @property
    def K(self) -> int:
        return self.probs.shape[1]

    def groups(self) -> List[Tuple[str, np.ndarray]]:
        """Rows grouped by source tag, in sorted tag order.

        Returns:
            List[Tuple[str, np.ndarray]]: (tag, row indices) pairs. Untagged batches form a single DEFAULT_TAG group.
        """
        if self.source_tags is None:
            return [(DEFAULT_TAG, np.arange(self.B))]
        tags = np.asarray(self.source_tags)
        return [(str(tag), np.flatnonzero(tags == tag)) for tag in np.unique(tags)]


def build_modality_priors(
    alpha_base: float, alpha_spec: float, expert_groups: Mapping[str, Iterable[int]], K: int
) -> Dict[str, DirichletPrior]:
    """Builds one prior per source whose designated components get an extra alpha_spec.

    Args:
        alpha_base (float): Concentration given to every component.
        alpha_spec (float): Extra concentration for the components in the source's group.
        expert_groups (Mapping[str, Iterable[int]]): Tag -> set of component indices.
        K (int): Number of components.

    Raises:
        DomainError: If a group is empty or the concentrations are invalid.
        IndexError: If a group names a component outside 0..K-1.

    Returns:
        Dict[str, DirichletPrior]: Tag -> prior.
    """
    if alpha_base <= 0 or alpha_spec < 0:
        raise DomainError("alpha_base must be positive and alpha_spec non-negative.")
    priors = {}
    for tag, group in expert_groups.items():
        group = sorted(set(int(i) for i in group))
        if not group:
            raise DomainError(f"Expert group for '{tag}' is empty.")
        if group[0] < 0 or group[-1] >= K:
            raise IndexError(f"Expert group for '{tag}' has indices outside 0..{K - 1}.")
        alpha = np.full(K, float(alpha_base))
        alpha[group] += alpha_spec
        priors[str(tag)] = DirichletPrior(alpha)
    return priors


class ShapingConfig(Config):
    """Strength, clamping and priors of the shaping loss."""

    DEFAULTS = {
        "lambda": DEFAULT_LAMBDA,
        "clamp_eps": DEFAULT_CLAMP_EPS,
        "priors": {},
        "modality_priors": None,
        "layer_reduction": "sum",
        "parallel_workers": 1,
    }
    MODALITY_KEYS = {"alpha_base", "alpha_spec", "groups", "k"}

    def __init__(
        self,
        lambda_: float = DEFAULT_LAMBDA,
        clamp_eps: float = DEFAULT_CLAMP_EPS,
        priors: Union[Mapping[str, DirichletPrior], None] = None,
        layer_reduction: str = "sum",
        parallel_workers: int = 1,
        modality: Union[dict, None] = None,
    ) -> None:
        """Initialises the config.

        Args:
            lambda_ (float, optional): Regularisation strength. Defaults to 0.01.
            clamp_eps (float, optional): Probabilities are clamped to [eps, 1 - eps]. Defaults to 1e-7.
            priors (Union[Mapping[str, DirichletPrior], None], optional): Source tag -> prior. The "default" entry
                serves tags without their own prior. Defaults to None.
            layer_reduction (str, optional): How per-layer losses combine, "sum" or "mean". Defaults to "sum".
            parallel_workers (int, optional): Threads evaluating per-category terms. Defaults to 1.
            modality (Union[dict, None], optional): The modality_priors section the priors were partly
                built from, echoed by as_dict. Defaults to None.

        Raises:
            ConfigError: If a value is out of range.
        """
        if not lambda_ >= 0:
            raise ConfigError(f"lambda must be non-negative, got {lambda_}.")
        if not 0 < clamp_eps < 0.01:
            raise ConfigError(f"clamp_eps must lie in (0, 0.01), got {clamp_eps}.")
        if layer_reduction not in LAYER_REDUCTIONS:
            raise ConfigError(f"layer_reduction must be one of {LAYER_REDUCTIONS}, got '{layer_reduction}'.")
        if int(parallel_workers) < 1:
            raise ConfigError("parallel_workers must be at least 1.")
        self.lambda_ = float(lambda_)
        self.clamp_eps = float(clamp_eps)
        self.priors: Dict[str, DirichletPrior] = dict(priors) if priors is not None else {}
        self.layer_reduction = layer_reduction
        self.parallel_workers = int(parallel_workers)
        self.modality = modality

    @classmethod
    def from_dict(cls, data: Union[dict, None]) -> ShapingConfig:
        """Creates the config from the "shaping" section of an experiment document."""
        data = cls.merged(data, "shaping")
        if not isinstance(data["priors"], dict):
            raise ConfigError("shaping.priors must map source tags to priors.")
        priors = {str(tag): DirichletPrior.from_config(value) for tag, value in data["priors"].items()}
        modality = data["modality_priors"]
        if modality is not None:
            if not isinstance(modality, dict) or set(modality) != cls.MODALITY_KEYS:
                raise ConfigError(f"shaping.modality_priors needs exactly the keys {sorted(cls.MODALITY_KEYS)}.")
            try:
                built = build_modality_priors(
                    modality["alpha_base"], modality["alpha_spec"], modality["groups"], int(modality["k"])
                )
            except (DomainError, IndexError, TypeError, AttributeError) as e:
                raise ConfigError(f"Invalid modality_priors: {e}") from e
            priors.update(built)
        return cls(
            data["lambda"], data["clamp_eps"], priors, data["layer_reduction"], data["parallel_workers"], modality
        )

    def as_dict(self) -> dict:
        return {
            "lambda": self.lambda_,
            "clamp_eps": self.clamp_eps,
            "priors": {tag: prior.as_config() for tag, prior in sorted(self.priors.items())},
            "modality_priors": self.modality,
            "layer_reduction": self.layer_reduction,
            "parallel_workers": self.parallel_workers,
        }

    def prior_for(self, tag: str) -> DirichletPrior:
        """The prior shaping rows tagged `tag`.

        Raises:
            ConfigError: If neither the tag nor "default" has a prior.
        """
        if tag in self.priors:
            return self.priors[tag]
        if DEFAULT_TAG in self.priors:
            return self.priors[DEFAULT_TAG]
        raise ConfigError(f"No prior configured for source '{tag}' and no default prior.")


def empirical_cdf_positions(values: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sorts the values and assigns the empirical CDF value j/B to the j-th (1-indexed).

    Equal values keep their original order (stable sort).

    Args:
        values (np.ndarray): B finite values.

    Returns:
        Tuple[np.ndarray, np.ndarray, np.ndarray]: Sorted values, ranks j/B, and the permutation mapping
        sorted position -> original index.
    """
    values = np.asarray(values, dtype=np.float64)
    permutation = np.argsort(values, kind="stable")
    ranks = np.arange(1, values.size + 1, dtype=np.float64) / values.size
    return values[permutation], ranks, permutation


def cvm_distance(values: np.ndarray, params: BetaParams) -> float:
    """Squared distance between the empirical CDF of the values and a Beta CDF.

    Args:
        values (np.ndarray): B values in [0, 1].
        params (BetaParams): The target distribution.

    Returns:
        float: (1/B) sum_j [j/B - F(p_(j))]^2.
    """
    sorted_values, ranks, _ = empirical_cdf_positions(values)
    return float(np.mean((ranks - np.asarray(beta_cdf(sorted_values, params))) ** 2))


def _group_priors(batch: ProbBatch, config: ShapingConfig) -> List[Tuple[str, np.ndarray, DirichletPrior]]:
    groups = []
    for tag, rows in batch.groups():
        prior = config.prior_for(tag)
        if prior.K != batch.K:
            raise ShapeMismatchError(f"Prior for '{tag}' has {prior.K} components, batch has {batch.K}.")
        groups.append((tag, rows, prior))
    return groups


def _map_categories(func, items: list, workers: int) -> list:
    # Results come back in item order whichever path is taken.
    if workers > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(func, items))
    return [func(item) for item in items]


def dpsl_terms(batch: ProbBatch, config: ShapingConfig) -> pd.DataFrame:
    """Unscaled CvM distance of every (source, category) pair.

    Args:
        batch (ProbBatch): The probabilities.
        config (ShapingConfig): Priors and clamping.

    Returns:
        pd.DataFrame: Columns source_tag, category, cvm (in source then category order).
    """
    rows_out = []
    for tag, rows, prior in _group_priors(batch, config):
        clamped = np.clip(batch.probs[rows], config.clamp_eps, 1.0 - config.clamp_eps)
        terms = _map_categories(
            lambda k: cvm_distance(clamped[:, k], marginal(prior, k)), list(range(batch.K)), config.parallel_workers
        )
        rows_out.extend({"source_tag": tag, "category": k, "cvm": term} for k, term in enumerate(terms))
    return pd.DataFrame(rows_out, columns=["source_tag", "category", "cvm"])


def dpsl_loss(batch: ProbBatch, config: ShapingConfig) -> float:
    """The Dirichlet-prior shaping loss of a batch.

    Each source group forms its own empirical CDFs (group-local B) against its own prior;
    the group losses are summed.

    Args:
        batch (ProbBatch): The probabilities.
        config (ShapingConfig): Strength, clamping and priors.

    Raises:
        ShapeMismatchError: If a prior's K differs from the batch's K.
        ConfigError: If a source has no prior.

    Returns:
        float: lambda * sum over groups and categories of the CvM distance.
    """
    total = 0.0
    for term in dpsl_terms(batch, config)["cvm"]:
        total += term
    return config.lambda_ * total


def dpsl_grad(batch: ProbBatch, config: ShapingConfig) -> np.ndarray:
    """Gradient of dpsl_loss with respect to every probability entry.

    For the entry at sorted position j of category k in its group the gradient is
    lambda (2/B) [F(p) - j/B] f(p). Entries outside [eps, 1 - eps] get zero.

    Args:
        batch (ProbBatch): The probabilities.
        config (ShapingConfig): Strength, clamping and priors.

    Returns:
        np.ndarray: B x K gradient matrix.
    """
    grad = np.zeros_like(batch.probs)
    if config.lambda_ == 0:
        return grad
    eps = config.clamp_eps
    for _, rows, prior in _group_priors(batch, config):
        B = rows.size

        def category_grad(k: int) -> Tuple[np.ndarray, np.ndarray]:
            column = batch.probs[rows, k]
            clamped = np.clip(column, eps, 1.0 - eps)
            sorted_values, ranks, permutation = empirical_cdf_positions(clamped)
            params = marginal(prior, k)
            cdf = np.asarray(beta_cdf(sorted_values, params))
            pdf = np.asarray(beta_pdf(sorted_values, params))
            sorted_grad = config.lambda_ * (2.0 / B) * (cdf - ranks) * pdf
            on_boundary = (column[permutation] < eps) | (column[permutation] > 1.0 - eps)
            sorted_grad[on_boundary] = 0.0
            return permutation, sorted_grad

        results = _map_categories(category_grad, list(range(batch.K)), config.parallel_workers)
        for k, (permutation, sorted_grad) in enumerate(results):
            grad[rows[permutation], k] = sorted_grad
    return grad


def reduce_layer_losses(values: Sequence[float], reduction: str) -> Tuple[float, float]:
    """Combines per-layer shaping losses.

    Args:
        values (Sequence[float]): One loss per regularised layer.
        reduction (str): "sum" or "mean".

    Returns:
        Tuple[float, float]: The combined loss and the factor each layer's gradient is scaled by.
    """
    total = 0.0
    for value in values:
        total += value
    if reduction == "mean" and len(values) > 0:
        return total / len(values), 1.0 / len(values)
    return total, 1.0


def cdf_trace(values: np.ndarray, params: BetaParams) -> pd.DataFrame:
    """Empirical and target CDF at each sorted sample, as plotted for each category.

    Returns:
        pd.DataFrame: Columns x, empirical, target.
    """
    sorted_values, ranks, _ = empirical_cdf_positions(values)
    return pd.DataFrame(
        {"x": sorted_values, "empirical": ranks, "target": np.asarray(beta_cdf(sorted_values, params))}
    )
