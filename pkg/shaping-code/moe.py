"""moe.py
Desk-scale Mixture-of-Experts layer: gated FFN experts, softmax router, top-K gating,
shared experts, the baseline router regularisers (load balancing, z-loss, loss-free bias
balancing) and routing statistics."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import logsumexp, softmax

from common import Config, ConfigError, DomainError, ShapeMismatchError, as_float_matrix
from shaping import ProbBatch

UNIFORM_BAND_HALF_WIDTH = 0.05


class Nonlinearity(Enum):
    SILU = "sigmoid-linear"
    TANH = "tanh"
    RELU = "relu"

    def apply(self, x: np.ndarray) -> np.ndarray:
        if self is Nonlinearity.SILU:
            return x / (1.0 + np.exp(-x))
        elif self is Nonlinearity.TANH:
            return np.tanh(x)
        else:
            return np.maximum(x, 0.0)

    @property
    def code(self) -> int:
        """Stable integer used by the binary expert-set format."""
        return list(Nonlinearity).index(self)

    @classmethod
    def from_code(cls, code: int) -> Nonlinearity:
        return list(Nonlinearity)[code]


class DenseFFN:
    """A (gated) feed-forward block: down(act(x W_gate) * (x W_up)), or down(act(x W_up)) without a gate."""

    def __init__(
        self,
        W_up: np.ndarray,
        W_down: np.ndarray,
        W_gate: Union[np.ndarray, None] = None,
        nonlinearity: Nonlinearity = Nonlinearity.SILU,
    ) -> None:
        self.W_up = as_float_matrix(W_up, "W_up")
        self.W_down = as_float_matrix(W_down, "W_down")
        self.W_gate = None if W_gate is None else as_float_matrix(W_gate, "W_gate")
        self.nonlinearity = nonlinearity
        d, h = self.W_up.shape
        if self.W_down.shape != (h, d) or (self.W_gate is not None and self.W_gate.shape != (d, h)):
            raise ShapeMismatchError(f"Inconsistent FFN weight shapes for d={d}, h={h}.")
        if h < 1:
            raise ShapeMismatchError("The hidden dimension must be at least 1.")
        for w in (self.W_up, self.W_down, self.W_gate):
            if w is not None and not np.all(np.isfinite(w)):
                raise DomainError("FFN weights must be finite.")

    @classmethod
    def random(
        cls,
        d: int,
        h: int,
        rng: np.random.Generator,
        nonlinearity: Nonlinearity = Nonlinearity.SILU,
        gated: bool = True,
    ) -> DenseFFN:
        """A randomly initialised FFN with fan-in scaled normal weights."""
        W_up = rng.standard_normal((d, h)) / np.sqrt(d)
        W_gate = rng.standard_normal((d, h)) / np.sqrt(d) if gated else None
        W_down = rng.standard_normal((h, d)) / np.sqrt(h)
        return cls(W_up, W_down, W_gate, nonlinearity)

    @property
    def d(self) -> int:
        return self.W_up.shape[0]

    @property
    def hidden_dim(self) -> int:
        return self.W_up.shape[1]

    def hidden(self, x: np.ndarray) -> np.ndarray:
        if self.W_gate is None:
            return self.nonlinearity.apply(x @ self.W_up)
        return self.nonlinearity.apply(x @ self.W_gate) * (x @ self.W_up)

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.hidden(x) @ self.W_down


class ExpertSet:
    """N experts sharing one architecture, with weights stacked along the first axis."""

    def __init__(
        self,
        W_up: np.ndarray,
        W_down: np.ndarray,
        W_gate: Union[np.ndarray, None] = None,
        nonlinearity: Nonlinearity = Nonlinearity.SILU,
        granularity: int = 1,
    ) -> None:
        self.W_up = np.asarray(W_up, dtype=np.float64)
        self.W_down = np.asarray(W_down, dtype=np.float64)
        self.W_gate = None if W_gate is None else np.asarray(W_gate, dtype=np.float64)
        self.nonlinearity = nonlinearity
        self.granularity = int(granularity)
        if self.W_up.ndim != 3:
            raise ShapeMismatchError("Expert weights must be stacked as (N, d, h).")
        n, d, h = self.W_up.shape
        if self.W_down.shape != (n, h, d) or (self.W_gate is not None and self.W_gate.shape != (n, d, h)):
            raise ShapeMismatchError(f"Inconsistent expert weight shapes for N={n}, d={d}, h={h}.")

    @classmethod
    def from_experts(cls, experts: Sequence[DenseFFN], granularity: int = 1) -> ExpertSet:
        """Stacks individual FFNs (all with the same shapes) into a set."""
        gated = experts[0].W_gate is not None
        return cls(
            np.stack([e.W_up for e in experts]),
            np.stack([e.W_down for e in experts]),
            np.stack([e.W_gate for e in experts]) if gated else None,
            experts[0].nonlinearity,
            granularity,
        )

    @property
    def N(self) -> int:
        return self.W_up.shape[0]

    @property
    def d(self) -> int:
        return self.W_up.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_up.shape[2]

    def expert(self, i: int) -> DenseFFN:
        return DenseFFN(
            self.W_up[i], self.W_down[i], None if self.W_gate is None else self.W_gate[i], self.nonlinearity
        )

    def forward_all(self, x: np.ndarray) -> np.ndarray:
        """Every expert applied to every token.

        Args:
            x (np.ndarray): T x d tokens.

        Returns:
            np.ndarray: T x N x d outputs.
        """
        if x.shape[1] != self.d:
            raise ShapeMismatchError(f"Tokens have dimension {x.shape[1]}, experts expect {self.d}.")
        up = np.einsum("td,ndh->tnh", x, self.W_up)
        if self.W_gate is None:
            hidden = self.nonlinearity.apply(up)
        else:
            hidden = self.nonlinearity.apply(np.einsum("td,ndh->tnh", x, self.W_gate)) * up
        return np.einsum("tnh,nhd->tnd", hidden, self.W_down)


@dataclass
class RouterParams:
    """Bias-free router weights W_g (d x N)."""

    W_g: np.ndarray

    def __post_init__(self) -> None:
        self.W_g = as_float_matrix(self.W_g, "W_g")
        if self.W_g.shape[0] < 1 or self.W_g.shape[1] < 2:
            raise ShapeMismatchError(f"Router weights need d >= 1 and N >= 2, got {self.W_g.shape}.")
        if not np.all(np.isfinite(self.W_g)):
            raise DomainError("Router weights must be finite.")

    @property
    def N(self) -> int:
        return self.W_g.shape[1]


class MoEConfig(Config):
    """Shape of each simulated MoE layer."""

    DEFAULTS = {
        "n_experts": 4,
        "top_k": 2,
        "n_shared": 0,
        "renormalize_gates": False,
        "d_model": 16,
        "hidden_dim": 32,
        "nonlinearity": Nonlinearity.SILU.value,
        "gated": True,
        "n_layers": 1,
        "router_init_std": 0.02,
    }

    def __init__(
        self,
        n_experts: int = 4,
        top_k: int = 2,
        n_shared: int = 0,
        renormalize_gates: bool = False,
        d_model: int = 16,
        hidden_dim: int = 32,
        nonlinearity: Union[Nonlinearity, str] = Nonlinearity.SILU,
        gated: bool = True,
        n_layers: int = 1,
        router_init_std: float = 0.02,
    ) -> None:
        if n_experts < 2:
            raise ConfigError("An MoE layer needs at least 2 experts.")
        if not 1 <= top_k <= n_experts:
            raise DomainError(f"top_k must lie in 1..{n_experts}, got {top_k}.")
        if n_shared < 0 or n_layers < 1 or d_model < 1 or hidden_dim < 1 or router_init_std < 0:
            raise ConfigError("n_shared, router_init_std must be >= 0 and n_layers, d_model, hidden_dim >= 1.")
        try:
            self.nonlinearity = Nonlinearity(nonlinearity)
        except ValueError as e:
            raise ConfigError(f"Unknown nonlinearity '{nonlinearity}'.") from e
        self.n_experts = int(n_experts)
        self.top_k = int(top_k)
        self.n_shared = int(n_shared)
        self.renormalize_gates = bool(renormalize_gates)
        self.d_model = int(d_model)
        self.hidden_dim = int(hidden_dim)
        self.gated = bool(gated)
        self.n_layers = int(n_layers)
        self.router_init_std = float(router_init_std)

    @classmethod
    def from_dict(cls, data: Union[dict, None]) -> MoEConfig:
        data = cls.merged(data, "moe")
        try:
            return cls(**data)
        except DomainError as e:
            raise ConfigError(str(e)) from e

    def as_dict(self) -> dict:
        return {
            "n_experts": self.n_experts,
            "top_k": self.top_k,
            "n_shared": self.n_shared,
            "renormalize_gates": self.renormalize_gates,
            "d_model": self.d_model,
            "hidden_dim": self.hidden_dim,
            "nonlinearity": self.nonlinearity.value,
            "gated": self.gated,
            "n_layers": self.n_layers,
            "router_init_std": self.router_init_std,
        }


@dataclass
class LoadStats:
    """Dispatch fractions f (summing to K), mean router probabilities P and raw loads."""

    f: np.ndarray
    P: np.ndarray
    loads: np.ndarray
    top_k: int

    @classmethod
    def from_routing(cls, probs: np.ndarray, indices: np.ndarray) -> LoadStats:
        """Builds the statistics of one batch from its probabilities and top-K selections."""
        T, N = probs.shape
        loads = np.bincount(indices.ravel(), minlength=N).astype(np.float64)
        return cls(f=loads / T, P=np.mean(probs, axis=0), loads=loads, top_k=indices.shape[1])


@dataclass(frozen=True)
class DeepSeekBalancer:
    """Per-expert selection biases for loss-free balancing."""

    biases: np.ndarray
    update_rate: float

    def __post_init__(self) -> None:
        if not self.update_rate > 0:
            raise DomainError("The bias update rate must be positive.")
        if not np.all(np.isfinite(self.biases)):
            raise DomainError("Balancer biases must be finite.")

    @classmethod
    def zeros(cls, n_experts: int, update_rate: float) -> DeepSeekBalancer:
        return cls(np.zeros(n_experts), update_rate)


@dataclass
class RoutingResult:
    """Everything one MoE forward pass produces, kept for the backward pass and statistics."""

    logits: np.ndarray
    probs: np.ndarray
    indices: np.ndarray
    gates: np.ndarray
    selected_outputs: np.ndarray
    output: np.ndarray
    renormalized: bool = False
    raw_gates: np.ndarray = field(default=None)

    def load_stats(self) -> LoadStats:
        return LoadStats.from_routing(self.probs, self.indices)


def router_forward(tokens: np.ndarray, params: RouterParams) -> Tuple[np.ndarray, ProbBatch]:
    """Router logits and probabilities.

    Args:
        tokens (np.ndarray): T x d token features.
        params (RouterParams): The router.

    Raises:
        ShapeMismatchError: If the token dimension does not match the router.

    Returns:
        Tuple[np.ndarray, ProbBatch]: logits = tokens W_g, and their row-wise softmax.
    """
    tokens = as_float_matrix(tokens, "tokens")
    if tokens.shape[1] != params.W_g.shape[0]:
        raise ShapeMismatchError(f"Tokens have dimension {tokens.shape[1]}, router expects {params.W_g.shape[0]}.")
    logits = tokens @ params.W_g
    return logits, ProbBatch(softmax(logits, axis=1))


def top_k_select(
    probs: np.ndarray,
    k: int,
    renormalize: bool = False,
    biases: Union[np.ndarray, None] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """Selects the k most probable experts per row, ties going to the lowest index.

    Args:
        probs (np.ndarray): A probability row, or a T x N matrix of rows.
        k (int): Number of experts to select.
        renormalize (bool, optional): Rescale the selected gates to sum to 1. Defaults to False.
        biases (Union[np.ndarray, None], optional): Added to the probabilities for selection only. Defaults to None.

    Raises:
        DomainError: If k exceeds the number of experts.

    Returns:
        Tuple[np.ndarray, np.ndarray]: Selected indices (most probable first) and their gate values.
    """
    probs = np.asarray(probs, dtype=np.float64)
    single = probs.ndim == 1
    rows = probs[None, :] if single else probs
    if not 1 <= k <= rows.shape[1]:
        raise DomainError(f"Cannot select {k} of {rows.shape[1]} experts.")
    scores = rows if biases is None else rows + biases[None, :]
    indices = np.argsort(-scores, axis=1, kind="stable")[:, :k]
    gates = np.take_along_axis(rows, indices, axis=1)
    if renormalize:
        gates = gates / np.sum(gates, axis=1, keepdims=True)
    if single:
        return indices[0], gates[0]
    return indices, gates


def moe_forward_detailed(
    tokens: np.ndarray,
    experts: ExpertSet,
    shared: Union[ExpertSet, None],
    router: RouterParams,
    config: MoEConfig,
    balancer: Union[DeepSeekBalancer, None] = None,
) -> RoutingResult:
    """MoE forward pass keeping the intermediate routing quantities.

    Returns:
        RoutingResult: Logits, probabilities, selections, gates, selected expert outputs and the layer output.
    """
    if experts.N != router.N:
        raise ShapeMismatchError(f"Router has {router.N} outputs for {experts.N} experts.")
    logits, batch = router_forward(tokens, router)
    probs = batch.probs
    indices, raw_gates = top_k_select(
        probs, config.top_k, biases=None if balancer is None else balancer.biases
    )
    gates = raw_gates / np.sum(raw_gates, axis=1, keepdims=True) if config.renormalize_gates else raw_gates

    selected = np.take_along_axis(experts.forward_all(tokens), indices[:, :, None], axis=1)
    output = np.einsum("tk,tkd->td", gates, selected)
    if shared is not None and shared.N > 0:
        output = output + np.sum(shared.forward_all(tokens), axis=1)
    return RoutingResult(logits, probs, indices, gates, selected, output, config.renormalize_gates, raw_gates)


def moe_forward(
    tokens: np.ndarray,
    experts: ExpertSet,
    shared: Union[ExpertSet, None],
    router: RouterParams,
    config: MoEConfig,
    balancer: Union[DeepSeekBalancer, None] = None,
) -> np.ndarray:
    """y = sum over the top-K experts of g_i E_i(x), plus every shared expert's output.

    Args:
        tokens (np.ndarray): T x d tokens.
        experts (ExpertSet): Routed experts.
        shared (Union[ExpertSet, None]): Shared experts (unweighted), or None.
        router (RouterParams): The router.
        config (MoEConfig): top-K and gate renormalisation.
        balancer (Union[DeepSeekBalancer, None], optional): Selection biases. Defaults to None.

    Returns:
        np.ndarray: T x d outputs.
    """
    return moe_forward_detailed(tokens, experts, shared, router, config, balancer).output


def routing_backward(result: RoutingResult, grad_output: np.ndarray) -> np.ndarray:
    """Gradient of a loss on the layer output with respect to the router probabilities.

    The expert selection is treated as fixed; only the selected entries receive gradient.

    Args:
        result (RoutingResult): The forward pass.
        grad_output (np.ndarray): T x d gradient of the loss with respect to the output.

    Returns:
        np.ndarray: T x N gradient with respect to the probabilities.
    """
    grad_gates = np.einsum("td,tkd->tk", grad_output, result.selected_outputs)
    if result.renormalized:
        total = np.sum(result.raw_gates, axis=1, keepdims=True)
        grad_gates = (grad_gates - np.sum(result.gates * grad_gates, axis=1, keepdims=True)) / total
    grad_probs = np.zeros_like(result.probs)
    np.put_along_axis(grad_probs, result.indices, grad_gates, axis=1)
    return grad_probs


def load_balancing_loss(stats: LoadStats) -> float:
    """Switch-style auxiliary loss N * sum_i (f_i / K) P_i; exactly 1 under uniform routing."""
    N = stats.P.size
    return float(N * np.sum(stats.f / stats.top_k * stats.P))


def load_balancing_grad(stats: LoadStats, n_tokens: int) -> np.ndarray:
    """Gradient of load_balancing_loss with respect to each token's probabilities (f held fixed)."""
    N = stats.P.size
    return np.broadcast_to(N * stats.f / stats.top_k / n_tokens, (n_tokens, N)).copy()


def z_loss(logits: np.ndarray) -> float:
    """Router z-loss: mean over tokens of the squared log-partition function."""
    lse = logsumexp(logits, axis=1)
    return float(np.mean(lse**2))


def z_loss_grad(logits: np.ndarray) -> np.ndarray:
    """Gradient of z_loss with respect to the logits."""
    lse = logsumexp(logits, axis=1, keepdims=True)
    return 2.0 / logits.shape[0] * lse * softmax(logits, axis=1)


def deepseek_update(balancer: DeepSeekBalancer, stats: LoadStats) -> DeepSeekBalancer:
    """One loss-free balancing step: overloaded experts lose u of bias, underloaded ones gain u.

    Args:
        balancer (DeepSeekBalancer): The current biases.
        stats (LoadStats): Loads observed on the last batch.

    Returns:
        DeepSeekBalancer: The updated balancer.
    """
    mean_load = np.mean(stats.loads)
    step = np.where(stats.loads > mean_load, -balancer.update_rate, 0.0)
    step = np.where(stats.loads < mean_load, balancer.update_rate, step)
    return replace(balancer, biases=balancer.biases + step)


def cov(loads: Sequence[float]) -> float:
    """Coefficient of variation (population standard deviation / mean) of expert loads.

    Raises:
        DomainError: If the mean load is not positive.
    """
    loads = np.asarray(loads, dtype=np.float64)
    mean = np.mean(loads)
    if not mean > 0:
        raise DomainError("The coefficient of variation needs a positive mean load.")
    return float(np.std(loads) / mean)


def simplex_project(probs: np.ndarray) -> np.ndarray:
    """Maps K=3 probability rows onto the triangle (0, 0), (1, 0), (0.5, sqrt(3)/2).

    Args:
        probs (np.ndarray): T x 3 rows (or a single row).

    Raises:
        ShapeMismatchError: If rows do not have 3 components.

    Returns:
        np.ndarray: T x 2 Cartesian coordinates.
    """
    probs = np.asarray(probs, dtype=np.float64)
    rows = np.atleast_2d(probs)
    if rows.shape[1] != 3:
        raise ShapeMismatchError(f"Simplex projection needs 3 categories, got {rows.shape[1]}.")
    vertices = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2]])
    coords = rows @ vertices
    return coords[0] if probs.ndim == 1 else coords


def max_prob_std(probs: np.ndarray) -> float:
    """Standard deviation of each token's largest routing probability."""
    return float(np.std(np.max(probs, axis=1)))


def uniform_band_fraction(probs: np.ndarray, half_width: float = UNIFORM_BAND_HALF_WIDTH) -> float:
    """Fraction of all probabilities lying within 1/N +- half_width."""
    N = probs.shape[1]
    return float(np.mean(np.abs(probs - 1.0 / N) <= half_width))


def specialization_matrix(probs: np.ndarray, source_tags: Union[Sequence[str], None]) -> pd.DataFrame:
    """Mean probability mass each source places on each expert.

    Returns:
        pd.DataFrame: One row per source tag (sorted), columns source_tag, expert_0..expert_{N-1}.
    """
    batch = ProbBatch(probs, source_tags)
    rows = []
    for tag, idx in batch.groups():
        row = {"source_tag": tag}
        row.update({f"expert_{i}": float(v) for i, v in enumerate(np.mean(probs[idx], axis=0))})
        rows.append(row)
    return pd.DataFrame(rows)


class MoELayerSim:
    """One simulated MoE layer: router, routed experts, optional shared experts and balancer."""

    def __init__(
        self,
        router: RouterParams,
        experts: ExpertSet,
        config: MoEConfig,
        shared: Union[ExpertSet, None] = None,
        balancer: Union[DeepSeekBalancer, None] = None,
    ) -> None:
        self.router = router
        self.experts = experts
        self.config = config
        self.shared = shared
        self.balancer = balancer

    def forward(self, tokens: np.ndarray) -> RoutingResult:
        return moe_forward_detailed(tokens, self.experts, self.shared, self.router, self.config, self.balancer)

    def update_balancer(self, result: RoutingResult) -> None:
        """Applies one loss-free balancing update between batches (single writer)."""
        if self.balancer is not None:
            self.balancer = deepseek_update(self.balancer, result.load_stats())


def routing_dump(
    layer: int, probs: np.ndarray, indices: Union[np.ndarray, None], source_tags: Union[List[str], None]
) -> pd.DataFrame:
    """Routing dump rows: layer, token_id, source_tag, p_0..p_{N-1}, selected_indices."""
    T, N = probs.shape
    table = {
        "layer": np.full(T, layer),
        "token_id": np.arange(T),
        "source_tag": source_tags if source_tags is not None else ["default"] * T,
    }
    for i in range(N):
        table[f"p_{i}"] = probs[:, i]
    table["selected_indices"] = (
        [" ".join(str(i) for i in row) for row in indices] if indices is not None else [""] * T
    )
    return pd.DataFrame(table)
