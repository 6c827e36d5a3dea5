"""upcycle.py
Turns a dense FFN into an expert set, either by noisy replication (standard upcycling) or
by sharding the hidden dimension into G slices and replicating the shard set (granular
upcycling). Also reads and writes expert sets in a flat binary format.

Expert e of a granular set is shard e % G of replica e // G.
"""

from __future__ import annotations

import struct
from typing import List, Union

import numpy as np

from common import (
    Config,
    ConfigError,
    DomainError,
    ExpertFormatError,
    ShapeMismatchError,
    make_rng,
    spawn_rngs,
)
from moe import DenseFFN, ExpertSet, MoEConfig, Nonlinearity, RouterParams, moe_forward

SHARD_LAYOUTS = ("contiguous", "strided")
DEFAULT_NOISE_SIGMA = 0.01


class UpcycleConfig(Config):
    """How a dense FFN is turned into experts."""

    DEFAULTS = {
        "granularity": 1,
        "noise_sigma": DEFAULT_NOISE_SIGMA,
        "reinit_ratio": 0.0,
        "shard_layout": "contiguous",
    }

    def __init__(
        self,
        n_experts: int,
        granularity: int = 1,
        noise_sigma: float = DEFAULT_NOISE_SIGMA,
        seed: int = 0,
        reinit_ratio: float = 0.0,
        shard_layout: str = "contiguous",
    ) -> None:
        """Initialises the config.

        Args:
            n_experts (int): Total number of experts N (replicas x G).
            granularity (int, optional): Shards per replica G. Defaults to 1.
            noise_sigma (float, optional): Std of the Gaussian noise added to every weight. Defaults to 0.01.
            seed (int, optional): Seed the per-expert generators are spawned from. Defaults to 0.
            reinit_ratio (float, optional): Fraction of each weight matrix re-sampled (Drop-Upcycling).
                Defaults to 0.
            shard_layout (str, optional): "contiguous" or "strided" hidden slices. Defaults to "contiguous".

        Raises:
            DomainError: If a value is out of range.
        """
        if granularity < 1:
            raise DomainError(f"granularity must be at least 1, got {granularity}.")
        if n_experts < 1 or n_experts % granularity != 0:
            raise DomainError(f"n_experts ({n_experts}) must be a positive multiple of granularity ({granularity}).")
        if not noise_sigma >= 0:
            raise DomainError(f"noise_sigma must be non-negative, got {noise_sigma}.")
        if not 0 <= reinit_ratio <= 1:
            raise DomainError(f"reinit_ratio must lie in [0, 1], got {reinit_ratio}.")
        if shard_layout not in SHARD_LAYOUTS:
            raise DomainError(f"shard_layout must be one of {SHARD_LAYOUTS}, got '{shard_layout}'.")
        self.n_experts = int(n_experts)
        self.granularity = int(granularity)
        self.noise_sigma = float(noise_sigma)
        self.seed = seed
        self.reinit_ratio = float(reinit_ratio)
        self.shard_layout = shard_layout

    @classmethod
    def from_dict(cls, data: Union[dict, None], n_experts: int, seed: int) -> UpcycleConfig:
        """Creates the config from the "upcycle" section, the expert count and the run seed."""
        data = cls.merged(data, "upcycle")
        try:
            return cls(
                n_experts, data["granularity"], data["noise_sigma"], seed, data["reinit_ratio"], data["shard_layout"]
            )
        except (DomainError, TypeError) as e:
            raise ConfigError(f"Invalid upcycle section: {e}") from e

    @property
    def replicas(self) -> int:
        return self.n_experts // self.granularity

    def as_dict(self) -> dict:
        return {
            "granularity": self.granularity,
            "noise_sigma": self.noise_sigma,
            "reinit_ratio": self.reinit_ratio,
            "shard_layout": self.shard_layout,
        }


def shard_slices(hidden_dim: int, granularity: int, layout: str = "contiguous") -> List[np.ndarray]:
    """Hidden-unit indices of each of the G shards.

    Args:
        hidden_dim (int): Dense hidden dimension h.
        granularity (int): Number of shards G.
        layout (str, optional): "contiguous" takes blocks of h/G units, "strided" takes every G-th unit.
            Defaults to "contiguous".

    Raises:
        DomainError: If G does not divide h or the layout is unknown.

    Returns:
        List[np.ndarray]: G disjoint index arrays covering 0..h-1.
    """
    if granularity < 1 or hidden_dim % granularity != 0:
        raise DomainError(f"Hidden dimension {hidden_dim} is not divisible by granularity {granularity}.")
    size = hidden_dim // granularity
    if layout == "contiguous":
        return [np.arange(s * size, (s + 1) * size) for s in range(granularity)]
    elif layout == "strided":
        return [np.arange(s, hidden_dim, granularity) for s in range(granularity)]
    raise DomainError(f"Unknown shard layout '{layout}'.")


def shard_ffn(ffn: DenseFFN, hidden_units: np.ndarray) -> DenseFFN:
    """The FFN restricted to some hidden units: their columns of W_up / W_gate and rows of W_down."""
    return DenseFFN(
        ffn.W_up[:, hidden_units],
        ffn.W_down[hidden_units, :],
        None if ffn.W_gate is None else ffn.W_gate[:, hidden_units],
        ffn.nonlinearity,
    )


def _perturb(weights: np.ndarray, rng: np.random.Generator, sigma: float, reinit_ratio: float) -> np.ndarray:
    """Copy of the weights with a fraction re-sampled and Gaussian noise added."""
    out = weights.copy()
    if reinit_ratio > 0:
        count = int(round(reinit_ratio * out.size))
        chosen = rng.choice(out.size, size=count, replace=False)
        out.flat[chosen] = rng.normal(np.mean(weights), np.std(weights), size=count)
    if sigma > 0:
        out += sigma * rng.standard_normal(out.shape)
    return out


def _perturbed_expert(ffn: DenseFFN, rng: np.random.Generator, config: UpcycleConfig) -> DenseFFN:
    return DenseFFN(
        _perturb(ffn.W_up, rng, config.noise_sigma, config.reinit_ratio),
        _perturb(ffn.W_down, rng, config.noise_sigma, config.reinit_ratio),
        None if ffn.W_gate is None else _perturb(ffn.W_gate, rng, config.noise_sigma, config.reinit_ratio),
        ffn.nonlinearity,
    )


def standard_upcycle(ffn: DenseFFN, config: UpcycleConfig) -> ExpertSet:
    """N full copies of the FFN, each perturbed with its own generator.

    Args:
        ffn (DenseFFN): The dense block.
        config (UpcycleConfig): Expert count, noise and seed.

    Raises:
        DomainError: If the granularity is not 1.

    Returns:
        ExpertSet: The experts.
    """
    if config.granularity != 1:
        raise DomainError("Standard upcycling needs granularity 1; use granular_upcycle.")
    rngs = spawn_rngs(config.seed, config.n_experts)
    return ExpertSet.from_experts([_perturbed_expert(ffn, rng, config) for rng in rngs], granularity=1)


def granular_upcycle(ffn: DenseFFN, config: UpcycleConfig) -> ExpertSet:
    """Replicas of the FFN's G hidden-dimension shards, each shard expert perturbed independently.

    Args:
        ffn (DenseFFN): The dense block.
        config (UpcycleConfig): Expert count, granularity, shard layout, noise and seed.

    Raises:
        DomainError: If G does not divide the hidden dimension.

    Returns:
        ExpertSet: N = replicas x G experts with hidden size h / G.
    """
    if config.granularity == 1:
        return standard_upcycle(ffn, config)
    slices = shard_slices(ffn.hidden_dim, config.granularity, config.shard_layout)
    shards = [shard_ffn(ffn, s) for s in slices]
    rngs = spawn_rngs(config.seed, config.n_experts)
    experts = [_perturbed_expert(shards[e % config.granularity], rngs[e], config) for e in range(config.n_experts)]
    return ExpertSet.from_experts(experts, granularity=config.granularity)


def upcycle(ffn: DenseFFN, config: UpcycleConfig) -> ExpertSet:
    """Standard or granular upcycling depending on the configured granularity."""
    if config.granularity == 1:
        return standard_upcycle(ffn, config)
    return granular_upcycle(ffn, config)


def equivalence_check(
    dense: DenseFFN,
    experts: ExpertSet,
    router: Union[RouterParams, None],
    config: MoEConfig,
    n_tokens: int = 1000,
    seed: int = 0,
) -> float:
    """Largest deviation between the upcycled layer and the dense FFN on random tokens.

    Standard sets are run through the MoE layer, which has to renormalise its gates. For
    granular sets every replica's G shards are summed at unit gate.

    Args:
        dense (DenseFFN): The original block.
        experts (ExpertSet): Its upcycled experts.
        router (Union[RouterParams, None]): The router (standard sets only).
        config (MoEConfig): Layer settings (standard sets only).
        n_tokens (int, optional): Number of random tokens. Defaults to 1000.
        seed (int, optional): Token seed. Defaults to 0.

    Raises:
        ShapeMismatchError: If the experts do not match the dense model dimension.
        ConfigError: If a standard set is checked without renormalised gates or a router.

    Returns:
        float: max |moe(x) - dense(x)| over tokens and output dimensions.
    """
    if experts.d != dense.d:
        raise ShapeMismatchError(f"Experts have model dimension {experts.d}, dense FFN has {dense.d}.")
    tokens = make_rng(seed).standard_normal((n_tokens, dense.d))
    expected = dense.forward(tokens)

    G = experts.granularity
    if G == 1:
        if router is None or not config.renormalize_gates:
            raise ConfigError("Checking a standard expert set needs a router and renormalised gates.")
        if router.N != experts.N or config.n_experts != experts.N:
            raise ConfigError(f"Router and config must both describe {experts.N} experts.")
        output = moe_forward(tokens, experts, None, router, config)
        return float(np.max(np.abs(output - expected)))

    outputs = experts.forward_all(tokens)
    replica_sums = outputs.reshape(n_tokens, experts.N // G, G, dense.d).sum(axis=2)
    return float(np.max(np.abs(replica_sums - expected[:, None, :])))


class ExpertSetHeader:
    """Fixed-size header of the binary expert-set format (little endian)."""

    MAGIC = b"DPEX"
    VERSION = 1
    FORMAT = "<4sHBBIIII"
    SIZE = 24

    def __init__(self, data: bytes) -> None:
        """Initialises the object.

        Args:
            data (bytes): The raw data (trimmed to just the header).
        """
        (
            self.magic,
            self.version,
            self.nonlinearity,
            self.gated,
            self.n_experts,
            self.granularity,
            self.d,
            self.hidden_dim,
        ) = struct.unpack(self.FORMAT, data)

    @classmethod
    def pack(cls, experts: ExpertSet) -> bytes:
        return struct.pack(
            cls.FORMAT,
            cls.MAGIC,
            cls.VERSION,
            experts.nonlinearity.code,
            int(experts.W_gate is not None),
            experts.N,
            experts.granularity,
            experts.d,
            experts.hidden_dim,
        )

    def body_size(self) -> int:
        matrices = 3 if self.gated else 2
        return self.n_experts * matrices * self.d * self.hidden_dim * 8

    def __str__(self) -> str:
        return f"v{self.version}: {self.n_experts} experts (G={self.granularity}), d={self.d}, h={self.hidden_dim}"


def write_expert_set(experts: ExpertSet, filename: str) -> None:
    """Writes the header followed by W_up, W_gate (if gated) and W_down of each expert as row-major f64.

    Args:
        experts (ExpertSet): The experts.
        filename (str): Where to write them.
    """
    dtype = np.dtype("<f8")
    try:
        with open(filename, "wb") as file:
            file.write(ExpertSetHeader.pack(experts))
            for i in range(experts.N):
                ffn = experts.expert(i)
                for weights in (ffn.W_up, ffn.W_gate, ffn.W_down):
                    if weights is not None:
                        file.write(np.ascontiguousarray(weights, dtype=dtype).tobytes())
    except OSError as e:
        raise OSError(f"Could not write expert set '{filename}': {e}") from e


def read_expert_set(filename: str) -> ExpertSet:
    """Reads an expert set written by write_expert_set.

    Raises:
        ExpertFormatError: If the file is truncated, too long or has a bad header.

    Returns:
        ExpertSet: The experts.
    """
    try:
        with open(filename, "rb") as file:
            data = file.read()
    except OSError as e:
        raise OSError(f"Could not read expert set '{filename}': {e}") from e

    if len(data) < ExpertSetHeader.SIZE:
        raise ExpertFormatError(f"'{filename}' is too short to hold an expert-set header.")
    header = ExpertSetHeader(data[: ExpertSetHeader.SIZE])
    if header.magic != ExpertSetHeader.MAGIC:
        raise ExpertFormatError(f"'{filename}' is not an expert-set file (magic {header.magic!r}).")
    if header.version != ExpertSetHeader.VERSION:
        raise ExpertFormatError(f"Unsupported expert-set version {header.version}.")
    if header.nonlinearity >= len(Nonlinearity) or header.gated > 1:
        raise ExpertFormatError(f"Invalid nonlinearity or gate flag in '{filename}'.")
    if header.n_experts < 1 or header.granularity < 1 or header.d < 1 or header.hidden_dim < 1:
        raise ExpertFormatError(f"Invalid dimensions in '{filename}': {header}.")
    if len(data) != ExpertSetHeader.SIZE + header.body_size():
        raise ExpertFormatError(
            f"'{filename}' holds {len(data) - ExpertSetHeader.SIZE} weight bytes, header expects {header.body_size()}."
        )

    N, d, h = header.n_experts, header.d, header.hidden_dim
    matrices = 3 if header.gated else 2
    weights = np.frombuffer(data, dtype="<f8", offset=ExpertSetHeader.SIZE).astype(np.float64)
    per_expert = weights.reshape(N, matrices, d * h)
    W_up = per_expert[:, 0].reshape(N, d, h)
    W_gate = per_expert[:, 1].reshape(N, d, h) if header.gated else None
    W_down = per_expert[:, -1].reshape(N, h, d)
    return ExpertSet(W_up, W_down, W_gate, Nonlinearity.from_code(header.nonlinearity), header.granularity)
