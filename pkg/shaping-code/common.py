"""common.py
Utility functions and classes common between several modules and scripts."""

from __future__ import annotations

import argparse
import json
import os
from abc import ABC, abstractmethod
from typing import Any, Dict, Iterable, List, Union

import numpy as np
import pandas as pd

# Probabilities are kept away from exact 0 and 1 before any Beta PDF / CDF evaluation.
DEFAULT_CLAMP_EPS = 1e-7

# 17 significant digits round-trips every float64.
CSV_FLOAT_FORMAT = "%.17g"


class DpslError(Exception):
    """Base class for all errors raised by this package."""


class DomainError(DpslError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class ShapeMismatchError(DpslError, ValueError):
    """Array dimensions do not agree."""


class ConfigError(DpslError, ValueError):
    """An experiment configuration is invalid."""


class NumericError(DpslError, ArithmeticError):
    """A loss, gradient or parameter became non-finite."""


class ConvergenceError(NumericError):
    """An iterative evaluation did not converge within its iteration cap."""


class ExpertFormatError(DpslError, ValueError):
    """A serialised expert set is malformed."""


def make_rng(seed: Union[int, np.random.SeedSequence, None]) -> np.random.Generator:
    """Creates the seeded generator used everywhere (PCG64).

    Args:
        seed (Union[int, np.random.SeedSequence, None]): Seed or seed sequence.

    Returns:
        np.random.Generator: The generator.
    """
    return np.random.Generator(np.random.PCG64(seed))


def spawn_rngs(seed: Union[int, np.random.SeedSequence], count: int) -> List[np.random.Generator]:
    """Splits a seed into `count` independent generators.

    The children only depend on the seed and their position, so results do not change
    when the work is reordered or run in parallel.

    Args:
        seed (Union[int, np.random.SeedSequence]): Parent seed.
        count (int): Number of children.

    Returns:
        List[np.random.Generator]: One generator per child.
    """
    parent = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    return [make_rng(child) for child in parent.spawn(count)]


def require_finite(values: Any, what: str) -> None:
    """Raises NumericError if any value is NaN or infinite."""
    if not np.all(np.isfinite(values)):
        raise NumericError(f"Non-finite {what} encountered.")


def as_float_matrix(values: Any, name: str) -> np.ndarray:
    """Converts the input to a 2D float64 array, raising ShapeMismatchError otherwise."""
    array = np.asarray(values, dtype=np.float64)
    if array.ndim != 2:
        raise ShapeMismatchError(f"{name} must be a 2D matrix, got shape {array.shape}.")
    return array


def scalar_or_array(values: np.ndarray) -> Union[float, np.ndarray]:
    """Returns a Python float for 0-d arrays so scalar callers get scalars back."""
    if np.ndim(values) == 0:
        return float(values)
    return values


def write_csv(df: pd.DataFrame, filename: str) -> str:
    """Writes a dataframe in the canonical CSV format (header, 17 significant digits).

    Args:
        df (pd.DataFrame): The table to write.
        filename (str): Where to write it.

    Returns:
        str: The filename written.
    """
    try:
        df.to_csv(filename, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n", encoding="utf-8")
    except OSError as e:
        raise OSError(f"Could not write '{filename}': {e}") from e
    return filename


def ensure_dir(directory: str) -> None:
    """Creates the directory (and parents) if it does not exist yet."""
    try:
        if not os.path.exists(directory):
            os.makedirs(directory)
    except OSError as e:
        raise OSError(f"Could not create output directory '{directory}': {e}") from e


def add_output_args(parser: argparse.ArgumentParser) -> argparse._ArgumentGroup:
    """Adds the output options shared by the experiment subcommands.

    Args:
        parser (argparse.ArgumentParser): Argparser to add to.

    Returns:
        argparse._ArgumentGroup: Group containing the output arguments (so more stuff can be added to it if needed).
    """
    output_group = parser.add_argument_group(
        "Output",
        "Where the experiment writes its CSV files, figures and report.",
    )
    output_group.add_argument(
        "-o",
        "--out",
        help="The folder to create and write the results into. Overrides output_dir from the config.",
        type=str,
        default=None,
    )
    output_group.add_argument(
        "-q",
        "--quiet",
        help="If present, does not print progress messages.",
        action="store_true",
    )
    return output_group


class Config(ABC):
    """A section of an experiment configuration.

    Subclasses list their accepted keys and defaults in DEFAULTS. Loading rejects any key
    not listed there.
    """

    DEFAULTS: Dict[str, Any] = {}

    @abstractmethod
    def as_dict(self) -> dict:
        """Converts the current config (or section) to a dictionary.

        Returns:
            dict: The dictionary representation.
        """
        pass

    @classmethod
    def check_keys(cls, data: dict, section: str) -> None:
        """Raises ConfigError if the dictionary contains keys this section does not know.

        Args:
            data (dict): The loaded section.
            section (str): Name used in the error message.
        """
        if not isinstance(data, dict):
            raise ConfigError(f"Section '{section}' must be a JSON object.")
        unknown = sorted(set(data) - set(cls.DEFAULTS))
        if unknown:
            raise ConfigError(f"Unknown key(s) in '{section}': {', '.join(unknown)}.")

    @classmethod
    def merged(cls, data: Union[dict, None], section: str) -> dict:
        """Returns the defaults overlaid with the given section after checking its keys."""
        data = {} if data is None else data
        cls.check_keys(data, section)
        result = json.loads(json.dumps(cls.DEFAULTS))
        result.update(data)
        return result

    @classmethod
    def schema(cls) -> dict:
        """The accepted keys with their default values, as echoed into reports."""
        return json.loads(json.dumps(cls.DEFAULTS))

    def save_file(self, filename: str) -> None:
        """Writes the config as JSON.

        Args:
            filename (str): The filename.
        """
        data = self.as_dict()
        with open(filename, "w") as file:
            json.dump(data, file, indent=4)


def check_positive_vector(values: Iterable[float], name: str) -> np.ndarray:
    """Converts to a finite, strictly positive float64 vector or raises DomainError."""
    try:
        array = np.array(list(values) if not isinstance(values, np.ndarray) else values, dtype=np.float64)
    except (TypeError, ValueError) as e:
        raise DomainError(f"{name} must be a vector of numbers: {e}") from e
    if array.ndim != 1:
        raise DomainError(f"{name} must be a vector.")
    if not np.all(np.isfinite(array)) or np.any(array <= 0):
        raise DomainError(f"All entries of {name} must be finite and positive, got {array.tolist()}.")
    return array
