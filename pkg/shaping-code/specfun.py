"""specfun.py
Scalar special functions needed by the distribution maths: log-gamma, log-beta, the Beta
PDF and the regularised incomplete beta function (Beta CDF).

Every function accepts floats or numpy arrays for its x argument and returns a float for
scalar input."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Union

import numpy as np
import pandas as pd

from common import ConvergenceError, DomainError, scalar_or_array

ArrayLike = Union[float, np.ndarray]

# Lanczos approximation with g = 7 and 9 coefficients.
LANCZOS_G = 7.0
LANCZOS_COEFS = np.array(
    [
        0.99999999999980993,
        676.5203681218851,
        -1259.1392167224028,
        771.32342877765313,
        -176.61502916214059,
        12.507343278686905,
        -0.13857109526572012,
        9.9843695780195716e-6,
        1.5056327351493116e-7,
    ]
)
HALF_LOG_TWO_PI = 0.5 * np.log(2 * np.pi)

# Continued fraction (modified Lentz) settings.
CF_MAX_ITERATIONS = 300
CF_TOLERANCE = 1e-14
CF_FPMIN = 1e-300

# Default grid used by the specfun-table subcommand.
TABLE_SHAPES = (0.2, 0.5, 0.75, 1.0, 1.5, 3.0, 5.0)
TABLE_X = (0.01,) + tuple(round(0.05 * i, 2) for i in range(1, 20)) + (0.99,)


@dataclass(frozen=True)
class BetaParams:
    """Shape parameters of a Beta distribution."""

    a: float
    b: float

    def __post_init__(self) -> None:
        for name, value in (("a", self.a), ("b", self.b)):
            if not np.isfinite(value) or value <= 0:
                raise DomainError(f"Beta shape {name} must be finite and positive, got {value}.")


def _lanczos_log_gamma(x: np.ndarray) -> np.ndarray:
    """ln Gamma(x) for x >= 0.5."""
    z = x - 1.0
    series = np.full_like(z, LANCZOS_COEFS[0])
    for i in range(1, len(LANCZOS_COEFS)):
        series = series + LANCZOS_COEFS[i] / (z + i)
    t = z + LANCZOS_G + 0.5
    return HALF_LOG_TWO_PI + (z + 0.5) * np.log(t) - t + np.log(series)


def log_gamma(x: ArrayLike) -> ArrayLike:
    """Natural logarithm of the Gamma function for positive arguments.

    Uses the Lanczos approximation, with the reflection formula below 0.5.

    Args:
        x (ArrayLike): Positive, finite argument(s).

    Raises:
        DomainError: If any argument is non-positive or non-finite.

    Returns:
        ArrayLike: ln Gamma(x).
    """
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)) or np.any(x <= 0):
        raise DomainError("log_gamma is only defined for finite, positive arguments.")

    small = x < 0.5
    result = np.empty_like(x)
    result[~small] = _lanczos_log_gamma(x[~small])
    if np.any(small):
        xs = x[small]
        # Reflection: Gamma(x) Gamma(1 - x) = pi / sin(pi x)
        result[small] = np.log(np.pi / np.sin(np.pi * xs)) - _lanczos_log_gamma(1.0 - xs)
    return scalar_or_array(result)


def log_beta(a: ArrayLike, b: ArrayLike) -> ArrayLike:
    """ln B(a, b) = ln Gamma(a) + ln Gamma(b) - ln Gamma(a + b).

    Args:
        a (ArrayLike): First shape.
        b (ArrayLike): Second shape.

    Returns:
        ArrayLike: The log beta function.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return scalar_or_array(
        np.asarray(log_gamma(a)) + np.asarray(log_gamma(b)) - np.asarray(log_gamma(a + b))
    )


def beta_pdf(x: ArrayLike, params: BetaParams) -> ArrayLike:
    """Beta probability density, evaluated in log space.

    Args:
        x (ArrayLike): Point(s) strictly inside (0, 1). Callers clamp first.
        params (BetaParams): The distribution.

    Raises:
        DomainError: If any x lies outside (0, 1).

    Returns:
        ArrayLike: The density.
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x > 0) | ~(x < 1)):
        raise DomainError("beta_pdf requires 0 < x < 1.")
    log_density = (
        (params.a - 1.0) * np.log(x)
        + (params.b - 1.0) * np.log1p(-x)
        - log_beta(params.a, params.b)
    )
    return scalar_or_array(np.exp(log_density))


def _fix_tiny(values: np.ndarray) -> np.ndarray:
    return np.where(np.abs(values) < CF_FPMIN, CF_FPMIN, values)


def _beta_continued_fraction(a: float, b: float, x: np.ndarray) -> np.ndarray:
    """Continued fraction for the incomplete beta function (modified Lentz).

    Entries stop being updated once they converge, so each result only depends on its
    own x.
    """
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = np.ones_like(x)
    d = 1.0 / _fix_tiny(1.0 - qab * x / qap)
    h = d.copy()
    converged = np.zeros(x.shape, dtype=bool)

    for m in range(1, CF_MAX_ITERATIONS + 1):
        m2 = 2 * m
        # Even step
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 / _fix_tiny(1.0 + aa * d)
        c = _fix_tiny(1.0 + aa / c)
        h = np.where(converged, h, h * d * c)
        # Odd step
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 / _fix_tiny(1.0 + aa * d)
        c = _fix_tiny(1.0 + aa / c)
        delta = d * c
        h = np.where(converged, h, h * delta)
        converged |= np.abs(delta - 1.0) < CF_TOLERANCE
        if np.all(converged):
            return h

    raise ConvergenceError(
        f"Incomplete beta continued fraction did not converge in {CF_MAX_ITERATIONS} iterations (a={a}, b={b})."
    )


def beta_cdf(x: ArrayLike, params: BetaParams) -> ArrayLike:
    """Regularised incomplete beta function I_x(a, b).

    The continued fraction is evaluated directly when x < (a + 1) / (a + b + 2) and
    through the complement I_x(a, b) = 1 - I_{1-x}(b, a) otherwise.

    Args:
        x (ArrayLike): Point(s) in [0, 1].
        params (BetaParams): The distribution.

    Raises:
        DomainError: If any x lies outside [0, 1].
        ConvergenceError: If the continued fraction does not converge.

    Returns:
        ArrayLike: The CDF value(s).
    """
    x = np.asarray(x, dtype=np.float64)
    if np.any(~(x >= 0) | ~(x <= 1)):
        raise DomainError("beta_cdf requires 0 <= x <= 1.")
    a, b = params.a, params.b

    result = np.where(x >= 1.0, 1.0, 0.0)
    interior = (x > 0) & (x < 1)
    if np.any(interior):
        xi = x[interior]
        log_front = a * np.log(xi) + b * np.log1p(-xi) - log_beta(a, b)
        front = np.exp(log_front)
        direct = xi < (a + 1.0) / (a + b + 2.0)

        values = np.empty_like(xi)
        if np.any(direct):
            values[direct] = front[direct] * _beta_continued_fraction(a, b, xi[direct]) / a
        if np.any(~direct):
            values[~direct] = 1.0 - front[~direct] * _beta_continued_fraction(b, a, 1.0 - xi[~direct]) / b
        result[interior] = np.clip(values, 0.0, 1.0)
    return scalar_or_array(result)


def specfun_table(
    xs: Iterable[float] = TABLE_X, shapes: Iterable[float] = TABLE_SHAPES
) -> pd.DataFrame:
    """Tabulates the Beta PDF and CDF over a grid, for regression snapshots.

    Args:
        xs (Iterable[float], optional): x values in (0, 1). Defaults to TABLE_X.
        shapes (Iterable[float], optional): Values used for both a and b. Defaults to TABLE_SHAPES.

    Returns:
        pd.DataFrame: Columns x, a, b, pdf, cdf.
    """
    xs = np.asarray(list(xs), dtype=np.float64)
    shapes = list(shapes)
    frames = []
    for a in shapes:
        for b in shapes:
            params = BetaParams(a, b)
            frames.append(
                pd.DataFrame(
                    {
                        "x": xs,
                        "a": a,
                        "b": b,
                        "pdf": np.asarray(beta_pdf(xs, params)),
                        "cdf": np.asarray(beta_cdf(xs, params)),
                    }
                )
            )
    return pd.concat(frames, ignore_index=True)
