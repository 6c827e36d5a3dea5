"""report.py
Run reports: the tables and figures an experiment produces, and writing them to disk."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Tuple, Union

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
from matplotlib.axes import Axes

from common import ensure_dir, write_csv

# Fixed salt and no date so SVG output is byte-identical between runs.
matplotlib.rcParams["svg.hashsalt"] = "dpsl"
SVG_METADATA = {"Date": None}
FIGSIZE = [7.11111, 4]


@dataclass
class RunReport:
    """Everything a run produced, before it is written out.

    Attributes:
        config (dict): Config echo.
        schema (dict): Accepted config keys and defaults.
        loss (Union[pd.DataFrame, None]): Per-step trace, columns step, loss and any components.
        probs_final (Union[pd.DataFrame, None]): Final probabilities in the routing dump layout.
        cdf_traces (Dict[Tuple[str, int], pd.DataFrame]): (source, category) -> final empirical vs target CDF.
        cdf_init (Dict[Tuple[str, int], pd.DataFrame]): Same, at initialisation.
        histograms (Dict[str, pd.DataFrame]): File stem -> histogram table.
        cov (Union[pd.DataFrame, None]): Per-layer load coefficient of variation.
        cvm (Union[pd.DataFrame, None]): CvM distance per (layer,) source and category.
        specialization (Union[pd.DataFrame, None]): Mean probability per source and expert.
        simplex (Union[pd.DataFrame, None]): Projected K=3 points, columns source_tag, x, y.
        tables (Dict[str, pd.DataFrame]): Any other CSV tables by file stem.
        summary (dict): Scalar results.
    """

    config: dict = field(default_factory=dict)
    schema: dict = field(default_factory=dict)
    loss: Union[pd.DataFrame, None] = None
    probs_final: Union[pd.DataFrame, None] = None
    cdf_traces: Dict[Tuple[str, int], pd.DataFrame] = field(default_factory=dict)
    cdf_init: Dict[Tuple[str, int], pd.DataFrame] = field(default_factory=dict)
    histograms: Dict[str, pd.DataFrame] = field(default_factory=dict)
    cov: Union[pd.DataFrame, None] = None
    cvm: Union[pd.DataFrame, None] = None
    specialization: Union[pd.DataFrame, None] = None
    simplex: Union[pd.DataFrame, None] = None
    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    summary: dict = field(default_factory=dict)


def histogram_table(values: np.ndarray, bins: int, target_pdf=None) -> pd.DataFrame:
    """Histogram of values on [0, 1] with an optional target density at the bin centres.

    Args:
        values (np.ndarray): The probabilities.
        bins (int): Number of equal-width bins.
        target_pdf (callable, optional): Maps bin centres to the target density. Defaults to None.

    Returns:
        pd.DataFrame: Columns bin_left, bin_right, count, density, target_pdf.
    """
    counts, edges = np.histogram(values, bins=bins, range=(0.0, 1.0))
    widths = np.diff(edges)
    centres = edges[:-1] + widths / 2
    density = counts / (max(len(values), 1) * widths)
    target = np.asarray(target_pdf(centres)) if target_pdf is not None else np.full(bins, np.nan)
    return pd.DataFrame(
        {"bin_left": edges[:-1], "bin_right": edges[1:], "count": counts, "density": density, "target_pdf": target}
    )


def _save_figure(fig: plt.Figure, filename: str) -> str:
    try:
        fig.savefig(filename, format="svg", metadata=SVG_METADATA)
    except OSError as e:
        raise OSError(f"Could not write '{filename}': {e}") from e
    finally:
        plt.close(fig)
    return filename


def plot_loss(loss: pd.DataFrame, filename: str) -> str:
    """Plots every column of the loss trace against the step."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax: Axes
    for column in loss.columns:
        if column != "step":
            ax.plot(loss["step"].values, loss[column].values, label=column)
    ax.set_xlabel("Step")
    ax.set_ylabel("Loss")
    ax.set_title("Training loss")
    ax.legend(loc="upper right")
    ax.grid()
    fig.tight_layout()
    return _save_figure(fig, filename)


def plot_simplex(simplex: pd.DataFrame, filename: str, title: str = "Probabilities on the simplex") -> str:
    """Scatter of projected K=3 probability rows inside the triangle, one colour per source."""
    fig, ax = plt.subplots(figsize=[5, 5])
    ax: Axes
    triangle = np.array([[0.0, 0.0], [1.0, 0.0], [0.5, np.sqrt(3) / 2], [0.0, 0.0]])
    ax.plot(triangle[:, 0], triangle[:, 1], color="black", linewidth=1)
    for label, (x, y) in zip(("1", "2", "3"), triangle[:3]):
        ax.annotate(label, (x, y), textcoords="offset points", xytext=(0, -12 if y == 0 else 4), ha="center")
    for tag, group in simplex.groupby("source_tag", sort=True):
        ax.scatter(group["x"].values, group["y"].values, s=6, alpha=0.6, label=str(tag))
    ax.set_aspect("equal")
    ax.set_axis_off()
    ax.set_title(title)
    ax.legend(loc="upper right")
    fig.tight_layout()
    return _save_figure(fig, filename)


def plot_cdfs(traces: Dict[int, pd.DataFrame], filename: str, title: str) -> str:
    """Empirical (solid) against target (dotted) CDF for each category of one source."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax: Axes
    colour_cycle = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    for k, trace in sorted(traces.items()):
        colour = colour_cycle[k % len(colour_cycle)]
        ax.step(trace["x"].values, trace["empirical"].values, "-", where="post", color=colour, label=f"Category {k}")
        ax.plot(trace["x"].values, trace["target"].values, ":", color=colour)
    ax.set_xlim(0, 1)
    ax.set_xlabel("Probability")
    ax.set_ylabel("CDF")
    ax.set_title(title)
    ax.legend(loc="lower right")
    ax.grid()
    fig.tight_layout()
    return _save_figure(fig, filename)


def plot_marginals(table: pd.DataFrame, filename: str, title: str) -> str:
    """Beta marginal densities from dirichlet.marginal_table."""
    fig, ax = plt.subplots(figsize=FIGSIZE)
    ax: Axes
    for column in table.columns:
        if column.startswith("pdf_"):
            ax.plot(table["x"].values, table[column].values, label=f"Component {column[4:]}")
    ax.set_xlim(0, 1)
    ax.set_xlabel("$p_k$")
    ax.set_ylabel("Density")
    ax.set_title(title)
    ax.legend(loc="upper center")
    ax.grid()
    fig.tight_layout()
    return _save_figure(fig, filename)


def _jsonable(value):
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return _jsonable(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def emit_report(report: RunReport, output_dir: str, verbose: bool = True) -> List[str]:
    """Writes every table and figure in the report into a folder.

    Args:
        report (RunReport): The run's results.
        output_dir (str): Folder to create (if needed) and write into.
        verbose (bool, optional): Print what is being written. Defaults to True.

    Raises:
        OSError: If a file cannot be written, naming the file.

    Returns:
        List[str]: The file manifest (file names relative to output_dir), report.json last.
    """
    if verbose:
        print(f"Writing the results to '{output_dir}'")
    ensure_dir(output_dir)
    manifest: List[str] = []

    def csv(df: pd.DataFrame, name: str) -> None:
        write_csv(df, os.path.join(output_dir, name))
        manifest.append(name)

    def svg(plotter, name: str, *args) -> None:
        plotter(*args[:1], os.path.join(output_dir, name), *args[1:])
        manifest.append(name)

    if report.loss is not None:
        csv(report.loss, "loss.csv")
        svg(plot_loss, "loss.svg", report.loss)
    if report.probs_final is not None:
        csv(report.probs_final, "probs_final.csv")
    for (tag, k), trace in sorted(report.cdf_init.items()):
        csv(trace, f"cdf_init_{tag}_{k}.csv")
    for (tag, k), trace in sorted(report.cdf_traces.items()):
        csv(trace, f"cdf_trace_{tag}_{k}.csv")
    for tag in sorted({tag for tag, _ in report.cdf_traces}):
        traces = {k: trace for (t, k), trace in report.cdf_traces.items() if t == tag}
        svg(plot_cdfs, f"cdf_{tag}.svg", traces, f"Empirical and target CDFs for {tag}")
    for stem, hist in sorted(report.histograms.items()):
        csv(hist, f"{stem}.csv")
    if report.cov is not None:
        csv(report.cov, "cov.csv")
    if report.cvm is not None:
        csv(report.cvm, "cvm.csv")
    if report.specialization is not None:
        csv(report.specialization, "specialization.csv")
    if report.simplex is not None:
        svg(plot_simplex, "simplex.svg", report.simplex)
    for stem, table in sorted(report.tables.items()):
        csv(table, f"{stem}.csv")

    manifest.append("report.json")
    document = {
        "config": report.config,
        "schema": report.schema,
        "summary": report.summary,
        "manifest": manifest,
    }
    filename = os.path.join(output_dir, "report.json")
    try:
        with open(filename, "w", encoding="utf-8", newline="\n") as file:
            json.dump(_jsonable(document), file, indent=4, sort_keys=True)
    except OSError as e:
        raise OSError(f"Could not write '{filename}': {e}") from e
    if verbose:
        print(f"Wrote {len(manifest)} files")
    return manifest
