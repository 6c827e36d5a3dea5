"""experiments.py
Experiment drivers: the toy shaping experiment, the router simulation, the upcycling
equivalence check and the concentration / strength ablation.

Every driver is deterministic given its config (including the seed) and prints progress
unless verbose is False."""

from __future__ import annotations

from typing import Dict, List, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from scipy.special import softmax

from common import ConfigError, DomainError, NumericError, make_rng, require_finite, spawn_rngs
from dirichlet import DirichletPrior, marginal
from experiment_config import ExperimentConfig, RegularizerSpec
from moe import (
    DeepSeekBalancer,
    DenseFFN,
    LoadStats,
    MoEConfig,
    MoELayerSim,
    RouterParams,
    cov,
    load_balancing_grad,
    load_balancing_loss,
    max_prob_std,
    routing_backward,
    routing_dump,
    simplex_project,
    specialization_matrix,
    uniform_band_fraction,
    z_loss,
    z_loss_grad,
)
from optim import AdamState, adam_step, softmax_chain
from report import RunReport, histogram_table
from shaping import ProbBatch, ShapingConfig, cdf_trace, dpsl_grad, dpsl_loss, dpsl_terms, reduce_layer_losses
from specfun import beta_pdf
from upcycle import UpcycleConfig, equivalence_check, standard_upcycle, upcycle, write_expert_set

ABLATION_ALPHAS = (0.75, 1.0, 1.25, 1.5)
ABLATION_LAMBDAS = (0.01,)
EQUIVALENCE_TOLERANCE = 1e-6


def _require_kind(config: ExperimentConfig, kind: str) -> None:
    if config.kind != kind:
        raise ConfigError(f"Expected a '{kind}' config, got '{config.kind}'.")
    config.validate()


def _progress(verbose: bool, step: int, steps: int, row: dict) -> None:
    if verbose:
        parts = " ".join(f"{key} {value:>12.6g}" for key, value in row.items() if key != "step")
        print(f"{step:>6d}/{steps:<6d} {parts}")


def nearest_vertex_distance(probs: np.ndarray) -> np.ndarray:
    """Euclidean distance from each probability row to the closest simplex vertex."""
    # ||p - e_k||^2 = ||p||^2 - 2 p_k + 1, smallest for the largest p_k.
    squared = np.sum(probs**2, axis=1) - 2 * np.max(probs, axis=1) + 1.0
    return np.sqrt(np.maximum(squared, 0.0))


def _marginal_pdf(prior: DirichletPrior, k: int):
    params = marginal(prior, k)
    return lambda x: beta_pdf(x, params)


def _prior_or_none(shaping: ShapingConfig, tag: str) -> Union[DirichletPrior, None]:
    try:
        return shaping.prior_for(tag)
    except ConfigError:
        return None


def _source_tables(
    report: RunReport,
    probs: np.ndarray,
    tags: List[str],
    shaping: ShapingConfig,
    bins: int,
    prefix: str,
    traces: bool,
) -> None:
    """Adds histograms (and optionally CDF traces) for every (source, category) to the report."""
    tags_array = np.asarray(tags)
    for tag in sorted(set(tags)):
        rows = probs[tags_array == tag]
        prior = _prior_or_none(shaping, tag)
        if prior is not None and prior.K != probs.shape[1]:
            prior = None
        for k in range(probs.shape[1]):
            pdf = _marginal_pdf(prior, k) if prior is not None else None
            report.histograms[f"{prefix}{tag}_{k}"] = histogram_table(rows[:, k], bins, pdf)
            if traces and prior is not None:
                report.cdf_traces[(tag, k)] = cdf_trace(rows[:, k], marginal(prior, k))


def _simplex_table(probs: np.ndarray, tags: List[str]) -> pd.DataFrame:
    coords = simplex_project(probs)
    return pd.DataFrame({"source_tag": tags, "x": coords[:, 0], "y": coords[:, 1]})


def run_shape_toy(config: ExperimentConfig, verbose: bool = True) -> RunReport:
    """Shapes free per-point probability vectors towards each source's Dirichlet prior.

    Each data point owns a logit vector (initialised from N(0, init_scale^2)); softmax turns
    them into probabilities and Adam minimises the shaping loss of every source.

    Args:
        config (ExperimentConfig): A shape-toy config.
        verbose (bool, optional): Print progress. Defaults to True.

    Raises:
        ConfigError: If the config is not a valid shape-toy config.
        NumericError: If the loss or gradient stops being finite.

    Returns:
        RunReport: Loss trace, CDF traces, histograms, simplex coordinates and summary.
    """
    _require_kind(config, "shape-toy")
    shaping = config.shaping
    dpsl_entry = config.regularizer("dpsl")
    weight = 1.0 if dpsl_entry is None else dpsl_entry.weight
    K = shaping.prior_for(config.sources[0].tag).K
    if verbose:
        print(f"Shaping {sum(s.count for s in config.sources)} points from {len(config.sources)} sources ({K} categories)")

    rngs = spawn_rngs(config.seed, len(config.sources))
    logits = np.concatenate(
        [config.init_scale * rng.standard_normal((s.count, K)) for s, rng in zip(config.sources, rngs)]
    )
    tags = [s.tag for s in config.sources for _ in range(s.count)]
    state = AdamState.zeros(logits.shape, config.lr, config.adam)

    report = RunReport(config=config.as_dict(), schema=ExperimentConfig.full_schema())
    rows = []
    for step in range(config.steps):
        batch = ProbBatch(softmax(logits, axis=1), tags)
        if step == 0:
            for tag, idx in batch.groups():
                prior = shaping.prior_for(tag)
                for k in range(K):
                    report.cdf_init[(tag, k)] = cdf_trace(batch.probs[idx, k], marginal(prior, k))

        terms = dpsl_terms(batch, shaping)
        loss = weight * dpsl_loss(batch, shaping)
        require_finite(loss, "shaping loss")
        row = {"step": step, "loss": loss}
        for tag, group in terms.groupby("source_tag", sort=True):
            row[f"dpsl_{tag}"] = weight * shaping.lambda_ * float(np.sum(group["cvm"].values))
        rows.append(row)
        if step % config.log_every == 0 or step == config.steps - 1:
            _progress(verbose, step, config.steps, row)

        if config.regularizer_active(step) and weight > 0:
            grad_logits = softmax_chain(logits, weight * dpsl_grad(batch, shaping))
        else:
            grad_logits = np.zeros_like(logits)
        logits, state = adam_step(logits, grad_logits, state)
        require_finite(logits, "logits")

    final = ProbBatch(softmax(logits, axis=1), tags)
    final_loss = weight * dpsl_loss(final, shaping)
    report.loss = pd.DataFrame(rows)
    report.probs_final = routing_dump(0, final.probs, None, tags)
    report.cvm = dpsl_terms(final, shaping)
    _source_tables(report, final.probs, tags, shaping, config.hist_bins, "hist_", traces=True)
    if K == 3:
        report.simplex = _simplex_table(final.probs, tags)

    summary = {
        "initial_loss": rows[0]["loss"],
        "final_loss": final_loss,
        "mean_probs": {},
        "target_mean": {},
        "vertex_distance": {},
    }
    for tag, idx in final.groups():
        summary["mean_probs"][tag] = np.mean(final.probs[idx], axis=0).tolist()
        summary["target_mean"][tag] = shaping.prior_for(tag).mean().tolist()
        summary["vertex_distance"][tag] = float(np.mean(nearest_vertex_distance(final.probs[idx])))
    report.summary = summary
    if verbose:
        print(f"Loss went from {summary['initial_loss']:.6g} to {final_loss:.6g}")
    return report


def make_tokens(
    config: ExperimentConfig, rng: np.random.Generator
) -> Tuple[np.ndarray, List[str], np.ndarray]:
    """Synthetic tokens drawn from per-source Gaussian clusters.

    Returns:
        Tuple[np.ndarray, List[str], np.ndarray]: T x d tokens, their source tags and a global cluster id per token.
    """
    d = config.moe.d_model
    tokens, tags, cluster_ids = [], [], []
    offset = 0
    for source in config.sources:
        centres = source.center_scale * rng.standard_normal((source.clusters, d))
        assignment = rng.integers(source.clusters, size=source.count)
        tokens.append(centres[assignment] + source.spread * rng.standard_normal((source.count, d)))
        tags.extend([source.tag] * source.count)
        cluster_ids.append(assignment + offset)
        offset += source.clusters
    return np.concatenate(tokens), tags, np.concatenate(cluster_ids)


def build_layers(config: ExperimentConfig, rng: np.random.Generator) -> List[MoELayerSim]:
    """One upcycled MoE layer per configured layer, each from its own random dense FFN."""
    moe_conf = config.moe
    deepseek = config.regularizer("deepseek")
    layers = []
    for layer in range(moe_conf.n_layers):
        dense = DenseFFN.random(moe_conf.d_model, moe_conf.hidden_dim, rng, moe_conf.nonlinearity, moe_conf.gated)
        layer_seed = np.random.SeedSequence([config.seed, layer])
        up_conf = UpcycleConfig(
            moe_conf.n_experts,
            config.upcycle.granularity,
            config.upcycle.noise_sigma,
            layer_seed,
            config.upcycle.reinit_ratio,
            config.upcycle.shard_layout,
        )
        try:
            experts = upcycle(dense, up_conf)
        except DomainError as e:
            raise ConfigError(f"Cannot upcycle layer {layer}: {e}") from e
        shared = None
        if moe_conf.n_shared > 0:
            shared_conf = UpcycleConfig(
                moe_conf.n_shared, 1, config.upcycle.noise_sigma, np.random.SeedSequence([config.seed, layer, 1])
            )
            shared = standard_upcycle(dense, shared_conf)
        router = RouterParams(moe_conf.router_init_std * rng.standard_normal((moe_conf.d_model, moe_conf.n_experts)))
        balancer = None
        if deepseek is not None:
            balancer = DeepSeekBalancer.zeros(moe_conf.n_experts, deepseek.update_rate)
        layers.append(MoELayerSim(router, experts, moe_conf, shared, balancer))
    return layers


def _regularizer_weight(config: ExperimentConfig, name: str) -> float:
    entry = config.regularizer(name)
    return 0.0 if entry is None else entry.weight


def run_router_sim(config: ExperimentConfig, verbose: bool = True) -> RunReport:
    """Trains MoE routers on synthetic tokens under the configured regularizers.

    Experts are frozen upcycled copies of a random dense FFN; only the routers learn. With
    task "regression" every layer also fits per-cluster random targets. Layers after the
    first see the residual stream h + MoE(h) of the previous layer, with no gradient between
    layers.

    Args:
        config (ExperimentConfig): A router-sim config.
        verbose (bool, optional): Print progress. Defaults to True.

    Raises:
        ConfigError: If the config is not a valid router-sim config.
        NumericError: If a loss, gradient or router weight stops being finite.

    Returns:
        RunReport: Loss trace, routing dump, histograms, CoV, CvM, specialization and summary.
    """
    _require_kind(config, "router-sim")
    data_rng, model_rng, task_rng = spawn_rngs(config.seed, 3)
    tokens, tags, cluster_ids = make_tokens(config, data_rng)
    T, d = tokens.shape
    layers = build_layers(config, model_rng)
    targets = task_rng.standard_normal((int(np.max(cluster_ids)) + 1, d))[cluster_ids]
    shaping = config.shaping

    w_dpsl = _regularizer_weight(config, "dpsl")
    w_lb = _regularizer_weight(config, "load-balance")
    w_z = _regularizer_weight(config, "z-loss")
    listed = [r.name for r in config.regularizers if r.name not in ("none", "deepseek")]
    states = [AdamState.zeros(layer.router.W_g.shape, config.lr, config.adam) for layer in layers]
    if verbose:
        print(
            f"Training {len(layers)} router layer(s): {T} tokens, {config.moe.n_experts} experts, "
            f"top-{config.moe.top_k}, regularizers {[r.name for r in config.regularizers] or ['none']}"
        )

    rows = []
    for step in range(config.steps):
        active = config.regularizer_active(step)
        inputs, results = [], []
        h = tokens
        for layer in layers:
            result = layer.forward(h)
            inputs.append(h)
            results.append(result)
            h = h + result.output

        dpsl_values = []
        if "dpsl" in listed:
            dpsl_values = [dpsl_loss(ProbBatch(r.probs, tags), shaping) for r in results]
        dpsl_total, dpsl_scale = reduce_layer_losses(dpsl_values, shaping.layer_reduction)

        row = {"step": step, "loss": 0.0}
        task_total = lb_total = z_total = 0.0
        for index, (layer, result, h_in) in enumerate(zip(layers, results, inputs)):
            grad_probs = np.zeros_like(result.probs)
            if config.task == "regression":
                residual = result.output - targets
                task_total += float(np.mean(residual**2))
                grad_probs += routing_backward(result, 2.0 * residual / residual.size)
            if active and w_dpsl > 0:
                grad_probs += w_dpsl * dpsl_scale * dpsl_grad(ProbBatch(result.probs, tags), shaping)
            stats = result.load_stats()
            if "load-balance" in listed:
                lb_total += load_balancing_loss(stats)
                if active and w_lb > 0:
                    grad_probs += w_lb * load_balancing_grad(stats, T)
            grad_logits = softmax_chain(result.logits, grad_probs)
            if "z-loss" in listed:
                z_total += z_loss(result.logits)
                if active and w_z > 0:
                    grad_logits += w_z * z_loss_grad(result.logits)

            grad_W = h_in.T @ grad_logits
            require_finite(grad_W, f"router gradient (layer {index})")
            W_new, states[index] = adam_step(layer.router.W_g, grad_W, states[index])
            layer.router = RouterParams(W_new)
            if active:
                layer.update_balancer(result)

        if config.task == "regression":
            row["task"] = task_total
            row["loss"] += task_total
        if "dpsl" in listed:
            row["dpsl"] = dpsl_total
            if w_dpsl > 0:
                row["loss"] += w_dpsl * dpsl_total
        if "load-balance" in listed:
            row["load_balance"] = lb_total
            if w_lb > 0:
                row["loss"] += w_lb * lb_total
        if "z-loss" in listed:
            row["z_loss"] = z_total
            if w_z > 0:
                row["loss"] += w_z * z_total
        require_finite(row["loss"], "training loss")
        rows.append(row)
        if step % config.log_every == 0 or step == config.steps - 1:
            _progress(verbose, step, config.steps, row)

    report = RunReport(config=config.as_dict(), schema=ExperimentConfig.full_schema())
    report.loss = pd.DataFrame(rows)
    _router_sim_outputs(report, config, layers, tokens, tags)
    return report


def _router_sim_outputs(
    report: RunReport, config: ExperimentConfig, layers: List[MoELayerSim], tokens: np.ndarray, tags: List[str]
) -> None:
    """Final forward pass with the trained routers and every table derived from it."""
    shaping = config.shaping
    multi = len(layers) > 1
    have_priors = all(
        _prior_or_none(shaping, tag) is not None and shaping.prior_for(tag).K == config.moe.n_experts
        for tag in set(tags)
    )
    dumps, cov_rows, cvm_frames, spec_frames, simplex_frames = [], [], [], [], []
    stds, bands, covs, dpsl_values = [], [], [], []
    h = tokens
    for index, layer in enumerate(layers):
        result = layer.forward(h)
        h = h + result.output
        stats: LoadStats = result.load_stats()
        probs = result.probs

        dumps.append(routing_dump(index, probs, result.indices, tags))
        layer_cov = cov(stats.loads)
        covs.append(layer_cov)
        cov_row = {"layer": index, "cov": layer_cov}
        cov_row.update({f"load_{i}": int(load) for i, load in enumerate(stats.loads)})
        cov_rows.append(cov_row)

        spec = specialization_matrix(probs, tags)
        spec.insert(0, "layer", index)
        spec_frames.append(spec)
        stds.append(max_prob_std(probs))
        bands.append(uniform_band_fraction(probs))

        if have_priors:
            batch = ProbBatch(probs, tags)
            terms = dpsl_terms(batch, shaping)
            terms.insert(0, "layer", index)
            cvm_frames.append(terms)
            dpsl_values.append(dpsl_loss(batch, shaping))
        prefix = f"hist_layer{index}_" if multi else "hist_"
        _source_tables(report, probs, tags, shaping, config.hist_bins, prefix, traces=not multi and have_priors)
        if probs.shape[1] == 3:
            table = _simplex_table(probs, tags)
            table.insert(0, "layer", index)
            simplex_frames.append(table)

    report.probs_final = pd.concat(dumps, ignore_index=True)
    report.cov = pd.DataFrame(cov_rows)
    report.specialization = pd.concat(spec_frames, ignore_index=True)
    if cvm_frames:
        report.cvm = pd.concat(cvm_frames, ignore_index=True)
    if simplex_frames:
        report.simplex = pd.concat(simplex_frames, ignore_index=True)

    final_dpsl = reduce_layer_losses(dpsl_values, shaping.layer_reduction)[0] if have_priors else None
    report.summary = {
        "final_dpsl": final_dpsl,
        "cov": covs,
        "mean_cov": float(np.mean(covs)),
        "max_prob_std": float(np.mean(stds)),
        "uniform_band_fraction": float(np.mean(bands)),
        "final_loss": float(report.loss["loss"].iloc[-1]),
    }


def run_upcycle_check(
    config: ExperimentConfig, save: Union[str, None] = None, verbose: bool = True
) -> RunReport:
    """Checks that upcycled experts reproduce the dense FFN they came from.

    An exact (sigma = 0) expert set must match to within 1e-6; the configured noisy set is
    reported alongside it.

    Args:
        config (ExperimentConfig): An upcycle-check config (moe and upcycle sections).
        save (Union[str, None], optional): Write the noisy expert set to this file. Defaults to None.
        verbose (bool, optional): Print progress. Defaults to True.

    Raises:
        NumericError: If the exact expert set deviates by 1e-6 or more.

    Returns:
        RunReport: The equivalence table and summary.
    """
    _require_kind(config, "upcycle-check")
    moe_conf, up = config.moe, config.upcycle
    rng = make_rng(config.seed)
    dense = DenseFFN.random(moe_conf.d_model, moe_conf.hidden_dim, rng, moe_conf.nonlinearity, moe_conf.gated)
    router = RouterParams(rng.standard_normal((moe_conf.d_model, moe_conf.n_experts)))
    check_conf = MoEConfig(
        moe_conf.n_experts,
        moe_conf.top_k,
        0,
        True,
        moe_conf.d_model,
        moe_conf.hidden_dim,
        moe_conf.nonlinearity,
        moe_conf.gated,
    )
    if verbose:
        print(f"Upcycling a d={moe_conf.d_model}, h={moe_conf.hidden_dim} FFN into {moe_conf.n_experts} experts (G={up.granularity})")

    rows = []
    for sigma in (0.0, up.noise_sigma):
        set_conf = UpcycleConfig(up.n_experts, up.granularity, sigma, config.seed, up.reinit_ratio if sigma else 0.0, up.shard_layout)
        try:
            experts = upcycle(dense, set_conf)
        except DomainError as e:
            raise ConfigError(str(e)) from e
        deviation = equivalence_check(dense, experts, router if up.granularity == 1 else None, check_conf, seed=config.seed)
        rows.append(
            {
                "granularity": up.granularity,
                "n_experts": up.n_experts,
                "noise_sigma": sigma,
                "reinit_ratio": set_conf.reinit_ratio,
                "max_abs_deviation": deviation,
            }
        )
        if verbose:
            print(f"sigma {sigma:>8.4g}: max abs deviation {deviation:.3e}")
        if save is not None and sigma == up.noise_sigma:
            write_expert_set(experts, save)
            if verbose:
                print(f"Saved the expert set to '{save}'")

    if not rows[0]["max_abs_deviation"] < EQUIVALENCE_TOLERANCE:
        raise NumericError(f"Exact upcycling deviates from the dense FFN by {rows[0]['max_abs_deviation']:.3e}.")
    report = RunReport(config=config.as_dict(), schema=ExperimentConfig.full_schema())
    report.tables["equivalence"] = pd.DataFrame(rows)
    report.summary = {"exact_deviation": rows[0]["max_abs_deviation"], "noisy_deviation": rows[1]["max_abs_deviation"]}
    return report


def run_ablation(
    config: ExperimentConfig,
    alphas: Sequence[float] = ABLATION_ALPHAS,
    lambdas: Sequence[float] = ABLATION_LAMBDAS,
    verbose: bool = True,
) -> RunReport:
    """Reruns a router simulation with a symmetric prior for every (alpha, lambda) pair.

    Args:
        config (ExperimentConfig): A router-sim config; its priors are replaced for each run.
        alphas (Sequence[float], optional): Symmetric concentrations. Defaults to (0.75, 1, 1.25, 1.5).
        lambdas (Sequence[float], optional): Shaping strengths. Defaults to (0.01,).
        verbose (bool, optional): Print one line per run. Defaults to True.

    Returns:
        RunReport: The ablation table.
    """
    _require_kind(config, "router-sim")
    regularizers = list(config.regularizers)
    if config.regularizer("dpsl") is None:
        regularizers.append(RegularizerSpec("dpsl", 1.0))
    rows: List[Dict[str, float]] = []
    for alpha in alphas:
        for lambda_ in lambdas:
            try:
                prior = DirichletPrior.symmetric(config.moe.n_experts, alpha)
                shaping = ShapingConfig(
                    lambda_, config.shaping.clamp_eps, {"default": prior}, config.shaping.layer_reduction,
                    config.shaping.parallel_workers,
                )
            except DomainError as e:
                raise ConfigError(f"Invalid ablation point alpha={alpha}, lambda={lambda_}: {e}") from e
            run_conf = config.with_overrides(shaping=shaping, regularizers=regularizers)
            summary = run_router_sim(run_conf, verbose=False).summary
            row = {
                "alpha": float(alpha),
                "lambda": float(lambda_),
                "final_dpsl": summary["final_dpsl"],
                "mean_cov": summary["mean_cov"],
                "max_prob_std": summary["max_prob_std"],
                "uniform_band_fraction": summary["uniform_band_fraction"],
            }
            rows.append(row)
            if verbose:
                print(
                    f"alpha {alpha:>6.3g} lambda {lambda_:>8.3g}: dpsl {row['final_dpsl']:>10.4g} "
                    f"cov {row['mean_cov']:>8.4f} max-prob std {row['max_prob_std']:>8.4f}"
                )

    report = RunReport(config=config.as_dict(), schema=ExperimentConfig.full_schema())
    report.tables["ablation"] = pd.DataFrame(
        rows, columns=["alpha", "lambda", "final_dpsl", "mean_cov", "max_prob_std", "uniform_band_fraction"]
    )
    report.summary = {"runs": len(rows)}
    return report
