"""
Degenerating family T_{0,t}: continue q_t eigenbranches toward t -> 0 and
measure them against the separated model.
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from cuspbranch.branches import (
    Eigenbranch,
    ModeReference,
    classify_limit,
    continue_branch,
    coupling_probe,
    crossing_scan,
    cusp_form_functional,
    mode_mass_report,
    quasimode_residual,
    relative_variation,
    seed_pair,
    spectral_projection,
    tracking_report,
    variation_report,
    window_basis,
    zero_mass_report,
)
from cuspbranch.experiments.common import (
    ExperimentOutput,
    make_grid,
    resolve_truncation,
    run_indexed,
)
from cuspbranch.forms import (
    FormPair,
    assemble_a,
    assemble_a_tilde,
    assemble_b,
    assemble_dots,
    assemble_q,
)
from cuspbranch.model import airy_predict, zero_mode_spectrum
from cuspbranch.modespace import DofMap, norm
from cuspbranch.schemas.run_config import RunConfig
from cuspbranch.utils.constant import UNCLASSIFIED
from cuspbranch.utils.errors import (
    CuspBranchError,
    GreenNormalizationSmall,
    NoSignChange,
    WindowEmpty,
)

logger = logging.getLogger(__name__)


def seed_energies(config: RunConfig) -> List[float]:
    """Configured seeds, else the model predictions at t_max for the target k."""
    if config.seeds:
        return list(config.seeds)
    k = config.k_target
    if k == 0:
        spectrum = zero_mode_spectrum(config.t_max, config.beta, config.branch_count)
        return [float(e) for e in spectrum.eigenvalues]
    return [
        float(airy_predict(k, i).predict(config.t_max))
        for i in range(1, config.branch_count + 1)
    ]


class FormCache:
    """Model forms per t, assembled once and shared by the diagnostics of a branch."""

    def __init__(self, dofmap: DofMap):
        self.dofmap = dofmap
        self._a: Dict[float, FormPair] = {}

    def a(self, t: float) -> FormPair:
        if t not in self._a:
            self._a[t] = assemble_a(t, self.dofmap)
        return self._a[t]


def _loglog_slope(ts: np.ndarray, values: np.ndarray) -> float:
    keep = np.isfinite(values) & (values > 0.0)
    if np.count_nonzero(keep) < 2:
        return float("nan")
    return float(np.polyfit(np.log(ts[keep]), np.log(values[keep]), 1)[0])


def _sample_rows(
    branch: Eigenbranch, cache: FormCache, window: Tuple[float, float], half: float, k: int
) -> Tuple[pd.DataFrame, List[np.ndarray]]:
    rows = []
    model_values: List[np.ndarray] = []
    for t, e, u in zip(branch.ts, branch.energies, branch.vectors):
        a_form = cache.a(t)
        row: Dict[str, Any] = {"t": t, "E": e}
        try:
            w = spectral_projection(u, a_form, window)
            w_norm = norm(w)
            residual = quasimode_residual(w, e, a_form, assemble_a_tilde(a_form))
            row["N_residual"] = residual
            row["N_residual_over_t"] = residual / (t * w_norm) if w_norm > 0.0 else np.nan
        except WindowEmpty as e_window:
            logger.warning("%s", e_window)
            row["N_residual"] = row["N_residual_over_t"] = np.nan
        try:
            cusp = cusp_form_functional(u, e, t)
            row["L_value"] = cusp.difference_quotient
            row["L_green"] = cusp.green_estimate
            row["L_error"] = cusp.error_estimate
        except GreenNormalizationSmall as e_green:
            logger.warning("%s", e_green)
            row["L_value"] = row["L_green"] = row["L_error"] = np.nan
        if k >= 1:
            try:
                basis = window_basis(a_form, (e - half, e + half))
                model_values.append(basis[k][0] if k in basis else np.array([]))
            except WindowEmpty:
                model_values.append(np.array([]))
        rows.append(row)
    return pd.DataFrame(rows), model_values


def _crossing_table(
    config: RunConfig,
    dofmap: DofMap,
    branch: Eigenbranch,
    k: int,
) -> Optional[pd.DataFrame]:
    spectrum = zero_mode_spectrum(1.0, config.beta, config.n_max)
    try:
        records = crossing_scan(branch, spectrum, k)
    except NoSignChange as e:
        logger.warning("%s", e)
        return None
    target = k * math.log(config.beta)
    ts, es = branch.t_array, branch.e_array
    order = np.argsort(ts)
    rows = []
    for record in records:
        row: Dict[str, Any] = {
            "n": record.n,
            "t_n": record.t_n,
            "n_t_n": record.n_t_n,
            "target_k_ln_beta": target,
            "residual": record.residual,
        }
        guess = float(np.interp(record.t_n, ts[order], es[order]))
        try:
            energy, u = seed_pair(
                lambda t: assemble_q(t, dofmap), record.t_n, guess, config.eig_count
            )
            probe = coupling_probe(
                u,
                energy,
                k,
                spectrum,
                record.n,
                assemble_b(record.t_n, dofmap),
                eta=config.diagnostics.eta,
            )
            row.update(
                coupling=probe.value,
                coupling_predicted=probe.predicted,
                coupling_ratio=probe.ratio,
                coupling_normalized=probe.normalized,
            )
        except CuspBranchError as e:
            logger.debug("No coupling probe at n=%d: %s", record.n, e)
            row.update(
                coupling=np.nan,
                coupling_predicted=np.nan,
                coupling_ratio=np.nan,
                coupling_normalized=np.nan,
            )
        rows.append(row)
    return pd.DataFrame(rows)


def analyse_branch(
    config: RunConfig, dofmap: DofMap, branch: Eigenbranch
) -> Tuple[pd.DataFrame, Dict[str, Any], Optional[pd.DataFrame]]:
    """Per-sample diagnostics, a summary and the crossing table of one branch."""
    diagnostics = config.diagnostics
    k, e0 = classify_limit(branch.ts, branch.energies, diagnostics.classify_tol)
    branch.limit_k, branch.limit_energy = k, e0
    summary: Dict[str, Any] = {
        "limit_k": k,
        "limit_energy": e0,
        "samples": len(branch.ts),
        "halvings": branch.halvings,
        "ambiguous_steps": len(branch.ambiguous),
        "lost": str(branch.lost) if branch.lost else None,
    }
    if k == UNCLASSIFIED:
        logger.warning("Branch with extrapolated E0=%.6g is unclassified", e0)
    mode = k if k != UNCLASSIFIED else int(round(math.sqrt(max(e0, 0.0)) / math.pi))
    centre = (mode * math.pi) ** 2
    half = diagnostics.window_halfwidth
    window = (centre - half, centre + half)
    cache = FormCache(dofmap)

    table, model_values = _sample_rows(branch, cache, window, half, mode)
    table["ambiguous_step"] = branch.ambiguous_mask()
    variation = variation_report(branch, lambda t: assemble_dots(t, dofmap)[1])
    table["dE_dt"] = variation["dE_dt"].to_numpy()
    table["dE_dt_fd"] = variation["dE_dt_fd"].to_numpy()
    table["upper_bound_margin"] = variation["upper_bound_margin"].to_numpy()
    masses = mode_mass_report(branch, cache.a, window, mode, diagnostics.rho)
    table["k_mass"] = masses["k_mass"].to_numpy()
    table["low_mass"] = masses["low_mass"].to_numpy()
    table["in_K"] = masses["in_K"].to_numpy()

    ts = branch.t_array
    swapped = identity_changed(k, config.k_target, masses, diagnostics.rho)
    summary["N_valid"] = not swapped
    if swapped:
        logger.warning(
            "Branch seeded for k=%d changed identity (limit k=%d); N metrics suppressed",
            config.k_target,
            k,
        )
        summary["N_slope"] = summary["N_over_t_max"] = float("nan")
    else:
        summary["N_slope"] = _loglog_slope(ts, table["N_residual"].to_numpy())
        summary["N_over_t_max"] = float(np.nanmax(table["N_residual_over_t"].to_numpy()))

    if mode >= 1 and all(v.size for v in model_values):
        report = tracking_report(branch, model_values)
        lambda_star = report.table["lambda_star"].to_numpy()
        table["gap_to_lambda_star"] = report.table["gap_to_lambda_star"].to_numpy()
        table["gap_over_t"] = report.table["gap_over_t"].to_numpy()
        table["gap_over_t23"] = report.table["gap_over_t23"].to_numpy()
        table["unique"] = report.table["unique"].to_numpy()
        table["ambiguous"] = report.table["ambiguous"].to_numpy()
        order = np.argsort(ts)
        lambda_dot = np.empty_like(ts)
        lambda_dot[order] = np.gradient(lambda_star[order], ts[order])
        relative = relative_variation(
            ts, table["dE_dt"], lambda_dot, table["k_mass"], diagnostics.rho
        )
        table["relative_variation"] = relative["relative_variation"].to_numpy()
        summary.update(
            tracking_exponent=report.exponent,
            tracking_exponent_ci=report.exponent_ci,
            tracking_window_constant=report.window_constant,
            gap_over_t_max=float(report.table["gap_over_t"].max()),
            tracking_unique=bool(report.table["unique"].all()),
            tracking_ambiguous=len(report.ambiguous),
        )
    elif mode >= 1:
        logger.warning("No model eigenvalue of mode %d near some branch sample", mode)
    if mode == 0:
        _, c_prime = zero_mass_report(branch)
        summary["zero_mass_constant"] = c_prime

    crossings = _crossing_table(config, dofmap, branch, mode) if mode >= 1 else None
    if crossings is not None and len(crossings):
        last = crossings.iloc[-1]
        summary["final_n_t_n_relative_error"] = float(
            abs(last["n_t_n"] - last["target_k_ln_beta"]) / last["target_k_ln_beta"]
        )
    return table, summary, crossings


def identity_changed(
    limit_k: int, expected_k: int, masses: pd.DataFrame, rho: float
) -> bool:
    """True when the branch no longer ends on the mode it was seeded for.

    Either the limit classification disagrees with ``expected_k`` or the mode
    mass at the smallest t has fallen to rho or below.
    """
    if limit_k != expected_k:
        return True
    last = masses.loc[masses["t"].idxmin()]
    return bool(last["k_mass"] <= rho)


def run_degenerate(config: RunConfig, run_dir: Path, threads: int) -> ExperimentOutput:
    """Continue the seeded q_t branches from t_max down to t_min and analyse them."""
    output = ExperimentOutput()
    seeds = seed_energies(config)
    e_max = max(seeds) + config.diagnostics.window_halfwidth
    grid = make_grid(config, e_max, alpha_bar=config.alpha_bar)
    sigma = config.limit_energy if config.k_target >= 1 else None
    truncation = resolve_truncation(
        config, grid, lambda d: assemble_q(config.t_min, d), sigma=sigma
    )
    output.summary["truncation"] = truncation.as_summary()
    dofmap = truncation.dofmap
    logger.info(
        "Degenerate family: %d branches, %d dofs (%d nodes, K=%d)",
        len(seeds),
        dofmap.size,
        dofmap.grid.n_nodes,
        dofmap.k_max,
    )

    def family(t: float) -> FormPair:
        return assemble_q(t, dofmap)

    reference = ModeReference(
        a_family=FormCache(dofmap).a,
        k=config.k_target,
        halfwidth=config.diagnostics.window_halfwidth,
    )

    def follow(seed: float) -> Tuple[pd.DataFrame, Dict[str, Any], Optional[pd.DataFrame]]:
        pair = seed_pair(family, config.t_max, seed, config.eig_count)
        branch = continue_branch(
            family,
            config.t_max,
            config.t_min,
            pair,
            n_steps=config.t_count - 1,
            count=config.eig_count,
            reference=reference,
        )
        return analyse_branch(config, dofmap, branch)

    results, failures = run_indexed(seeds, follow, threads, "branch")
    output.record_failures("branch", failures)
    for index, result in enumerate(results, start=1):
        if result is None:
            continue
        table, summary, crossings = result
        name = f"branch{index}"
        output.tables[name] = table
        output.plots[name] = (table, ["t", "E", "N_residual_over_t", "k_mass"])
        output.summary[name] = summary
        if crossings is not None:
            output.tables[f"{name}_crossings"] = crossings
            output.plots[f"{name}_crossings"] = (crossings, ["n", "t_n", "n_t_n"])
    return output
