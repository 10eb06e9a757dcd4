"""
Model-operator asymptotics: Airy law of the nonzero-mode branches, the
zero-mode oracle and the rescaled cross-check.
"""

import logging
import math
from pathlib import Path
from typing import Dict, List

import numpy as np
import pandas as pd

from cuspbranch.experiments.common import ExperimentOutput, make_grid, run_indexed
from cuspbranch.forms import solve_generalized
from cuspbranch.model import (
    ModelBranch,
    airy_predict,
    lambda_dot_asymptote,
    measure_localization,
    mode_blocks,
    mode_branch,
    rescaled_spectrum,
    zero_mode_spectrum,
)
from cuspbranch.schemas.run_config import RunConfig

logger = logging.getLogger(__name__)

ZERO_MODE_COUNT = 5
LOCALIZATION_POWER = 0.5


def _fit_airy(branch: ModelBranch) -> Dict[str, float]:
    """Least squares lambda = mu + a t^{2/3} + b t^{4/3} and the remainder slope."""
    mu = (branch.ell * math.pi) ** 2
    tau = branch.ts ** (2.0 / 3.0)
    design = np.stack([tau, tau**2], axis=1)
    (a_fit, _), *_ = np.linalg.lstsq(design, branch.eigenvalues - mu, rcond=None)
    remainder = np.abs(branch.eigenvalues - branch.airy_prediction(branch.ts))
    slope = float("nan")
    if np.all(remainder > 0.0):
        slope = float(np.polyfit(np.log(branch.ts), np.log(remainder), 1)[0])
    return {
        "a_fit": float(a_fit),
        "a_expected": branch.airy_coefficient,
        "a_relative_error": abs(a_fit - branch.airy_coefficient) / branch.airy_coefficient,
        "remainder_slope": slope,
    }


def _branch_table(branch: ModelBranch, tail_mass: List[float]) -> pd.DataFrame:
    ts = branch.ts
    order = np.argsort(ts)
    dlam = np.empty_like(ts)
    dlam[order] = np.gradient(branch.eigenvalues[order], ts[order])
    mu = (branch.ell * math.pi) ** 2
    return pd.DataFrame(
        {
            "t": ts,
            "lambda": branch.eigenvalues,
            "airy_prediction": branch.airy_prediction(ts),
            "rescaled": (branch.eigenvalues - mu) / ts ** (2.0 / 3.0),
            "t13_lambda_dot": ts ** (1.0 / 3.0) * dlam,
            "tail_mass": tail_mass,
        }
    )


def run_model_asymptotics(config: RunConfig, run_dir: Path, threads: int) -> ExperimentOutput:
    """Branches of a_t^ell over the configured t-grid against their Airy predictions."""
    output = ExperimentOutput()
    ell = config.ell
    ts = np.geomspace(config.t_min, config.t_max, config.t_count)
    top = airy_predict(ell, config.branch_count)
    e_max = 2.0 * float(top.predict(config.t_max))
    grid = make_grid(config, e_max)
    logger.info("Model asymptotics for ell=%d on %d grid nodes", ell, grid.n_nodes)

    branches = mode_branch(ell, ts, config.branch_count, grid)
    for branch in branches:
        tails = [
            measure_localization(profile, grid, t, LOCALIZATION_POWER)
            for t, profile in zip(branch.ts, branch.profiles)
        ]
        table = _branch_table(branch, tails)
        name = f"airy_ell{ell}_branch{branch.index}"
        output.tables[name] = table
        output.plots[name] = (table, ["t", "rescaled", "t13_lambda_dot"])
        fit = _fit_airy(branch)
        small = int(np.argmin(branch.ts))
        fit["t13_lambda_dot_smallest_t"] = float(table["t13_lambda_dot"].iloc[small])
        fit["t13_lambda_dot_expected"] = lambda_dot_asymptote(ell, branch.index)
        output.summary[name] = fit

    def rescaled_row(t: float) -> Dict[str, float]:
        s = t ** (1.0 / 3.0)
        nu = rescaled_spectrum(s, ell, config.branch_count)
        row = {"t": t, "s": s}
        for i, branch in enumerate(branches):
            j = int(np.argmin(np.abs(branch.ts - t)))
            row[f"nu{i + 1}"] = float(nu[i])
            row[f"nu{i + 1}_from_branch"] = float(
                (branch.eigenvalues[j] - (ell * math.pi) ** 2) / s**2
            )
        return row

    rows, failures = run_indexed(list(ts), rescaled_row, threads, "rescaled t-sample")
    output.record_failures("rescaled t-sample", failures)
    output.tables["rescaled"] = pd.DataFrame([r for r in rows if r is not None])

    spectrum = zero_mode_spectrum(config.t_max, config.beta, ZERO_MODE_COUNT)
    a_mat, m_mat, _ = mode_blocks(grid, 0, config.t_max)
    discrete, _, _, _ = solve_generalized(a_mat, m_mat, ZERO_MODE_COUNT)
    exact = spectrum.eigenvalues
    output.tables["zero_mode"] = pd.DataFrame(
        {
            "n": np.arange(1, ZERO_MODE_COUNT + 1),
            "exact": exact,
            "discrete": discrete,
            "relative_error": np.abs(discrete - exact) / exact,
        }
    )
    output.summary["zero_mode_max_relative_error"] = float(
        output.tables["zero_mode"]["relative_error"].max()
    )
    return output
