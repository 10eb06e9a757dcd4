"""
Sweep over the moduli space: lowest eigenpairs of q_{c,w} and their
cusp-form functional.
"""

import logging
import math
from pathlib import Path
from typing import Any, Dict, List, Optional

import numpy as np
import pandas as pd

from cuspbranch.branches import beta_independence, cusp_form_functional
from cuspbranch.experiments.common import ExperimentOutput, resolve_truncation, run_indexed
from cuspbranch.forms import assemble_moduli, solve_lowest
from cuspbranch.geometry import TriangleParams, moduli_grid
from cuspbranch.modespace import CuspGrid, DofMap, norm, uniform_grid
from cuspbranch.schemas.run_config import RunConfig
from cuspbranch.utils.errors import CuspBranchError

logger = logging.getLogger(__name__)

SWEEP_CELLS = 400
SWEEP_HEADROOM = 3.0
BETA_SHIFT = 0.5


def _sweep_grid(config: RunConfig, beta: float, y_max: Optional[float] = None) -> CuspGrid:
    mesh = config.mesh
    y_max = y_max or mesh.y_max or beta + SWEEP_HEADROOM
    return uniform_grid(beta, y_max, mesh.uniform_cells or SWEEP_CELLS, config.alpha_bar)


def sweep_point(
    config: RunConfig, params: TriangleParams, dofmap: DofMap
) -> List[Dict[str, Any]]:
    """Lowest eigenpairs of one triangle with |L| / ||u|| and the near-cusp-form flag."""
    form = assemble_moduli(params, config.alpha_bar, dofmap)
    result = solve_lowest(form, config.eig_count)
    shifted = None
    rows = []
    for index, (energy, u) in enumerate(zip(result.eigenvalues, result.eigenvectors), start=1):
        row: Dict[str, Any] = {
            "c": params.c,
            "w": params.w,
            "theta1": params.theta1,
            "theta2": params.theta2,
            "index": index,
            "E": float(energy),
        }
        try:
            cusp = cusp_form_functional(u, float(energy))
            row["L_value"] = cusp.difference_quotient
            row["L_error"] = cusp.error_estimate
            row["L_over_norm"] = abs(cusp.difference_quotient) / norm(u)
            row["near_cusp_form"] = cusp.near_cusp_form()
        except CuspBranchError as e:
            logger.warning("Cusp functional failed at (%.4g, %.4g): %s", params.c, params.w, e)
            row.update(L_value=np.nan, L_error=np.nan, L_over_norm=np.nan, near_cusp_form=False)
        row["dE_beta"] = np.nan
        if row["near_cusp_form"]:
            if shifted is None:
                grid = _sweep_grid(
                    config, config.beta + BETA_SHIFT, dofmap.grid.y_max + BETA_SHIFT
                )
                other = DofMap(grid, dofmap.k_max)
                shifted = assemble_moduli(params, config.alpha_bar, other)
            row["dE_beta"] = beta_independence(float(energy), shifted)
        rows.append(row)
    return rows


def run_sweep(config: RunConfig, run_dir: Path, threads: int) -> ExperimentOutput:
    """Solve every point of the moduli grid; failed points are recorded and skipped."""
    output = ExperimentOutput()
    points = moduli_grid(config.c_values, config.w_fractions)
    truncation = resolve_truncation(
        config,
        _sweep_grid(config, config.beta),
        lambda d: assemble_moduli(points[0], config.alpha_bar, d),
    )
    output.summary["truncation"] = truncation.as_summary()
    dofmap = truncation.dofmap
    logger.info("Sweeping %d moduli points, %d dofs", len(points), dofmap.size)
    results, failures = run_indexed(
        points, lambda p: sweep_point(config, p, dofmap), threads, "moduli point"
    )
    output.record_failures("moduli point", failures)
    rows: List[Dict[str, Any]] = []
    for index, (params, result) in enumerate(zip(points, results)):
        if result is None:
            rows.append(
                {"c": params.c, "w": params.w, "status": "failed", "error": failures[index]}
            )
            continue
        rows.extend(dict(row, status="ok", error="") for row in result)
    table = pd.DataFrame(rows)
    output.tables["sweep"] = table
    output.summary.update(
        points=len(points),
        failed_points=len(failures),
        near_cusp_form_pairs=(
            int(table["near_cusp_form"].eq(True).sum()) if "near_cusp_form" in table else 0
        ),
        beta=config.beta,
        alpha_bar=config.alpha_bar,
        beta_shift=BETA_SHIFT,
        smallest_energy=float(table["E"].min()) if "E" in table else math.nan,
    )
    return output
