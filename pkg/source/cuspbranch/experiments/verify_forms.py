"""
Form checks on random test functions: expansion of q_t in t, the bound on
q_dot - a_dot and a Richardson check of q_dot. Also the symmetry of every
assembled matrix, the Poincare bound of the model form and coordinate dumps.
"""

import logging
import math
from pathlib import Path
from typing import Dict, Sequence

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import sparse

from cuspbranch.experiments.common import ExperimentOutput, make_grid, run_indexed
from cuspbranch.forms import (
    ExpansionCheck,
    FormPair,
    assemble_a,
    assemble_a_tilde,
    assemble_b,
    assemble_dots,
    assemble_q,
    check_expansion,
    dump_coordinates,
    solve_lowest,
)
from cuspbranch.geometry import p_poly
from cuspbranch.modespace import DofMap, ModeFunction
from cuspbranch.schemas.run_config import RunConfig

logger = logging.getLogger(__name__)

TEST_MODES = 3
POINCARE_TS = (0.01, 0.1, 1.0)
RICHARDSON_STEPS = (0.04, 0.02, 0.01)


def random_test_function(dofmap: DofMap, rng: np.random.Generator) -> ModeFunction:
    """Smooth random profiles on the first few modes, zero mode vanishing at beta."""
    grid = dofmap.grid
    y = grid.y_nodes
    envelope = np.exp(-2.0 * (y - 1.0) ** 2)
    profiles = np.zeros((dofmap.k_max + 1, grid.n_nodes))
    for k in range(min(dofmap.k_max, TEST_MODES) + 1):
        coeffs = rng.standard_normal(4)
        profiles[k] = np.polynomial.polynomial.polyval(y - 1.0, coeffs) * envelope
    profiles[0] *= np.clip(grid.beta - y, 0.0, None)
    profiles[:, -1] = 0.0
    return ModeFunction(grid, profiles)


def cusp_test_function(dofmap: DofMap) -> ModeFunction:
    """A function supported strictly above alpha_bar."""
    grid = dofmap.grid
    y = grid.y_nodes
    start = (grid.alpha_bar_index or 0) + 1
    profiles = np.zeros((dofmap.k_max + 1, grid.n_nodes))
    for k in range(1, min(dofmap.k_max, TEST_MODES) + 1):
        profiles[k, start:-1] = np.exp(-k * (y[start:-1] - y[start]))
    return ModeFunction(grid, profiles)


def _expansion_row(name: str, check: ExpansionCheck) -> Dict[str, object]:
    return {
        "function": name,
        "slope_q_minus_a": check.slope_q_minus_a,
        "slope_q_minus_a_minus_tb": check.slope_q_minus_a_minus_tb,
        "max_abs_q_minus_a": float(np.max(np.abs(check.q_minus_a))),
        "max_abs_q_minus_a_minus_tb": float(np.max(np.abs(check.q_minus_a_minus_tb))),
    }


def _asymmetry(matrix: sparse.spmatrix) -> float:
    scale = abs(matrix).max()
    if scale == 0.0:
        return 0.0
    return float(abs(matrix - matrix.T).max() / scale)


def _factorizable(mass: sparse.spmatrix) -> bool:
    try:
        scipy.linalg.cholesky(mass.toarray())
    except scipy.linalg.LinAlgError:
        return False
    return True


def symmetry_table(forms: Sequence[FormPair]) -> pd.DataFrame:
    """Relative asymmetry of every stiffness and mass matrix, and whether M is SPD."""
    return pd.DataFrame(
        [
            {
                "kind": form.kind.value,
                "t": form.t,
                "stiffness_asymmetry": _asymmetry(form.A),
                "mass_asymmetry": _asymmetry(form.M),
                "mass_cholesky": _factorizable(form.M),
            }
            for form in forms
        ]
    )


def derivative_bound_table(
    ts: Sequence[float], functions: Sequence[ModeFunction], dofmap: DofMap
) -> pd.DataFrame:
    """C(t) = max over the functions of |q_dot_t(u) - a_dot_t(u)| / a_t(u)."""
    rows = []
    for t in ts:
        a_dot, q_dot = assemble_dots(float(t), dofmap)
        a_form = assemble_a(float(t), dofmap)
        ratios = [
            abs(q_dot.evaluate(u) - a_dot.evaluate(u)) / a_form.evaluate(u) for u in functions
        ]
        rows.append({"t": float(t), "constant": max(ratios), "median_ratio": float(np.median(ratios))})
    return pd.DataFrame(rows)


def richardson_table(
    t: float, functions: Sequence[ModeFunction], dofmap: DofMap
) -> pd.DataFrame:
    """Successive differences of q_dot under step halving and the extrapolated value.

    A second-order difference quotient shrinks the differences about four-fold
    per halving. ``relative_to_default`` compares the extrapolated q_dot with
    the one assemble_dots uses.
    """
    q_dots = [assemble_dots(t, dofmap, rel_step=step)[1] for step in RICHARDSON_STEPS]
    default = assemble_dots(t, dofmap)[1]
    rows = []
    for index, u in enumerate(functions, start=1):
        values = [form.evaluate(u) for form in q_dots]
        coarse, fine = values[0] - values[1], values[1] - values[2]
        extrapolated = values[2] + (values[2] - values[1]) / 3.0
        reference = default.evaluate(u)
        rows.append(
            {
                "function": index,
                "t": t,
                "difference_h": coarse,
                "difference_h_over_2": fine,
                "ratio": abs(coarse) / abs(fine) if fine != 0.0 else np.nan,
                "extrapolated": extrapolated,
                "default": reference,
                "relative_to_default": abs(extrapolated - reference) / abs(reference),
            }
        )
    return pd.DataFrame(rows)


def poincare_table(dofmap: DofMap, ts: Sequence[float] = POINCARE_TS) -> pd.DataFrame:
    """Lowest eigenvalue of (a_t, M) against t^2 / 4."""
    rows = []
    for t in ts:
        lowest = float(solve_lowest(assemble_a(t, dofmap), 1).eigenvalues[0])
        rows.append({"t": t, "lowest": lowest, "ratio_to_t2_over_4": lowest / (t**2 / 4.0)})
    return pd.DataFrame(rows)


def run_verify_forms(config: RunConfig, run_dir: Path, threads: int) -> ExperimentOutput:
    """Expansion slopes, derivative checks, symmetry, Poincare ratios and matrix dumps."""
    output = ExperimentOutput()
    e_max = max(config.limit_energy, math.pi**2) + config.diagnostics.window_halfwidth
    grid = make_grid(config, e_max, alpha_bar=config.alpha_bar)
    dofmap = DofMap(grid, config.k_start)
    logger.info("Form checks on %d dofs (K=%d)", dofmap.size, dofmap.k_max)
    rng = np.random.default_rng(config.seed)
    randoms = [random_test_function(dofmap, rng) for _ in range(config.test_functions)]
    functions = randoms + [cusp_test_function(dofmap)]
    names = [f"random{i + 1}" for i in range(len(randoms))] + ["cusp_supported"]
    ts = np.geomspace(config.t_min, config.t_max, config.t_count)

    checks, failures = run_indexed(
        functions, lambda u: check_expansion(ts, u, u, dofmap), threads, "test function"
    )
    output.record_failures("test function", failures)
    rows = [_expansion_row(n, c) for n, c in zip(names, checks) if c is not None]
    expansion = pd.DataFrame(rows)
    output.tables["expansion"] = expansion

    bound = derivative_bound_table(ts, randoms, dofmap)
    output.tables["derivative_bound"] = bound
    output.plots["derivative_bound"] = (bound, ["t", "constant"])
    richardson = richardson_table(config.t_max, randoms, dofmap)
    output.tables["q_dot_richardson"] = richardson

    poincare = poincare_table(dofmap)
    output.tables["poincare"] = poincare

    q_form = assemble_q(config.t_max, dofmap)
    a_form = assemble_a(config.t_max, dofmap)
    a_dot, q_dot = assemble_dots(config.t_max, dofmap)
    forms = [
        q_form,
        a_form,
        assemble_b(config.t_max, dofmap),
        a_dot,
        q_dot,
        assemble_a_tilde(a_form),
    ]
    symmetry = symmetry_table(forms)
    output.tables["symmetry"] = symmetry
    dump_coordinates(q_form, run_dir / "q_t_max.coo")
    dump_coordinates(a_form, run_dir / "a_t_max.coo")

    p = p_poly(config.alpha_bar)
    random_rows = expansion[expansion["function"] != "cusp_supported"]
    output.summary.update(
        dofs=dofmap.size,
        min_slope_q_minus_a=float(random_rows["slope_q_minus_a"].min()),
        min_slope_q_minus_a_minus_tb=float(random_rows["slope_q_minus_a_minus_tb"].min()),
        cusp_supported_max_difference=float(
            expansion.loc[expansion["function"] == "cusp_supported", "max_abs_q_minus_a"].max()
        ),
        a_off_block_max=a_form.off_block_max(),
        derivative_constant_max=float(bound["constant"].max()),
        derivative_constant_spread=float(bound["constant"].max() / bound["constant"].min()),
        richardson_ratio_median=float(richardson["ratio"].median()),
        max_asymmetry=float(symmetry["stiffness_asymmetry"].max()),
        all_masses_factorizable=bool(symmetry["mass_cholesky"].all()),
        min_poincare_ratio=float(poincare["ratio_to_t2_over_4"].min()),
        p_at_1=float(p(1.0)),
        p_at_alpha_bar=float(p(config.alpha_bar)),
    )
    return output
