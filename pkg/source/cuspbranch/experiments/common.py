"""
Pieces shared by the experiment runners: meshes and their truncation
refinement, the result container and the indexed worker pool.
"""

import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import pandas as pd

from cuspbranch.forms import FormPair, solve_lowest
from cuspbranch.modespace import CuspGrid, DofMap, build_grid, default_y_max, uniform_grid
from cuspbranch.schemas.run_config import RunConfig

logger = logging.getLogger(__name__)

TRUNCATION_EIGS = 10
Y_MAX_STEP = 1.0

T = TypeVar("T")
R = TypeVar("R")


@dataclass
class ExperimentOutput:
    """Tables (CSV), plot data (.dat, with the columns to keep) and a summary."""

    tables: Dict[str, pd.DataFrame] = field(default_factory=dict)
    plots: Dict[str, Tuple[pd.DataFrame, List[str]]] = field(default_factory=dict)
    summary: Dict[str, Any] = field(default_factory=dict)
    failures: List[str] = field(default_factory=list)

    def record_failures(self, label: str, failures: Dict[int, str]) -> None:
        self.failures.extend(f"{label} {i}: {failures[i]}" for i in sorted(failures))


def make_grid(
    config: RunConfig,
    e_max: float,
    alpha_bar: Optional[float] = None,
    ell_min: int = 1,
) -> CuspGrid:
    """Mesh for the run: uniform when ``mesh.uniform_cells`` is set, graded otherwise."""
    mesh = config.mesh
    y_max = mesh.y_max or default_y_max(config.beta, e_max, ell_min)
    if mesh.uniform_cells is not None:
        return uniform_grid(config.beta, y_max, mesh.uniform_cells, alpha_bar)
    return build_grid(
        config.beta,
        y_max,
        alpha_bar=alpha_bar,
        t_min=config.t_min,
        n_layer=mesh.n_layer,
        h_max=mesh.h_max,
        core_widths=mesh.core_widths,
        layer_widths=mesh.layer_widths,
        e_max=e_max,
        points_per_wavelength=mesh.points_per_wavelength,
    )


@dataclass(frozen=True)
class Truncation:
    """The (y_max, K_max) a run settled on and how it got there."""

    dofmap: DofMap
    refined: bool
    converged: bool
    rounds: int
    change: float

    def as_summary(self) -> Dict[str, Any]:
        return {
            "y_max": self.dofmap.grid.y_max,
            "k_max": self.dofmap.k_max,
            "refined": self.refined,
            "converged": self.converged,
            "rounds": self.rounds,
            "relative_change": self.change,
        }


def _relative_change(old: np.ndarray, new: np.ndarray) -> float:
    n = min(old.size, new.size)
    scale = np.maximum(np.abs(old[:n]), np.finfo(float).tiny)
    return float(np.max(np.abs(new[:n] - old[:n]) / scale))


def refine_truncation(
    grid: CuspGrid,
    k_start: int,
    family: Callable[[DofMap], FormPair],
    sigma: Optional[float] = None,
    tol: float = 1e-8,
    max_rounds: int = 3,
    count: int = TRUNCATION_EIGS,
) -> Truncation:
    """Grow y_max and double K_max until the watched eigenvalues move less than ``tol``.

    Each round solves for the ``count`` eigenvalues nearest ``sigma`` (the
    lowest when None) on the current truncation, on the grid continued by
    Y_MAX_STEP and with K_max doubled. Whichever change reaches ``tol`` is
    adopted and the next round starts from there.
    """

    def watched(dofmap: DofMap) -> np.ndarray:
        return np.sort(solve_lowest(family(dofmap), count, sigma=sigma).eigenvalues)

    start_time = time.time()
    dofmap = DofMap(grid, k_start)
    current = watched(dofmap)
    change = math.inf
    for round_index in range(1, max_rounds + 1):
        taller = DofMap(dofmap.grid.extended(dofmap.grid.y_max + Y_MAX_STEP), dofmap.k_max)
        wider = DofMap(dofmap.grid, 2 * max(dofmap.k_max, 1))
        taller_values, wider_values = watched(taller), watched(wider)
        y_change = _relative_change(current, taller_values)
        k_change = _relative_change(current, wider_values)
        change = max(y_change, k_change)
        logger.info(
            "Truncation round %d (y_max=%.4g, K=%d): change %.3g in y_max, %.3g in K",
            round_index,
            dofmap.grid.y_max,
            dofmap.k_max,
            y_change,
            k_change,
        )
        if change < tol:
            logger.info(
                f"Truncation refinement time: {time.time() - start_time:.2f} seconds"
            )
            return Truncation(dofmap, True, True, round_index, change)
        if y_change >= tol and k_change >= tol:
            dofmap = DofMap(taller.grid, wider.k_max)
            current = watched(dofmap)
        elif y_change >= tol:
            dofmap, current = taller, taller_values
        else:
            dofmap, current = wider, wider_values
    logger.warning(
        "Truncation not settled after %d rounds (relative change %.3g)", max_rounds, change
    )
    return Truncation(dofmap, True, False, max_rounds, change)


def resolve_truncation(
    config: RunConfig,
    grid: CuspGrid,
    family: Callable[[DofMap], FormPair],
    sigma: Optional[float] = None,
) -> Truncation:
    """Refined truncation when ``mesh.refine_truncation`` is on, else the configured one."""
    mesh = config.mesh
    if not mesh.refine_truncation:
        return Truncation(DofMap(grid, config.k_start), False, False, 0, math.nan)
    return refine_truncation(
        grid,
        config.k_start,
        family,
        sigma=sigma,
        tol=mesh.truncation_tol,
        max_rounds=mesh.max_refinements,
    )


def run_indexed(
    items: Sequence[T],
    task: Callable[[T], R],
    threads: int,
    label: str,
) -> Tuple[List[Optional[R]], Dict[int, str]]:
    """Run ``task`` over ``items`` on a thread pool, gathering results by index.

    A failed item leaves None in its slot and its error message under its
    index in the second return value; the other items carry on.
    """
    results: List[Optional[R]] = [None] * len(items)
    failures: Dict[int, str] = {}
    start_time = time.time()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as executor:
        future_to_index = {
            executor.submit(task, item): index for index, item in enumerate(items)
        }
        for future in as_completed(future_to_index):
            index = future_to_index[future]
            try:
                results[index] = future.result()
            except Exception as e:
                logger.error(f"Error processing {label} {index}: {str(e)}")
                failures[index] = f"{type(e).__name__}: {e}"
    logger.info(
        f"{label.capitalize()} processing time: {time.time() - start_time:.2f} seconds"
    )
    return results, failures
