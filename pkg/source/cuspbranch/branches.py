"""
Eigenbranches of q_t and the diagnostics built on them.

A branch is continued in t by following eigenvector overlap rather than
eigenvalue order, then classified by extrapolating its energy to t = 0.
The remaining functions measure how a branch relates to the separated model:
window projections, quasimode residuals, the cusp-form functional, tracking
gaps and crossings with the zero-mode eigenvalues c_n t^2.
"""

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import integrate, optimize, sparse
from scipy.sparse.linalg import splu

from cuspbranch.forms import FormPair, solve_lowest
from cuspbranch.geometry import p_poly
from cuspbranch.model import (
    AiryPrediction,
    ZeroModeSpectrum,
    airy_basis,
    zero_mode_spectrum,
)
from cuspbranch.modespace import (
    ModeFunction,
    integrate_profile,
    norm,
    project_below,
    project_mode,
)
from cuspbranch.utils.constant import UNCLASSIFIED, FormKind
from cuspbranch.utils.errors import (
    AmbiguousTracking,
    BranchLost,
    GreenNormalizationSmall,
    NoSignChange,
    NotNearCrossing,
    SingularAtilde,
    WindowEmpty,
)

logger = logging.getLogger(__name__)

__all__ = [
    "AmbiguousStep",
    "Eigenbranch",
    "ModeReference",
    "CrossingRecord",
    "CuspFunctional",
    "CouplingProbe",
    "TrackingReport",
    "PredictedCrossings",
    "seed_pair",
    "continue_branch",
    "classify_limit",
    "window_basis",
    "spectral_projection",
    "quasimode_residual",
    "cusp_form_functional",
    "nonconcentration",
    "crossing_scan",
    "predicted_crossings",
    "tracking_report",
    "variation_report",
    "relative_variation",
    "coupling_probe",
    "mode_mass_report",
    "zero_mass_report",
    "beta_independence",
]

OVERLAP_MIN = 0.9
OVERLAP_LOST = 0.5
OVERLAP_TIE = 0.02
CLASSIFY_TOL = 0.1
GREEN_MIN = 1e-8
MODE_REFERENCE_MIN = 1e-12

FormFamily = Callable[[float], FormPair]


@dataclass(frozen=True)
class AmbiguousStep:
    """A continuation step taken at a near-crossing."""

    t: float
    overlap: float
    mode_overlap: float


@dataclass
class Eigenbranch:
    """A continued family t -> (E_t, u_t), samples in continuation order."""

    ts: List[float] = field(default_factory=list)
    energies: List[float] = field(default_factory=list)
    vectors: List[ModeFunction] = field(default_factory=list)
    overlaps: List[float] = field(default_factory=list)
    limit_k: int = UNCLASSIFIED
    limit_energy: float = float("nan")
    halvings: int = 0
    lost: Optional[BranchLost] = None
    ambiguous: List[AmbiguousStep] = field(default_factory=list)

    @property
    def t_array(self) -> np.ndarray:
        return np.asarray(self.ts)

    @property
    def e_array(self) -> np.ndarray:
        return np.asarray(self.energies)

    def append(self, t: float, energy: float, vector: ModeFunction, overlap: float) -> None:
        self.ts.append(t)
        self.energies.append(energy)
        self.vectors.append(vector)
        self.overlaps.append(overlap)

    def ambiguous_mask(self) -> np.ndarray:
        flagged = {step.t for step in self.ambiguous}
        return np.array([t in flagged for t in self.ts], dtype=bool)


@dataclass(frozen=True)
class ModeReference:
    """Mode-k eigenvectors of the model form near the predicted energy.

    continue_branch scores candidates against the projection of the previous
    vector onto this space, which keeps a branch on its own Fourier mode
    where it meets an eigenvalue of another mode.
    """

    a_family: FormFamily
    k: int
    halfwidth: float

    def direction(
        self, previous: np.ndarray, t: float, energy: float, mass: sparse.spmatrix
    ) -> Optional[np.ndarray]:
        """M-normalized mode-k window projection of ``previous`` at t, None when empty."""
        a_form = self.a_family(t)
        try:
            basis = window_basis(a_form, (energy - self.halfwidth, energy + self.halfwidth))
        except WindowEmpty:
            return None
        if self.k not in basis:
            return None
        _, vectors = basis[self.k]
        sl = a_form.dofmap.mode_slice(self.k)
        out = np.zeros_like(previous)
        out[sl] = vectors @ (vectors.T @ (a_form.M[sl, sl] @ previous[sl]))
        size = math.sqrt(max(float(out @ (mass @ out)), 0.0))
        if size <= MODE_REFERENCE_MIN:
            return None
        return out / size


def seed_pair(
    family: FormFamily, t_start: float, energy_guess: float, count: int = 6
) -> Tuple[float, ModeFunction]:
    """Certified eigenpair of the family at ``t_start`` nearest ``energy_guess``."""
    result = solve_lowest(family(t_start), count, sigma=energy_guess)
    i = int(np.argmin(np.abs(result.eigenvalues - energy_guess)))
    return float(result.eigenvalues[i]), result.eigenvectors[i]


def _pick(
    previous: np.ndarray,
    mass: np.ndarray,
    values: np.ndarray,
    vectors: np.ndarray,
    prediction: float,
) -> Tuple[int, float]:
    overlaps = np.abs(vectors.T @ (mass @ previous))
    best = float(overlaps.max())
    tied = np.flatnonzero(overlaps >= best - OVERLAP_TIE)
    choice = int(tied[np.argmin(np.abs(values[tied] - prediction))])
    return choice, float(overlaps[choice])


def continue_branch(
    family: FormFamily,
    t_start: float,
    t_end: float,
    seed: Tuple[float, ModeFunction],
    n_steps: int = 20,
    count: int = 6,
    max_halvings: int = 6,
    reference: Optional[ModeReference] = None,
) -> Eigenbranch:
    """Follow the branch through ``seed`` from t_start to t_end on a log grid.

    At each step the eigenpairs nearest a linear extrapolation of E are
    computed and the one with the largest M-overlap with the previous vector
    is kept. The step is halved (in log t) while the overlap stays below 0.9.

    With a ``reference`` the candidates are also scored against the mode-k
    window projection of the previous vector. A step where the two scores
    pick different candidates, or where the overlap is still below 0.9 at the
    minimal step, is a near-crossing: the mode-k candidate is kept and the
    step is recorded in ``Eigenbranch.ambiguous``. A kept candidate scoring
    below 0.5 ends the branch with BranchLost recorded on the result.
    """
    energy, vector = seed
    dofmap = family(t_start).dofmap
    branch = Eigenbranch()
    branch.append(t_start, energy, vector, 1.0)
    targets = np.geomspace(t_start, t_end, n_steps + 1)[1:]
    prev_vec = dofmap.to_vector(vector)
    start_time = time.time()

    for target in targets:
        t_prev = branch.ts[-1]
        while t_prev != target:
            t_try = float(target)
            for level in range(max_halvings + 1):
                form = family(t_try)
                prediction = _extrapolate(branch, t_try)
                result = solve_lowest(form, count, sigma=prediction)
                mass = form.M
                choice, overlap = _pick(
                    prev_vec, mass, result.eigenvalues, result.vectors, prediction
                )
                anchor = prev_vec
                mode_choice, mode_overlap = choice, overlap
                direction = (
                    reference.direction(prev_vec, t_try, prediction, mass)
                    if reference is not None
                    else None
                )
                if direction is not None:
                    anchor = direction
                    mode_choice, mode_overlap = _pick(
                        direction, mass, result.eigenvalues, result.vectors, prediction
                    )
                if mode_choice != choice:
                    break
                if overlap >= OVERLAP_MIN or level == max_halvings:
                    break
                branch.halvings += 1
                logger.debug(
                    "Overlap %.3f at t=%.6g, halving the step", overlap, t_try
                )
                t_try = math.sqrt(t_prev * t_try)
            if mode_choice != choice or overlap < OVERLAP_MIN:
                if mode_overlap < OVERLAP_LOST:
                    branch.lost = BranchLost(
                        "Branch lost at the minimal step", t_try, mode_overlap
                    )
                    logger.warning("%s", branch.lost)
                    return branch
                branch.ambiguous.append(
                    AmbiguousStep(t=t_try, overlap=overlap, mode_overlap=mode_overlap)
                )
                logger.warning(
                    "Near-crossing at t=%.6g: overlap %.3f, mode overlap %.3f",
                    t_try,
                    overlap,
                    mode_overlap,
                )
                choice, overlap = mode_choice, mode_overlap
            vec = result.vectors[:, choice]
            if vec @ (mass @ anchor) < 0.0:
                vec = -vec
            energy = float(result.eigenvalues[choice])
            branch.append(t_try, energy, dofmap.from_vector(vec), overlap)
            prev_vec = vec
            t_prev = t_try
        logger.info("Branch at t=%.6g: E=%.10g", branch.ts[-1], branch.energies[-1])

    logger.info(
        "Continuation of %d samples time: %.2f seconds",
        len(branch.ts),
        time.time() - start_time,
    )
    return branch


def _extrapolate(branch: Eigenbranch, t: float) -> float:
    if len(branch.ts) < 2:
        return branch.energies[-1]
    t1, t2 = branch.ts[-2], branch.ts[-1]
    e1, e2 = branch.energies[-2], branch.energies[-1]
    return e2 + (e2 - e1) / (t2 - t1) * (t - t2)


def classify_limit(
    ts: Sequence[float], energies: Sequence[float], tol: float = CLASSIFY_TOL
) -> Tuple[int, float]:
    """Extrapolate E_t to t = 0 and snap to the grid (k pi)^2.

    E = E0 + c1 t^{2/3} + c2 t^{4/3} is fitted through the three smallest t.

    Returns:
        (k, E0) with k = UNCLASSIFIED when E0 is farther than ``tol`` from the grid
    """
    t_arr, e_arr = np.asarray(ts, dtype=float), np.asarray(energies, dtype=float)
    if t_arr.size < 3:
        raise ValueError("classification needs at least three samples")
    idx = np.argsort(t_arr)[:3]
    tau = t_arr[idx] ** (2.0 / 3.0)
    design = np.stack([np.ones(3), tau, tau**2], axis=1)
    e0 = float(np.linalg.solve(design, e_arr[idx])[0])
    k = int(round(math.sqrt(max(e0, 0.0)) / math.pi))
    if abs(e0 - (k * math.pi) ** 2) <= tol:
        return k, e0
    return UNCLASSIFIED, e0


WindowBasis = Dict[int, Tuple[np.ndarray, np.ndarray]]


def window_basis(a_form: FormPair, interval: Tuple[float, float]) -> WindowBasis:
    """Per-mode eigenpairs of the model form with eigenvalue in (lo, hi].

    Raises:
        WindowEmpty: when no model eigenvalue lies in the interval
    """
    if a_form.kind is not FormKind.A_MODEL:
        raise ValueError(f"window projections need the model form, got {a_form.kind}")
    lo, hi = interval
    basis: WindowBasis = {}
    for k in range(a_form.dofmap.k_max + 1):
        a_k, m_k = a_form.block(k)
        if a_k.shape[0] == 0:
            continue
        values, vectors = scipy.linalg.eigh(a_k, m_k, subset_by_value=(lo, hi))
        if values.size:
            basis[k] = (values, vectors)
    if not basis:
        raise WindowEmpty(f"no model eigenvalue in ({lo}, {hi}] at t={a_form.t}")
    return basis


def spectral_projection(
    u: ModeFunction,
    a_form: FormPair,
    interval: Tuple[float, float],
    basis: Optional[WindowBasis] = None,
) -> ModeFunction:
    """w = P^I u, the model-form spectral projection onto the window, blockwise per mode."""
    if basis is None:
        basis = window_basis(a_form, interval)
    dofmap = a_form.dofmap
    x = dofmap.to_vector(u)
    out = np.zeros_like(x)
    for k, (_, vectors) in basis.items():
        sl = dofmap.mode_slice(k)
        m_k = a_form.M[sl, sl]
        out[sl] = vectors @ (vectors.T @ (m_k @ x[sl]))
    return dofmap.from_vector(out)


def quasimode_residual(
    w: ModeFunction, energy: float, a_form: FormPair, a_tilde_form: FormPair
) -> float:
    """N(w, E): the a~-dual norm of (a_t - E) w.

    Raises:
        SingularAtilde: if A + M cannot be factorized
    """
    x = a_form.dofmap.to_vector(w)
    r = a_form.A @ x - energy * (a_form.M @ x)
    try:
        z = splu(a_tilde_form.A.tocsc()).solve(r)
    except RuntimeError as e:
        raise SingularAtilde(f"factorization of a~ failed: {e}") from e
    return math.sqrt(max(float(z @ r), 0.0))


@dataclass(frozen=True)
class CuspFunctional:
    """Two estimates of L(u), the left derivative of u^0 at beta."""

    difference_quotient: float
    green_estimate: float
    error_estimate: float
    alpha_k: float

    @property
    def discrepancy(self) -> float:
        return abs(self.difference_quotient - self.green_estimate)

    def near_cusp_form(self, factor: float = 10.0) -> bool:
        return abs(self.difference_quotient) <= factor * self.error_estimate


def _green_integral(lam: float, beta: float, alpha_k: float) -> float:
    """int_{alpha_k}^beta G with y^2 G'' + lam G = 0, G(beta) = 0, G'(beta) = 1."""

    def rhs(y: float, state: np.ndarray) -> np.ndarray:
        g, dg, _ = state
        return np.array([dg, -lam * g / y**2, g])

    sol = integrate.solve_ivp(
        rhs, (beta, alpha_k), np.array([0.0, 1.0, 0.0]), method="DOP853",
        rtol=1e-11, atol=1e-14,
    )
    if not sol.success:
        raise GreenNormalizationSmall(f"integration of G failed: {sol.message}")
    return -float(sol.y[2, -1])


def _signed_integral(grid_y: np.ndarray, values: np.ndarray, lo: float, hi: float) -> float:
    inside = (grid_y > lo) & (grid_y < hi)
    ys = np.concatenate([[lo], grid_y[inside], [hi]])
    vs = np.interp(ys, grid_y, values)
    return float(integrate.trapezoid(vs, ys))


def cusp_form_functional(
    u: ModeFunction,
    energy: float,
    t: Optional[float] = None,
    alpha_k: Optional[float] = None,
    max_shifts: int = 5,
) -> CuspFunctional:
    """L(u) by a Richardson-extrapolated difference quotient and by the Green formula.

    The Green estimate is (int_{alpha_K}^beta G_lam)^{-1} int_{alpha_K}^beta u^0 with
    lam = E / t^2 for the renormalized family (pass ``t``) or lam = E.

    Raises:
        GreenNormalizationSmall: if |int G| stays below 1e-8 after moving
            alpha_K toward beta ``max_shifts`` times
    """
    grid = u.grid
    y, ib = grid.y_nodes, grid.beta_index
    if ib < 2:
        raise ValueError("beta needs two grid nodes below it")
    p0 = u.profiles[0]
    h1, h2 = y[ib] - y[ib - 1], y[ib] - y[ib - 2]
    d1 = (p0[ib] - p0[ib - 1]) / h1
    d2 = (p0[ib] - p0[ib - 2]) / h2
    extrapolated = (h2 * d1 - h1 * d2) / (h2 - h1)
    error = abs(d1 - extrapolated)

    lam = energy / t**2 if t is not None else energy
    start = alpha_k if alpha_k is not None else (grid.alpha_bar or 1.0)
    above = y[(y > start) & (y < grid.beta)]
    candidates = [start] + [float(v) for v in above[:max_shifts]]
    for a_k in candidates:
        g_int = _green_integral(lam, grid.beta, a_k)
        if abs(g_int) < GREEN_MIN:
            logger.debug("int G = %.3g at alpha_K=%.6g, moving toward beta", g_int, a_k)
            continue
        u_int = _signed_integral(y, p0, a_k, grid.beta)
        return CuspFunctional(
            difference_quotient=float(extrapolated),
            green_estimate=u_int / g_int,
            error_estimate=float(error),
            alpha_k=a_k,
        )
    raise GreenNormalizationSmall(
        f"|int G| below {GREEN_MIN} for every alpha_K tried (lambda={lam:.6g})"
    )


def nonconcentration(u: ModeFunction, ell: int, energy: float) -> float:
    """int (E/y^2 - (ell pi)^2) |u^ell|^2 dy over the weighted norm of u^ell.

    For ell = 0 this is E itself; negative values mean the profile is
    concentrated past the turning point of mode ell.
    """
    profile = u.profiles[ell]
    weighted = integrate_profile(u.grid, profile, 1.0, _inverse_square)
    if weighted == 0.0:
        return 0.0
    plain = integrate_profile(u.grid, profile, 1.0)
    return energy - (ell * math.pi) ** 2 * plain / weighted


def _inverse_square(y: np.ndarray) -> np.ndarray:
    return y**-2.0


@dataclass(frozen=True)
class CrossingRecord:
    n: int
    t_n: float
    residual: float

    @property
    def n_t_n(self) -> float:
        return self.n * self.t_n


def crossing_scan(
    branch: Eigenbranch,
    spectrum: ZeroModeSpectrum,
    k: int,
    n_range: Optional[Sequence[int]] = None,
    energy_at: Optional[Callable[[float], float]] = None,
) -> List[CrossingRecord]:
    """Solve E_t = c_n t^2 along the sampled branch for each zero-mode index n.

    E_t is interpolated linearly in t between samples unless ``energy_at``
    re-solves it. n counts the roots of the tan equation from 1.

    Raises:
        NoSignChange: when no requested n crosses the sampled branch
    """
    order = np.argsort(branch.t_array)
    ts, es = branch.t_array[order], branch.e_array[order]
    constants = spectrum.constants
    indices = list(n_range) if n_range is not None else list(range(1, constants.size + 1))
    energy = energy_at or (lambda t: float(np.interp(t, ts, es)))
    records: List[CrossingRecord] = []
    for n in indices:
        if n > constants.size:
            break
        c_n = constants[n - 1]
        gap = es - c_n * ts**2
        changes = np.flatnonzero(np.sign(gap[:-1]) * np.sign(gap[1:]) < 0)
        if changes.size == 0:
            logger.debug("No crossing with zero-mode branch n=%d on the sampled range", n)
            continue
        i = int(changes[0])

        def residual(t: float) -> float:
            return energy(t) - c_n * t**2

        t_n = optimize.bisect(residual, ts[i], ts[i + 1], xtol=1e-14)
        records.append(CrossingRecord(n=n, t_n=float(t_n), residual=abs(residual(t_n))))
    if not records:
        raise NoSignChange(
            f"no zero-mode crossing of the k={k} branch on [{ts[0]:.4g}, {ts[-1]:.4g}]"
        )
    return records


@dataclass(frozen=True)
class PredictedCrossings:
    records: List[CrossingRecord]
    tau_fit: float
    tau_expected: float


def predicted_crossings(
    k: int, beta: float, prediction: AiryPrediction, n_range: Sequence[int]
) -> PredictedCrossings:
    """Crossings of (k pi)^2 + a t^{2/3} with c_n t^2 and the fitted two-term law.

    t_n = k pi c_n^{-1/2} + tau c_n^{-5/6} with tau expected at a (k pi)^{-1/3} / 2.
    """
    n_list = list(n_range)
    spectrum = zero_mode_spectrum(1.0, beta, max(n_list))
    mu = (k * math.pi) ** 2
    a = prediction.coefficient
    records = []
    for n in n_list:
        c_n = float(spectrum.constants[n - 1])

        def gap(t: float) -> float:
            return mu + a * t ** (2.0 / 3.0) - c_n * t**2

        hi = k * math.pi / math.sqrt(c_n)
        while gap(hi) > 0.0:
            hi *= 2.0
        t_n = optimize.bisect(gap, 1e-14, hi, xtol=1e-15)
        records.append(CrossingRecord(n=n, t_n=float(t_n), residual=abs(gap(t_n))))
    c = spectrum.constants[np.asarray(n_list) - 1]
    lead = k * math.pi * c**-0.5
    t_arr = np.array([r.t_n for r in records])
    basis = c ** (-5.0 / 6.0)
    tau_fit = float(np.dot(basis, t_arr - lead) / np.dot(basis, basis))
    return PredictedCrossings(
        records=records,
        tau_fit=tau_fit,
        tau_expected=a * (k * math.pi) ** (-1.0 / 3.0) / 2.0,
    )


@dataclass(frozen=True)
class TrackingReport:
    table: pd.DataFrame
    exponent: float
    exponent_ci: float
    window_constant: float
    ambiguous: List[AmbiguousTracking] = field(default_factory=list)


def tracking_report(
    branch: Eigenbranch,
    model_values: Sequence[np.ndarray],
    window_constant: Optional[float] = None,
    tol: float = 1e-8,
) -> TrackingReport:
    """Gap between the branch and the nearest model eigenvalue of its limit mode.

    ``model_values[j]`` holds a_t^k eigenvalues near E at ``branch.ts[j]``. The
    window constant C defaults to twice the largest |E - lambda*| / t over the
    first decade of samples. A sample with two model eigenvalues within ``tol``
    of E_t is logged, recorded as AmbiguousTracking on the report and flagged
    in the ``ambiguous`` column.
    """
    ts, es = branch.t_array, branch.e_array
    if len(model_values) != ts.size:
        raise ValueError(f"{len(model_values)} model samples for {ts.size} branch samples")
    values = [np.asarray(v, dtype=float) for v in model_values]
    if any(v.size == 0 for v in values):
        raise ValueError("every branch sample needs at least one model eigenvalue")
    nearest = np.array([np.min(np.abs(v - e)) for v, e in zip(values, es)])
    if window_constant is None:
        first_decade = ts >= ts.max() / 10.0
        window_constant = max(
            2.0 * float(np.max(nearest[first_decade] / ts[first_decade])), tol / ts.min()
        )
    rows = []
    ambiguous: List[AmbiguousTracking] = []
    for t, e, lam in zip(ts, es, values):
        dist = np.abs(lam - e)
        tied = np.count_nonzero(dist <= tol) > 1
        if tied:
            ambiguous.append(
                AmbiguousTracking(f"two model eigenvalues within {tol} of E={e} at t={t}")
            )
            logger.warning("%s", ambiguous[-1])
        in_window = np.count_nonzero(dist <= window_constant * t)
        if in_window != 1:
            logger.warning("%d model eigenvalues in the tracking window at t=%.6g", in_window, t)
        star = float(lam[np.argmin(dist)])
        gap = e - star
        rows.append(
            {
                "t": t,
                "E": e,
                "lambda_star": star,
                "gap_to_lambda_star": gap,
                "gap_over_t": abs(gap) / t,
                "gap_over_t23": gap / t ** (2.0 / 3.0),
                "unique": in_window == 1,
                "ambiguous": tied,
            }
        )
    table = pd.DataFrame(rows)
    exponent, ci = _fit_exponent(ts, np.abs(table["gap_to_lambda_star"].to_numpy()))
    return TrackingReport(
        table=table,
        exponent=exponent,
        exponent_ci=ci,
        window_constant=window_constant,
        ambiguous=ambiguous,
    )


def _fit_exponent(ts: np.ndarray, values: np.ndarray) -> Tuple[float, float]:
    keep = values > 0.0
    if np.count_nonzero(keep) < 4:
        return float("nan"), float("nan")
    coeffs, cov = np.polyfit(np.log(ts[keep]), np.log(values[keep]), 1, cov=True)
    return float(coeffs[0]), float(1.96 * math.sqrt(cov[0, 0]))


def variation_report(branch: Eigenbranch, q_dot_family: FormFamily) -> pd.DataFrame:
    """dE/dt by Hellmann-Feynman q_dot(u)/||u||^2 next to finite differences of E_t."""
    ts, es = branch.t_array, branch.e_array
    order = np.argsort(ts)
    fd = np.empty_like(es)
    fd[order] = np.gradient(es[order], ts[order])
    rows = []
    for j, (t, e, u) in enumerate(zip(ts, es, branch.vectors)):
        form = q_dot_family(t)
        hf = form.evaluate(u) / form.mass(u)
        rows.append(
            {
                "t": t,
                "E": e,
                "dE_dt": hf,
                "dE_dt_fd": fd[j],
                "relative_difference": abs(hf - fd[j]) / max(abs(hf), 1e-300),
                "upper_bound_margin": hf / e - 2.0 / t,
            }
        )
    return pd.DataFrame(rows)


def relative_variation(
    ts: Sequence[float],
    e_dot: Sequence[float],
    lambda_star_dot: Sequence[float],
    k_mass: Sequence[float],
    rho: float,
) -> pd.DataFrame:
    """dE/dt - d lambda*/dt with membership of the set K(t, rho)."""
    return pd.DataFrame(
        {
            "t": np.asarray(ts),
            "relative_variation": np.asarray(e_dot) - np.asarray(lambda_star_dot),
            "in_K": np.asarray(k_mass) <= rho,
        }
    )


@dataclass(frozen=True)
class CouplingProbe:
    value: float
    predicted: float
    normalized: float

    @property
    def ratio(self) -> float:
        return self.value / self.predicted if self.predicted != 0.0 else float("nan")


def _zero_mode_function(
    template: ModeFunction, spectrum: ZeroModeSpectrum, n: int
) -> ModeFunction:
    grid = template.grid
    profile = np.zeros(grid.n_nodes)
    below = np.arange(grid.beta_index)
    profile[below] = spectrum.psi(n, grid.y_nodes[below])
    return ModeFunction.single_mode(grid, template.k_max, 0, profile)


def coupling_probe(
    u: ModeFunction,
    energy: float,
    k: int,
    spectrum: ZeroModeSpectrum,
    n: int,
    b_form: FormPair,
    eta: float = 0.5,
) -> CouplingProbe:
    """b_t(u_t, psi_n (x) 1) and its leading-order Airy prediction.

    The prediction is -a_- t p(1) A_-(-s^{-2/3} z_s) sqrt(2) (-1)^k where a_- fits
    the mode-k profile of u to the decaying Airy solution near y = 1, with
    s = t / sqrt(2E) and z_s = (1 - (k pi)^2 / E) / 2.

    Raises:
        NotNearCrossing: if |E - lambda^0_n| > eta t^{5/3}
    """
    t = b_form.t
    lam0 = float(spectrum.at(t).eigenvalues[n - 1])
    if abs(energy - lam0) > eta * t ** (5.0 / 3.0):
        raise NotNearCrossing(
            f"|E - lambda0_{n}| = {abs(energy - lam0):.3g} exceeds {eta} t^(5/3) at t={t}"
        )
    psi = _zero_mode_function(u, spectrum, n)
    value = b_form.evaluate(u, psi)

    s = t / math.sqrt(2.0 * energy)
    z_s = 0.5 * (1.0 - (k * math.pi) ** 2 / energy)
    airy = airy_basis(s, z_s)
    grid = u.grid
    x = grid.y_nodes - 1.0
    near = x <= max(z_s, 0.0) + 3.0 * s ** (2.0 / 3.0)
    w_minus = airy.w_minus(x[near])
    profile = u.profiles[k][near]
    a_minus = float(np.dot(w_minus, profile) / np.dot(w_minus, w_minus))
    p_at_1 = float(p_poly(grid.alpha_bar or 0.0)(1.0))
    x_factor = math.sqrt(2.0) * (-1.0) ** k
    predicted = -a_minus * t * p_at_1 * float(airy.w_minus(0.0)) * x_factor
    scale = t ** (2.0 / 3.0) * norm(project_mode(u, k)) * norm(psi)
    normalized = abs(value) / scale if scale > 0.0 else float("nan")
    return CouplingProbe(value=value, predicted=predicted, normalized=normalized)


def mode_mass_report(
    branch: Eigenbranch,
    a_family: FormFamily,
    interval: Tuple[float, float],
    k: int,
    rho: float,
) -> pd.DataFrame:
    """||w_t^k|| / ||u_t|| and ||Pi_{<k} w_t|| / ||u_t|| with w_t = P^I u_t."""
    rows = []
    for t, u in zip(branch.ts, branch.vectors):
        u_norm = norm(u)
        try:
            w = spectral_projection(u, a_family(t), interval)
        except WindowEmpty:
            logger.warning("Empty spectral window at t=%.6g", t)
            w = ModeFunction.zeros(u.grid, u.k_max)
        k_mass = norm(project_mode(w, k)) / u_norm
        rows.append(
            {
                "t": t,
                "k_mass": k_mass,
                "low_mass": norm(project_below(w, k)) / u_norm,
                "window_mass": norm(w) / u_norm,
                "in_K": k_mass <= rho,
            }
        )
    return pd.DataFrame(rows)


def zero_mass_report(branch: Eigenbranch) -> Tuple[pd.DataFrame, float]:
    """||u_t^0||^2 / ||u_t||^2 and the least-squares C' in 1 - C' t^2."""
    ts = branch.t_array
    ratios = np.array([norm(project_mode(u, 0)) ** 2 / norm(u) ** 2 for u in branch.vectors])
    c_prime = float(np.dot(1.0 - ratios, ts**2) / np.dot(ts**2, ts**2))
    return pd.DataFrame({"t": ts, "zero_mass": ratios}), c_prime


def beta_independence(energy: float, form_other_beta: FormPair, count: int = 4) -> float:
    """|E' - E| for the eigenvalue nearest E under a second truncation height."""
    result = solve_lowest(form_other_beta, count, sigma=energy)
    return float(np.min(np.abs(result.eigenvalues - energy)))
