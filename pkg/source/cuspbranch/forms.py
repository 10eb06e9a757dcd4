"""
Quadratic forms on the truncated strip and the generalized eigensolver.

Every form is assembled as a symmetric matrix over the free dofs of a
:class:`~cuspbranch.modespace.DofMap`; the mass matrix is always the
y^{-2}-weighted L^2 product, block-diagonal in the Fourier modes.
"""

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import scipy.linalg
from scipy import sparse
from scipy.sparse.linalg import ArpackError, ArpackNoConvergence, eigsh
from tenacity import (
    Retrying,
    before_sleep_log,
    retry_if_exception_type,
    stop_after_attempt,
)

from cuspbranch.geometry import (
    DiffeoFields,
    PullbackCoefficients,
    TriangleParams,
    degenerating_fields,
    p_poly,
    phi_fields,
)
from cuspbranch.modespace import (
    DofMap,
    ModeFunction,
    assemble_profile_matrix,
    basis,
    basis_derivative,
)
from cuspbranch.utils.constant import FormKind
from cuspbranch.utils.errors import SolverNoConvergence, StepTooSmall

logger = logging.getLogger(__name__)

__all__ = [
    "FormPair",
    "EigSolveResult",
    "ExpansionCheck",
    "assemble_q",
    "assemble_moduli",
    "assemble_a",
    "assemble_b",
    "assemble_dots",
    "assemble_a_tilde",
    "solve_lowest",
    "solve_generalized",
    "check_expansion",
    "dump_coordinates",
]

DENSE_LIMIT = 2000
SOLVER_TOL = 1e-9
FD_REL_STEP = 1e-6


@dataclass(frozen=True, eq=False)
class FormPair:
    """Stiffness ``A`` and mass ``M`` of one quadratic form over a dof map."""

    A: sparse.csr_matrix
    M: sparse.csr_matrix
    t: float
    kind: FormKind
    dofmap: DofMap

    @property
    def size(self) -> int:
        return self.A.shape[0]

    def evaluate(self, u: ModeFunction, v: Optional[ModeFunction] = None) -> float:
        """The form on (u, v), or on (u, u) when ``v`` is omitted."""
        x = self.dofmap.to_vector(u)
        y = x if v is None else self.dofmap.to_vector(v)
        return float(x @ (self.A @ y))

    def mass(self, u: ModeFunction, v: Optional[ModeFunction] = None) -> float:
        x = self.dofmap.to_vector(u)
        y = x if v is None else self.dofmap.to_vector(v)
        return float(x @ (self.M @ y))

    def block(self, k: int) -> Tuple[np.ndarray, np.ndarray]:
        """Dense diagonal blocks (A_kk, M_kk) of mode k."""
        sl = self.dofmap.mode_slice(k)
        return self.A[sl, sl].toarray(), self.M[sl, sl].toarray()

    def off_block_max(self) -> float:
        """Largest |A_ij| coupling two different modes."""
        coo = self.A.tocoo()
        mode_of = np.searchsorted(self.dofmap.offsets, np.arange(self.size), side="right")
        coupled = mode_of[coo.row] != mode_of[coo.col]
        return float(np.max(np.abs(coo.data[coupled]), initial=0.0))


@dataclass(frozen=True, eq=False)
class EigSolveResult:
    """Ascending eigenvalues with M-orthonormal eigenvectors (columns)."""

    eigenvalues: np.ndarray
    vectors: np.ndarray
    residuals: np.ndarray
    dofmap: Optional[DofMap] = None
    method: str = "dense"

    @property
    def eigenvectors(self) -> List[ModeFunction]:
        if self.dofmap is None:
            raise ValueError("result was not produced from a dof map")
        return [self.dofmap.from_vector(v) for v in self.vectors.T]


def _x_rule(k_max: int) -> Tuple[np.ndarray, np.ndarray]:
    nodes, weights = np.polynomial.legendre.leggauss(4 * (k_max + 1))
    return 0.5 * (nodes + 1.0), 0.5 * weights


def _region_matrix(
    dofmap: DofMap,
    cells: np.ndarray,
    coefficients: Callable[[np.ndarray, np.ndarray], PullbackCoefficients],
) -> sparse.csr_matrix:
    """Full (mode, node) matrix of int grad(rho u) . G . grad(rho v) over ``cells``.

    Unknowns per point are U = (u_a, u_b, u) so grad(rho u) = P U with
    P = [[rho, 0, rho_a], [0, rho, rho_b]] and the local kernel is P^T G P.
    """
    grid, k_max = dofmap.grid, dofmap.k_max
    n_full = (k_max + 1) * grid.n_nodes
    if cells.size == 0:
        return sparse.csr_matrix((n_full, n_full))
    quad = grid.quadrature
    xa, wa = _x_rule(k_max)
    points = quad["points"][cells]
    wb = quad["weights"][cells]
    co = coefficients(xa[:, None, None], points[None, :, :])

    shape = co.rho.shape
    proj = np.zeros(shape + (2, 3))
    proj[..., 0, 0] = co.rho
    proj[..., 1, 1] = co.rho
    proj[..., 0, 2] = co.rho_a
    proj[..., 1, 2] = co.rho_b
    kernel = np.einsum("...ip,...ij,...jr->...pr", proj, co.metric, proj)

    modes = np.arange(k_max + 1)
    e = np.stack([basis(k, xa) for k in modes])
    de = np.stack([basis_derivative(k, xa) for k in modes])
    ea = np.stack([de, e, e])
    nb = np.stack(
        [quad["shape"][cells], quad["dshape"][cells], quad["shape"][cells]]
    )

    x_part = np.einsum("i,icqpr,pki,rli->cqprkl", wa, kernel, ea, ea, optimize=True)
    local = np.einsum(
        "cq,cqprkl,pcqj,rcqm->ckjlm", wb, x_part, nb, nb, optimize=True
    )

    n = grid.n_nodes
    two = np.arange(2)
    rows = (
        modes[None, :, None, None, None] * n
        + cells[:, None, None, None, None]
        + two[None, None, :, None, None]
    )
    cols = (
        modes[None, None, None, :, None] * n
        + cells[:, None, None, None, None]
        + two[None, None, None, None, :]
    )
    rows, cols = np.broadcast_arrays(rows, cols)
    mat = sparse.coo_matrix(
        (local.ravel(), (rows.ravel(), cols.ravel())), shape=(n_full, n_full)
    )
    return mat.tocsr()


def _cusp_blocks(
    dofmap: DofMap, cells: np.ndarray, g_aa: float, g_bb: float
) -> sparse.csr_matrix:
    """Mode-diagonal part int g_aa u_a v_a + g_bb u_b v_b on ``cells``."""
    grid = dofmap.grid
    mass = assemble_profile_matrix(grid, cells=cells)
    stiff = assemble_profile_matrix(grid, derivative=True, cells=cells)
    blocks = [
        g_aa * (k * math.pi) ** 2 * mass + g_bb * stiff
        for k in range(dofmap.k_max + 1)
    ]
    return sparse.block_diag(blocks, format="csr")


def _mass(dofmap: DofMap) -> sparse.csr_matrix:
    full = sparse.block_diag(
        [dofmap.grid.weighted_mass] * (dofmap.k_max + 1), format="csr"
    )
    return dofmap.restrict_full(full)


def _split_cells(dofmap: DofMap) -> Tuple[np.ndarray, np.ndarray]:
    grid = dofmap.grid
    if grid.alpha_bar_index is None:
        raise ValueError("the grid has no alpha_bar node")
    cells = np.arange(grid.n_cells)
    return cells[: grid.alpha_bar_index], cells[grid.alpha_bar_index :]


def _symmetric(mat: sparse.spmatrix) -> sparse.csr_matrix:
    return sparse.csr_matrix(0.5 * (mat + mat.T))


def _pulled_back(
    fields: DiffeoFields, dofmap: DofMap, kind: FormKind
) -> FormPair:
    lower, upper = _split_cells(dofmap)
    g_aa, g_bb = fields.cusp_metric()
    full = _region_matrix(dofmap, lower, fields.coefficients) + _cusp_blocks(
        dofmap, upper, g_aa, g_bb
    )
    return FormPair(
        A=_symmetric(dofmap.restrict_full(full)),
        M=_mass(dofmap),
        t=fields.t,
        kind=kind,
        dofmap=dofmap,
    )


def assemble_q(
    t: float, dofmap: DofMap, fields: Optional[DiffeoFields] = None
) -> FormPair:
    """Renormalized truncated form q_t of the triangle T_{0,t}.

    Args:
        t: degeneration parameter in (0, 1)
        dofmap: dofs on a grid carrying both beta and alpha_bar as nodes
        fields: precomputed degenerating fields at ``t``

    Raises:
        MonotonicityFailure: if the normalising map fails its grid check
    """
    grid = dofmap.grid
    if fields is None:
        fields = degenerating_fields(t, grid.beta, grid.alpha_bar or 0.0)
    return _pulled_back(fields, dofmap, FormKind.Q)


def assemble_moduli(
    params: TriangleParams, alpha_bar: float, dofmap: DofMap
) -> FormPair:
    """Unrenormalized truncated form q_{c,w} of a triangle in the moduli space."""
    fields = phi_fields(params, alpha_bar)
    return _pulled_back(fields, dofmap, FormKind.Q_MODULI)


def assemble_a(t: float, dofmap: DofMap) -> FormPair:
    """Separated model form a_t(u) = int u_x^2 + t^2 u_y^2, exactly block-diagonal."""
    grid = dofmap.grid
    if grid.alpha_bar_index is None:
        full = _cusp_blocks(dofmap, np.arange(grid.n_cells), 1.0, t**2)
    else:
        lower, upper = _split_cells(dofmap)
        full = _cusp_blocks(dofmap, lower, 1.0, t**2) + _cusp_blocks(
            dofmap, upper, 1.0, t**2
        )
    return FormPair(
        A=dofmap.restrict_full(full),
        M=_mass(dofmap),
        t=t,
        kind=FormKind.A_MODEL,
        dofmap=dofmap,
    )


def assemble_b(t: float, dofmap: DofMap, p: Optional[np.polynomial.Polynomial] = None) -> FormPair:
    """First-order coupling b_t(u, v) = t int_{S_-} a p(b) (u_a v_b + u_b v_a)."""
    grid = dofmap.grid
    if p is None:
        p = p_poly(grid.alpha_bar or 0.0)
    lower, _ = _split_cells(dofmap)

    def coefficients(a: np.ndarray, b: np.ndarray) -> PullbackCoefficients:
        a, b = np.broadcast_arrays(a, b)
        metric = np.zeros(a.shape + (2, 2))
        metric[..., 0, 1] = t * a * p(b)
        metric[..., 1, 0] = metric[..., 0, 1]
        return PullbackCoefficients(
            rho=np.ones(a.shape),
            rho_a=np.zeros(a.shape),
            rho_b=np.zeros(a.shape),
            metric=metric,
        )

    full = _region_matrix(dofmap, lower, coefficients)
    return FormPair(
        A=_symmetric(dofmap.restrict_full(full)),
        M=_mass(dofmap),
        t=t,
        kind=FormKind.B_COUPLING,
        dofmap=dofmap,
    )


def assemble_dots(
    t: float, dofmap: DofMap, rel_step: float = FD_REL_STEP
) -> Tuple[FormPair, FormPair]:
    """(a_dot, q_dot): exact t-derivative of a_t and a centered difference of q_t.

    Raises:
        StepTooSmall: if t <= 2 h with h = rel_step * t
    """
    h = rel_step * t
    if t <= 2.0 * h:
        raise StepTooSmall(f"t={t} does not admit the difference step {h}")
    grid = dofmap.grid
    a_dot_full = _cusp_blocks(dofmap, np.arange(grid.n_cells), 0.0, 2.0 * t)
    mass = _mass(dofmap)
    a_dot = FormPair(
        A=dofmap.restrict_full(a_dot_full),
        M=mass,
        t=t,
        kind=FormKind.A_DOT,
        dofmap=dofmap,
    )
    q_plus = assemble_q(t + h, dofmap)
    q_minus = assemble_q(t - h, dofmap)
    q_dot = FormPair(
        A=_symmetric((q_plus.A - q_minus.A) / (2.0 * h)),
        M=mass,
        t=t,
        kind=FormKind.Q_DOT,
        dofmap=dofmap,
    )
    return a_dot, q_dot


def assemble_a_tilde(a_form: FormPair) -> FormPair:
    """a~_t = a_t + ||.||^2 as the pair (A + M, M)."""
    return FormPair(
        A=sparse.csr_matrix(a_form.A + a_form.M),
        M=a_form.M,
        t=a_form.t,
        kind=FormKind.A_TILDE,
        dofmap=a_form.dofmap,
    )


def _matrix_norm(mat: sparse.spmatrix) -> float:
    return float(abs(mat).sum(axis=0).max())


def _backward_errors(
    A: sparse.spmatrix, M: sparse.spmatrix, values: np.ndarray, vectors: np.ndarray
) -> np.ndarray:
    """||A v - lam M v|| / ((||A|| + |lam| ||M||) ||v||) per pair."""
    norm_a, norm_m = _matrix_norm(A), _matrix_norm(M)
    residual = A @ vectors - (M @ vectors) * values[None, :]
    scale = (norm_a + np.abs(values) * norm_m) * np.linalg.norm(vectors, axis=0)
    return np.linalg.norm(residual, axis=0) / scale


def _polish(
    A: sparse.spmatrix, M: sparse.spmatrix, vectors: np.ndarray
) -> Tuple[np.ndarray, np.ndarray]:
    """M-normalize and replace eigenvalues by Rayleigh quotients."""
    m_norm = np.sqrt(np.einsum("ij,ij->j", vectors, M @ vectors))
    vectors = vectors / m_norm[None, :]
    values = np.einsum("ij,ij->j", vectors, A @ vectors)
    order = np.argsort(values, kind="stable")
    return values[order], vectors[:, order]


def _solve_dense(
    A: sparse.spmatrix, M: sparse.spmatrix, count: int, sigma: Optional[float]
) -> Tuple[np.ndarray, np.ndarray]:
    a_dense = A.toarray() if sparse.issparse(A) else np.asarray(A)
    m_dense = M.toarray() if sparse.issparse(M) else np.asarray(M)
    n = a_dense.shape[0]
    if sigma is None:
        return scipy.linalg.eigh(a_dense, m_dense, subset_by_index=[0, count - 1])
    values, vectors = scipy.linalg.eigh(a_dense, m_dense)
    nearest = np.sort(np.argsort(np.abs(values - sigma), kind="stable")[: min(count, n)])
    return values[nearest], vectors[:, nearest]


def _solve_sparse(
    A: sparse.spmatrix,
    M: sparse.spmatrix,
    count: int,
    sigma: Optional[float],
    ncv: Optional[int],
) -> Tuple[np.ndarray, np.ndarray]:
    shift = sigma if sigma is not None else -1e-8 * _matrix_norm(A)
    try:
        values, vectors = eigsh(
            sparse.csc_matrix(A),
            k=count,
            M=sparse.csc_matrix(M),
            sigma=shift,
            which="LM",
            ncv=ncv,
            tol=0.0,
        )
    except (ArpackNoConvergence, ArpackError) as e:
        raise SolverNoConvergence(f"ARPACK failed: {e}") from e
    order = np.argsort(values)
    return values[order], vectors[:, order]


def solve_generalized(
    A: sparse.spmatrix,
    M: sparse.spmatrix,
    count: int,
    sigma: Optional[float] = None,
    tol: float = SOLVER_TOL,
    dense_limit: int = DENSE_LIMIT,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray, str]:
    """Lowest (or nearest-to-sigma) generalized eigenpairs of (A, M).

    Small problems go to the dense solver; larger ones to shift-invert Lanczos,
    retried with a wider Krylov space and finally with the dense path.

    Returns:
        eigenvalues, M-orthonormal eigenvectors, backward errors, method name

    Raises:
        SolverNoConvergence: when no strategy certifies the pairs within ``tol``
    """
    n = A.shape[0]
    count = min(count, n)
    strategies: List[Tuple[str, Optional[int]]] = [("dense", None)]
    if n > dense_limit:
        strategies = [
            ("lanczos", None),
            ("lanczos", min(n - 1, max(4 * count + 1, 40))),
            ("dense", None),
        ]
    errors: np.ndarray = np.array([])
    for attempt in Retrying(
        stop=stop_after_attempt(len(strategies)),
        retry=retry_if_exception_type(SolverNoConvergence),
        before_sleep=before_sleep_log(logger, logging.WARNING),
        reraise=True,
    ):
        with attempt:
            number = attempt.retry_state.attempt_number
            method, ncv = strategies[number - 1]
            if method == "dense":
                values, vectors = _solve_dense(A, M, count, sigma)
            else:
                values, vectors = _solve_sparse(A, M, count, sigma, ncv)
            values, vectors = _polish(A, M, vectors)
            errors = _backward_errors(A, M, values, vectors)
            logger.debug(
                "%s solve of size %d: max backward error %.2e", method, n, errors.max()
            )
            if np.any(errors > tol):
                raise SolverNoConvergence(
                    f"{method} solve left backward error {errors.max():.2e} > {tol}",
                    iterations=number,
                    residuals=errors,
                )
    return values, vectors, errors, method


def solve_lowest(
    form: FormPair,
    count: int,
    sigma: Optional[float] = None,
    tol: float = SOLVER_TOL,
    dense_limit: int = DENSE_LIMIT,
) -> EigSolveResult:
    """The ``count`` smallest eigenpairs of a form, or those nearest ``sigma``."""
    values, vectors, errors, method = solve_generalized(
        form.A, form.M, count, sigma, tol, dense_limit
    )
    return EigSolveResult(
        eigenvalues=values,
        vectors=vectors,
        residuals=errors,
        dofmap=form.dofmap,
        method=method,
    )


@dataclass(frozen=True)
class ExpansionCheck:
    """Differences q - a and q - a - t b on a t-grid with fitted log-log slopes."""

    ts: np.ndarray
    q_minus_a: np.ndarray
    q_minus_a_minus_tb: np.ndarray
    slope_q_minus_a: float
    slope_q_minus_a_minus_tb: float


def _loglog_slope(ts: np.ndarray, values: np.ndarray) -> float:
    values = np.abs(values)
    if np.any(values == 0.0):
        return float("nan")
    slope, _ = np.polyfit(np.log(ts), np.log(values), 1)
    return float(slope)


def check_expansion(
    ts: Sequence[float], u: ModeFunction, v: ModeFunction, dofmap: DofMap
) -> ExpansionCheck:
    """Measure |q_t - a_t| and |q_t - a_t - t b_t| on (u, v) over ``ts``.

    Slopes are NaN when a difference vanishes exactly, as it does for
    functions supported on the cusp.
    """
    t_arr = np.asarray(sorted(ts), dtype=float)
    qa, qatb = [], []
    for t in t_arr:
        q = assemble_q(t, dofmap).evaluate(u, v)
        a = assemble_a(t, dofmap).evaluate(u, v)
        b = assemble_b(t, dofmap).evaluate(u, v)
        qa.append(q - a)
        qatb.append(q - a - t * b)
    qa_arr, qatb_arr = np.asarray(qa), np.asarray(qatb)
    return ExpansionCheck(
        ts=t_arr,
        q_minus_a=qa_arr,
        q_minus_a_minus_tb=qatb_arr,
        slope_q_minus_a=_loglog_slope(t_arr, qa_arr),
        slope_q_minus_a_minus_tb=_loglog_slope(t_arr, qatb_arr),
    )


def dump_coordinates(form: FormPair, path: Union[str, Path]) -> None:
    """Write the upper triangle of A as 'row col value' lines after a '#' header."""
    coo = sparse.triu(form.A).tocoo()
    with open(path, "w") as handle:
        handle.write(
            f"# kind={form.kind.value} t={form.t!r} n={form.size} nnz={coo.nnz}\n"
        )
        pd.DataFrame({"row": coo.row, "col": coo.col, "value": coo.data}).to_csv(
            handle, sep=" ", header=False, index=False, float_format="%.17g"
        )
