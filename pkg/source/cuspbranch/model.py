"""
Spectral theory of the separated model operator a_t.

a_t(u) = int u_x^2 + t^2 u_y^2 decouples over Fourier modes into the 1-D forms
a_t^ell(v) = int t^2 v'^2 + (ell pi)^2 v^2 dy against int v^2 y^{-2} dy. The
zero mode is solved exactly on [1, beta]; nonzero modes are discretized and
compared with their Airy-layer asymptotics. WKB and Airy solution bases are
provided for the coupling analysis near y = 1.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, optimize, sparse, special

from cuspbranch.forms import solve_generalized
from cuspbranch.modespace import CuspGrid, integrate_profile, p1_matrix
from cuspbranch.utils.errors import BracketFailure, TurningPointInWindow

logger = logging.getLogger(__name__)

__all__ = [
    "ZeroModeSpectrum",
    "ZeroModeBounds",
    "ModelBranch",
    "AiryPrediction",
    "WKBBasis",
    "WKBCheck",
    "AiryBasis",
    "zero_mode_spectrum",
    "zero_mode_bounds",
    "mode_blocks",
    "mode_branch",
    "airy_predict",
    "lambda_dot_asymptote",
    "rescaled_spectrum",
    "wkb_basis",
    "verify_wkb",
    "airy_basis",
    "measure_localization",
]

ROOT_XTOL = 1e-15
RESCALED_X_MAX = 6.0
RESCALED_CELLS = 600


@dataclass(frozen=True)
class ZeroModeSpectrum:
    """Exact spectrum of a_t^0 on [1, beta] with Neumann at 1 and Dirichlet at beta.

    Eigenvalues are lambda_n = t^2 (1/4 + r_n^2) where 2 r = tan(r ln beta).
    """

    beta: float
    t: float
    roots: np.ndarray

    @property
    def constants(self) -> np.ndarray:
        """c_n with lambda_n = c_n t^2."""
        return 0.25 + self.roots**2

    @property
    def eigenvalues(self) -> np.ndarray:
        return self.t**2 * self.constants

    def at(self, t: float) -> "ZeroModeSpectrum":
        return ZeroModeSpectrum(beta=self.beta, t=t, roots=self.roots)

    def psi(self, n: int, y: np.ndarray) -> np.ndarray:
        """n-th eigenvector (1-based), normalized by psi(1) = 1."""
        r = self.roots[n - 1]
        y = np.asarray(y, dtype=float)
        log_y = np.log(y)
        return np.sqrt(y) * (np.cos(r * log_y) - np.sin(r * log_y) / (2.0 * r))

    def psi_prime(self, n: int, y: np.ndarray) -> np.ndarray:
        r = self.roots[n - 1]
        y = np.asarray(y, dtype=float)
        log_y = np.log(y)
        # d/dy [y^{1/2} (cos - sin/2r)] simplified
        return -(0.25 / r + r) * np.sin(r * log_y) / np.sqrt(y)


def _tan_residual(r: float, log_beta: float) -> float:
    return math.sin(r * log_beta) - 2.0 * r * math.cos(r * log_beta)


def zero_mode_spectrum(t: float, beta: float, n_max: int) -> ZeroModeSpectrum:
    """First ``n_max`` roots of sin(r ln beta) - 2 r cos(r ln beta) by bisection.

    Each root lies in (n pi / ln beta, (n + 1/2) pi / ln beta); the n = 0 bracket
    only holds a root when ln beta < 2.

    Raises:
        BracketFailure: if a bracket shows no sign change
    """
    if beta <= 1.0 or t <= 0.0:
        raise ValueError(f"need beta > 1 and t > 0, got beta={beta}, t={t}")
    log_beta = math.log(beta)
    first = 0 if log_beta < 2.0 else 1
    roots = []
    for n in range(first, first + n_max):
        lo = max(n * math.pi / log_beta, 1e-9)
        hi = (n + 0.5) * math.pi / log_beta
        f_lo, f_hi = _tan_residual(lo, log_beta), _tan_residual(hi, log_beta)
        if f_lo * f_hi >= 0.0:
            raise BracketFailure(
                f"no sign change of the tan residual on ({lo:.6g}, {hi:.6g})"
            )
        roots.append(
            optimize.bisect(_tan_residual, lo, hi, args=(log_beta,), xtol=ROOT_XTOL)
        )
    return ZeroModeSpectrum(beta=beta, t=t, roots=np.asarray(roots))


@dataclass(frozen=True)
class ZeroModeBounds:
    sup_abs: float
    norm: float
    beta: float

    @property
    def within_bounds(self) -> bool:
        log_beta = math.log(self.beta)
        return (
            0.5 <= self.sup_abs <= 2.0 * math.sqrt(self.beta)
            and 0.5 * math.sqrt(log_beta) <= self.norm <= math.sqrt(log_beta)
        )


def zero_mode_bounds(spectrum: ZeroModeSpectrum, n: int = 1) -> ZeroModeBounds:
    """sup |psi_n| and the y^{-2}-weighted norm of psi_n on [1, beta]."""
    ys = np.linspace(1.0, spectrum.beta, 4001)
    sup_abs = float(np.max(np.abs(spectrum.psi(n, ys))))
    norm_sq, _ = integrate.quad(
        lambda y: float(spectrum.psi(n, y)) ** 2 / y**2, 1.0, spectrum.beta, limit=200
    )
    return ZeroModeBounds(sup_abs=sup_abs, norm=math.sqrt(norm_sq), beta=spectrum.beta)


def mode_blocks(
    grid: CuspGrid, ell: int, t: float, zero_mode_cutoff: bool = True
) -> Tuple[sparse.csr_matrix, sparse.csr_matrix, np.ndarray]:
    """(A, M, free nodes) of a_t^ell on the grid.

    Mode 0 lives on nodes below beta; other modes drop only the y_max node.
    """
    if ell == 0 and zero_mode_cutoff:
        free = np.arange(grid.beta_index)
    else:
        free = np.arange(grid.n_nodes - 1)
    a_full = t**2 * grid.stiffness + (ell * math.pi) ** 2 * grid.plain_mass
    a_mat = a_full[free][:, free]
    m_mat = grid.weighted_mass[free][:, free]
    return a_mat, m_mat, free


@dataclass
class ModelBranch:
    """The i-th eigenvalue branch of a_t^ell sampled on a t-grid."""

    ell: int
    index: int
    ts: np.ndarray
    eigenvalues: np.ndarray
    profiles: List[np.ndarray] = field(default_factory=list)
    airy_coefficient: float = 0.0

    def airy_prediction(self, t: np.ndarray) -> np.ndarray:
        return (self.ell * math.pi) ** 2 + self.airy_coefficient * np.asarray(t) ** (
            2.0 / 3.0
        )

    @property
    def relative_gap(self) -> np.ndarray:
        pred = self.airy_prediction(self.ts)
        return (self.eigenvalues - pred) / self.eigenvalues


def _match_by_overlap(
    previous: np.ndarray, current: np.ndarray, mass: np.ndarray
) -> np.ndarray:
    """Permutation of ``current`` columns following ``previous`` by M-overlap."""
    overlap = np.abs(previous.T @ (mass @ current))
    order = np.argmax(overlap, axis=1)
    if len(set(order.tolist())) != order.size:
        logger.warning("Overlap matching is not a permutation; keeping eigenvalue order")
        return np.arange(current.shape[1])
    return order


def mode_branch(
    ell: int,
    t_list: Sequence[float],
    branch_count: int,
    grid: CuspGrid,
) -> List[ModelBranch]:
    """Lowest ``branch_count`` eigenvalue branches of a_t^ell over ``t_list``.

    Raises:
        SolverNoConvergence: from the eigensolver
    """
    if ell < 1:
        raise ValueError(f"mode_branch needs ell >= 1, got {ell}")
    ts = np.asarray(t_list, dtype=float)
    values = np.zeros((ts.size, branch_count))
    profiles: List[List[np.ndarray]] = [[] for _ in range(branch_count)]
    previous: Optional[np.ndarray] = None
    for j, t in enumerate(ts):
        a_mat, m_mat, free = mode_blocks(grid, ell, t)
        vals, vecs, _, _ = solve_generalized(a_mat, m_mat, branch_count)
        if previous is not None:
            order = _match_by_overlap(previous, vecs, m_mat.toarray())
            vals, vecs = vals[order], vecs[:, order]
        # fix the sign by the value at y = 1
        vecs = vecs * np.where(vecs[0] < 0.0, -1.0, 1.0)[None, :]
        previous = vecs
        values[j] = vals
        for i in range(branch_count):
            full = np.zeros(grid.n_nodes)
            full[free] = vecs[:, i]
            profiles[i].append(full)
    return [
        ModelBranch(
            ell=ell,
            index=i + 1,
            ts=ts,
            eigenvalues=values[:, i],
            profiles=profiles[i],
            airy_coefficient=airy_predict(ell, i + 1).coefficient,
        )
        for i in range(branch_count)
    ]


@dataclass(frozen=True)
class AiryPrediction:
    ell: int
    index: int
    zeta: float
    coefficient: float

    def predict(self, t: np.ndarray) -> np.ndarray:
        """(ell pi)^2 + a_i t^{2/3}."""
        return (self.ell * math.pi) ** 2 + self.coefficient * np.asarray(t) ** (
            2.0 / 3.0
        )


def airy_predict(ell: int, index: int) -> AiryPrediction:
    """a_i = (2 (pi ell)^2)^{2/3} (-zeta_i), zeta_i the i-th zero of Ai'."""
    _, ap, _, _ = special.ai_zeros(index)
    zeta = float(ap[index - 1])
    coefficient = (2.0 * (math.pi * ell) ** 2) ** (2.0 / 3.0) * (-zeta)
    return AiryPrediction(ell=ell, index=index, zeta=zeta, coefficient=coefficient)


def lambda_dot_asymptote(ell: int, index: int) -> float:
    """Limit of t^{1/3} d lambda_i / dt as t -> 0."""
    return 2.0 / 3.0 * airy_predict(ell, index).coefficient


def rescaled_spectrum(
    s: float,
    ell: int,
    count: int,
    x_nodes: Optional[np.ndarray] = None,
    x_max: float = RESCALED_X_MAX,
    n_cells: int = RESCALED_CELLS,
) -> np.ndarray:
    """Lowest eigenvalues nu of int w'^2 + mu x g(s^2 x) w^2 against int f(s^2 x) w^2.

    Here mu = (ell pi)^2, g(z) = (z + 2) / (z + 1)^2, f(z) = (z + 1)^{-2}, with a
    natural condition at x = 0 and Dirichlet at the last node. For s > 0,
    nu = s^{-2} (lambda_{s^3} - mu) relates it to the branches of a_t^ell.
    """
    if s < 0.0:
        raise ValueError(f"s={s} must be nonnegative")
    mu = (ell * math.pi) ** 2
    nodes = np.linspace(0.0, x_max, n_cells + 1) if x_nodes is None else x_nodes
    s2 = s * s

    def potential(x: np.ndarray) -> np.ndarray:
        z = s2 * x
        return mu * x * (z + 2.0) / (z + 1.0) ** 2

    def weight(x: np.ndarray) -> np.ndarray:
        return (s2 * x + 1.0) ** -2

    stiff = p1_matrix(nodes, derivative=True)
    pot = p1_matrix(nodes, weight=potential)
    mass = p1_matrix(nodes, weight=weight)
    free = np.arange(nodes.size - 1)
    a_mat = (stiff + pot)[free][:, free]
    m_mat = mass[free][:, free]
    values, _, _, _ = solve_generalized(a_mat, m_mat, count)
    return values


@dataclass(frozen=True)
class WKBBasis:
    """Real WKB pair |f|^{-1/4} cos(Phi/t), |f|^{-1/4} sin(Phi/t) on [1, beta].

    f(y) = mu / y^2 - (ell pi)^2 and Phi(y) = int_1^y sqrt(f).
    """

    ell: int
    mu: float
    t: float
    beta: float

    def frequency(self, y: np.ndarray) -> np.ndarray:
        return self.mu / np.asarray(y, dtype=float) ** 2 - (self.ell * math.pi) ** 2

    def phase(self, y: np.ndarray) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        if self.ell == 0:
            return math.sqrt(self.mu) * np.log(y)
        el = self.ell * math.pi
        root_mu = math.sqrt(self.mu)

        def antiderivative(z: np.ndarray) -> np.ndarray:
            s = np.sqrt(self.mu - (el * z) ** 2)
            return s - root_mu * np.log((root_mu + s) / z)

        return antiderivative(y) - antiderivative(np.asarray(1.0))

    def amplitude(self, y: np.ndarray) -> np.ndarray:
        return np.abs(self.frequency(y)) ** -0.25

    def values(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        amp, ph = self.amplitude(y), self.phase(y) / self.t
        return amp * np.cos(ph), amp * np.sin(ph)

    def derivatives(self, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        y = np.asarray(y, dtype=float)
        f = self.frequency(y)
        f_prime = -2.0 * self.mu / y**3
        amp = f**-0.25
        amp_prime = -0.25 * f**-1.25 * f_prime
        ph = self.phase(y) / self.t
        ph_prime = np.sqrt(f) / self.t
        plus = amp_prime * np.cos(ph) - amp * ph_prime * np.sin(ph)
        minus = amp_prime * np.sin(ph) + amp * ph_prime * np.cos(ph)
        return plus, minus


def wkb_basis(ell: int, mu: float, t: float, beta: float) -> WKBBasis:
    """WKB solutions of t^2 v'' + (mu / y^2 - (ell pi)^2) v = 0 on [1, beta].

    Raises:
        TurningPointInWindow: if mu / y^2 - (ell pi)^2 <= 0 somewhere on [1, beta]
    """
    margin = mu / beta**2 - (ell * math.pi) ** 2
    if margin <= 0.0:
        raise TurningPointInWindow(
            f"mu/y^2 - (ell pi)^2 = {margin:.4g} at y = beta = {beta}"
        )
    return WKBBasis(ell=ell, mu=mu, t=t, beta=beta)


@dataclass(frozen=True)
class WKBCheck:
    deviation_plus: float
    deviation_minus: float
    wronskian_variation: float


def verify_wkb(basis: WKBBasis, n_points: int = 2001) -> WKBCheck:
    """Integrate the exact ODE from the WKB data at y = 1 and compare on [1, beta].

    Deviations are sup |v_exact - v_wkb| / sup |v_exact|; the Wronskian
    variation is the relative spread of v1 v2' - v1' v2 along the interval.
    """
    ys = np.linspace(1.0, basis.beta, n_points)
    t2 = basis.t**2

    def rhs(y: float, state: np.ndarray) -> np.ndarray:
        v, dv = state[:2], state[2:]
        return np.concatenate([dv, -basis.frequency(y) * v / t2])

    v0 = np.array(basis.values(1.0)).ravel()
    dv0 = np.array(basis.derivatives(1.0)).ravel()
    sol = integrate.solve_ivp(
        rhs,
        (1.0, basis.beta),
        np.concatenate([v0, dv0]),
        method="DOP853",
        t_eval=ys,
        rtol=1e-11,
        atol=1e-13,
    )
    if not sol.success:
        raise RuntimeError(f"WKB verification integration failed: {sol.message}")
    exact_v, exact_dv = sol.y[:2], sol.y[2:]
    wkb_v = np.array(basis.values(ys))
    deviation = np.max(np.abs(exact_v - wkb_v), axis=1) / np.max(
        np.abs(exact_v), axis=1
    )
    wronskian = exact_v[0] * exact_dv[1] - exact_dv[0] * exact_v[1]
    variation = float(np.ptp(wronskian) / np.max(np.abs(wronskian)))
    return WKBCheck(
        deviation_plus=float(deviation[0]),
        deviation_minus=float(deviation[1]),
        wronskian_variation=variation,
    )


@dataclass(frozen=True)
class AiryBasis:
    """W_pm(x) = A_pm(s^{-2/3} (x - z_s)) solving -s^2 W'' + (x - z_s) W = 0.

    A_- = 2 sqrt(pi) Ai decays, A_+ = sqrt(pi) Bi grows, and
    A_- A_+' - A_-' A_+ = 2.
    """

    s: float
    z_s: float

    def _argument(self, x: np.ndarray) -> np.ndarray:
        return self.s ** (-2.0 / 3.0) * (np.asarray(x, dtype=float) - self.z_s)

    def w_minus(self, x: np.ndarray) -> np.ndarray:
        ai, _, _, _ = special.airy(self._argument(x))
        return 2.0 * math.sqrt(math.pi) * ai

    def w_plus(self, x: np.ndarray) -> np.ndarray:
        _, _, bi, _ = special.airy(self._argument(x))
        return math.sqrt(math.pi) * bi

    def w_minus_prime(self, x: np.ndarray) -> np.ndarray:
        _, aip, _, _ = special.airy(self._argument(x))
        return 2.0 * math.sqrt(math.pi) * self.s ** (-2.0 / 3.0) * aip

    def w_plus_prime(self, x: np.ndarray) -> np.ndarray:
        _, _, _, bip = special.airy(self._argument(x))
        return math.sqrt(math.pi) * self.s ** (-2.0 / 3.0) * bip

    def wronskian(self) -> float:
        """W_- W_+' - W_-' W_+ = 2 s^{-2/3}."""
        return 2.0 * self.s ** (-2.0 / 3.0)

    def particular(
        self, source: Callable[[float], float], x_bar: float, x: np.ndarray
    ) -> np.ndarray:
        """Variation-of-constants solution of -s^2 W'' + (x - z_s) W = R.

        W(x) = s^{-4/3}/2 (W_+(x) int_x^{x_bar} R W_- + W_-(x) int_0^x R W_+).
        """
        xs = np.atleast_1d(np.asarray(x, dtype=float))
        out = np.empty_like(xs)
        for i, xi in enumerate(xs):
            upper, _ = integrate.quad(
                lambda z: source(z) * float(self.w_minus(z)), xi, x_bar, limit=200
            )
            lower, _ = integrate.quad(
                lambda z: source(z) * float(self.w_plus(z)), 0.0, xi, limit=200
            )
            out[i] = float(self.w_plus(xi)) * upper + float(self.w_minus(xi)) * lower
        return 0.5 * self.s ** (-4.0 / 3.0) * out


def airy_basis(s: float, z_s: float) -> AiryBasis:
    if s <= 0.0:
        raise ValueError(f"s={s} must be positive")
    return AiryBasis(s=s, z_s=z_s)


def _inverse_square(y: np.ndarray) -> np.ndarray:
    return y**-2


def measure_localization(
    profile: np.ndarray, grid: CuspGrid, t: float, alpha: float
) -> float:
    """Share of the weighted mass of ``profile`` beyond y = 1 + 2 t^alpha."""
    total = integrate_profile(grid, profile, 1.0, _inverse_square)
    if total == 0.0:
        return 0.0
    tail = integrate_profile(grid, profile, 1.0 + 2.0 * t**alpha, _inverse_square)
    return tail / total
