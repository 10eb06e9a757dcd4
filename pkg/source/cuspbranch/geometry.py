"""
Triangle moduli and the normalising diffeomorphism onto the half-strip.

A cusped triangle T_{c,w} = {0 <= x <= w, (x - c)^2 + y^2 > 1} is straightened
onto S = [0, 1] x [1, inf) by phi_{c,w}(x, y) = (x / w, F_c(x, y)) where
F_c(x, y) = B_{f_c(x)}(y) below the height alpha_bar and y above it, with
f_c(x) = sqrt(1 - (x - c)^2) the lower boundary arc and B_alpha the cubic family
built below. Pulling the Dirichlet form back through phi gives the weights rho
and Q used by the assembly code.
"""

import logging
import math
from dataclasses import dataclass
from typing import Iterable, List, Optional, Tuple

import numpy as np
from numpy.polynomial import Polynomial

from cuspbranch.utils.errors import (
    DegenerateAlpha,
    MonotonicityFailure,
    NotMonotone,
    OutOfModuli,
)

logger = logging.getLogger(__name__)

__all__ = [
    "TriangleParams",
    "CubicB",
    "DiffeoFields",
    "triangle_from_angles",
    "triangle_angles",
    "moduli_grid",
    "build_cubic",
    "invert_cubic",
    "phi_fields",
    "degenerating_fields",
    "p_poly",
    "p_poly_fd",
    "GENERIC_ALPHA_BAR_MIN",
]

# Above this height every B_alpha, alpha in (0, 1], is strictly increasing.
GENERIC_ALPHA_BAR_MIN = 2.0 + math.sqrt(3.0)

BOUNDARY_TOL = 1e-12
INVERSE_TOL = 1e-13
MONOTONICITY_GRID = 64


@dataclass(frozen=True)
class TriangleParams:
    """Parameters (c, w) of the cusped triangle T_{c,w}.

    Any 0 <= c < 1, c < w < c + 1 describes a triangle with angles
    theta1 = arccos(c) and theta2 = arccos(w - c). The moduli space M keeps
    the representative with w >= 2c; points with w < 2c are its mirror
    images and are accepted with ``in_moduli`` False.
    """

    c: float
    w: float

    def __post_init__(self) -> None:
        if not (0.0 <= self.c < 1.0):
            raise OutOfModuli(f"c={self.c} outside [0, 1)")
        if not (self.c < self.w < self.c + 1.0):
            raise OutOfModuli(
                f"w={self.w} outside ({self.c}, {self.c + 1.0}) for c={self.c}"
            )

    @property
    def theta1(self) -> float:
        return math.acos(self.c)

    @property
    def theta2(self) -> float:
        return math.acos(self.w - self.c)

    @property
    def on_boundary(self) -> bool:
        return abs(self.w - 2.0 * self.c) <= BOUNDARY_TOL or abs(
            self.w - self.c - 1.0
        ) <= BOUNDARY_TOL

    @property
    def in_moduli(self) -> bool:
        return self.w >= 2.0 * self.c - BOUNDARY_TOL

    def canonical(self) -> "TriangleParams":
        """Isometric representative inside the closed moduli space."""
        if self.in_moduli:
            return self
        # reflection x -> w - x exchanges the two angles
        return TriangleParams(c=self.w - self.c, w=self.w)


def triangle_from_angles(theta1: float, theta2: float) -> TriangleParams:
    """Build (c, w) from the two finite angles of a cusped triangle.

    Args:
        theta1: angle at the vertex on x = 0, in (0, pi/2)
        theta2: angle at the vertex on x = w, in (0, pi/2)

    Returns:
        TriangleParams with c = cos(theta1), w = c + cos(theta2). When
        theta1 < theta2 this has w < 2c: the mirror image of a moduli point,
        returned as is with ``in_moduli`` False (``canonical()`` swaps the
        angles back)

    Raises:
        OutOfModuli: if an angle is outside (0, pi/2)
    """
    for name, theta in (("theta1", theta1), ("theta2", theta2)):
        if not (0.0 < theta < 0.5 * math.pi):
            raise OutOfModuli(f"{name}={theta} outside (0, pi/2)")
    c = math.cos(theta1)
    params = TriangleParams(c=c, w=c + math.cos(theta2))
    if params.on_boundary:
        logger.info("Triangle (%.6g, %.6g) lies on the moduli boundary", c, params.w)
    return params


def triangle_angles(params: TriangleParams) -> Tuple[float, float]:
    return params.theta1, params.theta2


def moduli_grid(
    c_values: Iterable[float], w_fractions: Iterable[float]
) -> List[TriangleParams]:
    """Interior grid of M: for each c, w = 2c + s (1 - c) with s in (0, 1)."""
    grid = []
    fractions = list(w_fractions)
    for c in c_values:
        for s in fractions:
            if not (0.0 < s < 1.0):
                raise OutOfModuli(f"w fraction {s} must lie in (0, 1)")
            grid.append(TriangleParams(c=c, w=2.0 * c + s * (1.0 - c)))
    return grid


def _cubic_coefficients(
    alpha: np.ndarray, alpha_bar: float
) -> Tuple[np.ndarray, np.ndarray]:
    """Monomial coefficients of B_alpha and of d/d alpha B_alpha.

    Returns two arrays of shape (4, ...) holding c0..c3 and their
    alpha-derivatives, broadcast over ``alpha``.
    """
    a = np.asarray(alpha, dtype=float)
    ab = float(alpha_bar)
    gap = ab - a
    # Q_alpha(alpha_bar) = int_alpha^alpha_bar z (alpha_bar - z) dz
    qb = gap**2 * (ab + 2.0 * a) / 6.0
    num = ab**2 - 2.0 * ab + a**2 - a * gap**2
    big_a = num / (2.0 * ab * qb)
    big_c = 1.0 - a**2 / (2.0 * ab) + a * gap**2 / (2.0 * ab)
    q0 = ab * a**2 / 2.0 - a**3 / 3.0

    coeffs = np.stack(
        [
            -big_a * q0 - a * ab / 2.0 + big_c,
            a,
            big_a * ab / 2.0 + 1.0 / (2.0 * ab) - a / (2.0 * ab),
            -big_a / 3.0,
        ]
    )

    d_num = 2.0 * a - gap**2 + 2.0 * a * gap
    d_qb = -a * gap
    d_big_a = (d_num * qb - num * d_qb) / (2.0 * ab * qb**2)
    d_big_c = -a / ab + (gap**2 - 2.0 * a * gap) / (2.0 * ab)
    d_q0 = a * gap
    d_coeffs = np.stack(
        [
            -d_big_a * q0 - big_a * d_q0 - ab / 2.0 + d_big_c,
            np.ones_like(a),
            d_big_a * ab / 2.0 - 1.0 / (2.0 * ab),
            -d_big_a / 3.0,
        ]
    )
    return coeffs, d_coeffs


def _horner(coeffs: np.ndarray, y: np.ndarray) -> np.ndarray:
    return coeffs[0] + y * (coeffs[1] + y * (coeffs[2] + y * coeffs[3]))


def _horner_dy(coeffs: np.ndarray, y: np.ndarray) -> np.ndarray:
    return coeffs[1] + y * (2.0 * coeffs[2] + 3.0 * y * coeffs[3])


def _horner_dyy(coeffs: np.ndarray, y: np.ndarray) -> np.ndarray:
    return 2.0 * coeffs[2] + 6.0 * y * coeffs[3]


def _min_slope(coeffs: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Exact minimum of the quadratic B' over [lo, hi]."""
    candidates = [_horner_dy(coeffs, lo), _horner_dy(coeffs, hi)]
    curvature = 6.0 * coeffs[3]
    with np.errstate(divide="ignore", invalid="ignore"):
        vertex = np.where(curvature != 0.0, -2.0 * coeffs[2] / curvature, lo)
    inside = (vertex > lo) & (vertex < hi)
    candidates.append(np.where(inside, _horner_dy(coeffs, vertex), np.inf))
    return np.minimum.reduce(candidates)


def _solve_cubic(
    coeffs: np.ndarray,
    target: np.ndarray,
    lo: np.ndarray,
    hi: np.ndarray,
    tol: float = INVERSE_TOL,
    max_iter: int = 200,
) -> np.ndarray:
    """Vectorized bracketed Newton with bisection fallback for B(y) = target."""
    lo = np.array(lo, dtype=float, copy=True)
    hi = np.array(hi, dtype=float, copy=True)
    y = np.clip(target, lo, hi)
    for _ in range(max_iter):
        residual = _horner(coeffs, y) - target
        if np.all(np.abs(residual) <= tol):
            break
        lo = np.where(residual < 0.0, y, lo)
        hi = np.where(residual > 0.0, y, hi)
        slope = _horner_dy(coeffs, y)
        with np.errstate(divide="ignore", invalid="ignore"):
            newton = y - residual / slope
        ok = (slope > 0.0) & (newton > lo) & (newton < hi)
        y = np.where(residual == 0.0, y, np.where(ok, newton, 0.5 * (lo + hi)))
    return y


@dataclass(frozen=True)
class CubicB:
    """The cubic B_alpha.

    B(alpha) = 1, B'(0) = alpha, B(alpha_bar) = alpha_bar and B'(alpha_bar) = 1.
    """

    alpha: float
    alpha_bar: float
    coefficients: Tuple[float, float, float, float]
    alpha_derivative: Tuple[float, float, float, float]

    def _c(self) -> np.ndarray:
        return np.asarray(self.coefficients)

    def value(self, y: np.ndarray) -> np.ndarray:
        return _horner(self._c(), np.asarray(y, dtype=float))

    def slope(self, y: np.ndarray) -> np.ndarray:
        return _horner_dy(self._c(), np.asarray(y, dtype=float))

    def d_alpha(self, y: np.ndarray) -> np.ndarray:
        return _horner(np.asarray(self.alpha_derivative), np.asarray(y, dtype=float))

    def polynomial(self) -> Polynomial:
        return Polynomial(self.coefficients)

    def min_slope(self, lo: float, hi: float) -> float:
        return float(_min_slope(self._c(), np.asarray(lo), np.asarray(hi)))


def build_cubic(alpha: float, alpha_bar: float) -> CubicB:
    """Closed-form cubic B_alpha.

    Raises:
        DegenerateAlpha: when alpha >= alpha_bar
    """
    if alpha >= alpha_bar:
        raise DegenerateAlpha(f"alpha={alpha} must be below alpha_bar={alpha_bar}")
    if alpha <= 0.0:
        raise DegenerateAlpha(f"alpha={alpha} must be positive")
    coeffs, d_coeffs = _cubic_coefficients(np.asarray(alpha), alpha_bar)
    return CubicB(
        alpha=float(alpha),
        alpha_bar=float(alpha_bar),
        coefficients=tuple(float(v) for v in coeffs),  # type: ignore[arg-type]
        alpha_derivative=tuple(float(v) for v in d_coeffs),  # type: ignore[arg-type]
    )


def invert_cubic(cubic: CubicB, b: float) -> float:
    """Y_alpha(b): the y in [alpha, alpha_bar] with B_alpha(y) = b.

    Raises:
        NotMonotone: if B_alpha' <= 0 somewhere on [alpha, alpha_bar]
    """
    lo, hi = min(cubic.alpha, cubic.alpha_bar), cubic.alpha_bar
    if cubic.min_slope(lo, hi) <= 0.0:
        raise NotMonotone(
            f"B_alpha' is not positive on [{lo}, {hi}] for alpha={cubic.alpha}"
        )
    y = _solve_cubic(
        cubic._c(), np.asarray(float(b)), np.asarray(lo), np.asarray(hi)
    )
    return float(y)


def p_poly(alpha_bar: float) -> Polynomial:
    """p(b) = -d/d alpha B_alpha(b) at alpha = 1."""
    _, d_coeffs = _cubic_coefficients(np.asarray(1.0), alpha_bar)
    return Polynomial(-d_coeffs)


def p_poly_fd(alpha_bar: float, h: float = 1e-6) -> Polynomial:
    """Central-difference cross-check of :func:`p_poly`."""
    plus, _ = _cubic_coefficients(np.asarray(1.0 + h), alpha_bar)
    minus, _ = _cubic_coefficients(np.asarray(1.0 - h), alpha_bar)
    return Polynomial(-(plus - minus) / (2.0 * h))


@dataclass(frozen=True)
class PullbackCoefficients:
    """Pointwise coefficients of the pulled-back energy on S_-.

    The energy density is grad(rho u) . G . grad(rho u) with grad = (d_a, d_b).
    """

    rho: np.ndarray
    rho_a: np.ndarray
    rho_b: np.ndarray
    metric: np.ndarray  # (..., 2, 2)


@dataclass(frozen=True)
class DiffeoFields:
    """Evaluators of phi_{c,w}, its inverse, Jacobian and pulled-back weights.

    With ``renormalized`` set (the degenerating family c = 0, w = t), rho and Q
    are the rescaled rho~_t and Q~_t and the effective metric is
    diag(1, t) Q~_t diag(1, t), so that the assembled form is t^2 q_{0,t}.
    """

    c: float
    w: float
    alpha_bar: float
    renormalized: bool = False

    @property
    def t(self) -> float:
        return self.w

    def f(self, x: np.ndarray) -> np.ndarray:
        return np.sqrt(1.0 - (np.asarray(x, dtype=float) - self.c) ** 2)

    def f_prime(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return -(x - self.c) / self.f(x)

    def phi(self, x: np.ndarray, y: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        coeffs, _ = _cubic_coefficients(self.f(x), self.alpha_bar)
        b = np.where(y <= self.alpha_bar, _horner(coeffs, y), y)
        return x / self.w, b

    def phi_inverse(
        self, a: np.ndarray, b: np.ndarray
    ) -> Tuple[np.ndarray, np.ndarray]:
        a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
        x = self.w * a
        alpha = self.f(x)
        coeffs, _ = _cubic_coefficients(alpha, self.alpha_bar)
        below = b <= self.alpha_bar
        y = _solve_cubic(
            coeffs,
            np.where(below, b, self.alpha_bar),
            alpha,
            np.full_like(alpha, self.alpha_bar),
        )
        return x, np.where(below, y, b)

    def jacobian(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        coeffs, d_coeffs = _cubic_coefficients(self.f(x), self.alpha_bar)
        below = y <= self.alpha_bar
        f_x = np.where(below, _horner(d_coeffs, y) * self.f_prime(x), 0.0)
        f_y = np.where(below, _horner_dy(coeffs, y), 1.0)
        jac = np.zeros(x.shape + (2, 2))
        jac[..., 0, 0] = 1.0 / self.w
        jac[..., 1, 0] = f_x
        jac[..., 1, 1] = f_y
        return jac

    def _pullback(self, a: np.ndarray, b: np.ndarray) -> dict:
        a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
        x = self.w * a
        alpha = self.f(x)
        d_alpha = self.w * self.f_prime(x)
        coeffs, d_coeffs = _cubic_coefficients(alpha, self.alpha_bar)
        below = b <= self.alpha_bar
        b_in = np.where(below, b, self.alpha_bar)
        y = _solve_cubic(coeffs, b_in, alpha, np.full_like(alpha, self.alpha_bar))

        b_y = _horner_dy(coeffs, y)
        b_yy = _horner_dyy(coeffs, y)
        b_alpha = _horner(d_coeffs, y)
        b_y_alpha = _horner_dy(d_coeffs, y)

        y_b = 1.0 / b_y
        y_a = -b_alpha * d_alpha / b_y
        sqrt_by = np.sqrt(b_y)
        rho0 = (y / b_in) * sqrt_by
        rho0_b = (y_b * b_in - y) / b_in**2 * sqrt_by + (y / b_in) * 0.5 / sqrt_by * (
            b_yy * y_b
        )
        rho0_a = (y_a / b_in) * sqrt_by + (y / b_in) * 0.5 / sqrt_by * (
            b_y_alpha * d_alpha + b_yy * y_a
        )
        # d/dx of F_c at fixed y
        f_x = b_alpha * self.f_prime(x)
        return {
            "below": below,
            "y": y,
            "b_y": b_y,
            "f_x": f_x,
            "rho0": np.where(below, rho0, 1.0),
            "rho0_a": np.where(below, rho0_a, 0.0),
            "rho0_b": np.where(below, rho0_b, 0.0),
        }

    def rho(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        rho0 = self._pullback(a, b)["rho0"]
        return rho0 if self.renormalized else rho0 / math.sqrt(self.w)

    def grad_rho(self, a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        pb = self._pullback(a, b)
        scale = 1.0 if self.renormalized else 1.0 / math.sqrt(self.w)
        return pb["rho0_a"] * scale, pb["rho0_b"] * scale

    def q_matrix(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        """Q_{c,w}, or Q~_t for the renormalized family (unit determinant)."""
        pb = self._pullback(a, b)
        below, f_x, b_y = pb["below"], pb["f_x"], pb["b_y"]
        w = 1.0 if self.renormalized else self.w
        q = np.zeros(below.shape + (2, 2))
        q[..., 0, 0] = np.where(below, 1.0 / (w * b_y), 1.0 / w)
        off = np.where(below, f_x / b_y, 0.0)
        q[..., 0, 1] = off
        q[..., 1, 0] = off
        q[..., 1, 1] = np.where(below, w * (f_x**2 + b_y**2) / b_y, w)
        return q

    def coefficients(self, a: np.ndarray, b: np.ndarray) -> PullbackCoefficients:
        pb = self._pullback(a, b)
        q = self.q_matrix(a, b)
        if self.renormalized:
            scale = np.array([1.0, self.t])
            metric = q * scale[:, None] * scale[None, :]
            return PullbackCoefficients(pb["rho0"], pb["rho0_a"], pb["rho0_b"], metric)
        s = 1.0 / math.sqrt(self.w)
        return PullbackCoefficients(pb["rho0"] * s, pb["rho0_a"] * s, pb["rho0_b"] * s, q)

    def cusp_metric(self) -> Tuple[float, float]:
        """Diagonal (g_aa, g_bb) of rho^2 Q on b >= alpha_bar."""
        if self.renormalized:
            return 1.0, self.t**2
        return 1.0 / self.w**2, 1.0


def _check_monotone(
    fields: DiffeoFields, threshold: float, n: int = MONOTONICITY_GRID
) -> None:
    xs = np.linspace(0.0, fields.w, n)
    alpha = fields.f(xs)
    s = np.linspace(0.0, 1.0, n)
    x_grid = np.repeat(xs[:, None], n, axis=1)
    y_grid = alpha[:, None] + s[None, :] * (fields.alpha_bar - alpha[:, None])
    coeffs, _ = _cubic_coefficients(alpha[:, None], fields.alpha_bar)
    slope = _horner_dy(coeffs, y_grid)
    bad = slope <= threshold
    if np.any(bad):
        i, j = np.argwhere(bad)[0]
        raise MonotonicityFailure(
            f"d_y B = {slope[i, j]:.3g} not above {threshold}",
            float(x_grid[i, j]),
            float(y_grid[i, j]),
        )


def phi_fields(
    params: TriangleParams, alpha_bar: float, validate: Optional[bool] = None
) -> DiffeoFields:
    """Diffeomorphism fields of a (c, w) triangle.

    The grid check runs whenever alpha_bar is below the generic threshold
    (or when ``validate`` forces it).

    Raises:
        MonotonicityFailure: d_y B(f_c(x), y) <= 0 somewhere below alpha_bar
    """
    fields = DiffeoFields(c=params.c, w=params.w, alpha_bar=alpha_bar)
    if validate is None:
        validate = alpha_bar <= GENERIC_ALPHA_BAR_MIN
    if validate:
        _check_monotone(fields, 0.0)
    return fields


def degenerating_fields(t: float, beta: float, alpha_bar: float) -> DiffeoFields:
    """rho~_t and Q~_t of the family T_{0,t} on S_- = [0,1] x [1, alpha_bar].

    Raises:
        MonotonicityFailure: if d_y B(f_0(x), y) >= 1/2 fails on the grid
    """
    if not (0.0 < t < 1.0):
        raise ValueError(f"t={t} must lie in (0, 1)")
    if not (1.0 < alpha_bar < beta):
        raise ValueError(f"alpha_bar={alpha_bar} must lie in (1, beta={beta})")
    fields = DiffeoFields(c=0.0, w=t, alpha_bar=alpha_bar, renormalized=True)
    _check_monotone(fields, 0.5)
    return fields
