"""
Functions on the truncated strip S = [0, 1] x [1, y_max].

A function is stored as Fourier cosine modes in x (e_0 = 1,
e_k = sqrt(2) cos(k pi x)) times continuous piecewise-linear profiles in y on
a graded mesh. The zeroth profile of a truncated function vanishes for y >= beta.
"""

import logging
import math
from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
from scipy import sparse

from cuspbranch.utils.errors import BetaNotOnGrid, GridMismatch, ModeOutOfRange

logger = logging.getLogger(__name__)

__all__ = [
    "CuspGrid",
    "ModeFunction",
    "DofMap",
    "build_grid",
    "uniform_grid",
    "default_y_max",
    "assemble_profile_matrix",
    "element_quadrature",
    "p1_matrix",
    "integrate_profile",
    "inner_product",
    "norm",
    "project_mode",
    "project_below",
    "truncate_zero_mode",
    "basis",
    "basis_derivative",
    "save_csv",
    "load_csv",
    "save_binary",
    "load_binary",
]

QUAD_ORDER = 4
NODE_TOL = 1e-12
BINARY_MAGIC = b"CUSPMF01"
_BINARY_HEADER = np.dtype([("magic", "S8"), ("k_max", "<u4"), ("n_nodes", "<u4")])


def basis(k: int, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if k == 0:
        return np.ones_like(x)
    return math.sqrt(2.0) * np.cos(k * math.pi * x)


def basis_derivative(k: int, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if k == 0:
        return np.zeros_like(x)
    return -math.sqrt(2.0) * k * math.pi * np.sin(k * math.pi * x)


@dataclass(frozen=True, eq=False)
class CuspGrid:
    """Ordered y-nodes on [1, y_max] with beta (and alpha_bar) as exact nodes."""

    y_nodes: np.ndarray
    beta_index: int
    alpha_bar_index: Optional[int] = None
    h_min: float = 0.05
    h_max: float = 0.05
    layer_width: float = 0.0
    quad_order: int = QUAD_ORDER

    def __post_init__(self) -> None:
        y = self.y_nodes
        if y[0] != 1.0 or np.any(np.diff(y) <= 0.0):
            raise ValueError("y_nodes must start at 1 and increase strictly")

    @property
    def n_nodes(self) -> int:
        return int(self.y_nodes.size)

    @property
    def n_cells(self) -> int:
        return self.n_nodes - 1

    @property
    def beta(self) -> float:
        return float(self.y_nodes[self.beta_index])

    @property
    def y_max(self) -> float:
        return float(self.y_nodes[-1])

    @property
    def alpha_bar(self) -> Optional[float]:
        if self.alpha_bar_index is None:
            return None
        return float(self.y_nodes[self.alpha_bar_index])

    def node_index(self, y: float) -> int:
        i = int(np.argmin(np.abs(self.y_nodes - y)))
        if abs(self.y_nodes[i] - y) > NODE_TOL * max(1.0, abs(y)):
            raise BetaNotOnGrid(f"{y} is not a node of the grid")
        return i

    def extended(self, y_max: float) -> "CuspGrid":
        """The same nodes continued at the last cell width up to at least ``y_max``."""
        y = self.y_nodes
        h = float(y[-1] - y[-2])
        extra = max(0, math.ceil((y_max - y[-1]) / h - NODE_TOL))
        tail = y[-1] + h * np.arange(1, extra + 1)
        return replace(self, y_nodes=np.concatenate([y, tail]))

    def same_as(self, other: "CuspGrid") -> bool:
        return self is other or (
            self.beta_index == other.beta_index
            and np.array_equal(self.y_nodes, other.y_nodes)
        )

    @cached_property
    def quadrature(self) -> dict:
        return element_quadrature(self.y_nodes, self.quad_order)

    @cached_property
    def weighted_mass(self) -> sparse.csr_matrix:
        return assemble_profile_matrix(self, weight=lambda y: y**-2)

    @cached_property
    def plain_mass(self) -> sparse.csr_matrix:
        return assemble_profile_matrix(self)

    @cached_property
    def stiffness(self) -> sparse.csr_matrix:
        return assemble_profile_matrix(self, derivative=True)


def element_quadrature(nodes: np.ndarray, order: int = QUAD_ORDER) -> dict:
    """Per-cell Gauss points, weights and P1 shape values, arrays of (cells, points)."""
    ref_x, ref_w = np.polynomial.legendre.leggauss(order)
    left = nodes[:-1, None]
    h = np.diff(nodes)[:, None]
    s = np.broadcast_to(0.5 * (ref_x + 1.0)[None, :], (h.shape[0], order))
    points = left + h * s
    weights = 0.5 * h * ref_w[None, :]
    shape = np.stack([1.0 - s, s], axis=-1)
    inv_h = np.broadcast_to(1.0 / h, s.shape)
    dshape = np.stack([-inv_h, inv_h], axis=-1)
    return {"points": points, "weights": weights, "shape": shape, "dshape": dshape}


def p1_matrix(
    nodes: np.ndarray,
    weight: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    derivative: bool = False,
    cells: Optional[np.ndarray] = None,
    quadrature: Optional[dict] = None,
) -> sparse.csr_matrix:
    """int N_n N_m weight (or int N_n' N_m' weight) over the selected cells."""
    quad = quadrature if quadrature is not None else element_quadrature(nodes)
    n_nodes = nodes.size
    cell_ids = np.arange(n_nodes - 1) if cells is None else np.asarray(cells, dtype=int)
    values = (quad["dshape"] if derivative else quad["shape"])[cell_ids]
    w = quad["weights"][cell_ids]
    if weight is not None:
        w = w * weight(quad["points"][cell_ids])
    local = np.einsum("cq,cqi,cqj->cij", w, values, values)
    rows = cell_ids[:, None, None] + np.array([0, 1])[None, :, None]
    cols = cell_ids[:, None, None] + np.array([0, 1])[None, None, :]
    rows, cols = np.broadcast_arrays(rows, cols)
    mat = sparse.coo_matrix(
        (local.ravel(), (rows.ravel(), cols.ravel())), shape=(n_nodes, n_nodes)
    )
    return mat.tocsr()


def assemble_profile_matrix(
    grid: CuspGrid,
    weight: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    derivative: bool = False,
    cells: Optional[np.ndarray] = None,
) -> sparse.csr_matrix:
    """1-D P1 matrix on the grid's y-nodes, reusing its cached quadrature."""
    return p1_matrix(grid.y_nodes, weight, derivative, cells, grid.quadrature)


def integrate_profile(
    grid: CuspGrid,
    values: np.ndarray,
    y_from: float = 1.0,
    weight: Optional[Callable[[np.ndarray], np.ndarray]] = None,
    power: int = 2,
) -> float:
    """int_{y_from}^{y_max} |v|^power weight dy for the P1 interpolant of ``values``."""
    quad = grid.quadrature
    y = grid.y_nodes
    start = int(np.searchsorted(y, y_from, side="right")) - 1
    start = min(max(start, 0), grid.n_cells - 1)
    total = 0.0
    full = np.arange(start + 1, grid.n_cells)
    if full.size:
        vals = np.einsum("cqj,cj->cq", quad["shape"][full], _cell_values(values, full))
        w = quad["weights"][full]
        if weight is not None:
            w = w * weight(quad["points"][full])
        total += float(np.sum(w * np.abs(vals) ** power))
    # partial first cell [max(y_from, y_start), y_{start+1}]
    lo = max(y_from, y[start])
    hi = y[start + 1]
    if hi > lo:
        ref_x, ref_w = np.polynomial.legendre.leggauss(grid.quad_order)
        pts = lo + 0.5 * (ref_x + 1.0) * (hi - lo)
        vals = np.interp(pts, y[start : start + 2], values[start : start + 2])
        w = 0.5 * (hi - lo) * ref_w
        if weight is not None:
            w = w * weight(pts)
        total += float(np.sum(w * np.abs(vals) ** power))
    return total


def _cell_values(values: np.ndarray, cells: np.ndarray) -> np.ndarray:
    return np.stack([values[cells], values[cells + 1]], axis=-1)


def default_y_max(beta: float, e_max: float, ell_min: int = 1) -> float:
    """max(beta + 1, turning point of the lowest nonzero mode + 2)."""
    return max(beta + 1.0, math.sqrt(e_max) / (ell_min * math.pi) + 2.0)


def _segment_nodes(
    start: float, stop: float, spacing: Callable[[float], float]
) -> np.ndarray:
    raw = [start]
    while raw[-1] < stop - NODE_TOL:
        raw.append(raw[-1] + spacing(raw[-1]))
    nodes = np.asarray(raw)
    if nodes.size == 1:
        return np.array([start, stop])
    # squeeze onto [start, stop] so the end point is an exact node
    return start + (nodes - start) * ((stop - start) / (nodes[-1] - start))


def build_grid(
    beta: float,
    y_max: float,
    alpha_bar: Optional[float] = None,
    t_min: Optional[float] = None,
    n_layer: int = 16,
    h_max: float = 0.05,
    core_widths: float = 2.0,
    layer_widths: float = 10.0,
    e_max: Optional[float] = None,
    points_per_wavelength: int = 12,
) -> CuspGrid:
    """Graded mesh resolving the t^{2/3} layer at y = 1.

    Spacing is h_min = t_min^{2/3} / n_layer on [1, 1 + core_widths t_min^{2/3}],
    grows geometrically to h_max at 1 + layer_widths t_min^{2/3} and stays
    there. When ``e_max`` is given, spacing on the oscillatory zone
    [1, max(beta, sqrt(e_max)/pi)] is also capped to resolve wavelengths
    2 pi t_min / sqrt(e_max).
    """
    if y_max <= beta:
        raise ValueError(f"y_max={y_max} must exceed beta={beta}")
    layer_width = t_min ** (2.0 / 3.0) if t_min is not None else 0.0
    h_min = min(h_max, layer_width / n_layer) if t_min is not None else h_max
    core_end = 1.0 + core_widths * layer_width
    layer_end = 1.0 + layer_widths * layer_width
    growth = math.log(h_max / h_min) if h_min < h_max else 0.0
    h_osc = h_max
    osc_end = 1.0
    if e_max is not None and t_min is not None:
        h_osc = 2.0 * math.pi * t_min / (math.sqrt(e_max) * points_per_wavelength)
        osc_end = max(beta, math.sqrt(e_max) / math.pi)

    def spacing(y: float) -> float:
        if y <= core_end or growth == 0.0:
            h = h_min
        elif y >= layer_end:
            h = h_max
        else:
            frac = (y - core_end) / (layer_end - core_end)
            h = h_min * math.exp(growth * frac)
        if y < osc_end:
            h = min(h, h_osc)
        return h

    breaks = sorted({1.0, beta, y_max} | ({alpha_bar} if alpha_bar else set()))
    pieces: List[np.ndarray] = []
    for start, stop in zip(breaks[:-1], breaks[1:]):
        seg = _segment_nodes(start, stop, spacing)
        pieces.append(seg if not pieces else seg[1:])
    y_nodes = np.concatenate(pieces)
    grid = _finish_grid(y_nodes, beta, alpha_bar, h_min, h_max, layer_width)
    logger.debug(
        "Built grid with %d nodes (h_min=%.3g, y_max=%.3g)", grid.n_nodes, h_min, y_max
    )
    return grid


def uniform_grid(
    beta: float, y_max: float, n_cells: int, alpha_bar: Optional[float] = None
) -> CuspGrid:
    """Uniform-spacing grid with beta (and alpha_bar) snapped in as nodes."""
    breaks = sorted({1.0, beta, y_max} | ({alpha_bar} if alpha_bar else set()))
    h = (y_max - 1.0) / n_cells
    pieces: List[np.ndarray] = []
    for start, stop in zip(breaks[:-1], breaks[1:]):
        n = max(1, int(round((stop - start) / h)))
        seg = np.linspace(start, stop, n + 1)
        pieces.append(seg if not pieces else seg[1:])
    return _finish_grid(np.concatenate(pieces), beta, alpha_bar, h, h, 0.0)


def _finish_grid(
    y_nodes: np.ndarray,
    beta: float,
    alpha_bar: Optional[float],
    h_min: float,
    h_max: float,
    layer_width: float,
) -> CuspGrid:
    beta_index = int(np.argmin(np.abs(y_nodes - beta)))
    y_nodes[beta_index] = beta
    ab_index = None
    if alpha_bar is not None:
        ab_index = int(np.argmin(np.abs(y_nodes - alpha_bar)))
        y_nodes[ab_index] = alpha_bar
    return CuspGrid(
        y_nodes=y_nodes,
        beta_index=beta_index,
        alpha_bar_index=ab_index,
        h_min=h_min,
        h_max=h_max,
        layer_width=layer_width,
    )


@dataclass(frozen=True, eq=False)
class ModeFunction:
    """Mode profiles of a function on S; row k multiplies e_k(x)."""

    grid: CuspGrid
    profiles: np.ndarray

    def __post_init__(self) -> None:
        if self.profiles.ndim != 2 or self.profiles.shape[1] != self.grid.n_nodes:
            raise GridMismatch(
                f"profiles of shape {self.profiles.shape} do not match "
                f"{self.grid.n_nodes} grid nodes"
            )

    @property
    def k_max(self) -> int:
        return self.profiles.shape[0] - 1

    @property
    def truncated(self) -> bool:
        return bool(np.all(self.profiles[0, self.grid.beta_index :] == 0.0))

    def profile(self, k: int) -> np.ndarray:
        return self.profiles[k]

    def evaluate(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        out = np.zeros(x.shape)
        for k in range(self.k_max + 1):
            out += basis(k, x) * np.interp(y, self.grid.y_nodes, self.profiles[k])
        return out

    def scaled(self, factor: float) -> "ModeFunction":
        return ModeFunction(self.grid, factor * self.profiles)

    def __add__(self, other: "ModeFunction") -> "ModeFunction":
        _check_compatible(self, other)
        return ModeFunction(self.grid, self.profiles + other.profiles)

    def __sub__(self, other: "ModeFunction") -> "ModeFunction":
        _check_compatible(self, other)
        return ModeFunction(self.grid, self.profiles - other.profiles)

    @classmethod
    def zeros(cls, grid: CuspGrid, k_max: int) -> "ModeFunction":
        return cls(grid, np.zeros((k_max + 1, grid.n_nodes)))

    @classmethod
    def single_mode(
        cls, grid: CuspGrid, k_max: int, k: int, profile: np.ndarray
    ) -> "ModeFunction":
        profiles = np.zeros((k_max + 1, grid.n_nodes))
        profiles[k] = profile
        return cls(grid, profiles)


def _check_compatible(u: ModeFunction, v: ModeFunction) -> None:
    if u.k_max != v.k_max or not u.grid.same_as(v.grid):
        raise GridMismatch("mode functions live on different grids or mode cutoffs")


def inner_product(u: ModeFunction, v: ModeFunction) -> float:
    """sum_k int u^k v^k y^{-2} dy (the L^2(S, y^-2 dx dy) product)."""
    _check_compatible(u, v)
    mass = u.grid.weighted_mass
    return float(np.einsum("kn,kn->", u.profiles, (mass @ v.profiles.T).T))


def norm(u: ModeFunction) -> float:
    return math.sqrt(max(inner_product(u, u), 0.0))


def project_mode(u: ModeFunction, ell: int) -> ModeFunction:
    """Pi_ell: keep only the ell-th Fourier mode."""
    if not (0 <= ell <= u.k_max):
        raise ModeOutOfRange(f"mode {ell} outside 0..{u.k_max}")
    profiles = np.zeros_like(u.profiles)
    profiles[ell] = u.profiles[ell]
    return ModeFunction(u.grid, profiles)


def project_below(u: ModeFunction, k: int) -> ModeFunction:
    """Keep the modes ell < k."""
    if not (0 <= k <= u.k_max + 1):
        raise ModeOutOfRange(f"cutoff {k} outside 0..{u.k_max + 1}")
    profiles = np.zeros_like(u.profiles)
    profiles[:k] = u.profiles[:k]
    return ModeFunction(u.grid, profiles)


def truncate_zero_mode(u: ModeFunction, beta: float) -> ModeFunction:
    index = u.grid.node_index(beta)
    profiles = u.profiles.copy()
    profiles[0, index:] = 0.0
    return ModeFunction(u.grid, profiles)


class DofMap:
    """Mode-major numbering of the free nodal values of truncated functions.

    Mode 0 is free on nodes y < beta; modes k >= 1 are free on all nodes but
    y_max, where a homogeneous Dirichlet condition stands in for decay.
    """

    def __init__(self, grid: CuspGrid, k_max: int):
        self.grid = grid
        self.k_max = k_max
        self.free_nodes: List[np.ndarray] = [np.arange(grid.beta_index)] + [
            np.arange(grid.n_nodes - 1) for _ in range(k_max)
        ]
        sizes = [nodes.size for nodes in self.free_nodes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)

    @property
    def size(self) -> int:
        return int(self.offsets[-1])

    def mode_slice(self, k: int) -> slice:
        return slice(int(self.offsets[k]), int(self.offsets[k + 1]))

    def nodal_indices(self) -> np.ndarray:
        """Positions of the free dofs in the full (mode, node) numbering k * N + node."""
        n = self.grid.n_nodes
        return np.concatenate(
            [k * n + nodes for k, nodes in enumerate(self.free_nodes)]
        ).astype(int)

    def restrict_full(self, mat: sparse.spmatrix) -> sparse.csr_matrix:
        """Restrict a full (K+1) N square matrix to the free dofs."""
        idx = self.nodal_indices()
        return sparse.csr_matrix(mat)[idx][:, idx]

    def global_index(self, k: int, nodes: np.ndarray) -> np.ndarray:
        """Global dof of (k, node) or -1 when the node is constrained."""
        lookup = np.full(self.grid.n_nodes, -1, dtype=int)
        lookup[self.free_nodes[k]] = np.arange(self.free_nodes[k].size) + self.offsets[k]
        return lookup[nodes]

    def to_vector(self, u: ModeFunction) -> np.ndarray:
        if u.k_max != self.k_max or not u.grid.same_as(self.grid):
            raise GridMismatch("mode function does not match the dof map")
        return np.concatenate(
            [u.profiles[k, nodes] for k, nodes in enumerate(self.free_nodes)]
        )

    def from_vector(self, vec: np.ndarray) -> ModeFunction:
        profiles = np.zeros((self.k_max + 1, self.grid.n_nodes))
        for k, nodes in enumerate(self.free_nodes):
            profiles[k, nodes] = vec[self.mode_slice(k)]
        return ModeFunction(self.grid, profiles)


PathLike = Union[str, Path]


def save_csv(u: ModeFunction, path: PathLike) -> None:
    """Columnar CSV: y, profile_0, ..., profile_K."""
    columns = {"y": u.grid.y_nodes}
    for k in range(u.k_max + 1):
        columns[f"profile_{k}"] = u.profiles[k]
    pd.DataFrame(columns).to_csv(path, index=False, float_format="%.17g")


def load_csv(path: PathLike, grid: CuspGrid) -> ModeFunction:
    frame = pd.read_csv(path)
    if not np.allclose(frame["y"].to_numpy(), grid.y_nodes, rtol=0.0, atol=1e-14):
        raise GridMismatch(f"{path} was written on a different grid")
    cols: Sequence[str] = [c for c in frame.columns if c.startswith("profile_")]
    return ModeFunction(grid, frame[list(cols)].to_numpy().T.copy())


def save_binary(u: ModeFunction, path: PathLike) -> None:
    """Header (magic, K_max, node count) then little-endian doubles: y nodes, profiles."""
    header = np.array([(BINARY_MAGIC, u.k_max, u.grid.n_nodes)], dtype=_BINARY_HEADER)
    with open(path, "wb") as handle:
        handle.write(header.tobytes())
        handle.write(u.grid.y_nodes.astype("<f8").tobytes())
        handle.write(u.profiles.astype("<f8").tobytes())


def load_binary(path: PathLike, grid: CuspGrid) -> ModeFunction:
    raw = Path(path).read_bytes()
    header = np.frombuffer(raw[: _BINARY_HEADER.itemsize], dtype=_BINARY_HEADER)[0]
    if header["magic"] != BINARY_MAGIC:
        raise ValueError(f"{path} is not a mode-function dump")
    k_max, n_nodes = int(header["k_max"]), int(header["n_nodes"])
    body = np.frombuffer(raw[_BINARY_HEADER.itemsize :], dtype="<f8")
    y_nodes, values = body[:n_nodes], body[n_nodes:]
    if n_nodes != grid.n_nodes or not np.array_equal(y_nodes, grid.y_nodes):
        raise GridMismatch(f"{path} was written on a different grid")
    return ModeFunction(grid, values.reshape(k_max + 1, n_nodes).copy())
