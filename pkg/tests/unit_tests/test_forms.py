import numpy as np
import pytest

from cuspbranch.forms import (
    assemble_a,
    assemble_a_tilde,
    assemble_b,
    assemble_dots,
    assemble_moduli,
    assemble_q,
    check_expansion,
    dump_coordinates,
    solve_generalized,
    solve_lowest,
)
from cuspbranch.geometry import TriangleParams, degenerating_fields
from cuspbranch.model import zero_mode_spectrum
from cuspbranch.modespace import (
    DofMap,
    ModeFunction,
    basis,
    basis_derivative,
    element_quadrature,
    uniform_grid,
)
from cuspbranch.utils.constant import FormKind
from cuspbranch.utils.errors import StepTooSmall


def _test_function(dofmap, rng):
    grid = dofmap.grid
    y = grid.y_nodes
    profiles = np.zeros((dofmap.k_max + 1, grid.n_nodes))
    for k in range(dofmap.k_max + 1):
        profiles[k] = np.polynomial.polynomial.polyval(y - 1.0, rng.standard_normal(3))
        profiles[k] *= np.exp(-2.0 * (y - 1.0) ** 2)
    profiles[0] *= np.clip(grid.beta - y, 0.0, None)
    profiles[:, -1] = 0.0
    return ModeFunction(grid, profiles)


def _cusp_function(dofmap):
    grid = dofmap.grid
    y = grid.y_nodes
    start = grid.alpha_bar_index + 1
    profiles = np.zeros((dofmap.k_max + 1, grid.n_nodes))
    for k in range(1, dofmap.k_max + 1):
        profiles[k, start:-1] = np.sin(np.pi * (y[start:-1] - y[start]) / (y[-1] - y[start]))
    return ModeFunction(grid, profiles)


class TestModelForm:
    def test_block_diagonal(self, coarse_dofmap):
        form = assemble_a(0.2, coarse_dofmap)
        assert form.kind is FormKind.A_MODEL
        assert form.off_block_max() == 0.0
        assert abs(form.A - form.A.T).max() == pytest.approx(0.0, abs=1e-14)

    def test_zero_mode_matches_exact_spectrum(self, dofmap):
        t = 0.5
        result = solve_lowest(assemble_a(t, dofmap), 2)
        exact = zero_mode_spectrum(t, dofmap.grid.beta, 1).eigenvalues[0]
        assert result.eigenvalues[0] == pytest.approx(exact, rel=1e-3)
        assert result.method == "dense"
        assert np.all(result.residuals <= 1e-9)

    def test_eigenvectors_are_mass_orthonormal(self, coarse_dofmap):
        form = assemble_a(0.3, coarse_dofmap)
        result = solve_lowest(form, 4)
        gram = result.vectors.T @ (form.M @ result.vectors)
        np.testing.assert_allclose(gram, np.eye(4), atol=1e-10)
        assert np.all(np.diff(result.eigenvalues) >= 0.0)
        u = result.eigenvectors[0]
        assert form.evaluate(u) / form.mass(u) == pytest.approx(result.eigenvalues[0])

    @pytest.mark.parametrize("t", [0.01, 0.1, 1.0])
    def test_poincare_bound(self, coarse_dofmap, t):
        lowest = solve_lowest(assemble_a(t, coarse_dofmap), 1).eigenvalues[0]
        assert lowest >= t**2 / 4.0 * (1.0 - 1e-6)

    def test_a_tilde_adds_the_mass(self, coarse_dofmap, rng):
        form = assemble_a(0.3, coarse_dofmap)
        u = _test_function(coarse_dofmap, rng)
        shifted = assemble_a_tilde(form)
        assert shifted.kind is FormKind.A_TILDE
        assert shifted.evaluate(u) == pytest.approx(form.evaluate(u) + form.mass(u))


class TestSolver:
    def test_shift_selects_nearest(self, coarse_dofmap):
        form = assemble_a(0.3, coarse_dofmap)
        lowest = solve_lowest(form, 6).eigenvalues
        near = solve_lowest(form, 2, sigma=lowest[4]).eigenvalues
        assert np.min(np.abs(near - lowest[4])) <= 1e-9 * lowest[4]

    def test_sparse_path_agrees_with_dense(self, coarse_dofmap):
        form = assemble_a(0.3, coarse_dofmap)
        dense, _, _, _ = solve_generalized(form.A, form.M, 3)
        sparse_values, _, errors, method = solve_generalized(form.A, form.M, 3, dense_limit=10)
        assert method in ("lanczos", "dense")
        np.testing.assert_allclose(sparse_values, dense, rtol=1e-8)
        assert np.all(errors <= 1e-9)


class TestTruncatedForm:
    def test_symmetric_and_positive(self, coarse_dofmap):
        form = assemble_q(0.2, coarse_dofmap)
        assert form.kind is FormKind.Q
        assert abs(form.A - form.A.T).max() == 0.0
        assert solve_lowest(form, 1).eigenvalues[0] > 0.0

    def test_agrees_with_model_on_the_cusp(self, coarse_dofmap):
        u = _cusp_function(coarse_dofmap)
        for t in (0.05, 0.2):
            q = assemble_q(t, coarse_dofmap).evaluate(u)
            a = assemble_a(t, coarse_dofmap).evaluate(u)
            assert q == pytest.approx(a, rel=1e-10)
        assert assemble_b(0.2, coarse_dofmap).evaluate(u) == pytest.approx(0.0, abs=1e-12)

    def test_needs_alpha_bar_node(self):
        dofmap = DofMap(uniform_grid(1.5, 3.0, 40), 1)
        with pytest.raises(ValueError):
            assemble_q(0.2, dofmap)

    def test_expansion_in_t(self, coarse_dofmap, rng):
        u = _test_function(coarse_dofmap, rng)
        check = check_expansion(np.geomspace(0.005, 0.05, 5), u, u, coarse_dofmap)
        assert check.slope_q_minus_a > 0.9
        assert check.slope_q_minus_a_minus_tb >= 1.9

    def test_moduli_form(self):
        dofmap = DofMap(uniform_grid(4.5, 6.0, 80, 4.0), 1)
        form = assemble_moduli(TriangleParams(c=0.0, w=0.5), 4.0, dofmap)
        assert form.kind is FormKind.Q_MODULI
        assert solve_lowest(form, 1).eigenvalues[0] > 0.0

    def test_mirror_triangles_share_the_spectrum(self):
        dofmap = DofMap(uniform_grid(4.5, 6.0, 80, 4.0), 3)
        params = TriangleParams(c=0.25, w=0.875)
        mirror = TriangleParams(c=params.w - params.c, w=params.w)
        assert not mirror.in_moduli
        assert mirror.theta1 == pytest.approx(params.theta2)
        assert mirror.theta2 == pytest.approx(params.theta1)
        values = solve_lowest(assemble_moduli(params, 4.0, dofmap), 4).eigenvalues
        mirrored = solve_lowest(assemble_moduli(mirror, 4.0, dofmap), 4).eigenvalues
        np.testing.assert_allclose(mirrored, values, rtol=1e-8)

    def test_matches_direct_quadrature(self, coarse_dofmap, rng):
        t = 0.1
        grid = coarse_dofmap.grid
        profiles = _test_function(coarse_dofmap, rng).profiles.copy()
        profiles[2:] = 0.0
        u = ModeFunction(grid, profiles)

        nodes, weights = np.polynomial.legendre.leggauss(40)
        a, wa = 0.5 * (nodes + 1.0), 0.5 * weights
        quad = element_quadrature(grid.y_nodes, 10)
        b, wb = quad["points"].ravel(), quad["weights"].ravel()
        cell = np.repeat(np.arange(grid.n_cells), quad["points"].shape[1])
        slopes = np.diff(profiles, axis=1) / np.diff(grid.y_nodes)
        at_b = [np.interp(b, grid.y_nodes, profiles[k])[None, :] for k in (0, 1)]
        value = sum(basis(k, a)[:, None] * at_b[k] for k in (0, 1))
        u_a = sum(basis_derivative(k, a)[:, None] * at_b[k] for k in (0, 1))
        u_b = sum(basis(k, a)[:, None] * slopes[k, cell][None, :] for k in (0, 1))

        fields = degenerating_fields(t, grid.beta, grid.alpha_bar)
        co = fields.coefficients(a[:, None], b[None, :])
        gradient = np.stack(
            [co.rho_a * value + co.rho * u_a, co.rho_b * value + co.rho * u_b], axis=-1
        )
        density = np.einsum("...i,...ij,...j->...", gradient, co.metric, gradient)
        expected = float(wa @ density @ wb)
        assert assemble_q(t, coarse_dofmap).evaluate(u) == pytest.approx(expected, rel=1e-8)


class TestDerivatives:
    def test_model_derivative_is_exact(self, coarse_dofmap, rng):
        t, h = 0.2, 1e-4
        u = _test_function(coarse_dofmap, rng)
        a_dot, q_dot = assemble_dots(t, coarse_dofmap)
        difference = (
            assemble_a(t + h, coarse_dofmap).evaluate(u)
            - assemble_a(t - h, coarse_dofmap).evaluate(u)
        ) / (2 * h)
        assert a_dot.evaluate(u) == pytest.approx(difference, rel=1e-6)
        assert q_dot.kind is FormKind.Q_DOT

    def test_step_too_small(self, coarse_dofmap):
        with pytest.raises(StepTooSmall):
            assemble_dots(0.2, coarse_dofmap, rel_step=0.6)


def test_dump_coordinates(tmp_path, coarse_dofmap):
    form = assemble_a(0.2, coarse_dofmap)
    path = tmp_path / "a.coo"
    dump_coordinates(form, path)
    lines = path.read_text().splitlines()
    assert lines[0].startswith("# kind=a t=0.2")
    nnz = int(lines[0].rsplit("nnz=", 1)[1])
    assert len(lines) == nnz + 1
    row, col, _ = lines[1].split()
    assert int(row) <= int(col)


def test_coupling_vanishes_on_the_zero_mode(coarse_dofmap, rng):
    u = _test_function(coarse_dofmap, rng)
    zero = ModeFunction.single_mode(coarse_dofmap.grid, coarse_dofmap.k_max, 0, u.profiles[0])
    b = assemble_b(0.2, coarse_dofmap)
    assert b.evaluate(zero) == pytest.approx(0.0, abs=1e-14)
    assert abs(b.evaluate(u)) > 0.0
