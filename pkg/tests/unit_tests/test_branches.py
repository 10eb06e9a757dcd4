import math

import numpy as np
import pytest
import scipy.linalg

from cuspbranch.branches import (
    Eigenbranch,
    ModeReference,
    beta_independence,
    classify_limit,
    continue_branch,
    coupling_probe,
    crossing_scan,
    cusp_form_functional,
    mode_mass_report,
    nonconcentration,
    predicted_crossings,
    quasimode_residual,
    relative_variation,
    seed_pair,
    spectral_projection,
    tracking_report,
    variation_report,
    window_basis,
    zero_mass_report,
)
from cuspbranch.forms import (
    assemble_a,
    assemble_a_tilde,
    assemble_b,
    assemble_dots,
    assemble_q,
    solve_lowest,
)
from cuspbranch.model import airy_predict, zero_mode_spectrum
from cuspbranch.modespace import ModeFunction, norm, project_mode
from cuspbranch.utils.constant import UNCLASSIFIED
from cuspbranch.utils.errors import (
    AmbiguousTracking,
    NoSignChange,
    NotNearCrossing,
    WindowEmpty,
)

WINDOW = (math.pi**2 - 3.0, math.pi**2 + 6.0)


def _zero_mode_function(dofmap, t=0.1):
    grid = dofmap.grid
    spectrum = zero_mode_spectrum(t, grid.beta, 1)
    profile = np.zeros(grid.n_nodes)
    below = np.arange(grid.beta_index)
    profile[below] = spectrum.psi(1, grid.y_nodes[below])
    return ModeFunction.single_mode(grid, dofmap.k_max, 0, profile), spectrum


def _model_mode_one(dofmap, t):
    form = assemble_a(t, dofmap)
    result = solve_lowest(form, 1, sigma=math.pi**2 + airy_predict(1, 1).coefficient * t ** (2 / 3))
    return form, float(result.eigenvalues[0]), result.eigenvectors[0]


class TestClassification:
    def test_snaps_to_mode(self):
        ts = np.array([0.04, 0.02, 0.01])
        energies = math.pi**2 + 2.0 * ts ** (2 / 3) + 0.5 * ts ** (4 / 3)
        k, e0 = classify_limit(ts, energies)
        assert k == 1
        assert e0 == pytest.approx(math.pi**2, abs=1e-9)

    def test_unclassified(self):
        ts = np.array([0.04, 0.02, 0.01])
        k, e0 = classify_limit(ts, np.full(3, math.pi**2 + 0.5))
        assert k == UNCLASSIFIED
        assert e0 == pytest.approx(math.pi**2 + 0.5)

    def test_needs_three_samples(self):
        with pytest.raises(ValueError):
            classify_limit([0.1, 0.2], [1.0, 2.0])


class TestContinuation:
    def test_follows_zero_mode_branch(self, coarse_dofmap):
        family = lambda t: assemble_a(t, coarse_dofmap)  # noqa: E731
        c_1 = zero_mode_spectrum(1.0, 1.5, 1).constants[0]
        seed = seed_pair(family, 0.3, c_1 * 0.09)
        branch = continue_branch(family, 0.3, 0.1, seed, n_steps=4)
        assert branch.lost is None
        assert branch.ts[-1] == pytest.approx(0.1)
        np.testing.assert_allclose(branch.e_array, c_1 * branch.t_array**2, rtol=1e-2)
        assert min(branch.overlaps) >= 0.9
        table, c_prime = zero_mass_report(branch)
        np.testing.assert_allclose(table["zero_mass"], 1.0, atol=1e-12)
        assert c_prime == pytest.approx(0.0, abs=1e-8)

        table = variation_report(branch, lambda t: assemble_dots(t, coarse_dofmap)[0])
        np.testing.assert_allclose(table["dE_dt"], 2.0 * branch.e_array / branch.t_array, rtol=1e-8)
        assert (table["relative_difference"].iloc[1:-1] < 1e-6).all()

    def test_mode_reference_keeps_the_branch_on_its_mode(self, coarse_dofmap):
        family = lambda t: assemble_a(t, coarse_dofmap)  # noqa: E731
        reference = ModeReference(a_family=family, k=1, halfwidth=3.0)
        seed = seed_pair(family, 0.3, airy_predict(1, 1).predict(0.3))
        branch = continue_branch(family, 0.3, 0.08, seed, n_steps=8, reference=reference)
        assert branch.lost is None
        assert branch.ts[-1] == pytest.approx(0.08)
        for u in branch.vectors:
            assert norm(project_mode(u, 1)) == pytest.approx(norm(u), rel=1e-8)
        assert np.all(np.diff(branch.e_array) < 0.0)
        assert branch.ambiguous_mask().shape == branch.t_array.shape

    def test_mode_reference_direction(self, dofmap):
        form, energy, u = _model_mode_one(dofmap, 0.1)
        reference = ModeReference(
            a_family=lambda t: assemble_a(t, dofmap), k=1, halfwidth=3.0
        )
        previous = dofmap.to_vector(u)
        direction = reference.direction(previous, 0.1, energy, form.M)
        assert direction @ (form.M @ direction) == pytest.approx(1.0)
        cosine = abs(direction @ (form.M @ previous)) / math.sqrt(previous @ (form.M @ previous))
        assert cosine == pytest.approx(1.0, rel=1e-8)

        zero, _ = _zero_mode_function(dofmap, 0.1)
        assert reference.direction(dofmap.to_vector(zero), 0.1, energy, form.M) is None

    def test_seed_is_nearest_pair(self, coarse_dofmap):
        family = lambda t: assemble_a(t, coarse_dofmap)  # noqa: E731
        energy, u = seed_pair(family, 0.2, 12.0)
        form = family(0.2)
        assert form.evaluate(u) / form.mass(u) == pytest.approx(energy)
        assert abs(energy - 12.0) < 3.0


class TestProjections:
    def test_window_basis_per_mode(self, dofmap):
        basis = window_basis(assemble_a(0.1, dofmap), WINDOW)
        assert 1 in basis
        assert 2 not in basis
        for values, _ in basis.values():
            assert np.all((values > WINDOW[0]) & (values <= WINDOW[1]))

    def test_window_needs_model_form(self, coarse_dofmap):
        with pytest.raises(ValueError):
            window_basis(assemble_q(0.1, coarse_dofmap), WINDOW)

    def test_empty_window(self, coarse_dofmap):
        with pytest.raises(WindowEmpty):
            window_basis(assemble_a(0.1, coarse_dofmap), (-2.0, -1.0))

    def test_projection_keeps_window_eigenvector(self, dofmap):
        form, energy, u = _model_mode_one(dofmap, 0.1)
        w = spectral_projection(u, form, WINDOW)
        assert norm(w - u) <= 1e-8 * norm(u)
        assert quasimode_residual(w, energy, form, assemble_a_tilde(form)) <= 1e-7

    def test_projection_is_idempotent(self, coarse_dofmap, rng):
        form = assemble_a(0.1, coarse_dofmap)
        u = coarse_dofmap.from_vector(rng.standard_normal(coarse_dofmap.size))
        w = spectral_projection(u, form, WINDOW)
        assert norm(spectral_projection(w, form, WINDOW) - w) <= 1e-8 * norm(w)

    def test_window_projection_is_orthogonal(self, coarse_dofmap, rng):
        form = assemble_a(0.1, coarse_dofmap)
        u = coarse_dofmap.from_vector(rng.standard_normal(coarse_dofmap.size))
        w = spectral_projection(u, form, WINDOW)
        parts = sum(norm(project_mode(w, k)) ** 2 for k in range(coarse_dofmap.k_max + 1))
        assert parts == pytest.approx(norm(w) ** 2, rel=1e-10)
        assert norm(w) ** 2 + norm(u - w) ** 2 == pytest.approx(norm(u) ** 2, rel=1e-8)

    def test_residual_grows_with_energy_shift(self, dofmap):
        form, energy, u = _model_mode_one(dofmap, 0.1)
        a_tilde = assemble_a_tilde(form)
        assert quasimode_residual(u, energy + 0.5, form, a_tilde) > quasimode_residual(
            u, energy, form, a_tilde
        )

    def test_mode_mass_of_model_eigenvector(self, dofmap):
        _, energy, u = _model_mode_one(dofmap, 0.1)
        branch = Eigenbranch()
        branch.append(0.1, energy, u, 1.0)
        table = mode_mass_report(branch, lambda t: assemble_a(t, dofmap), WINDOW, 1, 0.5)
        assert table["k_mass"].iloc[0] == pytest.approx(1.0, abs=1e-8)
        assert table["low_mass"].iloc[0] == pytest.approx(0.0, abs=1e-8)
        assert not table["in_K"].iloc[0]


class TestCuspFunctional:
    def test_estimates_agree_on_zero_mode_eigenfunction(self, dofmap):
        t = 0.1
        u, spectrum = _zero_mode_function(dofmap, t)
        energy = float(spectrum.eigenvalues[0])
        expected = float(spectrum.psi_prime(1, 1.5))
        result = cusp_form_functional(u, energy, t=t)
        assert result.difference_quotient == pytest.approx(expected, rel=1e-3)
        assert result.green_estimate == pytest.approx(expected, rel=1e-3)
        assert result.discrepancy < 1e-2 * abs(expected)
        assert not result.near_cusp_form()
        assert result.alpha_k == pytest.approx(1.25)

    def test_function_vanishing_near_beta(self, dofmap):
        grid = dofmap.grid
        profile = np.clip(1.3 - grid.y_nodes, 0.0, None)
        u = ModeFunction.single_mode(grid, dofmap.k_max, 0, profile)
        result = cusp_form_functional(u, 1.0)
        assert result.difference_quotient == 0.0
        assert result.near_cusp_form()

    def test_nonconcentration(self, dofmap):
        u, spectrum = _zero_mode_function(dofmap)
        assert nonconcentration(u, 0, 3.0) == pytest.approx(3.0)
        _, energy, w = _model_mode_one(dofmap, 0.1)
        assert nonconcentration(w, 1, energy) <= energy - math.pi**2


class TestCrossings:
    def test_scan_of_flat_branch(self):
        ts = list(np.geomspace(0.5, 0.05, 40))
        branch = Eigenbranch(ts=ts, energies=[math.pi**2] * len(ts))
        spectrum = zero_mode_spectrum(1.0, 1.5, 6)
        records = crossing_scan(branch, spectrum, 1)
        assert records
        for record in records:
            c_n = spectrum.constants[record.n - 1]
            assert record.t_n == pytest.approx(math.pi / math.sqrt(c_n), rel=1e-8)
        assert all(r.n >= 2 for r in records)

    def test_scan_without_crossing(self):
        ts = list(np.geomspace(0.5, 0.05, 10))
        branch = Eigenbranch(ts=ts, energies=[math.pi**2] * len(ts))
        with pytest.raises(NoSignChange):
            crossing_scan(branch, zero_mode_spectrum(1.0, 1.5, 1), 1, n_range=[1])

    def test_predicted_two_term_law(self):
        result = predicted_crossings(1, 1.5, airy_predict(1, 1), range(20, 31))
        t_n = np.array([r.t_n for r in result.records])
        assert np.all(np.diff(t_n) < 0.0)
        assert abs(result.tau_fit - result.tau_expected) < 0.2 * abs(result.tau_expected)
        assert result.records[-1].n_t_n == pytest.approx(math.log(1.5), rel=0.1)
        assert max(r.residual for r in result.records) < 1e-8

    def test_coupling_agrees_with_leading_order(self, dofmap):
        n = 4
        t = predicted_crossings(1, 1.5, airy_predict(1, 1), [n]).records[0].t_n
        form = assemble_a(t, dofmap)
        a_k, m_k = form.block(1)
        values, vectors = scipy.linalg.eigh(a_k, m_k, subset_by_index=[0, 0])
        vector = np.zeros(dofmap.size)
        vector[dofmap.mode_slice(1)] = vectors[:, 0]
        u = dofmap.from_vector(vector)
        spectrum = zero_mode_spectrum(1.0, 1.5, n)
        coupling = coupling_probe(
            u, float(values[0]), 1, spectrum, n, assemble_b(t, dofmap), eta=1e6
        )
        assert 0.0 < coupling.ratio < 2.0
        assert coupling.normalized > 0.0

    def test_coupling_outside_window(self, coarse_dofmap):
        u, spectrum = _zero_mode_function(coarse_dofmap, 0.1)
        with pytest.raises(NotNearCrossing):
            coupling_probe(u, 50.0, 1, spectrum, 1, assemble_b(0.1, coarse_dofmap))


class TestTracking:
    def _branch(self):
        ts = list(np.geomspace(0.2, 0.02, 8))
        model = [np.array([10.0, 20.0]) for _ in ts]
        energies = [10.0 + 0.3 * t for t in ts]
        return Eigenbranch(ts=ts, energies=energies), model

    def test_gap_is_order_t(self):
        branch, model = self._branch()
        report = tracking_report(branch, model)
        np.testing.assert_allclose(report.table["gap_over_t"], 0.3)
        assert report.exponent == pytest.approx(1.0, abs=1e-8)
        assert report.table["unique"].all()
        assert (report.table["lambda_star"] == 10.0).all()

    def test_ambiguous(self):
        branch, model = self._branch()
        model[0] = np.array([branch.energies[0], branch.energies[0]])
        report = tracking_report(branch, model)
        assert bool(report.table["ambiguous"].iloc[0])
        assert not report.table["ambiguous"].iloc[1:].any()
        assert len(report.ambiguous) == 1
        assert isinstance(report.ambiguous[0], AmbiguousTracking)

    def test_sample_count_mismatch(self):
        branch, model = self._branch()
        with pytest.raises(ValueError):
            tracking_report(branch, model[:-1])


def test_relative_variation():
    table = relative_variation([0.1, 0.2], [1.0, 2.0], [0.5, 2.5], [0.2, 0.9], 0.5)
    assert table["relative_variation"].tolist() == [0.5, -0.5]
    assert table["in_K"].tolist() == [True, False]


def test_beta_independence_with_same_form(coarse_dofmap):
    form = assemble_a(0.2, coarse_dofmap)
    energy = float(solve_lowest(form, 2).eigenvalues[1])
    assert beta_independence(energy, form) == pytest.approx(0.0, abs=1e-9)
