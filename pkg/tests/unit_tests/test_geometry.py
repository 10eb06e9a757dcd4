import math

import numpy as np
import pytest

from cuspbranch.geometry import (
    GENERIC_ALPHA_BAR_MIN,
    TriangleParams,
    build_cubic,
    degenerating_fields,
    invert_cubic,
    moduli_grid,
    p_poly,
    p_poly_fd,
    phi_fields,
    triangle_angles,
    triangle_from_angles,
)
from cuspbranch.utils.errors import (
    DegenerateAlpha,
    MonotonicityFailure,
    NotMonotone,
    OutOfModuli,
)


class TestTriangleParams:
    def test_angles(self):
        params = TriangleParams(c=0.5, w=1.2)
        assert params.theta1 == pytest.approx(math.acos(0.5))
        assert params.theta2 == pytest.approx(math.acos(0.7))
        assert triangle_angles(params) == (params.theta1, params.theta2)

    @pytest.mark.parametrize("c, w", [(1.0, 1.5), (-0.1, 0.5), (0.2, 0.2), (0.2, 1.2)])
    def test_rejects_points_outside_moduli(self, c, w):
        with pytest.raises(OutOfModuli):
            TriangleParams(c=c, w=w)

    def test_mirror_image_is_mapped_back(self):
        params = TriangleParams(c=0.6, w=0.9)
        assert not params.in_moduli
        canonical = params.canonical()
        assert canonical.in_moduli
        assert canonical.w == pytest.approx(0.9)
        assert {round(canonical.theta1, 12), round(canonical.theta2, 12)} == {
            round(params.theta1, 12),
            round(params.theta2, 12),
        }

    def test_from_angles_on_boundary(self):
        params = triangle_from_angles(math.pi / 3, math.pi / 3)
        assert params.c == pytest.approx(0.5)
        assert params.w == pytest.approx(1.0)
        assert params.on_boundary
        assert params.in_moduli

    def test_from_angles_accepts_the_mirror_ordering(self):
        params = triangle_from_angles(0.4, 1.3)
        assert params.w < 2.0 * params.c
        assert not params.in_moduli
        canonical = params.canonical()
        assert canonical.theta1 == pytest.approx(1.3)
        assert canonical.theta2 == pytest.approx(0.4)

    def test_from_angles_rejects_right_angle(self):
        with pytest.raises(OutOfModuli):
            triangle_from_angles(math.pi / 2, 0.3)

    def test_moduli_grid(self):
        points = moduli_grid([0.0, 0.5], [0.5])
        assert [p.w for p in points] == pytest.approx([0.5, 1.25])
        assert all(p.in_moduli and not p.on_boundary for p in points)

    def test_moduli_grid_rejects_fraction(self):
        with pytest.raises(OutOfModuli):
            moduli_grid([0.0], [1.0])


class TestCubic:
    @pytest.mark.parametrize("alpha, alpha_bar", [(0.6, 1.25), (0.9, 4.0), (1.0, 2.0)])
    def test_interpolation_conditions(self, alpha, alpha_bar):
        cubic = build_cubic(alpha, alpha_bar)
        assert float(cubic.value(alpha)) == pytest.approx(1.0, abs=1e-12)
        assert float(cubic.value(alpha_bar)) == pytest.approx(alpha_bar, abs=1e-12)
        assert float(cubic.slope(alpha_bar)) == pytest.approx(1.0, abs=1e-12)
        assert float(cubic.slope(0.0)) == pytest.approx(alpha, abs=1e-12)

    def test_alpha_one_is_identity(self):
        cubic = build_cubic(1.0, 3.0)
        np.testing.assert_allclose(cubic.coefficients, [0.0, 1.0, 0.0, 0.0], atol=1e-12)

    def test_alpha_derivative_matches_difference(self):
        h = 1e-6
        ys = np.linspace(0.7, 1.25, 7)
        plus = build_cubic(0.8 + h, 1.25).value(ys)
        minus = build_cubic(0.8 - h, 1.25).value(ys)
        np.testing.assert_allclose(
            build_cubic(0.8, 1.25).d_alpha(ys), (plus - minus) / (2 * h), atol=1e-6
        )

    @pytest.mark.parametrize("alpha", [1.25, 2.0, 0.0])
    def test_degenerate_alpha(self, alpha):
        with pytest.raises(DegenerateAlpha):
            build_cubic(alpha, 1.25)

    def test_inverse(self):
        cubic = build_cubic(0.8, 1.25)
        assert invert_cubic(cubic, 1.0) == pytest.approx(0.8, abs=1e-12)
        assert invert_cubic(cubic, 1.25) == pytest.approx(1.25, abs=1e-12)
        y = invert_cubic(cubic, 1.1)
        assert float(cubic.value(y)) == pytest.approx(1.1, abs=1e-12)

    def test_inverse_rejects_non_monotone_cubic(self):
        cubic = build_cubic(0.01, 1.05)
        assert cubic.min_slope(0.01, 1.05) < 0.0
        with pytest.raises(NotMonotone):
            invert_cubic(cubic, 1.02)


class TestP:
    @pytest.mark.parametrize("alpha_bar", [1.25, 2.0, GENERIC_ALPHA_BAR_MIN + 0.01])
    def test_end_values(self, alpha_bar):
        p = p_poly(alpha_bar)
        assert p(1.0) == pytest.approx(1.0, abs=1e-12)
        assert p(alpha_bar) == pytest.approx(0.0, abs=1e-12)

    def test_matches_finite_difference(self):
        np.testing.assert_allclose(
            p_poly(1.25).coef, p_poly_fd(1.25).coef, rtol=1e-5, atol=1e-6
        )


class TestDiffeoFields:
    def test_inverse_of_phi(self):
        fields = phi_fields(TriangleParams(c=0.2, w=0.7), 4.0)
        a = np.array([0.1, 0.5, 0.9, 0.3])
        b = np.array([1.0, 2.0, 3.9, 5.0])
        x, y = fields.phi_inverse(a, b)
        a2, b2 = fields.phi(x, y)
        np.testing.assert_allclose(a2, a, atol=1e-12)
        np.testing.assert_allclose(b2, b, atol=1e-11)
        # b = 1 is the lower arc
        assert y[0] == pytest.approx(float(fields.f(x[0])), abs=1e-12)

    @pytest.mark.parametrize("renormalized", [False, True])
    def test_q_has_unit_determinant(self, renormalized):
        if renormalized:
            fields = degenerating_fields(0.1, 1.5, 1.25)
        else:
            fields = phi_fields(TriangleParams(c=0.25, w=0.9), 4.0)
        a, b = np.meshgrid(np.linspace(0.0, 1.0, 5), np.linspace(1.0, 1.5, 6))
        q = fields.q_matrix(a, b)
        np.testing.assert_allclose(np.linalg.det(q), 1.0, rtol=1e-10)

    def test_cusp_weights(self):
        fields = phi_fields(TriangleParams(c=0.0, w=0.5), 4.0)
        rho = fields.rho(np.array([0.3]), np.array([4.5]))
        assert rho[0] == pytest.approx(1.0 / math.sqrt(0.5))
        assert fields.cusp_metric() == pytest.approx((4.0, 1.0))
        renormalized = degenerating_fields(0.2, 1.5, 1.25)
        assert renormalized.rho(np.array([0.3]), np.array([1.4]))[0] == 1.0
        assert renormalized.cusp_metric() == pytest.approx((1.0, 0.04))

    def test_generic_alpha_bar_passes_monotonicity(self):
        phi_fields(TriangleParams(c=0.0, w=0.5), GENERIC_ALPHA_BAR_MIN + 0.01, validate=True)

    def test_small_alpha_bar_fails_monotonicity(self):
        with pytest.raises(MonotonicityFailure) as info:
            phi_fields(TriangleParams(c=0.0, w=0.99), 1.05)
        assert 0.0 <= info.value.x <= 0.99
        assert info.value.y <= 1.05

    @pytest.mark.parametrize("t, beta, alpha_bar", [(1.0, 1.5, 1.25), (0.1, 1.5, 1.6)])
    def test_degenerating_fields_ranges(self, t, beta, alpha_bar):
        with pytest.raises(ValueError):
            degenerating_fields(t, beta, alpha_bar)

    def test_degenerating_fields_approach_identity_at_second_order(self):
        a, b = np.meshgrid(np.linspace(0.1, 1.0, 7), np.linspace(1.02, 1.2, 7))
        p = p_poly(1.25)(b)
        ts = np.geomspace(1e-3, 1e-1, 6)
        rho_gap, off_gap = [], []
        for t in ts:
            fields = degenerating_fields(t, 1.5, 1.25)
            rho_gap.append(np.max(np.abs(fields.rho(a, b) - 1.0)))
            off_gap.append(np.max(np.abs(np.abs(fields.q_matrix(a, b)[..., 0, 1]) - t * a * p)))
        rho_slope = np.polyfit(np.log(ts), np.log(rho_gap), 1)[0]
        off_slope = np.polyfit(np.log(ts), np.log(off_gap), 1)[0]
        assert rho_slope >= 1.9
        assert off_slope >= 1.9
