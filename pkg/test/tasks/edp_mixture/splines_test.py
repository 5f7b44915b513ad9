import numpy as np
import pytest
from scipy import linalg

from tasks.edp_mixture.lib.errors import ConfigError, DataError, NumericError
from tasks.edp_mixture.lib.splines import (KnotPlacement, SplineKind, SplineSpec, bspline_basis, bspline_knot_vector,
                                           default_knots, svd_powers, thin_plate_basis, thin_plate_omega)


def cox_de_boor(t, i, degree, knots):
    """ textbook recursion with the right-closed last interval """
    if degree == 0:
        if knots[i] <= t < knots[i + 1]:
            return 1.0
        last = knots[i + 1] == knots[-1] and knots[i] < knots[i + 1]
        return 1.0 if last and t == knots[-1] else 0.0
    left = 0.0
    if knots[i + degree] > knots[i]:
        left = (t - knots[i]) / (knots[i + degree] - knots[i]) * cox_de_boor(t, i, degree - 1, knots)
    right = 0.0
    if knots[i + degree + 1] > knots[i + 1]:
        right = ((knots[i + degree + 1] - t) / (knots[i + degree + 1] - knots[i + 1])
                 * cox_de_boor(t, i + 1, degree - 1, knots))
    return left + right


def test_default_knots_quantiles():
    times = np.arange(1.0, 10.0)
    assert np.allclose(default_knots(times, 3), [3.0, 5.0, 7.0])


def test_default_knots_single_knot_is_median(rng):
    times = rng.random(5001)
    assert default_knots(times, 1)[0] == pytest.approx(np.median(times))


def test_default_knots_equispaced_thirds():
    knots = default_knots([0.0, 0.2, 1.0], 2, SplineKind.BSPLINE, KnotPlacement.EQUISPACED)
    assert np.allclose(knots, [1 / 3, 2 / 3])


@pytest.mark.parametrize('times, k, code', [
    ([], 3, 'EMPTY_TIMES'),
    ([0.4, 0.4, 0.4], 2, 'DEGENERATE_RANGE'),
])
def test_default_knots_errors(times, k, code):
    with pytest.raises(DataError) as e:
        default_knots(times, k)
    assert e.value.code == code


def test_default_knots_needs_one_knot():
    with pytest.raises(ConfigError):
        default_knots([0.0, 1.0], 0)


def test_thin_plate_rows_before_penalty():
    z = thin_plate_basis([0.5], [0.0, 1.0])
    _, omega_sqrt = svd_powers(thin_plate_omega([0.0, 1.0]))
    assert np.allclose(z @ omega_sqrt, [[0.125, 0.125]], atol=1e-10)


def test_thin_plate_against_independent_svd():
    knots = np.array([0.1, 0.3, 0.45, 0.8, 0.95])
    t = np.array([0.0, 0.2, 0.5, 1.0])
    omega = np.abs(knots[:, None] - knots[None, :]) ** 3
    u, d, vt = linalg.svd(omega)
    expected = np.abs(t[:, None] - knots[None, :]) ** 3 @ (u @ np.diag(d ** -0.5) @ vt)
    z = thin_plate_basis(t, knots)
    assert z.shape == (4, 5)
    assert np.allclose(z, expected, atol=1e-10)


def test_thin_plate_square_roots():
    knots = np.linspace(0.05, 0.95, 7)
    omega = thin_plate_omega(knots)
    assert np.allclose(omega, omega.T) and np.all(np.diag(omega) == 0.0)
    inv_sqrt, sqrt = svd_powers(omega)
    assert np.allclose(inv_sqrt @ sqrt, np.eye(7), atol=1e-8)
    # Ω is indefinite, so the congruence is a symmetric involution rather than I
    congruence = inv_sqrt @ omega @ inv_sqrt.T
    assert np.allclose(congruence @ congruence, np.eye(7), atol=1e-8)


def test_thin_plate_single_knot_at_time_is_zero():
    assert np.array_equal(thin_plate_basis([0.3], [0.3]), [[0.0]])


def test_thin_plate_duplicate_knots():
    with pytest.raises(NumericError) as e:
        thin_plate_basis([0.1], [0.2, 0.2, 0.5])
    assert e.value.code == 'DEGENERATE_KNOTS'


def test_bspline_left_boundary_without_interior_knots():
    row = bspline_basis([0.0], [], degree=3, boundary=(0.0, 1.0))[0]
    assert np.allclose(row, [1.0, 0.0, 0.0, 0.0])


def test_bspline_matches_cox_de_boor():
    interior = [1 / 3, 2 / 3]
    knots = bspline_knot_vector(interior, (0.0, 1.0), 3)
    for t in (0.0, 0.2, 0.5, 0.9, 1.0):
        row = bspline_basis([t], interior, boundary=(0.0, 1.0))[0]
        expected = [cox_de_boor(t, i, 3, knots) for i in range(len(interior) + 4)]
        assert np.allclose(row, expected, atol=1e-12)


def test_bspline_partition_of_unity(rng):
    t = rng.random(200)
    design = bspline_basis(t, [0.25, 0.5, 0.75], boundary=(0.0, 1.0))
    assert design.shape == (200, 7)
    assert np.allclose(design.sum(axis=1), 1.0, atol=1e-12)
    assert design.min() >= 0.0 and design.max() <= 1.0


def test_bspline_clamps_or_rejects_outside_times(caplog):
    inside = bspline_basis([1.0], [0.5], boundary=(0.0, 1.0))
    clamped = bspline_basis([1.4], [0.5], boundary=(0.0, 1.0))
    assert np.array_equal(inside, clamped)
    assert 'clamped' in caplog.text
    with pytest.raises(DataError) as e:
        bspline_basis([1.4], [0.5], boundary=(0.0, 1.0), clamp=False)
    assert e.value.code == 'OUT_OF_RANGE'


def test_spline_spec_freezes_basis():
    times = np.linspace(0.0, 1.0, 50)
    spec = SplineSpec.build(times, SplineKind.THIN_PLATE, k=4)
    assert spec.dim == 4
    assert np.array_equal(spec.basis([0.3, 0.7]), thin_plate_basis([0.3, 0.7], spec.knots))
    bspline = SplineSpec.from_config({'spline_kind': 'bspline', 'n_knots': 2, 'knot_placement': 'equispaced'},
                                     times)
    assert bspline.dim == 6
    assert bspline.boundary == (0.0, 1.0)
    none = SplineSpec.from_config({'spline_kind': 'NONE'}, times)
    assert none.dim == 0 and none.basis([0.5]).shape == (1, 0)


def test_spline_spec_rejects_unknown_kind():
    with pytest.raises(ConfigError):
        SplineSpec.from_config({'spline_kind': 'wavelet'}, [0.0, 1.0])
