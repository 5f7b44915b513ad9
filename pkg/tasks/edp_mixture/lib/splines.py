"""Time-basis design matrices: penalised thin-plate (default) and clamped cubic B-splines."""

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.interpolate import BSpline

from tasks.edp_mixture.lib.core_types import coerce_value
from tasks.edp_mixture.lib.errors import ConfigError, DataError, NumericError

log = logging.getLogger(__name__)

DEFAULT_THIN_PLATE_KNOTS = 20
# singular values below this fraction of the largest are treated as zero in Ω^{-1/2}
SVD_RCOND = 1e-12


class SplineKind(Enum):
    THIN_PLATE = 'THIN_PLATE'
    BSPLINE = 'BSPLINE'
    NONE = 'NONE'


class KnotPlacement(Enum):
    QUANTILE = 'quantile'
    EQUISPACED = 'equispaced'


def default_knots(times, k, kind=SplineKind.THIN_PLATE, placement=KnotPlacement.QUANTILE):
    """Place k knots at the i/(k+1) positions, i = 1..k, of the pooled observation times.

    ``quantile`` uses empirical quantiles, ``equispaced`` divides the observed range
    evenly. The same rule gives interior knots for B-splines.
    """
    times = np.asarray(times, dtype=float).reshape(-1)
    if times.size == 0:
        raise DataError('EMPTY_TIMES', 'no observation times to place knots on')
    if k < 1:
        raise ConfigError('CONFIG_INVALID', 'n_knots must be >= 1 for {}'.format(SplineKind(kind).value),
                          key='n_knots')
    lo, hi = float(times.min()), float(times.max())
    if hi <= lo:
        raise DataError('DEGENERATE_RANGE', 'all observation times equal {}'.format(lo))

    probs = np.arange(1, k + 1) / (k + 1.0)
    if KnotPlacement(placement) is KnotPlacement.QUANTILE:
        return np.quantile(times, probs)
    return lo + (hi - lo) * probs


def thin_plate_omega(knots):
    knots = np.asarray(knots, dtype=float).reshape(-1)
    return np.abs(knots[:, None] - knots[None, :]) ** 3


def svd_powers(omega):
    """Return (Ω^{-1/2}, Ω^{1/2}) as U·diag(d^{∓1/2})·Vᵀ from the SVD Ω = U·diag(d)·Vᵀ."""
    u, d, vt = np.linalg.svd(omega)
    keep = d > SVD_RCOND * (d.max() if d.size else 0.0)
    inv_root = np.where(keep, 1.0 / np.sqrt(np.where(keep, d, 1.0)), 0.0)
    return (u * inv_root) @ vt, (u * np.sqrt(d)) @ vt


def _check_distinct(knots):
    if np.unique(knots).size != knots.size:
        raise NumericError('DEGENERATE_KNOTS', 'duplicate knots make the thin-plate penalty singular')


def thin_plate_basis(t_values, knots, omega_inv_sqrt=None):
    """Z = Z_k·Ω^{-1/2} with Z_k[i, l] = |t_i - q_l|³ and Ω[l, m] = |q_l - q_m|³."""
    knots = np.asarray(knots, dtype=float).reshape(-1)
    t_values = np.asarray(t_values, dtype=float).reshape(-1)
    _check_distinct(knots)
    if omega_inv_sqrt is None:
        omega_inv_sqrt, _ = svd_powers(thin_plate_omega(knots))
    z_k = np.abs(t_values[:, None] - knots[None, :]) ** 3
    return z_k @ omega_inv_sqrt


def bspline_knot_vector(interior, boundary, degree):
    lo, hi = boundary
    interior = np.asarray(interior, dtype=float).reshape(-1)
    return np.concatenate([np.full(degree + 1, lo), interior, np.full(degree + 1, hi)])


def bspline_basis(t_values, knots, degree=3, boundary=None, clamp=True):
    """Clamped B-spline design of shape M × (k + degree + 1); rows sum to one.

    ``knots`` are the interior knots; ``boundary`` defaults to the range of
    ``t_values``. Times outside the boundary are clamped to it, or rejected
    with OUT_OF_RANGE when ``clamp`` is off.
    """
    t_values = np.asarray(t_values, dtype=float).reshape(-1)
    knots = np.asarray(knots, dtype=float).reshape(-1)
    if degree < 1:
        raise ConfigError('CONFIG_INVALID', 'spline_degree must be >= 1', key='spline_degree')
    if boundary is None:
        boundary = (float(t_values.min()), float(t_values.max()))
    lo, hi = boundary
    if not hi > lo:
        raise DataError('DEGENERATE_RANGE', 'B-spline boundary [{}, {}] is empty'.format(lo, hi))
    if knots.size and (knots.min() < lo or knots.max() > hi):
        raise DataError('OUT_OF_RANGE', 'interior knots must lie inside [{}, {}]'.format(lo, hi))

    outside = (t_values < lo) | (t_values > hi)
    if np.any(outside):
        if not clamp:
            raise DataError('OUT_OF_RANGE', '{} time(s) outside the boundary [{}, {}]'.format(
                int(outside.sum()), lo, hi))
        log.warning('clamped %s time(s) to the B-spline boundary [%s, %s]', int(outside.sum()), lo, hi)
        t_values = np.clip(t_values, lo, hi)

    full_knots = bspline_knot_vector(knots, (lo, hi), degree)
    if t_values.size == 0:
        return np.zeros((0, full_knots.size - degree - 1))
    return BSpline.design_matrix(t_values, full_knots, degree).toarray()


@dataclass(frozen=True, eq=False)
class SplineSpec:
    """Frozen basis: knots, Ω^{-1/2} and boundaries fixed at build time so ``basis`` works at new times."""
    kind: SplineKind = SplineKind.THIN_PLATE
    knots: tuple = ()
    degree: int = 3
    boundary: tuple = (0.0, 1.0)
    clamp: bool = True
    omega_inv_sqrt: np.ndarray = None

    @classmethod
    def build(cls, times, kind=SplineKind.THIN_PLATE, k=DEFAULT_THIN_PLATE_KNOTS,
              placement=KnotPlacement.QUANTILE, degree=3, clamp=True):
        kind = SplineKind(kind)
        if kind is SplineKind.NONE:
            return cls(kind=kind)
        times = np.asarray(times, dtype=float).reshape(-1)
        knots = default_knots(times, k, kind, placement)
        boundary = (float(times.min()), float(times.max()))
        omega_inv_sqrt = None
        if kind is SplineKind.THIN_PLATE:
            _check_distinct(knots)
            omega_inv_sqrt, _ = svd_powers(thin_plate_omega(knots))
        log.debug('built %s basis with %s knots on [%s, %s]', kind.value, len(knots), *boundary)
        return cls(kind=kind, knots=tuple(float(q) for q in knots), degree=int(degree), boundary=boundary,
                   clamp=clamp, omega_inv_sqrt=omega_inv_sqrt)

    @classmethod
    def from_config(cls, config, times):
        try:
            kind = SplineKind(str(config.get('spline_kind', SplineKind.THIN_PLATE.value)).upper())
            placement = KnotPlacement(str(config.get('knot_placement', KnotPlacement.QUANTILE.value)).lower())
            k = int(config.get('n_knots', DEFAULT_THIN_PLATE_KNOTS))
            degree = int(config.get('spline_degree', 3))
        except (TypeError, ValueError) as e:
            raise ConfigError('CONFIG_INVALID', 'bad spline configuration: {}'.format(e))
        return cls.build(times, kind=kind, k=k, placement=placement, degree=degree,
                         clamp=coerce_value('clamp_times', config.get('clamp_times', True), bool))

    @property
    def dim(self):
        if self.kind is SplineKind.NONE:
            return 0
        if self.kind is SplineKind.THIN_PLATE:
            return len(self.knots)
        return len(self.knots) + self.degree + 1

    def basis(self, t_values):
        t_values = np.asarray(t_values, dtype=float).reshape(-1)
        if self.kind is SplineKind.NONE:
            return np.zeros((t_values.size, 0))
        if self.kind is SplineKind.THIN_PLATE:
            return thin_plate_basis(t_values, self.knots, self.omega_inv_sqrt)
        return bspline_basis(t_values, self.knots, self.degree, self.boundary, self.clamp)
