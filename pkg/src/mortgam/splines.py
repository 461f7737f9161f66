"""B-spline bases and first-difference penalty structure for smooth terms."""

from dataclasses import dataclass

import numpy as np
from scipy.interpolate import BSpline


@dataclass(frozen=True)
class SplineBlock:
    """A B-spline basis evaluated on a fixed set of points.

    ``basis`` has one row per evaluation point and one column per
    coefficient; rows sum to one inside the interior knot span.
    """

    knots: np.ndarray
    degree: int
    basis: np.ndarray
    n_coef: int


@dataclass(frozen=True)
class PenaltyPair:
    """First-difference penalty A = D1'D1 and its null-space penalty B.

    A is positive semi-definite with the constant vector as its only null
    direction; B is the rank-one projector onto constants, so A + B is
    positive definite.
    """

    diff_penalty: np.ndarray
    null_penalty: np.ndarray


def place_knots(axis_min, axis_max, spacing, n_exterior):
    """Regularly spaced knots covering [axis_min, axis_max].

    Knots start at ``axis_min`` and step by ``spacing`` until the range is
    covered, then ``n_exterior`` further knots are added beyond each end at
    the same spacing.
    """
    if axis_max <= axis_min:
        raise ValueError("axis_max must exceed axis_min")
    if spacing <= 0:
        raise ValueError("spacing must be positive")
    n_spans = int(np.ceil((axis_max - axis_min) / spacing - 1e-12))
    n_spans = max(n_spans, 1)
    first = axis_min - n_exterior * spacing
    n_knots = n_spans + 1 + 2 * n_exterior
    return first + spacing * np.arange(n_knots)


def eval_basis(knots, degree, points):
    """Cox-de Boor B-spline basis matrix for ``points``.

    Every point must lie inside the interior span where degree+1 basis
    functions are defined, i.e. [knots[degree], knots[-degree-1]].
    """
    knots = np.asarray(knots, dtype=float)
    points = np.atleast_1d(np.asarray(points, dtype=float))
    lo, hi = knots[degree], knots[-degree - 1]
    if np.any(points < lo) or np.any(points > hi):
        raise ValueError(
            f"points outside supported span [{lo}, {hi}]"
        )
    design = BSpline.design_matrix(points, knots, degree, extrapolate=False)
    return design.toarray()


def difference_penalty(n_coef):
    """Penalty pair for a coefficient vector of length ``n_coef``."""
    if n_coef < 2:
        raise ValueError("need at least two coefficients")
    d1 = np.diff(np.eye(n_coef), axis=0)
    a = d1.T @ d1
    b = np.full((n_coef, n_coef), 1.0 / n_coef)
    return PenaltyPair(diff_penalty=a, null_penalty=b)


def prior_precision(penalties, sigma_a, sigma_b):
    """Precision K = A / sigma_a^2 + B / sigma_b^2 of the coefficient prior."""
    if sigma_a <= 0 or sigma_b <= 0:
        raise ValueError("scale parameters must be positive")
    return (penalties.diff_penalty / sigma_a**2
            + penalties.null_penalty / sigma_b**2)


def build_spline_block(axis_min, axis_max, points, spacing=4.0,
                       n_exterior=3, degree=3):
    """Knot placement plus basis evaluation in one step."""
    knots = place_knots(axis_min, axis_max, spacing, n_exterior)
    basis = eval_basis(knots, degree, points)
    return SplineBlock(knots=knots, degree=degree, basis=basis,
                       n_coef=basis.shape[1])
