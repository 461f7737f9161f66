"""Identifiability constraints for the age-period-cohort decomposition.

The period effects form a random walk whose innovations must satisfy
zero-sum and zero-trend constraints; the cohort smooth must vanish at the
first and last cohort and sum to zero across cohorts.  Both are handled by
transforming the innovation vector with a matrix that maps the constraints
onto a few leading coordinates, conditioning those coordinates to zero and
sampling the remaining (free) coordinates from the implied conditional
normal distribution.  The original innovations are then recovered
deterministically through the inverse transform.
"""

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular


class SingularConstraintError(ValueError):
    """Raised when the constraint rows are linearly dependent."""


@dataclass(frozen=True)
class ConstraintTransform:
    """Transform and conditional distribution for one constrained series.

    ``Z`` maps raw innovations to transformed coordinates; the coordinates
    listed in ``fixed_idx`` are zero exactly when the constraints hold.
    ``cond_cov_factor`` is the lower-triangular factor of the conditional
    covariance of the free coordinates at unit innovation scale; the full
    factor is ``sigma * cond_cov_factor``.  ``free_map`` sends free
    coordinates straight to innovations: eps = free_map @ eta_star.
    """

    C: np.ndarray
    S: np.ndarray
    Z: np.ndarray
    Z_inv: np.ndarray
    fixed_idx: np.ndarray
    free_idx: np.ndarray
    cond_cov_factor: np.ndarray
    free_map: np.ndarray
    sigma: float

    @property
    def n_fixed(self):
        return len(self.fixed_idx)

    @property
    def n_free(self):
        return len(self.free_idx)

    def sample_free(self, z):
        """Free coordinates eta_star = sigma * L @ z for standard-normal z."""
        return self.sigma * self.cond_cov_factor @ np.asarray(z, dtype=float)

    def recover(self, eta_star):
        """Innovations implied by free coordinates with fixed ones at zero."""
        return self.free_map @ np.asarray(eta_star, dtype=float)


@dataclass(frozen=True)
class JointTransform:
    """Two correlated constrained period series (female, male).

    The stacked innovation vector has covariance P (block structure with
    per-sex variances and cross-correlation rho); X = diag(Z, Z) carries it
    to the transformed scale, Xi = X P X'.  Conditioning both sexes'
    constraint coordinates to zero factorises as a Kronecker product, so
    the conditional factor equals chol(Sigma2) (x) L with L the single-sex
    unit factor.
    """

    X: np.ndarray
    P: np.ndarray
    Xi: np.ndarray
    single: ConstraintTransform
    sigma_f: float
    sigma_m: float
    rho: float
    cond_cov_factor: np.ndarray  # ordering: female free coords, then male

    def sample_free(self, z):
        """Stacked free coordinates [eta_f*; eta_m*] from standard-normal z."""
        return self.cond_cov_factor @ np.asarray(z, dtype=float)

    def recover(self, eta_star_stacked):
        """Per-sex innovation vectors (eps_f, eps_m)."""
        k = self.single.n_free
        eps_f = self.single.recover(eta_star_stacked[:k])
        eps_m = self.single.recover(eta_star_stacked[k:])
        return eps_f, eps_m


def cumsum_matrix(n):
    """Lower-triangular matrix of ones: (S @ eps)_t = sum_{u<=t} eps_u."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return np.tril(np.ones((n, n)))


def condition_on_zero(sigma, n_fixed):
    """Lower factor of Cov(eta* | eta_dagger = 0) for leading fixed block.

    Returns L with L @ L.T = Sigma** - Sigma*+ Sigma++^-1 Sigma+*, where +
    marks the first ``n_fixed`` coordinates and * the remainder.
    """
    sigma = np.asarray(sigma, dtype=float)
    n = sigma.shape[0]
    if not 1 <= n_fixed < n:
        raise ValueError("n_fixed must satisfy 1 <= n_fixed < dim")
    s_ff = sigma[:n_fixed, :n_fixed]
    s_sf = sigma[n_fixed:, :n_fixed]
    s_ss = sigma[n_fixed:, n_fixed:]
    try:
        cf = cho_factor(s_ff, lower=True)
        cond = s_ss - s_sf @ cho_solve(cf, s_sf.T)
        return cholesky(cond, lower=True)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - defensive
        raise np.linalg.LinAlgError(
            "covariance not positive definite") from exc


def _condition_general(sigma, fixed_idx):
    """As condition_on_zero but for an arbitrary set of fixed coordinates."""
    n = sigma.shape[0]
    fixed_idx = np.asarray(fixed_idx)
    free_idx = np.array([i for i in range(n) if i not in set(fixed_idx)])
    perm = np.concatenate([fixed_idx, free_idx])
    sig_p = sigma[np.ix_(perm, perm)]
    return free_idx, condition_on_zero(sig_p, len(fixed_idx))


def _build_transform(C_target, mix, n, fixed_idx, sigma, label):
    """Common construction: Z/W matrix, inverse, conditional factor.

    ``mix`` contains the rows of the constraint matrix expressed on the
    innovation scale (e.g. C @ S or C @ B @ S); they replace the rows of
    the identity listed in ``fixed_idx``.
    """
    if np.linalg.matrix_rank(mix) < mix.shape[0]:
        deficient = _dependent_row(mix)
        raise SingularConstraintError(
            f"{label} constraint rows are linearly dependent "
            f"(constraint {deficient})")
    z = np.eye(n)
    z[fixed_idx, :] = mix
    try:
        z_inv = np.linalg.inv(z)
    except np.linalg.LinAlgError as exc:
        raise SingularConstraintError(
            f"{label} transform is singular") from exc
    fixed_idx = np.asarray(fixed_idx)
    cov = z @ z.T  # unit innovation scale
    free_idx, factor = _condition_general(cov, fixed_idx)
    s = cumsum_matrix(n)
    return ConstraintTransform(
        C=C_target, S=s, Z=z, Z_inv=z_inv, fixed_idx=fixed_idx,
        free_idx=free_idx, cond_cov_factor=factor,
        free_map=z_inv[:, free_idx], sigma=float(sigma))


def _dependent_row(mat):
    """Index of the first row that is a combination of the earlier ones."""
    for i in range(1, mat.shape[0]):
        if np.linalg.matrix_rank(mat[: i + 1]) <= np.linalg.matrix_rank(mat[:i]):
            return i
    return 0


def period_transform(n_periods, sigma_kappa=1.0):
    """Transform for the period random walk under zero-sum/zero-trend.

    The constraint matrix has rows (1, 1, ..., 1) and (0, 1, ..., T-1)
    acting on kappa = S @ eps; Z is the identity with its first two rows
    replaced by C @ S.
    """
    if n_periods < 3:
        raise ValueError("need at least 3 periods to condition on "
                         "two constraints")
    t = n_periods
    c = np.vstack([np.ones(t), np.arange(t, dtype=float)])
    mix = c @ cumsum_matrix(t)
    return _build_transform(c, mix, t, np.array([0, 1]), sigma_kappa,
                            "period")


def cohort_transform(n_coef, cohort_basis, sigma_gamma=1.0):
    """Transform for the cohort-spline coefficient random walk.

    The constraints act on the smooth s = B @ S @ eps evaluated at the
    in-sample cohorts: first value zero, sum zero, last value zero.  The
    transform W is the identity on coefficients with rows 1, 2 and last
    replaced by the rows of C @ B @ S.
    """
    basis = np.asarray(cohort_basis, dtype=float)
    n_cohorts = basis.shape[0]
    if basis.shape[1] != n_coef:
        raise ValueError("cohort basis column count must equal n_coef")
    if n_coef < 4:
        raise ValueError("need at least 4 coefficients for 3 constraints")
    c = np.zeros((3, n_cohorts))
    c[0, 0] = 1.0
    c[1, :] = 1.0
    c[2, -1] = 1.0
    mix = c @ basis @ cumsum_matrix(n_coef)
    fixed = np.array([0, 1, n_coef - 1])
    return _build_transform(c, mix, n_coef, fixed, sigma_gamma, "cohort")


def joint_transform(n_periods, sigma_f, sigma_m, rho):
    """Correlated two-sex period transform.

    P couples per-sex innovation vectors through correlation ``rho``;
    conditioning both sexes' constraints to zero yields a Kronecker
    conditional factor chol([[sf^2, r sf sm], [r sf sm, sm^2]]) (x) L.
    """
    if sigma_f <= 0 or sigma_m <= 0:
        raise ValueError("innovation scales must be positive")
    if not -1.0 < rho < 1.0:
        raise ValueError("rho must lie in (-1, 1)")
    single = period_transform(n_periods, 1.0)
    t = n_periods
    eye = np.eye(t)
    p = np.block([[sigma_f**2 * eye, rho * sigma_f * sigma_m * eye],
                  [rho * sigma_f * sigma_m * eye, sigma_m**2 * eye]])
    x = np.block([[single.Z, np.zeros((t, t))],
                  [np.zeros((t, t)), single.Z]])
    xi = x @ p @ x.T
    sigma2 = np.array([[sigma_f**2, rho * sigma_f * sigma_m],
                       [rho * sigma_f * sigma_m, sigma_m**2]])
    factor = np.kron(cholesky(sigma2, lower=True), single.cond_cov_factor)
    return JointTransform(X=x, P=p, Xi=xi, single=single,
                          sigma_f=float(sigma_f), sigma_m=float(sigma_m),
                          rho=float(rho), cond_cov_factor=factor)


def recover_innovations(transform, eta_star):
    """eps = Z^-1 [0; eta*] with zeros in the fixed coordinate slots."""
    return transform.recover(eta_star)


def solve_unit_factor(factor, eta_star):
    """Standardised coordinates z with factor @ z = eta_star."""
    return solve_triangular(factor, eta_star, lower=True)
