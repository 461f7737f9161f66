"""Joint log-posterior of the hybrid mortality model and its gradient.

The rate surface is assembled from three sub-models partitioning the age
range: an infant model at age 0, a P-spline GAM on [1, x_old) and a
logistic parametric curve at ages >= x_old.  Deaths follow a negative
binomial likelihood with mean exposure * rate.  Period and cohort effects
are random walks sampled through constraint-conditioned innovations (see
``constraints``).  Gradients are exact, obtained by automatic
differentiation of the closed-form posterior in float64.
"""

from dataclasses import dataclass, field

import numpy as np
import scipy.special

import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp
from jax.scipy.special import gammaln as _jgammaln

from . import constraints as con
from . import splines
from .ingest import standardize_axes

PRIOR_SD = 100.0  # weakly informative scale for regression coefficients


def nb_loglik(d, mu, phi):
    """Negative binomial log-pmf with gamma-function continuation in d.

    Fractional death counts are admitted by replacing d! with Gamma(d+1).
    Non-finite inputs yield -inf rather than raising.
    """
    d = np.asarray(d, dtype=float)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    with np.errstate(all="ignore"):
        log_denom = np.logaddexp(np.log(mu), np.log(phi))
        out = (scipy.special.gammaln(d + phi) - scipy.special.gammaln(d + 1.0)
               - scipy.special.gammaln(phi)
               + d * (np.log(mu) - log_denom)
               + phi * (np.log(phi) - log_denom))
    bad = ~(np.isfinite(d) & (d >= 0) & np.isfinite(mu) & (mu > 0)
            & np.isfinite(phi) & (phi > 0))
    return np.where(bad, -np.inf, out)


def transform_old_age_params(raw, horizon_std):
    """Map unconstrained slopes to the sign-constrained old-age slopes.

    Returns (beta1, beta2, beta3) with beta1 > 0, beta2 < 0 and
    beta3 > -beta1 / H, plus the log-Jacobian of the map.
    """
    r1, r2, r3 = raw
    beta1 = np.exp(r1)
    beta2 = -np.exp(r2)
    beta3 = -beta1 / horizon_std + np.exp(r3)
    return (beta1, beta2, beta3), r1 + r2 + r3


class ParamLayout:
    """Named slices into the flat unconstrained sampler vector."""

    def __init__(self, blocks):
        self.blocks = list(blocks)
        self.slices = {}
        offset = 0
        for name, size in self.blocks:
            self.slices[name] = slice(offset, offset + size)
            offset += size
        self.dim = offset

    def unpack(self, vec):
        return {name: vec[sl] for name, sl in self.slices.items()}

    def pack(self, parts):
        vec = np.zeros(self.dim)
        for name, sl in self.slices.items():
            vec[sl] = parts[name]
        return vec

    def names(self):
        out = []
        for name, size in self.blocks:
            if size == 1:
                out.append(name)
            else:
                out.extend(f"{name}[{i}]" for i in range(size))
        return out


@dataclass
class SexStructure:
    """Precomputed constants for one sex's data grid."""

    dataset: object
    mask: np.ndarray
    deaths: np.ndarray
    log_exposure: np.ndarray
    n_gam_ages: int
    age_basis: np.ndarray         # [n_gam_ages, p_age]
    age_eig_pos: np.ndarray       # positive eigenvalues of the diff penalty
    cohort_knots: np.ndarray
    cohort_values: np.ndarray     # all grid + forecast cohorts, ascending
    n_active: int
    cohort_basis_grid: np.ndarray  # [n_grid_cohorts, n_active]
    cohort_index: np.ndarray       # [n_ages, n_years] into cohort_values
    gamma_map: np.ndarray          # z_gamma -> active RW coefficients
    kappa_map: np.ndarray          # z_kappa -> kappa path
    period_transform: con.ConstraintTransform
    cohort_transform: con.ConstraintTransform
    t_std: np.ndarray
    tau: np.ndarray                # time since first year, decades
    x_std_old: np.ndarray
    included_flat: np.ndarray      # flat indices (age-major) of included cells


def _build_structure(dataset, x_old, horizon, scaling,
                     knot_spacing, n_exterior):
    ages = dataset.ages
    years = dataset.years
    if ages[0] != 0:
        raise ValueError("age grid must start at 0 (infant model)")
    if not ages[0] < 1 < x_old <= ages[-1]:
        raise ValueError("transition age must lie inside the age grid")

    n_gam_ages = int(np.sum((ages >= 1) & (ages < x_old)))
    gam_ages = ages[1:1 + n_gam_ages]
    age_block = splines.build_spline_block(
        float(gam_ages[0]), float(gam_ages[-1]), gam_ages.astype(float),
        spacing=knot_spacing, n_exterior=n_exterior)
    pair = splines.difference_penalty(age_block.n_coef)
    eig = np.linalg.eigvalsh(pair.diff_penalty)
    age_eig_pos = eig[eig > 1e-10]

    grid_cohorts = dataset.cohorts()
    last_cohort = int(years[-1]) + horizon
    cohort_values = np.arange(grid_cohorts[0], last_cohort + 1)
    cohort_knots = splines.place_knots(
        float(cohort_values[0]), float(cohort_values[-1]),
        knot_spacing, n_exterior)
    basis_all = splines.eval_basis(cohort_knots, 3, cohort_values.astype(float))

    cell_cohort = dataset.cohort_of_cell()
    included_cohorts = np.unique(cell_cohort[dataset.included])
    rows = np.searchsorted(cohort_values, included_cohorts)
    basis_constraint = basis_all[rows, :]
    active_cols = np.flatnonzero(np.any(basis_constraint != 0.0, axis=0))
    n_active = int(active_cols[-1]) + 1
    basis_constraint = basis_constraint[:, :n_active]

    ctrans = con.cohort_transform(n_active, basis_constraint)
    gamma_map = (con.cumsum_matrix(n_active) @ ctrans.free_map
                 @ ctrans.cond_cov_factor)

    n_years = len(years)
    ptrans = con.period_transform(n_years)
    kappa_map = (con.cumsum_matrix(n_years) @ ptrans.free_map
                 @ ptrans.cond_cov_factor)

    cohort_index = np.searchsorted(cohort_values, cell_cohort)
    t_std = scaling.year_to_std(years)
    tau = (years - float(years[0])) / scaling.time_scale
    old_ages = ages[ages >= x_old]
    x_std_old = scaling.age_to_std(old_ages)

    exposures = np.where(dataset.included, dataset.exposures, 1.0)
    return SexStructure(
        dataset=dataset, mask=dataset.included.astype(float),
        deaths=np.where(dataset.included, dataset.deaths, 0.0),
        log_exposure=np.log(exposures),
        n_gam_ages=n_gam_ages, age_basis=age_block.basis,
        age_eig_pos=age_eig_pos, cohort_knots=cohort_knots,
        cohort_values=cohort_values, n_active=n_active,
        cohort_basis_grid=basis_all[:len(grid_cohorts), :n_active],
        cohort_index=cohort_index, gamma_map=gamma_map,
        kappa_map=kappa_map, period_transform=ptrans,
        cohort_transform=ctrans, t_std=np.asarray(t_std, dtype=float),
        tau=np.asarray(tau, dtype=float),
        x_std_old=np.asarray(x_std_old, dtype=float),
        included_flat=np.flatnonzero(dataset.included.ravel()))


def _sex_blocks(suffix, struct):
    p_age = struct.age_basis.shape[1]
    return [
        (f"beta_alpha{suffix}", p_age),
        (f"beta_beta{suffix}", p_age),
        (f"z_gamma{suffix}", struct.n_active - 3),
        (f"z_kappa{suffix}", len(struct.t_std) - 2),
        (f"beta_old{suffix}", 4),
        (f"beta_infant{suffix}", 2),
        (f"log_sigma_alpha{suffix}", 2),
        (f"log_sigma_beta{suffix}", 2),
        (f"log_sigma_kappa{suffix}", 1),
        (f"log_sigma_gamma{suffix}", 1),
        (f"log_phi{suffix}", 1),
    ]


def _np_softplus(x):
    return np.logaddexp(0.0, x)


class MortalityModel:
    """Log-posterior, gradient and surface evaluation for one model spec.

    ``sex_mode`` is "single" (one dataset) or "joint" (female and male
    datasets on identical grids, shared old-age asymptote and correlated
    period innovations).
    """

    def __init__(self, datasets, x_old, horizon, sex_mode="single",
                 knot_spacing=4.0, n_exterior=3):
        if not 1 <= horizon:
            raise ValueError("horizon must be at least 1")
        self.x_old = int(x_old)
        self.horizon = int(horizon)
        self.sex_mode = sex_mode
        self.knot_spacing = knot_spacing
        self.n_exterior = n_exterior
        if sex_mode == "single":
            self.datasets = {datasets.sex: datasets}
        elif sex_mode == "joint":
            self.datasets = {"female": datasets["female"],
                             "male": datasets["male"]}
            ds_f, ds_m = self.datasets["female"], self.datasets["male"]
            if (not np.array_equal(ds_f.ages, ds_m.ages)
                    or not np.array_equal(ds_f.years, ds_m.years)):
                raise ValueError("joint mode requires identical grids")
        else:
            raise ValueError(f"unknown sex_mode {sex_mode!r}")

        first = next(iter(self.datasets.values()))
        self.scaling = standardize_axes(first)
        self.years = first.years
        self.ages = first.ages
        self.horizon_std = (float(first.years[-1]) + horizon
                            - float(first.years[0])) / self.scaling.time_scale

        self.structures = {
            sex: _build_structure(ds, self.x_old, horizon, self.scaling,
                                  knot_spacing, n_exterior)
            for sex, ds in self.datasets.items()}

        blocks = []
        if sex_mode == "single":
            blocks += _sex_blocks("", first_struct := next(
                iter(self.structures.values())))
            blocks.append(("log_psi", 1))
        else:
            blocks += _sex_blocks("_f", self.structures["female"])
            blocks += _sex_blocks("_m", self.structures["male"])
            blocks.append(("log_psi", 1))
            blocks.append(("logit_rho", 1))
        self.layout = ParamLayout(blocks)
        self.dim = self.layout.dim

        self._logp_grad_fn = None
        self._cell_loglik_fn = None

    # ------------------------------------------------------------------
    # component extraction (numpy; used by forecasting and summaries)

    def _suffix(self, sex):
        if self.sex_mode == "single":
            return ""
        return "_f" if sex == "female" else "_m"

    def components(self, vec, sex):
        """Natural-scale components of one draw for one sex."""
        parts = self.layout.unpack(np.asarray(vec, dtype=float))
        sfx = self._suffix(sex)
        struct = self.structures[sex]
        sigma_k = float(np.exp(parts[f"log_sigma_kappa{sfx}"][0]))
        sigma_g = float(np.exp(parts[f"log_sigma_gamma{sfx}"][0]))
        if self.sex_mode == "single":
            kappa = sigma_k * struct.kappa_map @ parts["z_kappa"]
        else:
            rho = float(scipy.special.expit(parts["logit_rho"][0]))
            z_f = parts["z_kappa_f"]
            z_m = parts["z_kappa_m"]
            base_f = struct.kappa_map @ z_f
            if sex == "female":
                kappa = sigma_k * base_f
            else:
                kappa = sigma_k * (rho * base_f
                                   + np.sqrt(1.0 - rho**2)
                                   * (struct.kappa_map @ z_m))
        beta_gamma = sigma_g * struct.gamma_map @ parts[f"z_gamma{sfx}"]
        (b1, b2, b3), _ = transform_old_age_params(
            parts[f"beta_old{sfx}"][1:], self.horizon_std)
        return {
            "beta_alpha": parts[f"beta_alpha{sfx}"],
            "beta_beta": parts[f"beta_beta{sfx}"],
            "kappa": kappa,
            "beta_gamma": beta_gamma,
            "old_intercept": float(parts[f"beta_old{sfx}"][0]),
            "old_slopes": (b1, b2, b3),
            "beta_infant": parts[f"beta_infant{sfx}"],
            "phi": float(np.exp(parts[f"log_phi{sfx}"][0])),
            "psi": float(np.exp(parts["log_psi"][0])),
            "sigma_kappa": sigma_k,
            "sigma_gamma": sigma_g,
        }

    def cohort_basis_for_years(self, sex, years):
        """Cohort basis rows for every (age, year) cell of a year axis."""
        struct = self.structures[sex]
        years = np.asarray(years)
        cohorts = years[None, :] - self.ages[:, None]
        basis = splines.eval_basis(struct.cohort_knots, 3,
                                   cohorts.ravel().astype(float))
        return basis.reshape(cohorts.shape + (basis.shape[1],))

    def surface_from_components(self, comp, sex, years=None, kappa=None,
                                beta_gamma=None, cohort_basis=None):
        """Log-rate surface over ``years`` (default: the fitted years).

        ``kappa`` and ``beta_gamma`` default to the in-sample paths in
        ``comp``; forecasting passes extended versions together with the
        extended year axis.  ``cohort_basis`` may carry the precomputed
        result of cohort_basis_for_years for the same year axis.
        """
        struct = self.structures[sex]
        if years is None:
            years = self.years
        if kappa is None:
            kappa = comp["kappa"]
        if beta_gamma is None:
            beta_gamma = comp["beta_gamma"]
        years = np.asarray(years)
        t_std = self.scaling.year_to_std(years)
        tau = (years - float(self.years[0])) / self.scaling.time_scale

        if cohort_basis is None:
            cohort_basis = self.cohort_basis_for_years(sex, years)
        n_coef = min(len(beta_gamma), cohort_basis.shape[2])
        s_gamma = cohort_basis[:, :, :n_coef] @ beta_gamma[:n_coef]

        n_gam = struct.n_gam_ages
        s_alpha = struct.age_basis @ comp["beta_alpha"]
        s_beta = struct.age_basis @ comp["beta_beta"]

        log_m = np.empty((len(self.ages), len(years)))
        log_m[0, :] = (comp["beta_infant"][0]
                       + comp["beta_infant"][1] * t_std + s_gamma[0, :])
        log_m[1:1 + n_gam, :] = (s_alpha[:, None]
                                 + np.outer(s_beta, t_std)
                                 + s_gamma[1:1 + n_gam, :]
                                 + kappa[None, :])
        b0 = comp["old_intercept"]
        b1, b2, b3 = comp["old_slopes"]
        x = struct.x_std_old[:, None]
        u = b0 + b1 * x + b2 * tau[None, :] + b3 * x * tau[None, :]
        log_m[1 + n_gam:, :] = (u - _np_softplus(u - np.log(comp["psi"]))
                                + s_gamma[1 + n_gam:, :] + kappa[None, :])
        return log_m

    def log_m_insample(self, vec):
        """In-sample log-rate surfaces, one per sex."""
        return {sex: self.surface_from_components(self.components(vec, sex),
                                                  sex)
                for sex in self.structures}

    # ------------------------------------------------------------------
    # jax log posterior

    def _sex_loglik_terms(self, parts, sfx, struct, log_psi, kappa):
        """(log-likelihood cell matrix, log-prior) for one sex."""
        beta_alpha = parts[f"beta_alpha{sfx}"]
        beta_beta = parts[f"beta_beta{sfx}"]
        z_gamma = parts[f"z_gamma{sfx}"]
        beta_old = parts[f"beta_old{sfx}"]
        beta_infant = parts[f"beta_infant{sfx}"]
        log_phi = parts[f"log_phi{sfx}"][0]
        lsig_g = parts[f"log_sigma_gamma{sfx}"][0]
        sigma_g = jnp.exp(lsig_g)

        gamma_map = jnp.asarray(struct.gamma_map)
        beta_gamma = sigma_g * gamma_map @ z_gamma
        s_gamma_coh = jnp.asarray(struct.cohort_basis_grid) @ beta_gamma
        s_gamma = s_gamma_coh[jnp.asarray(struct.cohort_index)]

        age_basis = jnp.asarray(struct.age_basis)
        s_alpha = age_basis @ beta_alpha
        s_beta = age_basis @ beta_beta
        t_std = jnp.asarray(struct.t_std)
        tau = jnp.asarray(struct.tau)

        n_gam = struct.n_gam_ages
        infant_row = (beta_infant[0] + beta_infant[1] * t_std
                      + s_gamma[0, :])[None, :]
        gam_rows = (s_alpha[:, None] + jnp.outer(s_beta, t_std)
                    + s_gamma[1:1 + n_gam, :] + kappa[None, :])

        r1, r2, r3 = beta_old[1], beta_old[2], beta_old[3]
        b1 = jnp.exp(r1)
        b2 = -jnp.exp(r2)
        b3 = -b1 / self.horizon_std + jnp.exp(r3)
        x = jnp.asarray(struct.x_std_old)[:, None]
        u = beta_old[0] + b1 * x + b2 * tau[None, :] + b3 * x * tau[None, :]
        old_rows = (u - jax.nn.softplus(u - log_psi)
                    + s_gamma[1 + n_gam:, :] + kappa[None, :])

        log_m = jnp.concatenate([infant_row, gam_rows, old_rows], axis=0)
        log_mu = jnp.asarray(struct.log_exposure) + log_m
        d = jnp.asarray(struct.deaths)
        phi = jnp.exp(log_phi)
        log_denom = jnp.logaddexp(log_mu, log_phi)
        cell_ll = (_jgammaln(d + phi) - _jgammaln(d + 1.0) - _jgammaln(phi)
                   + d * (log_mu - log_denom)
                   + phi * (log_phi - log_denom))
        cell_ll = jnp.asarray(struct.mask) * cell_ll

        # priors --------------------------------------------------------
        lp = 0.0
        for beta, key in ((beta_alpha, f"log_sigma_alpha{sfx}"),
                          (beta_beta, f"log_sigma_beta{sfx}")):
            lsa, lsb = parts[key][0], parts[key][1]
            sa2 = jnp.exp(2.0 * lsa)
            sb2 = jnp.exp(2.0 * lsb)
            p = beta.shape[0]
            quad = (jnp.sum(jnp.diff(beta) ** 2) / sa2
                    + jnp.sum(beta) ** 2 / (p * sb2))
            logdet = (jnp.sum(jnp.log(jnp.asarray(struct.age_eig_pos)))
                      - 2.0 * (p - 1) * lsa - 2.0 * lsb)
            lp += 0.5 * logdet - 0.5 * quad
            # half-normal hyperpriors plus log-scale Jacobians
            lp += (-jnp.exp(2.0 * lsa) / (2.0 * PRIOR_SD**2) + lsa
                   - jnp.exp(2.0 * lsb) / (2.0 * PRIOR_SD**2) + lsb)

        lsig_k = parts[f"log_sigma_kappa{sfx}"][0]
        for lsig in (lsig_k, lsig_g):
            lp += -jnp.exp(2.0 * lsig) / (2.0 * PRIOR_SD**2) + lsig

        lp += -0.5 * jnp.sum(z_gamma**2)
        lp += -0.5 * jnp.sum(parts[f"z_kappa{sfx}"] ** 2)

        # old-age and infant coefficient priors on the natural scale
        lp += -(beta_old[0] ** 2 + b1**2 + b2**2 + b3**2) / (2.0 * PRIOR_SD**2)
        lp += r1 + r2 + r3  # Jacobian of the sign-constraint transform
        lp += -jnp.sum(beta_infant**2) / (2.0 * PRIOR_SD**2)
        # flat prior on log_phi: no contribution
        return cell_ll, lp

    def _logp_cells(self, vec):
        parts = {name: vec[self.layout.slices[name]]
                 for name, _ in self.layout.blocks}
        log_psi = parts["log_psi"][0]
        lp = -0.5 * log_psi**2  # LogNormal(0, 1) on psi, Jacobian included

        cell_blocks = []
        if self.sex_mode == "single":
            sex = next(iter(self.structures))
            struct = self.structures[sex]
            sigma_k = jnp.exp(parts["log_sigma_kappa"][0])
            kappa = sigma_k * jnp.asarray(struct.kappa_map) @ parts["z_kappa"]
            cells, lp_sex = self._sex_loglik_terms(parts, "", struct,
                                                   log_psi, kappa)
            lp += lp_sex
            cell_blocks.append(cells)
        else:
            logit_rho = parts["logit_rho"][0]
            rho = jax.nn.sigmoid(logit_rho)
            lp += jnp.log(rho) + jnp.log1p(-rho)  # Beta(1,1) + Jacobian
            struct_f = self.structures["female"]
            struct_m = self.structures["male"]
            kmap_f = jnp.asarray(struct_f.kappa_map)
            kmap_m = jnp.asarray(struct_m.kappa_map)
            sigma_f = jnp.exp(parts["log_sigma_kappa_f"][0])
            sigma_m = jnp.exp(parts["log_sigma_kappa_m"][0])
            base_f = kmap_f @ parts["z_kappa_f"]
            kappa_f = sigma_f * base_f
            kappa_m = sigma_m * (rho * base_f
                                 + jnp.sqrt(1.0 - rho**2)
                                 * (kmap_m @ parts["z_kappa_m"]))
            cells_f, lp_f = self._sex_loglik_terms(parts, "_f", struct_f,
                                                   log_psi, kappa_f)
            cells_m, lp_m = self._sex_loglik_terms(parts, "_m", struct_m,
                                                   log_psi, kappa_m)
            lp += lp_f + lp_m
            cell_blocks.extend([cells_f, cells_m])
        return cell_blocks, lp

    def _logp(self, vec):
        cell_blocks, lp = self._logp_cells(vec)
        for cells in cell_blocks:
            lp += jnp.sum(cells)
        return lp

    def _ensure_compiled(self):
        if self._logp_grad_fn is None:
            self._logp_grad_fn = jax.jit(jax.value_and_grad(self._logp))

    def logp(self, vec):
        value, _ = self.logp_and_grad(vec)
        return value

    def logp_and_grad(self, vec):
        """Log posterior density and its gradient at an unconstrained point.

        Non-finite evaluations are surfaced as (-inf, zeros) so the
        sampler treats them as divergent rather than crashing.
        """
        self._ensure_compiled()
        value, grad = self._logp_grad_fn(jnp.asarray(vec, dtype=jnp.float64))
        value = float(value)
        grad = np.asarray(grad)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros(self.dim)
        return value, grad

    # ------------------------------------------------------------------
    # pointwise log-likelihood for LOO

    def included_cells(self):
        """(sex, age index, year index) for every included cell, in the
        order used by pointwise_loglik columns."""
        out = []
        n_years = len(self.years)
        for sex, struct in self.structures.items():
            for flat in struct.included_flat:
                out.append((sex, flat // n_years, flat % n_years))
        return out

    def pointwise_loglik(self, draws, batch_size=200):
        """Matrix [n_draws, n_included_cells] of per-cell log-likelihoods."""
        if self._cell_loglik_fn is None:
            def cell_fn(vec):
                blocks, _ = self._logp_cells(vec)
                flats = []
                for cells, struct in zip(blocks, self.structures.values()):
                    flats.append(cells.ravel()[
                        jnp.asarray(struct.included_flat)])
                return jnp.concatenate(flats)
            self._cell_loglik_fn = jax.jit(jax.vmap(cell_fn))
        draws = np.asarray(draws, dtype=float)
        chunks = []
        for start in range(0, draws.shape[0], batch_size):
            chunk = self._cell_loglik_fn(
                jnp.asarray(draws[start:start + batch_size]))
            chunks.append(np.asarray(chunk))
        return np.concatenate(chunks, axis=0)

    def total_loglik(self, vec):
        """Data log-likelihood only (no priors), for testing additivity."""
        cell_blocks, _ = self._logp_cells(jnp.asarray(vec, dtype=jnp.float64))
        return float(sum(jnp.sum(c) for c in cell_blocks))


def build_model(datasets, x_old, horizon, sex_mode="single",
                knot_spacing=4.0, n_exterior=3):
    """Convenience constructor mirroring MortalityModel.__init__."""
    return MortalityModel(datasets, x_old, horizon, sex_mode=sex_mode,
                          knot_spacing=knot_spacing, n_exterior=n_exterior)
