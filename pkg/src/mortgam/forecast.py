"""Forecast surfaces, death probabilities, life expectancy and assessment.

A fitted model is extended through the forecast horizon by drawing
unconstrained random-walk innovations for the period effects and the
cohort-spline coefficients, then evaluating the same rate formulas over
the enlarged grid.  Stacked surfaces mix draws across the transition-age
menu in proportion to the stacking weights.
"""

from dataclasses import dataclass

import numpy as np

from . import splines

FAN_LEVELS = (2, 10, 20, 30, 40, 50, 60, 70, 80, 90)


@dataclass
class ForecastSurface:
    """Posterior-predictive log-rate draws over fitted plus forecast years."""

    log_m: np.ndarray        # [n_draws, n_ages, n_years_total]
    ages: np.ndarray
    years: np.ndarray        # fitted years followed by forecast years
    n_fitted_years: int
    source_model: np.ndarray  # transition age that generated each draw


@dataclass
class LifeTableResult:
    q: np.ndarray     # [n_draws, n_ages]
    e0: np.ndarray    # [n_draws]


def extend_period(kappa, sigma_kappa, horizon, rng):
    """Continue the period random walk past the fitted years.

    Forecast innovations are unconstrained: i.i.d. Normal(0, sigma^2)
    added cumulatively to the final fitted value.
    """
    innovations = sigma_kappa * rng.standard_normal(horizon)
    return kappa[-1] + np.cumsum(innovations)


def extend_period_joint(kappa_f, kappa_m, sigma_f, sigma_m, rho, horizon,
                        rng):
    """Correlated two-sex continuation of the period random walks."""
    z1 = rng.standard_normal(horizon)
    z2 = rng.standard_normal(horizon)
    eps_f = sigma_f * z1
    eps_m = sigma_m * (rho * z1 + np.sqrt(1.0 - rho**2) * z2)
    return (kappa_f[-1] + np.cumsum(eps_f),
            kappa_m[-1] + np.cumsum(eps_m))


def extend_cohort(beta_gamma, sigma_gamma, n_new, rng):
    """Append cohort-spline coefficients by continuing the random walk."""
    if n_new == 0:
        return beta_gamma
    innovations = sigma_gamma * rng.standard_normal(n_new)
    new = beta_gamma[-1] + np.cumsum(innovations)
    return np.concatenate([beta_gamma, new])


def n_new_cohort_coefficients(struct):
    """Coefficients beyond the constrained block needed for the horizon."""
    total = len(struct.cohort_knots) - 4  # cubic basis size
    return total - struct.n_active


def predict_log_rates(model, draws, rng, source_tag=None):
    """Posterior-predictive surfaces per sex for one model's draws.

    Returns {sex: ForecastSurface}.  Fitted-year columns come from the
    same surface routine used in-sample, so the zero-horizon entries
    reproduce the in-sample fit exactly.
    """
    draws = np.asarray(draws, dtype=float)
    horizon = model.horizon
    future_years = model.years[-1] + 1 + np.arange(horizon)
    years_all = np.concatenate([model.years, future_years])
    n_fit = len(model.years)
    sexes = list(model.structures)
    surfaces = {sex: np.empty((draws.shape[0], len(model.ages),
                               len(years_all))) for sex in sexes}
    bases = {sex: model.cohort_basis_for_years(sex, future_years)
             for sex in sexes}
    for i, vec in enumerate(draws):
        comps = {sex: model.components(vec, sex) for sex in sexes}
        if model.sex_mode == "joint":
            kf, km = extend_period_joint(
                comps["female"]["kappa"], comps["male"]["kappa"],
                comps["female"]["sigma_kappa"],
                comps["male"]["sigma_kappa"],
                _joint_rho(model, vec), horizon, rng)
            kappa_future = {"female": kf, "male": km}
        else:
            sex = sexes[0]
            comp = comps[sex]
            kappa_future = {sex: extend_period(
                comp["kappa"], comp["sigma_kappa"], horizon, rng)}
        for sex in sexes:
            comp = comps[sex]
            n_new = n_new_cohort_coefficients(model.structures[sex])
            beta_ext = extend_cohort(comp["beta_gamma"],
                                     comp["sigma_gamma"], n_new, rng)
            # fitted columns reuse the in-sample route so the
            # zero-horizon surface is reproduced exactly
            surfaces[sex][i, :, :n_fit] = model.surface_from_components(
                comp, sex)
            surfaces[sex][i, :, n_fit:] = model.surface_from_components(
                comp, sex, years=future_years, kappa=kappa_future[sex],
                beta_gamma=beta_ext, cohort_basis=bases[sex])
    tag = np.full(draws.shape[0],
                  source_tag if source_tag is not None else model.x_old)
    return {sex: ForecastSurface(log_m=surfaces[sex], ages=model.ages,
                                 years=years_all,
                                 n_fitted_years=len(model.years),
                                 source_model=tag.copy())
            for sex in sexes}


def _joint_rho(model, vec):
    import scipy.special
    parts = model.layout.unpack(np.asarray(vec, dtype=float))
    return float(scipy.special.expit(parts["logit_rho"][0]))


def combine_surfaces(surfaces, model_idx, draw_idx):
    """Stacked surface assembled from per-model surfaces and an allocation.

    ``surfaces`` is a list of ForecastSurface (same grid); the allocation
    arrays come from loo_stack.stacked_draws.
    """
    base = surfaces[0]
    n_out = len(model_idx)
    log_m = np.empty((n_out, base.log_m.shape[1], base.log_m.shape[2]))
    source = np.empty(n_out, dtype=base.source_model.dtype)
    for j, (m, d) in enumerate(zip(model_idx, draw_idx)):
        log_m[j] = surfaces[m].log_m[d]
        source[j] = surfaces[m].source_model[d]
    return ForecastSurface(log_m=log_m, ages=base.ages, years=base.years,
                           n_fitted_years=base.n_fitted_years,
                           source_model=source)


def qx_from_m(m):
    """Death probability from the central rate: q = 1 - exp(-m)."""
    m = np.asarray(m, dtype=float)
    if np.any(m < 0):
        raise ValueError("central rates must be non-negative")
    return -np.expm1(-m)


def life_expectancy(q, a0=0.1, a_adult=0.5, terminal_m=None):
    """Period life expectancy at birth from a death-probability schedule.

    Uses the standard complete-life-table recursion with separation
    factor ``a0`` for infants and ``a_adult`` elsewhere.  When
    ``terminal_m`` is given, the final age is treated as an open interval
    with person-years l_omega / m_omega; otherwise the table is simply
    truncated at the last age.
    """
    q = np.asarray(q, dtype=float)
    if np.any((q < 0) | (q >= 1.0 + 1e-12)):
        raise ValueError("death probabilities must lie in [0, 1)")
    q = np.clip(q, 0.0, 1.0 - 1e-15)
    n = len(q)
    l = np.empty(n + 1)
    l[0] = 1.0
    for x in range(n):
        l[x + 1] = l[x] * (1.0 - q[x])
    d = l[:-1] - l[1:]
    a = np.full(n, a_adult)
    a[0] = a0
    big_l = l[1:] + a * d
    e0 = float(np.sum(big_l))
    if terminal_m is not None and terminal_m > 0:
        e0 += l[-1] / terminal_m
    return e0


def life_table_from_surface(surface, year, terminal_from_rate=True):
    """Per-draw q schedules and life expectancy for one calendar year."""
    j = int(np.flatnonzero(surface.years == year)[0])
    m = np.exp(surface.log_m[:, :, j])
    q = qx_from_m(m)
    n_draws = q.shape[0]
    e0 = np.empty(n_draws)
    for i in range(n_draws):
        terminal = m[i, -1] if terminal_from_rate else None
        e0[i] = life_expectancy(q[i, :-1], terminal_m=terminal)
    return LifeTableResult(q=q, e0=e0)


def summarize_fan(draws, levels=FAN_LEVELS, axis=0):
    """Central interval bounds and median across the draw axis.

    Returns {level: (lower, upper)} plus key "median".
    """
    draws = np.asarray(draws, dtype=float)
    if draws.shape[axis] < 100:
        raise ValueError("need at least 100 draws for fan summaries")
    out = {"median": np.quantile(draws, 0.5, axis=axis)}
    for level in levels:
        half = level / 200.0
        out[level] = (np.quantile(draws, 0.5 - half, axis=axis),
                      np.quantile(draws, 0.5 + half, axis=axis))
    return out


def holdback_coverage(surface, dataset, level=90):
    """Share of held-out empirical log-rates inside the predictive band.

    ``surface`` was fitted on years ending before the dataset's last
    year.  Cells with zero observed deaths have no empirical log-rate and
    are counted separately.
    """
    fitted_last = surface.years[surface.n_fitted_years - 1]
    held_years = dataset.years[dataset.years > fitted_last]
    if len(held_years) == 0:
        raise ValueError("dataset does not extend past the fitted years")
    half = level / 200.0
    rows = []
    for year in held_years:
        j_surf = int(np.flatnonzero(surface.years == year)[0])
        j_obs = int(np.flatnonzero(dataset.years == year)[0])
        lo = np.quantile(surface.log_m[:, :, j_surf], 0.5 - half, axis=0)
        hi = np.quantile(surface.log_m[:, :, j_surf], 0.5 + half, axis=0)
        n_in = n_total = n_undefined = 0
        for i in range(len(dataset.ages)):
            if not dataset.included[i, j_obs]:
                continue
            deaths = dataset.deaths[i, j_obs]
            if deaths <= 0:
                n_undefined += 1
                continue
            obs = np.log(deaths / dataset.exposures[i, j_obs])
            n_total += 1
            if lo[i] <= obs <= hi[i]:
                n_in += 1
        rows.append({"year": int(year), "n_cells": n_total,
                     "n_inside": n_in, "n_undefined": n_undefined,
                     "coverage": n_in / n_total if n_total else np.nan})
    total_cells = sum(r["n_cells"] for r in rows)
    total_in = sum(r["n_inside"] for r in rows)
    return {"level": level, "by_year": rows,
            "overall": total_in / total_cells if total_cells else np.nan}
