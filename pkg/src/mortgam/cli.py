"""Command-line pipeline: ingest, fit the transition-age menu, LOO,
stacking, forecasting and hold-back assessment.

Every stage persists its artifacts under the output directory and records
itself in ``manifest.json``; a later stage only needs the artifacts of the
earlier ones, so deleting one stage's outputs and re-running with
``--resume`` recomputes just that stage.  Given the same configuration and
seed, all output files are reproduced identically.
"""

import csv
import json
import logging
import time
from dataclasses import dataclass, field, asdict
from pathlib import Path

import click
import numpy as np

from . import forecast as fc
from . import ingest
from . import loo_stack
from .model import build_model
from .sampler import ChainConfig, run_chains, diagnostics, thin_merge

log = logging.getLogger("mortgam")

RHAT_THRESHOLD = 1.05

CONFIG_DEFAULTS = {
    "deaths": None,            # single-sex mode: path to HMD deaths table
    "exposures": None,
    "sex": "female",
    "deaths_female": None,     # joint mode paths
    "exposures_female": None,
    "deaths_male": None,
    "exposures_male": None,
    "sex_mode": "single",
    "fit_years": None,         # [first, last], inclusive
    "holdback_from": None,     # first held-back year, or null
    "age_max": 110,
    "n_excluded_cohorts": 0,
    "menu": list(range(80, 96)),
    "horizon": 25,
    "knot_spacing": 4.0,
    "n_chains": 4,
    "n_iterations": 8000,
    "warmup_fraction": 0.5,
    "thin": 4,
    "target_acceptance": 0.8,
    "max_tree_depth": 10,
    "metric": "dense",
    "n_stacked_draws": 4000,
    "stack_mode": "stratified",
    "seed": 0,
    "out": "run_output",
}


@dataclass
class RunConfig:
    """Resolved pipeline configuration (see CONFIG_DEFAULTS for keys)."""

    values: dict = field(default_factory=dict)

    def __getattr__(self, key):
        try:
            return self.values[key]
        except KeyError as exc:
            raise AttributeError(key) from exc

    @property
    def chain_config(self):
        return ChainConfig(n_chains=self.n_chains,
                           n_iterations=self.n_iterations,
                           warmup_fraction=self.warmup_fraction,
                           thin=self.thin, seed=self.seed,
                           target_acceptance=self.target_acceptance,
                           max_tree_depth=self.max_tree_depth,
                           metric=self.metric)

    @property
    def fit_last_year(self):
        if self.holdback_from is None:
            return self.fit_years[1]
        return self.holdback_from - 1


def _validate(values):
    if not values["menu"]:
        raise ValueError("menu must be non-empty")
    if values["horizon"] < 1:
        raise ValueError("horizon must be at least 1")
    if values["fit_years"] is None:
        raise ValueError("fit_years is required")
    first, last = values["fit_years"]
    if first > last:
        raise ValueError("fit_years must be an ascending [first, last] pair")
    hb = values["holdback_from"]
    if hb is not None and not first < hb <= last:
        raise ValueError("holdback_from must fall after the first fit year "
                         "and inside the fit range")
    if values["sex_mode"] not in ("single", "joint"):
        raise ValueError("sex_mode must be 'single' or 'joint'")
    if values["sex_mode"] == "single":
        missing = [k for k in ("deaths", "exposures") if not values[k]]
    else:
        missing = [k for k in ("deaths_female", "exposures_female",
                               "deaths_male", "exposures_male")
                   if not values[k]]
    if missing:
        raise ValueError(f"missing data paths for {values['sex_mode']} "
                         f"mode: {', '.join(missing)}")


def load_config(path, overrides=None):
    """Read a JSON config, apply defaults and overrides, validate.

    Unknown keys are rejected with the list of valid ones.
    """
    with open(path) as fh:
        raw = json.load(fh)
    unknown = sorted(set(raw) - set(CONFIG_DEFAULTS))
    if unknown:
        raise ValueError(
            f"unknown config keys {unknown}; valid keys: "
            f"{sorted(CONFIG_DEFAULTS)}")
    values = dict(CONFIG_DEFAULTS)
    values.update(raw)
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value
    _validate(values)
    return RunConfig(values=values)


# ----------------------------------------------------------------------
# manifest bookkeeping

def _manifest_path(out):
    return Path(out) / "manifest.json"


def _load_manifest(out):
    path = _manifest_path(out)
    if path.exists():
        with open(path) as fh:
            return json.load(fh)
    return {"stages": {}}


def _record_stage(out, name, info):
    manifest = _load_manifest(out)
    manifest["stages"][name] = info
    with open(_manifest_path(out), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)


def _stage_done(out, name, files):
    manifest = _load_manifest(out)
    if name not in manifest["stages"]:
        return False
    return all((Path(out) / f).exists() for f in files)


# ----------------------------------------------------------------------
# stages

def _sexes(config):
    if config.sex_mode == "single":
        return [config.sex]
    return ["female", "male"]


def _dataset_file(out, sex):
    return f"dataset_{sex}.npz"


def stage_ingest(config, resume=False):
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    files = [_dataset_file(config.out, s) for s in _sexes(config)]
    if resume and _stage_done(config.out, "ingest", files):
        log.info("ingest: artifacts present, skipping")
        return
    t0 = time.time()
    if config.sex_mode == "single":
        paths = {config.sex: (config.deaths, config.exposures)}
    else:
        paths = {"female": (config.deaths_female, config.exposures_female),
                 "male": (config.deaths_male, config.exposures_male)}
    audit_rows = []
    for sex, (dpath, epath) in paths.items():
        with open(dpath) as fh:
            deaths_table = ingest.parse_hmd_table(fh.read())
        with open(epath) as fh:
            exposures_table = ingest.parse_hmd_table(fh.read())
        first, last = config.fit_years
        ds = ingest.align_dataset(deaths_table, exposures_table, sex,
                                  (first, last))
        if config.age_max < 110:
            ds = ingest.truncate_ages(ds, config.age_max)
        if config.n_excluded_cohorts:
            ds = ingest.cohort_mask(ds, config.n_excluded_cohorts)
        np.savez(out / _dataset_file(config.out, sex),
                 ages=ds.ages, years=ds.years, deaths=ds.deaths,
                 exposures=ds.exposures, included=ds.included, sex=sex)
        audit_rows.append({
            "sex": sex, "first_year": int(ds.years[0]),
            "last_year": int(ds.years[-1]), "n_ages": len(ds.ages),
            "n_cells": int(ds.included.size),
            "n_excluded": int((~ds.included).sum()),
            "total_deaths": float(ds.deaths[ds.included].sum())})
    _write_csv(out / "dataset_audit.csv", audit_rows)
    _record_stage(config.out, "ingest",
                  {"wall_time_s": round(time.time() - t0, 2),
                   "files": files})


def _load_dataset(config, sex):
    data = np.load(Path(config.out) / _dataset_file(config.out, sex))
    return ingest.MortalityDataset(
        ages=data["ages"], years=data["years"], deaths=data["deaths"],
        exposures=data["exposures"], sex=str(data["sex"]),
        included=data["included"])


def _fit_datasets(config):
    """Datasets restricted to the fit years (hold-back removed)."""
    out = {}
    for sex in _sexes(config):
        ds = _load_dataset(config, sex)
        last = config.fit_last_year
        keep = ds.years <= last
        out[sex] = ingest.MortalityDataset(
            ages=ds.ages, years=ds.years[keep], deaths=ds.deaths[:, keep],
            exposures=ds.exposures[:, keep], sex=ds.sex,
            included=ds.included[:, keep])
    return out


def _model_for(config, datasets, x_old):
    horizon = config.horizon
    if config.holdback_from is not None:
        horizon = max(horizon,
                      config.fit_years[1] - config.fit_last_year)
    if config.sex_mode == "single":
        return build_model(datasets[config.sex], x_old=x_old,
                           horizon=horizon, sex_mode="single",
                           knot_spacing=config.knot_spacing)
    return build_model(datasets, x_old=x_old, horizon=horizon,
                       sex_mode="joint", knot_spacing=config.knot_spacing)


def informed_init(model, rng, jitter=0.05):
    """Empirical least-squares starting point with a little jitter.

    Age profiles and trends are regressed from log(max(deaths, 0.5) /
    exposure); scale parameters start at moderate values.
    """
    parts = {name: jitter * rng.standard_normal(sl.stop - sl.start)
             for name, sl in model.layout.slices.items()}
    for sex in model.structures:
        sfx = model._suffix(sex)
        ds = model.datasets[sex]
        st = model.structures[sex]
        emp = np.log(np.maximum(ds.deaths, 0.5) / ds.exposures)
        gam = emp[1:1 + st.n_gam_ages]
        t = st.t_std
        mean_age = gam.mean(axis=1)
        slope = gam @ (t - t.mean()) / np.sum((t - t.mean()) ** 2)
        basis = st.age_basis
        parts[f"beta_alpha{sfx}"] += np.linalg.lstsq(basis, mean_age,
                                                     rcond=None)[0]
        parts[f"beta_beta{sfx}"] += np.linalg.lstsq(basis, slope,
                                                    rcond=None)[0]
        parts[f"beta_old{sfx}"] += np.array(
            [emp[1 + st.n_gam_ages:].mean(), np.log(0.5), np.log(0.05),
             np.log(0.05)])
        parts[f"beta_infant{sfx}"] += np.array([emp[0].mean(), -0.2])
        parts[f"log_sigma_kappa{sfx}"] += np.log(0.1)
        parts[f"log_sigma_gamma{sfx}"] += np.log(0.1)
        parts[f"log_phi{sfx}"] += np.log(50.0)
    return model.layout.pack(parts)


def stage_fit(config, resume=False):
    out = Path(config.out)
    datasets = _fit_datasets(config)
    for x_old in config.menu:
        draw_file = f"draws_x{x_old}.npz"
        diag_file = f"diagnostics_x{x_old}.json"
        if resume and _stage_done(config.out, f"fit_x{x_old}",
                                  [draw_file, diag_file]):
            log.info("fit x_old=%d: artifacts present, skipping", x_old)
            continue
        t0 = time.time()
        log.info("fitting transition age %d", x_old)
        model = _model_for(config, datasets, x_old)
        cfg = config.chain_config
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, x_old, 1]))
        init = np.array([informed_init(model, rng)
                         for _ in range(cfg.n_chains)])
        store = run_chains(model.logp_and_grad, model.dim, cfg, init=init,
                           param_names=model.layout.names())
        table, flagged = diagnostics(store, RHAT_THRESHOLD)
        rhats = [v["rhat"] for v in table.values()
                 if np.isfinite(v["rhat"])]
        merged = thin_merge(store)
        np.savez(out / draw_file, draws=merged,
                 param_names=np.array(store.param_names),
                 divergences=store.divergences,
                 step_sizes=store.step_sizes)
        diag = {"x_old": x_old,
                "worst_rhat": float(max(rhats)) if rhats else None,
                "n_flagged": len(flagged), "flagged": flagged,
                "divergences": store.divergences.tolist(),
                "n_retained": int(merged.shape[0]),
                "converged": not flagged,
                "wall_time_s": round(time.time() - t0, 2)}
        with open(out / diag_file, "w") as fh:
            json.dump(diag, fh, indent=2)
        _record_stage(config.out, f"fit_x{x_old}", diag)
        log.info("fit x_old=%d done in %.1fs (worst rhat %s)", x_old,
                 diag["wall_time_s"], diag["worst_rhat"])


def stage_loo(config, resume=False):
    out = Path(config.out)
    datasets = _fit_datasets(config)
    for x_old in config.menu:
        loo_json = f"loo_x{x_old}.json"
        loo_npz = f"loo_x{x_old}.npz"
        if resume and _stage_done(config.out, f"loo_x{x_old}",
                                  [loo_json, loo_npz]):
            log.info("loo x_old=%d: artifacts present, skipping", x_old)
            continue
        t0 = time.time()
        model = _model_for(config, datasets, x_old)
        draws = np.load(out / f"draws_x{x_old}.npz")["draws"]
        log_lik = model.pointwise_loglik(draws)
        result = loo_stack.psis_loo(log_lik)
        np.savez(out / loo_npz, elpd_pointwise=result.elpd_pointwise,
                 pareto_k=result.pareto_k)
        info = {"x_old": x_old, "elpd": result.elpd_total,
                "looic": result.looic, "n_high_k": result.n_high_k,
                "n_cells": int(len(result.elpd_pointwise)),
                "wall_time_s": round(time.time() - t0, 2)}
        with open(out / loo_json, "w") as fh:
            json.dump(info, fh, indent=2)
        _record_stage(config.out, f"loo_x{x_old}", info)


def stage_stack(config, resume=False):
    out = Path(config.out)
    files = ["weights.json", "weights.csv"]
    if resume and _stage_done(config.out, "stack", files):
        log.info("stack: artifacts present, skipping")
        return
    t0 = time.time()
    columns = []
    flagged_models = []
    for x_old in config.menu:
        elpd = np.load(out / f"loo_x{x_old}.npz")["elpd_pointwise"]
        columns.append(elpd)
        with open(out / f"diagnostics_x{x_old}.json") as fh:
            if not json.load(fh)["converged"]:
                flagged_models.append(x_old)
    log_lpd = np.column_stack(columns)
    # drop cells any model failed to score
    ok = np.all(np.isfinite(log_lpd), axis=1)
    result = loo_stack.stack_weights(log_lpd[ok])
    rows = [{"x_old": int(x), "weight": float(w)}
            for x, w in zip(config.menu, result.weights)]
    _write_csv(out / "weights.csv", rows)
    info = {"weights": {str(x): float(w)
                        for x, w in zip(config.menu, result.weights)},
            "converged": bool(result.converged),
            "objective": float(result.objective),
            "n_cells_used": int(ok.sum()),
            "models_with_poor_convergence": flagged_models,
            "wall_time_s": round(time.time() - t0, 2)}
    with open(out / "weights.json", "w") as fh:
        json.dump(info, fh, indent=2)
    _record_stage(config.out, "stack", info)
    if flagged_models:
        log.warning("stacking includes models with poor convergence: %s",
                    flagged_models)


def stage_forecast(config, resume=False):
    out = Path(config.out)
    sexes = _sexes(config)
    files = [f"fan_logm_{s}.csv" for s in sexes]
    files += [f"fan_e0_{s}.csv" for s in sexes]
    if resume and _stage_done(config.out, "forecast", files):
        log.info("forecast: artifacts present, skipping")
        return
    t0 = time.time()
    datasets = _fit_datasets(config)
    with open(out / "weights.json") as fh:
        weights = np.array(list(json.load(fh)["weights"].values()))

    per_model = []
    draw_counts = []
    for x_old in config.menu:
        model = _model_for(config, datasets, x_old)
        draws = np.load(out / f"draws_x{x_old}.npz")["draws"]
        rng = np.random.default_rng(
            np.random.SeedSequence([config.seed, x_old, 2]))
        per_model.append(fc.predict_log_rates(model, draws, rng,
                                              source_tag=x_old))
        draw_counts.append(draws.shape[0])
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 3]))
    model_idx, draw_idx = loo_stack.stacked_draws(
        draw_counts, weights, config.n_stacked_draws,
        mode=config.stack_mode, rng=rng)

    for sex in sexes:
        stacked = fc.combine_surfaces([m[sex] for m in per_model],
                                      model_idx, draw_idx)
        np.savez(out / f"stacked_logm_{sex}.npz", log_m=stacked.log_m,
                 ages=stacked.ages, years=stacked.years,
                 n_fitted_years=stacked.n_fitted_years,
                 source_model=stacked.source_model)
        _write_fan_csv(out / f"fan_logm_{sex}.csv", sex, stacked)
        _write_e0_csv(out / f"fan_e0_{sex}.csv", sex, stacked)
    _record_stage(config.out, "forecast",
                  {"n_stacked_draws": int(config.n_stacked_draws),
                   "wall_time_s": round(time.time() - t0, 2)})


def _write_fan_csv(path, sex, surface):
    rows = []
    for j, year in enumerate(surface.years):
        fan = fc.summarize_fan(surface.log_m[:, :, j])
        for i, age in enumerate(surface.ages):
            rows.append({"sex": sex, "age": int(age), "year": int(year),
                         "level": "median", "value": fan["median"][i]})
            for level in fc.FAN_LEVELS:
                lo, hi = fan[level]
                rows.append({"sex": sex, "age": int(age),
                             "year": int(year), "level": f"lo{level}",
                             "value": lo[i]})
                rows.append({"sex": sex, "age": int(age),
                             "year": int(year), "level": f"hi{level}",
                             "value": hi[i]})
    _write_csv(path, rows)


def _write_e0_csv(path, sex, surface):
    rows = []
    for year in surface.years:
        table = fc.life_table_from_surface(surface, year)
        fan = fc.summarize_fan(table.e0[:, None])
        rows.append({"sex": sex, "year": int(year), "level": "median",
                     "value": float(fan["median"][0])})
        for level in fc.FAN_LEVELS:
            lo, hi = fan[level]
            rows.append({"sex": sex, "year": int(year),
                         "level": f"lo{level}", "value": float(lo[0])})
            rows.append({"sex": sex, "year": int(year),
                         "level": f"hi{level}", "value": float(hi[0])})
    _write_csv(path, rows)


def stage_assess(config, resume=False):
    if config.holdback_from is None:
        log.info("assess: no hold-back configured, skipping")
        return
    out = Path(config.out)
    if resume and _stage_done(config.out, "assess", ["coverage.csv"]):
        log.info("assess: artifacts present, skipping")
        return
    t0 = time.time()
    rows = []
    overall = {}
    for sex in _sexes(config):
        data = np.load(out / f"stacked_logm_{sex}.npz")
        surface = fc.ForecastSurface(
            log_m=data["log_m"], ages=data["ages"], years=data["years"],
            n_fitted_years=int(data["n_fitted_years"]),
            source_model=data["source_model"])
        full = _load_dataset(config, sex)
        report = fc.holdback_coverage(surface, full, level=90)
        for row in report["by_year"]:
            rows.append({"sex": sex, **row})
        overall[sex] = report["overall"]
    _write_csv(out / "coverage.csv", rows)
    _record_stage(config.out, "assess",
                  {"overall_coverage": overall,
                   "wall_time_s": round(time.time() - t0, 2)})


def _write_csv(path, rows):
    if not rows:
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


STAGES = [("ingest", stage_ingest), ("fit", stage_fit),
          ("loo", stage_loo), ("stack", stage_stack),
          ("forecast", stage_forecast), ("assess", stage_assess)]


def run_pipeline(config, resume=False, stages=None):
    wanted = stages or [name for name, _ in STAGES]
    Path(config.out).mkdir(parents=True, exist_ok=True)
    manifest = _load_manifest(config.out)
    manifest["config"] = config.values
    manifest.setdefault("stages", {})
    with open(_manifest_path(config.out), "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    for name, fn in STAGES:
        if name in wanted:
            fn(config, resume=resume)


# ----------------------------------------------------------------------
# command line

def _common_options(fn):
    options = [
        click.option("--config", "config_path", required=True,
                     type=click.Path(exists=True)),
        click.option("--seed", type=int, default=None),
        click.option("--out", type=str, default=None),
        click.option("--menu", type=str, default=None,
                     help="comma-separated transition ages"),
        click.option("--sex-mode", "sex_mode",
                     type=click.Choice(["single", "joint"]), default=None),
        click.option("--holdback-from", "holdback_from", type=int,
                     default=None),
        click.option("--resume", is_flag=True, default=False),
    ]
    for option in reversed(options):
        fn = option(fn)
    return fn


def _resolve(config_path, seed, out, menu, sex_mode, holdback_from):
    overrides = {"seed": seed, "out": out, "sex_mode": sex_mode,
                 "holdback_from": holdback_from}
    if menu is not None:
        overrides["menu"] = [int(tok) for tok in menu.split(",")]
    return load_config(config_path, overrides)


@click.group()
def main():
    """Probabilistic mortality forecasting pipeline."""
    logging.basicConfig(level=logging.INFO,
                        format="%(asctime)s %(name)s %(message)s")


def _make_verb(name, stage_names):
    @main.command(name=name)
    @_common_options
    def verb(config_path, seed, out, menu, sex_mode, holdback_from,
             resume):
        try:
            config = _resolve(config_path, seed, out, menu, sex_mode,
                              holdback_from)
            run_pipeline(config, resume=resume, stages=stage_names)
        except Exception as exc:
            raise click.ClickException(f"[{name}] {exc}") from exc
    verb.__doc__ = f"Run the {name} stage" + (
        "s" if len(stage_names) > 1 else "")
    return verb


for _name, _ in STAGES:
    _make_verb(_name, [_name])
_make_verb("run", [name for name, _ in STAGES])


if __name__ == "__main__":
    main()
