"""Synthetic ground-truth datasets for recovery and coverage tests."""

import numpy as np

from mortgam.ingest import MortalityDataset
from mortgam.model import build_model


def known_truth_model(rng, n_years=20, x_old=40, horizon=10,
                      exposure=2e4):
    """Dataset generated from known smooth components.

    Returns (model fitted to the data, true parameter vector, true
    in-sample log-rate surface).  The old-age curve saturates toward its
    asymptote inside the age range so every parameter is identified.
    """
    ages = np.arange(0, 61)
    years = np.arange(1995, 1995 + n_years)
    shape = (len(ages), len(years))
    placeholder = MortalityDataset(
        ages=ages, years=years, deaths=np.zeros(shape),
        exposures=np.full(shape, exposure), sex="female")
    proto = build_model(placeholder, x_old=x_old, horizon=horizon)
    st = proto.structures["female"]

    x = ages[1:x_old].astype(float)
    s_alpha = -6.5 + 0.07 * (x - 30) + 0.5 * np.exp(-0.5 * ((x - 20) / 6) ** 2)
    s_beta = (-0.20 + 0.003 * (x - 30) / 10 + 0.15 * np.sin(x / 3.0))
    basis = st.age_basis
    parts = {
        "beta_alpha": np.linalg.lstsq(basis, s_alpha, rcond=None)[0],
        "beta_beta": np.linalg.lstsq(basis, s_beta, rcond=None)[0],
        "z_gamma": 0.8 * rng.standard_normal(st.n_active - 3),
        "z_kappa": rng.standard_normal(len(years) - 2),
        "beta_old": np.array([-2.0, np.log(1.2), np.log(0.2),
                              np.log(0.15)]),
        "beta_infant": np.array([-5.0, -0.3]),
        "log_sigma_alpha": np.log([1.0, 1.0]),
        "log_sigma_beta": np.log([0.3, 0.3]),
        "log_sigma_kappa": [np.log(0.15)],
        "log_sigma_gamma": [np.log(0.3)],
        "log_phi": [np.log(300.0)],
        "log_psi": [np.log(0.9)],
    }
    true_vec = proto.layout.pack(parts)
    log_m = proto.log_m_insample(true_vec)["female"]
    phi = 300.0
    mu = exposure * np.exp(log_m)
    deaths = rng.negative_binomial(phi, phi / (mu + phi)).astype(float)
    dataset = MortalityDataset(ages=ages, years=years, deaths=deaths,
                               exposures=np.full(shape, exposure),
                               sex="female")
    model = build_model(dataset, x_old=x_old, horizon=horizon)
    return model, true_vec, log_m


def truth_smooths(model, vec):
    """Evaluated smooth components of a parameter vector, on the grid."""
    st = model.structures["female"]
    parts = model.layout.unpack(vec)
    comp = model.components(vec, "female")
    return {
        "s_alpha": st.age_basis @ parts["beta_alpha"],
        "s_beta": st.age_basis @ parts["beta_beta"],
        "s_gamma": st.cohort_basis_grid @ comp["beta_gamma"],
        "kappa": comp["kappa"],
    }
