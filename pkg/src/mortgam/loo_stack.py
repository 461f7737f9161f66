"""Approximate leave-one-out predictive densities and stacking weights.

Importance weights for leaving out one observation are proportional to the
reciprocal of its likelihood across posterior draws; their upper tail is
replaced by order statistics of a fitted generalized Pareto distribution
to stabilise the estimate.  The per-model pointwise predictive densities
then enter a small concave optimisation over the simplex that weights the
transition-age model menu.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp, softmax

K_THRESHOLD = 0.7  # Pareto shape above which a cell's estimate is unreliable


@dataclass
class LooResult:
    elpd_total: float
    elpd_pointwise: np.ndarray
    pareto_k: np.ndarray
    n_high_k: int

    @property
    def looic(self):
        return -2.0 * self.elpd_total


@dataclass
class StackingWeights:
    weights: np.ndarray
    converged: bool
    objective: float
    n_iterations: int


def gpd_fit(tail):
    """Profile-likelihood estimate of generalized Pareto shape and scale.

    Uses the Zhang & Stephens estimator with the weak shape prior of the
    smoothed-importance-sampling reference.  The tail sample must already
    be exceedances over the threshold (positive values).
    """
    y = np.sort(np.asarray(tail, dtype=float))
    n = len(y)
    if n < 5:
        raise ValueError("need at least 5 tail points to fit the tail")
    if y[-1] <= y[0] * (1.0 + 1e-12) or y[-1] - y[0] < 1e-30:
        # degenerate, all-equal tail
        return np.inf, float(max(y[-1], 1e-30))
    m = 30 + int(np.sqrt(n))
    theta = (1.0 - np.sqrt(m / (np.arange(1, m + 1) - 0.5))
             ) / (3.0 * y[(n - 1) // 4]) + 1.0 / y[-1]
    k_prof = np.mean(np.log1p(-theta[:, None] * y), axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        log_lik = n * (np.log(-theta / k_prof) - k_prof - 1.0)
    log_lik = np.where(np.isfinite(log_lik), log_lik, -np.inf)
    weights = softmax(log_lik)
    theta_hat = np.sum(theta * weights)
    k = np.mean(np.log1p(-theta_hat * y))
    sigma = -k / theta_hat
    # regularise k toward 0.5 with a weight-10 pseudo-prior
    k = (n * k + 5.0) / (n + 10.0)
    return float(k), float(sigma)


def _psis_smooth_column(log_lik_col):
    """Smoothed, self-normalised log weights plus the Pareto k diagnostic."""
    lw = -log_lik_col
    lw = lw - lw.max()
    s = len(lw)
    n_tail = int(np.ceil(min(0.2 * s, 3.0 * np.sqrt(s))))
    if n_tail < 5:
        return lw - logsumexp(lw), np.nan
    order = np.argsort(lw)
    tail_idx = order[-n_tail:]
    cutoff = lw[order[-n_tail - 1]]
    exceedances = np.exp(lw[tail_idx]) - np.exp(cutoff)
    if np.all(exceedances <= 0) or np.ptp(exceedances) < 1e-30:
        return lw - logsumexp(lw), np.inf
    k, sigma = gpd_fit(exceedances[exceedances > 0])
    if np.isfinite(k):
        # replace the tail by expected order statistics of the fitted GPD
        probs = (np.arange(1, n_tail + 1) - 0.5) / n_tail
        if abs(k) < 1e-12:
            quantiles = -sigma * np.log1p(-probs)
        else:
            quantiles = sigma / k * ((1.0 - probs) ** (-k) - 1.0)
        smoothed = np.log(np.exp(cutoff) + quantiles)
        # order-preserving assignment, truncated at the raw maximum
        ranked = tail_idx[np.argsort(lw[tail_idx])]
        lw = lw.copy()
        lw[ranked] = np.minimum(smoothed, 0.0)
    return lw - logsumexp(lw), k


def psis_loo(log_lik):
    """PSIS leave-one-out estimate from a [n_draws, n_cells] matrix.

    Cells with non-finite log-likelihood entries are flagged (NaN
    pointwise value, k = inf) and excluded from the total.
    """
    log_lik = np.asarray(log_lik, dtype=float)
    n_draws, n_cells = log_lik.shape
    elpd = np.empty(n_cells)
    ks = np.empty(n_cells)
    for i in range(n_cells):
        col = log_lik[:, i]
        if not np.all(np.isfinite(col)):
            elpd[i] = np.nan
            ks[i] = np.inf
            continue
        if np.ptp(col) < 1e-14:
            # zero posterior uncertainty: weights are all equal
            elpd[i] = col[0]
            ks[i] = np.inf
            continue
        lw, k = _psis_smooth_column(col)
        elpd[i] = logsumexp(lw + col)
        ks[i] = k
    finite = np.isfinite(elpd)
    return LooResult(elpd_total=float(np.sum(elpd[finite])),
                     elpd_pointwise=elpd, pareto_k=ks,
                     n_high_k=int(np.sum(ks[np.isfinite(ks)]
                                         > K_THRESHOLD)))


def stack_weights(log_lpd, max_iter=100000, tol=1e-10):
    """Simplex weights maximising the stacked log score.

    ``log_lpd`` is [n_cells, n_models] of log pointwise predictive
    densities log p(y_i | y_-i, M_k).  Solved by multiplicative updates,
    which never decrease the concave objective.
    """
    log_lpd = np.asarray(log_lpd, dtype=float)
    n, k = log_lpd.shape
    if k == 1:
        return StackingWeights(weights=np.array([1.0]), converged=True,
                               objective=float(np.sum(log_lpd)),
                               n_iterations=0)
    # per-cell normalisation leaves the argmax unchanged and avoids
    # underflow when densities are tiny
    dens = np.exp(log_lpd - log_lpd.max(axis=1, keepdims=True))
    shift = float(np.sum(log_lpd.max(axis=1)))
    w = np.full(k, 1.0 / k)
    obj = _stack_objective(dens, w)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        mix = dens @ w
        grad = dens.T @ (1.0 / mix) / n
        w = w * grad
        w = w / w.sum()
        new_obj = _stack_objective(dens, w)
        if abs(new_obj - obj) <= tol * max(1.0, abs(new_obj)):
            obj = new_obj
            converged = True
            break
        obj = new_obj
    return StackingWeights(weights=w, converged=converged,
                           objective=obj + shift, n_iterations=it)


def _stack_objective(dens, w):
    return float(np.sum(np.log(dens @ w)))


def stacked_draws(draw_counts, weights, n_out, mode="stratified", rng=None):
    """Allocate ``n_out`` stacked draws across the model menu.

    Returns (model_index, draw_index) arrays of length ``n_out``; draw
    indices are sampled without replacement within each model where
    possible.  Stratified mode deterministically allocates floor(w_k * n)
    draws plus largest-remainder rounding; multinomial mode samples model
    labels at random.
    """
    weights = np.asarray(weights, dtype=float)
    if abs(weights.sum() - 1.0) > 1e-8:
        raise ValueError("weights must sum to 1")
    rng = rng or np.random.default_rng()
    k = len(weights)
    if mode == "stratified":
        raw = weights * n_out
        counts = np.floor(raw).astype(int)
        short = n_out - counts.sum()
        if short > 0:
            order = np.argsort(-(raw - counts))
            counts[order[:short]] += 1
    elif mode == "multinomial":
        counts = rng.multinomial(n_out, weights)
    else:
        raise ValueError(f"unknown mode {mode!r}")
    model_idx, draw_idx = [], []
    for m, c in enumerate(counts):
        if c == 0:
            continue
        avail = draw_counts[m]
        if avail == 0:
            raise ValueError(
                f"model {m} has weight {weights[m]:.4f} but no draws")
        replace = c > avail
        picks = rng.choice(avail, size=c, replace=replace)
        model_idx.extend([m] * c)
        draw_idx.extend(picks.tolist())
    return np.asarray(model_idx), np.asarray(draw_idx)
