"""No-U-Turn sampler with dual-averaging step size and mass adaptation,
plus split-chain convergence diagnostics.

The interface is a plain callable returning (log density, gradient); the
model module supplies one.  Chains are independent and deterministically
seeded, so identical configurations reproduce draws bit for bit.  The
kinetic-energy metric is diagonal by default; a dense metric is available
for strongly correlated posteriors.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0  # drop in joint log density flagging divergence


@dataclass
class ChainConfig:
    n_chains: int = 4
    n_iterations: int = 8000
    warmup_fraction: float = 0.5
    thin: int = 4
    seed: int = 0
    target_acceptance: float = 0.8
    max_tree_depth: int = 10
    metric: str = "diag"  # or "dense"

    def __post_init__(self):
        if self.n_chains < 2:
            raise ValueError("need at least 2 chains for diagnostics")
        if self.n_kept // self.thin < 100:
            raise ValueError("fewer than 100 retained draws per chain")
        if self.metric not in ("diag", "dense"):
            raise ValueError("metric must be 'diag' or 'dense'")

    @property
    def n_warmup(self):
        return int(self.n_iterations * self.warmup_fraction)

    @property
    def n_kept(self):
        return self.n_iterations - self.n_warmup


@dataclass
class DrawStore:
    """Post-warm-up draws plus per-chain adaptation records."""

    draws: np.ndarray           # [chain, iteration, parameter]
    divergences: np.ndarray     # count per chain, post-warm-up
    step_sizes: np.ndarray      # frozen step size per chain
    mass_diag: np.ndarray       # [chain, parameter], diagonal of the metric
    energies: np.ndarray        # [chain, iteration] Hamiltonian values
    param_names: list = field(default_factory=list)
    config: ChainConfig = None

    @property
    def n_chains(self):
        return self.draws.shape[0]


class _DiagMetric:
    """Kinetic energy 0.5 r' Sigma r with Sigma the covariance estimate."""

    def __init__(self, variance):
        self.variance = np.asarray(variance, dtype=float)
        self._scale = 1.0 / np.sqrt(self.variance)

    def velocity(self, r):
        return self.variance * r

    def kinetic(self, r):
        with np.errstate(over="ignore"):
            return 0.5 * np.sum(self.variance * r * r)

    def sample_momentum(self, rng):
        return rng.standard_normal(len(self.variance)) * self._scale

    def mass_diagonal(self):
        return 1.0 / self.variance


class _DenseMetric:
    """Dense covariance metric; momenta have precision Sigma."""

    def __init__(self, sigma):
        self.sigma = np.asarray(sigma, dtype=float)
        self._chol = np.linalg.cholesky(self.sigma)
        self._chol_t_inv = np.linalg.inv(self._chol.T)

    def velocity(self, r):
        return self.sigma @ r

    def kinetic(self, r):
        with np.errstate(over="ignore"):
            return 0.5 * float(r @ (self.sigma @ r))

    def sample_momentum(self, rng):
        return self._chol_t_inv @ rng.standard_normal(self.sigma.shape[0])

    def mass_diagonal(self):
        return 1.0 / np.diag(self.sigma)


class _DualAveraging:
    """Nesterov dual averaging of log step size (NUTS reference settings)."""

    def __init__(self, eps0, target):
        self.mu = np.log(10.0 * eps0)
        self.target = target
        self.log_eps = np.log(eps0)
        self.log_eps_bar = 0.0
        self.h_bar = 0.0
        self.count = 0
        self.gamma = 0.05
        self.t0 = 10.0
        self.kappa = 0.75

    def update(self, accept_prob):
        self.count += 1
        m = self.count
        eta = 1.0 / (m + self.t0)
        self.h_bar = ((1.0 - eta) * self.h_bar
                      + eta * (self.target - accept_prob))
        self.log_eps = self.mu - np.sqrt(m) / self.gamma * self.h_bar
        w = m ** (-self.kappa)
        self.log_eps_bar = w * self.log_eps + (1.0 - w) * self.log_eps_bar

    @property
    def eps(self):
        return np.exp(self.log_eps)

    @property
    def eps_final(self):
        return np.exp(self.log_eps_bar)


def _leapfrog(logp_grad, theta, r, grad, eps, metric):
    r_half = r + 0.5 * eps * grad
    theta_new = theta + eps * metric.velocity(r_half)
    logp_new, grad_new = logp_grad(theta_new)
    r_new = r_half + 0.5 * eps * grad_new
    return theta_new, r_new, logp_new, grad_new


def _joint_logp(logp, r, metric):
    h = logp - metric.kinetic(r)
    return h if np.isfinite(h) else -np.inf


def _find_reasonable_epsilon(logp_grad, theta, rng, metric):
    eps = 1.0
    logp, grad = logp_grad(theta)
    r = metric.sample_momentum(rng)
    h0 = _joint_logp(logp, r, metric)
    _, r_new, logp_new, _ = _leapfrog(logp_grad, theta, r, grad, eps, metric)
    h1 = _joint_logp(logp_new, r_new, metric)
    direction = 1.0 if (h1 - h0) > np.log(0.5) else -1.0
    for _ in range(100):
        eps *= 2.0**direction
        _, r_new, logp_new, _ = _leapfrog(logp_grad, theta, r, grad, eps,
                                          metric)
        h1 = _joint_logp(logp_new, r_new, metric)
        if direction * (h1 - h0) <= direction * np.log(0.5):
            break
    return float(np.clip(eps, 1e-10, 1e3))


class _Tree:
    __slots__ = ("theta_minus", "r_minus", "grad_minus", "theta_plus",
                 "r_plus", "grad_plus", "theta_prop", "n_valid",
                 "keep_going", "alpha", "n_alpha", "diverged")


def _build_tree(logp_grad, theta, r, grad, log_u, v, depth, eps, h0,
                metric, rng):
    if depth == 0:
        tree = _Tree()
        theta1, r1, logp1, grad1 = _leapfrog(logp_grad, theta, r, grad,
                                             v * eps, metric)
        h1 = _joint_logp(logp1, r1, metric)
        # divergence: the slice variable exceeds the joint density by a
        # large margin along the trajectory
        tree.diverged = (log_u + h0) > h1 + DIVERGENCE_THRESHOLD
        tree.n_valid = int(log_u + h0 <= h1)
        tree.keep_going = not tree.diverged
        tree.theta_minus = tree.theta_plus = theta1
        tree.r_minus = tree.r_plus = r1
        tree.grad_minus = tree.grad_plus = grad1
        tree.theta_prop = theta1
        tree.alpha = min(1.0, np.exp(min(0.0, h1 - h0)))
        tree.n_alpha = 1
        return tree

    left = _build_tree(logp_grad, theta, r, grad, log_u, v, depth - 1, eps,
                       h0, metric, rng)
    if left.keep_going:
        if v < 0:
            right = _build_tree(logp_grad, left.theta_minus, left.r_minus,
                                left.grad_minus, log_u, v, depth - 1, eps,
                                h0, metric, rng)
            left.theta_minus = right.theta_minus
            left.r_minus = right.r_minus
            left.grad_minus = right.grad_minus
        else:
            right = _build_tree(logp_grad, left.theta_plus, left.r_plus,
                                left.grad_plus, log_u, v, depth - 1, eps,
                                h0, metric, rng)
            left.theta_plus = right.theta_plus
            left.r_plus = right.r_plus
            left.grad_plus = right.grad_plus
        total = left.n_valid + right.n_valid
        if total > 0 and rng.random() < right.n_valid / total:
            left.theta_prop = right.theta_prop
        left.alpha += right.alpha
        left.n_alpha += right.n_alpha
        left.n_valid = total
        left.diverged = left.diverged or right.diverged
        left.keep_going = (right.keep_going
                           and _no_u_turn(left.theta_minus, left.theta_plus,
                                          left.r_minus, left.r_plus, metric))
    return left


def _no_u_turn(theta_minus, theta_plus, r_minus, r_plus, metric):
    delta = theta_plus - theta_minus
    return (np.dot(delta, metric.velocity(r_minus)) >= 0
            and np.dot(delta, metric.velocity(r_plus)) >= 0)


def _nuts_step(logp_grad, theta, logp, grad, eps, metric, max_depth, rng):
    r0 = metric.sample_momentum(rng)
    h0 = _joint_logp(logp, r0, metric)
    log_u = np.log(rng.random())  # slice variable, relative to h0

    theta_minus = theta_plus = theta
    r_minus = r_plus = r0
    grad_minus = grad_plus = grad
    theta_prop = theta
    n_valid = 1
    diverged = False
    alpha_sum, n_alpha = 0.0, 0

    for depth in range(max_depth):
        v = 1.0 if rng.random() < 0.5 else -1.0
        if v < 0:
            tree = _build_tree(logp_grad, theta_minus, r_minus, grad_minus,
                               log_u, v, depth, eps, h0, metric, rng)
            theta_minus, r_minus, grad_minus = (tree.theta_minus,
                                                tree.r_minus,
                                                tree.grad_minus)
        else:
            tree = _build_tree(logp_grad, theta_plus, r_plus, grad_plus,
                               log_u, v, depth, eps, h0, metric, rng)
            theta_plus, r_plus, grad_plus = (tree.theta_plus, tree.r_plus,
                                             tree.grad_plus)
        alpha_sum += tree.alpha
        n_alpha += tree.n_alpha
        if tree.diverged:
            diverged = True
        if not tree.keep_going:
            break
        if tree.n_valid > 0 and rng.random() < tree.n_valid / n_valid:
            theta_prop = tree.theta_prop
        n_valid += tree.n_valid
        if not _no_u_turn(theta_minus, theta_plus, r_minus, r_plus, metric):
            break
    logp_prop, grad_prop = logp_grad(theta_prop)
    accept_stat = alpha_sum / max(n_alpha, 1)
    energy = -h0
    return theta_prop, logp_prop, grad_prop, accept_stat, diverged, energy


def _adaptation_windows(n_warmup, init_buffer=75, term_buffer=50,
                        base_window=25):
    """Iteration indices at which the metric is re-estimated."""
    if n_warmup < init_buffer + term_buffer + base_window:
        return []
    ends = []
    start = init_buffer
    window = base_window
    while start + window <= n_warmup - term_buffer:
        if start + 3 * window > n_warmup - term_buffer:
            window = n_warmup - term_buffer - start
        ends.append(start + window)
        start += window
        window *= 2
    return ends


def _estimate_metric(sample, kind):
    n, dim = sample.shape
    shrink = n / (n + 5.0)
    floor = 1e-3 * (5.0 / (n + 5.0))
    if kind == "diag":
        var = np.var(sample, axis=0, ddof=1 if n > 1 else 0)
        return _DiagMetric(shrink * var + floor)
    cov = np.cov(sample.T) if n > 1 else np.eye(dim)
    sigma = shrink * cov + floor * np.eye(dim)
    try:
        return _DenseMetric(sigma)
    except np.linalg.LinAlgError:
        return _DiagMetric(shrink * np.diag(cov) + floor)


def _run_single_chain(logp_grad, dim, config, rng, init, chain_label=""):
    theta = init.copy()
    logp, grad = logp_grad(theta)
    if not np.isfinite(logp):
        raise ValueError("log posterior not finite at the initial point")

    metric = _DiagMetric(np.ones(dim))
    eps = _find_reasonable_epsilon(logp_grad, theta, rng, metric)
    da = _DualAveraging(eps, config.target_acceptance)

    n_warmup = config.n_warmup
    window_ends = _adaptation_windows(n_warmup)
    window_draws = []

    kept = np.empty((config.n_kept, dim))
    energies = np.empty(config.n_kept)
    n_div = 0
    for it in range(config.n_iterations):
        warm = it < n_warmup
        step = da.eps if warm else da.eps_final
        theta, logp, grad, accept, diverged, energy = _nuts_step(
            logp_grad, theta, logp, grad, step, metric,
            config.max_tree_depth, rng)
        if warm:
            da.update(accept)
            window_draws.append(theta)
            if (it + 1) in window_ends:
                metric = _estimate_metric(np.asarray(window_draws),
                                          config.metric)
                window_draws = []
                eps = _find_reasonable_epsilon(logp_grad, theta, rng,
                                               metric)
                da = _DualAveraging(eps, config.target_acceptance)
        else:
            idx = it - n_warmup
            kept[idx] = theta
            energies[idx] = energy
            if diverged:
                n_div += 1
        if (it + 1) % 500 == 0:
            log.info("%schain iteration %d/%d (step %.3g)", chain_label,
                     it + 1, config.n_iterations, step)
    return kept, n_div, da.eps_final, metric.mass_diagonal(), energies


def run_chains(logp_grad, dim, config, init=None, param_names=None):
    """Run independent NUTS chains and collect post-warm-up draws.

    ``init`` may be an array [n_chains, dim]; by default each coordinate
    is drawn uniformly on [-2, 2].  Raises if a chain's initial point has
    non-finite density; warns if more than 1% of post-warm-up transitions
    diverge.
    """
    seeds = np.random.SeedSequence(config.seed).spawn(config.n_chains)
    all_draws, divs, steps, masses, energies = [], [], [], [], []
    for chain in range(config.n_chains):
        rng = np.random.default_rng(seeds[chain])
        if init is not None:
            theta0 = np.asarray(init[chain], dtype=float)
        else:
            theta0 = rng.uniform(-2.0, 2.0, size=dim)
        kept, n_div, eps, mass, energy = _run_single_chain(
            logp_grad, dim, config, rng, theta0,
            chain_label=f"chain {chain}: ")
        all_draws.append(kept)
        divs.append(n_div)
        steps.append(eps)
        masses.append(mass)
        energies.append(energy)
        log.info("chain %d finished: step=%.4g divergences=%d", chain, eps,
                 n_div)
    divs = np.asarray(divs)
    total = config.n_kept * config.n_chains
    if divs.sum() > 0.01 * total:
        log.warning("divergent transitions: %d of %d post-warm-up draws",
                    divs.sum(), total)
    if np.any(divs == config.n_kept):
        raise RuntimeError("a chain diverged on every post-warm-up draw")
    return DrawStore(draws=np.asarray(all_draws), divergences=divs,
                     step_sizes=np.asarray(steps),
                     mass_diag=np.asarray(masses),
                     energies=np.asarray(energies),
                     param_names=list(param_names or []),
                     config=config)


# ----------------------------------------------------------------------
# diagnostics

def _split_chains(draws):
    """Split each chain in half along the iteration axis."""
    n = draws.shape[1] // 2
    return np.concatenate([draws[:, :n], draws[:, n:2 * n]], axis=0)


def split_rhat(draws):
    """Split-chain potential scale reduction factor for one parameter.

    ``draws`` is [chain, iteration]; returns NaN for constant parameters.
    """
    x = _split_chains(draws[:, :, None])[:, :, 0]
    m, n = x.shape
    means = x.mean(axis=1)
    w = x.var(axis=1, ddof=1).mean()
    b = n * means.var(ddof=1)
    if w <= 0:
        return np.nan
    var_plus = (n - 1) / n * w + b / n
    return float(np.sqrt(var_plus / w))


def _autocovariance(x):
    n = len(x)
    x = x - x.mean()
    size = 2 ** int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conjugate(f))[:n].real / n
    return acov


def effective_sample_size(draws):
    """Multi-chain ESS with Geyer's initial monotone positive sequence."""
    x = _split_chains(draws[:, :, None])[:, :, 0]
    m, n = x.shape
    if n < 4:
        return np.nan
    acov = np.asarray([_autocovariance(chain) for chain in x])
    chain_var = acov[:, 0] * n / (n - 1)
    w = chain_var.mean()
    if w <= 0:
        return np.nan
    mean_acov = acov.mean(axis=0)
    b_over_n = x.mean(axis=1).var(ddof=1)
    var_plus = w * (n - 1) / n + b_over_n
    rho = 1.0 - (w - mean_acov) / var_plus
    # Geyer pair sums: truncate at the first negative pair and enforce a
    # monotone non-increasing sequence
    pair_sum = 0.0
    prev = np.inf
    t = 0
    while t + 1 < n:
        pair = rho[t] + rho[t + 1]
        if pair < 0:
            break
        pair = min(pair, prev)
        prev = pair
        pair_sum += pair
        t += 2
    tau_hat = max(-1.0 + 2.0 * pair_sum, 1.0 / np.log10(m * n + 10.0))
    ess = m * n / tau_hat
    return float(min(ess, m * n * np.log10(m * n)))


def diagnostics(store, rhat_threshold=1.05):
    """Per-parameter split R-hat and effective sample size.

    Returns (table, flagged) where table maps parameter name to a dict
    and flagged lists parameters whose R-hat exceeds the threshold.
    """
    draws = store.draws
    if draws.shape[0] < 2 or draws.shape[1] < 100:
        raise ValueError("diagnostics need >= 2 chains of >= 100 draws")
    names = store.param_names or [f"p{i}" for i in range(draws.shape[2])]
    table = {}
    flagged = []
    for j, name in enumerate(names):
        param = draws[:, :, j]
        if np.allclose(param, param.flat[0]):
            table[name] = {"rhat": np.nan, "ess": np.nan}
            continue
        rhat = split_rhat(param)
        ess = effective_sample_size(param)
        table[name] = {"rhat": rhat, "ess": ess}
        if np.isfinite(rhat) and rhat > rhat_threshold:
            flagged.append(name)
    return table, flagged


def thin_merge(store, thin=None):
    """Keep every thin-th draw per chain and concatenate chain-major.

    Merged draw s maps back to chain s // (n_kept // thin) and
    within-chain kept iteration (s % (n_kept // thin)) * thin.
    """
    if thin is None:
        thin = store.config.thin if store.config else 1
    n_kept = store.draws.shape[1]
    if n_kept % thin != 0:
        raise ValueError("thin must divide the post-warm-up draw count")
    thinned = store.draws[:, ::thin, :]
    return thinned.reshape(-1, store.draws.shape[2])
