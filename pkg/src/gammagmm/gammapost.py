"""Posterior of the contamination factor, built on top of a fitted mixture.

Pipeline, per variational restart:

 1. rank the active components by expected anomalousness E[r], where
    r(mu, Sigma) = mean_j mu_j / (1 + sqrt(Sigma_jj));
 2. calibrate the two sigmoid parameters (tau, delta) of the conditional
    probability P(anomalous_k | anomalous_{k-1}) = 1 / (1 + exp(tau + delta r))
    against the user beliefs p0 = P(no anomalies) and
    p_high = P(gamma >= t), using the Dirichlet/Beta cumulative-weight law;
 3. draw gamma samples: weights from the Dirichlet, component parameters from
    the NIW factors, chain the conditionals into P(exactly k components are
    anomalous), pick k, and emit the cumulative weight of the top-k components.

Conditionals beyond K' = argmax{k : E[sum_{j<=k} pi_j] < cap} are zeroed while
sampling, and every emitted sample is capped, so gamma never exceeds `cap`.
Calibration itself uses the untruncated chain (its deepest tail term is 1),
which is what makes the system solvable exactly when
p_high >= P(pi_1 >= t | S); when that guard fails, the fit is rejected and the
variational inference is re-run with a fresh seed, up to `max_retries` times,
after which the posterior collapses to a point mass at gamma = 0.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit
from scipy.stats import beta as beta_dist

from . import dpgmm
from .dpgmm import DpgmmConfig, MixturePosterior, sample_niw

logger = logging.getLogger(__name__)

DEFAULT_P0 = 0.01
DEFAULT_P_HIGH = 0.01
DEFAULT_T = 0.15
DEFAULT_CAP = 0.25
DEFAULT_RESTARTS = 10
DEFAULT_SAMPLES_PER_RESTART = 1000
DEFAULT_MAX_RETRIES = 100
ORDERING_MC_DRAWS = 1000

_SOLVED_TOL = 1e-6
_LM_TOL = 1e-10
_LM_MAX_ITER = 200

REPORT_QUANTILES = (0.01, 0.05, 0.25, 0.50, 0.75, 0.95, 0.99)


class CalibrationInfeasibleError(RuntimeError):
    """The (tau, delta) system has no solution for this fit; refit and retry."""


@dataclass(frozen=True)
class ComponentOrdering:
    """Active components sorted by decreasing expected anomalousness."""

    order: np.ndarray
    expected_r: np.ndarray

    def __post_init__(self):
        if np.any(np.diff(self.expected_r) > 1e-12):
            raise ValueError("expected_r must be non-increasing along the ordering")


@dataclass(frozen=True)
class SigmoidParams:
    """Calibrated sigmoid: P(c_k | c_{k-1}) = 1 / (1 + exp(tau + delta * r_k))."""

    tau: float
    delta: float
    t: float = DEFAULT_T
    p0: float = DEFAULT_P0
    p_high: float = DEFAULT_P_HIGH
    solved: bool = False
    retries_used: int = 0
    monotone: bool = True


@dataclass(frozen=True)
class GammaPosterior:
    """Monte Carlo sample set for the contamination factor.

    `samples` contains the gamma = 0 atom as literal zeros; `zero_mass` is the
    fraction of zeros. All samples lie in [0, cap]. `exhausted` marks the
    degenerate all-zero posterior produced when calibration retries ran out.
    """

    samples: np.ndarray
    cap: float
    seed: int
    p0: float
    p_high: float
    t: float
    restarts: list[dict] = field(default_factory=list)
    exhausted: bool = False

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.size == 0:
            raise ValueError("gamma posterior needs at least one sample")
        if s.min() < 0 or s.max() > self.cap + 1e-12:
            raise ValueError("gamma samples outside [0, cap]")
        object.__setattr__(self, "samples", s)

    @property
    def zero_mass(self) -> float:
        return float(np.mean(self.samples == 0.0))

    @property
    def mean(self) -> float:
        return float(self.samples.mean())

    @property
    def std(self) -> float:
        return float(self.samples.std())

    def quantile(self, q) -> float | np.ndarray:
        out = np.quantile(self.samples, q)
        return float(out) if np.isscalar(q) else out

    def to_dict(self) -> dict:
        return {
            "mean": self.mean,
            "std": self.std,
            "zero_mass": self.zero_mass,
            "quantiles": {
                str(int(q * 100)): float(np.quantile(self.samples, q))
                for q in REPORT_QUANTILES
            },
            "cap": self.cap,
            "seed": self.seed,
            "p0": self.p0,
            "p_high": self.p_high,
            "t": self.t,
            "n_samples": int(self.samples.size),
            "exhausted": self.exhausted,
            "restarts": self.restarts,
        }


def representative_value(mean: np.ndarray, cov: np.ndarray) -> float:
    """Scalar anomalousness of a component: mean_j mu_j / (1 + sqrt(cov_jj)).

    Uses only the diagonal of the covariance; the +1 keeps near-degenerate
    components from dominating and matches the unit variance of transformed
    score columns.
    """
    mu = np.atleast_1d(np.asarray(mean, dtype=float))
    sig = np.asarray(cov, dtype=float)
    diag = np.diagonal(sig) if sig.ndim == 2 else np.atleast_1d(sig)
    if np.any(diag < 0):
        raise ValueError("covariance diagonal must be non-negative")
    return float(np.mean(mu / (1.0 + np.sqrt(diag))))


def _representative_batch(mu: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    diag = np.diagonal(sigma, axis1=1, axis2=2)
    return (mu / (1.0 + np.sqrt(diag))).mean(axis=1)


def _sort_by_anomalousness(expected_r: np.ndarray, expected_weight: np.ndarray) -> np.ndarray:
    """Decreasing E[r]; exact ties prefer the larger weight, then the lower index."""
    idx = np.arange(expected_r.shape[0])
    return np.lexsort((idx, -expected_weight, -expected_r))


def order_components(
    post: MixturePosterior,
    mc_draws: int = ORDERING_MC_DRAWS,
    rng: np.random.Generator | None = None,
) -> ComponentOrdering:
    """Rank components by Monte Carlo estimate of E[r] over their NIW posteriors.

    Ties (exact equality of the estimate) are broken toward the larger
    expected weight, then the smaller component index.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    expected = np.empty(post.k_active)
    for k in range(post.k_active):
        mu, sigma = sample_niw(post, k, rng, size=mc_draws)
        expected[k] = _representative_batch(mu, sigma).mean()
    order = _sort_by_anomalousness(expected, post.expected_weight)
    return ComponentOrdering(order=order, expected_r=expected[order])


def conditional_probability(r_value: float, params: SigmoidParams) -> float:
    """P(c_k | c_{k-1}) for a component with anomalousness r_value."""
    return float(expit(-(params.tau + params.delta * r_value)))


def joint_probabilities(conditionals: np.ndarray) -> np.ndarray:
    """Chain conditionals p_1..p_K into P(C* = k) for k = 0..K.

    P(C* = 0) = 1 - p_1 and P(C* = k) = p_1 ... p_k (1 - p_{k+1}) with
    p_{K+1} = 0 by convention; the sum telescopes to exactly 1. Accepts a
    (K,) vector or a (Z, K) batch.
    """
    p = np.asarray(conditionals, dtype=float)
    if np.any(p < 0) or np.any(p > 1):
        raise ValueError("conditionals must lie in [0, 1]")
    prefix = np.cumprod(p, axis=-1)
    p_next = np.concatenate(
        [p[..., 1:], np.zeros(p.shape[:-1] + (1,))], axis=-1
    )
    head = 1.0 - p[..., :1]
    return np.concatenate([head, prefix * (1.0 - p_next)], axis=-1)


def truncation_index(expected_weight_ordered: np.ndarray, cap: float = DEFAULT_CAP) -> int:
    """K' = argmax{k : E[sum_{j<=k} pi_j] < cap}; cap >= 1 disables truncation.

    Raises CalibrationInfeasibleError when even the first component's expected
    weight reaches the cap, which also makes the sigmoid system unsolvable.
    """
    w = np.asarray(expected_weight_ordered, dtype=float)
    if cap >= 1.0:
        return w.shape[0]
    cum = np.cumsum(w)
    if cum[0] >= cap:
        raise CalibrationInfeasibleError(
            f"expected weight of the top component ({cum[0]:.4f}) reaches the cap {cap}"
        )
    return int((cum < cap).sum())


def truncate_conditionals(
    post: MixturePosterior,
    ordering: ComponentOrdering,
    conditionals: np.ndarray,
    cap: float = DEFAULT_CAP,
) -> np.ndarray:
    """Zero the conditionals of every component past the truncation index K'."""
    ordered_w = post.expected_weight[ordering.order]
    kprime = truncation_index(ordered_w, cap)
    out = np.array(conditionals, dtype=float, copy=True)
    out[..., kprime:] = 0.0
    return out


def _cumulative_tail_probs(alpha_ordered: np.ndarray, t: float) -> np.ndarray:
    """P(sum_{j<=k} pi_j >= t | S) for k = 1..K via the Beta marginal of the Dirichlet."""
    a_cum = np.cumsum(alpha_ordered)
    total = a_cum[-1]
    tails = np.empty(alpha_ordered.shape[0])
    for k in range(alpha_ordered.shape[0] - 1):
        tails[k] = beta_dist.sf(t, a_cum[k], total - a_cum[k])
    tails[-1] = 1.0  # the full simplex always sums to 1 >= t
    return tails


def _levenberg_marquardt(fun, x0: np.ndarray) -> tuple[np.ndarray, float]:
    """Damped Gauss-Newton for a tiny residual system, numeric Jacobian."""
    x = np.asarray(x0, dtype=float)
    r = fun(x)
    cost = float(r @ r)
    damp = 1e-3
    for _ in range(_LM_MAX_ITER):
        if np.sqrt(cost) < _LM_TOL:
            break
        jac = np.empty((r.shape[0], x.shape[0]))
        for j in range(x.shape[0]):
            h = 1e-7 * max(1.0, abs(x[j]))
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            jac[:, j] = (fun(xp) - fun(xm)) / (2.0 * h)
        jtj = jac.T @ jac
        g = jac.T @ r
        accepted = False
        for _ in range(25):
            try:
                step = np.linalg.solve(jtj + damp * np.eye(x.shape[0]), g)
            except np.linalg.LinAlgError:
                damp *= 10.0
                continue
            x_new = x - step
            r_new = fun(x_new)
            cost_new = float(r_new @ r_new)
            if cost_new < cost:
                x, r, cost = x_new, r_new, cost_new
                damp = max(damp / 3.0, 1e-12)
                accepted = True
                break
            damp *= 10.0
        if not accepted:
            break
    return x, float(np.sqrt(cost))


def calibrate(
    post: MixturePosterior,
    ordering: ComponentOrdering,
    p0: float = DEFAULT_P0,
    p_high: float = DEFAULT_P_HIGH,
    t: float = DEFAULT_T,
) -> SigmoidParams:
    """Solve for (tau, delta) matching the two elicited probabilities.

    The system is

        p0     = 1 - P(c_1),
        p_high = sum_k P(C* = k) P(sum_{j<=k} pi_j >= t | S),

    with conditionals evaluated at the components' expected r and the
    cumulative-weight law Beta(sum_{j<=k} alpha_j, sum_{j>k} alpha_j). The
    chain here is untruncated (its last tail term is 1), so a solution exists
    iff p_high >= P(pi_1 >= t | S), which is checked before solving. A fit
    whose residuals cannot be driven below 1e-6 is reported infeasible as
    well, signalling the caller to refit with a new seed.
    """
    if not 0 < p0 < 1 or not 0 < p_high < 1:
        raise ValueError("p0 and p_high must lie in (0, 1)")
    r_exp = ordering.expected_r
    alpha_ordered = post.alpha[ordering.order]
    tails = _cumulative_tail_probs(alpha_ordered, t)
    if tails[0] > p_high:
        raise CalibrationInfeasibleError(
            f"P(pi_1 >= {t}) = {tails[0]:.4g} exceeds p_high = {p_high:.4g}"
        )

    logit0 = float(np.log(p0 / (1.0 - p0)))

    def residuals(x):
        tau, delta = x
        p = expit(-(tau + delta * r_exp))
        probs = joint_probabilities(p)
        return np.array(
            [(1.0 - p[0]) - p0, float(probs[1:] @ tails) - p_high]
        )

    x0 = np.array([logit0 + r_exp[0], -1.0])
    x, resnorm = _levenberg_marquardt(residuals, x0)
    if resnorm > _SOLVED_TOL:
        raise CalibrationInfeasibleError(
            f"sigmoid calibration stalled at residual norm {resnorm:.3g}"
        )

    tau, delta = float(x[0]), float(x[1])
    conds = expit(-(tau + delta * r_exp))
    monotone = bool(np.all(np.diff(conds) <= 1e-12))
    if not monotone:
        logger.warning(
            "calibrated conditionals are not non-increasing along the component "
            "ranking (delta=%.4g)", delta,
        )
    return SigmoidParams(
        tau=tau, delta=delta, t=t, p0=p0, p_high=p_high,
        solved=True, monotone=monotone,
    )


def sample_gamma(
    post: MixturePosterior,
    ordering: ComponentOrdering,
    params: SigmoidParams,
    n_samples: int = DEFAULT_SAMPLES_PER_RESTART,
    cap: float = DEFAULT_CAP,
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Draw gamma samples from one calibrated fit.

    Per draw: weights from Dirichlet(alpha); for each non-truncated component
    a fresh (mu, Sigma) NIW draw feeds the sigmoid; the chained joint
    probabilities pick how many top components are anomalous; gamma is their
    cumulative weight (zero when none are). Samples are capped at `cap`.
    """
    if not params.solved:
        raise ValueError("sigmoid parameters are not calibrated")
    if rng is None:
        rng = np.random.default_rng(0)
    ordered = post.reordered(ordering.order)
    kprime = truncation_index(ordered.expected_weight, cap)

    pi = rng.dirichlet(ordered.alpha, size=n_samples)
    cums = np.cumsum(pi, axis=1)
    conds = np.zeros((n_samples, ordered.k_active))
    for k in range(kprime):
        mu, sigma = sample_niw(ordered, k, rng, size=n_samples)
        rvals = _representative_batch(mu, sigma)
        conds[:, k] = expit(-(params.tau + params.delta * rvals))

    probs = joint_probabilities(conds)
    cdf = np.cumsum(probs, axis=1)
    kstar = np.minimum(
        (rng.random(n_samples)[:, None] > cdf).sum(axis=1), ordered.k_active
    )
    picked = cums[np.arange(n_samples), np.maximum(kstar, 1) - 1]
    return np.where(kstar == 0, 0.0, np.minimum(picked, cap))


def point_estimate(gp: GammaPosterior) -> float:
    """Posterior mean, zero atom included."""
    return gp.mean


def _run_restart(
    matrix,
    config: DpgmmConfig,
    restart_seq: np.random.SeedSequence,
    p0: float,
    p_high: float,
    t: float,
    cap: float,
    n_samples: int,
    max_retries: int,
    mc_draws: int,
) -> tuple[np.ndarray, dict] | None:
    """One restart: refit until calibration is feasible, then sample.

    Returns None when every retry was rejected.
    """
    attempt_seqs = restart_seq.spawn(max_retries)
    for attempt, aseq in enumerate(attempt_seqs):
        fit_seq, order_seq, sample_seq = aseq.spawn(3)
        fit_seed = int(fit_seq.generate_state(1)[0] % (2**31 - 1))
        post, diag = dpgmm.fit(matrix, replace(config, seed=fit_seed))
        try:
            ordering = order_components(
                post, mc_draws=mc_draws, rng=np.random.default_rng(order_seq)
            )
            truncation_index(post.expected_weight[ordering.order], cap)
            params = calibrate(post, ordering, p0=p0, p_high=p_high, t=t)
            params = replace(params, retries_used=attempt)
            samples = sample_gamma(
                post, ordering, params, n_samples=n_samples, cap=cap,
                rng=np.random.default_rng(sample_seq),
            )
        except CalibrationInfeasibleError as exc:
            logger.info("restart attempt %d rejected: %s", attempt, exc)
            continue
        info = {
            "fit_seed": fit_seed,
            "retries_used": attempt,
            "k_active": int(post.k_active),
            "tau": params.tau,
            "delta": params.delta,
            "converged": diag.converged,
            "iterations": diag.iterations,
        }
        return samples, info
    return None


def estimate_posterior(
    matrix,
    config: DpgmmConfig | None = None,
    p0: float = DEFAULT_P0,
    p_high: float = DEFAULT_P_HIGH,
    t: float = DEFAULT_T,
    cap: float = DEFAULT_CAP,
    restarts: int = DEFAULT_RESTARTS,
    samples_per_restart: int = DEFAULT_SAMPLES_PER_RESTART,
    max_retries: int = DEFAULT_MAX_RETRIES,
    mc_draws: int = ORDERING_MC_DRAWS,
    seed: int = 0,
    threads: int = 1,
) -> GammaPosterior:
    """Full estimation: `restarts` independent fits, concatenated samples.

    Restarts use RNG streams spawned from the master seed and are concatenated
    in restart order, so the result is reproducible for any thread count. If
    any restart exhausts its calibration retries the whole posterior collapses
    to the gamma = 0 point mass (`exhausted` is set).
    """
    if restarts < 1:
        raise ValueError(f"restarts must be >= 1, got {restarts}")
    if config is None:
        config = DpgmmConfig()
    master = np.random.SeedSequence(seed)
    restart_seqs = master.spawn(restarts)

    def job(rs):
        return _run_restart(
            matrix, config, rs, p0, p_high, t, cap,
            samples_per_restart, max_retries, mc_draws,
        )

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(job, restart_seqs))
    else:
        results = [job(rs) for rs in restart_seqs]

    if any(res is None for res in results):
        logger.warning(
            "calibration retries exhausted; reporting the degenerate gamma = 0 posterior"
        )
        return GammaPosterior(
            samples=np.zeros(restarts * samples_per_restart),
            cap=cap, seed=seed, p0=p0, p_high=p_high, t=t,
            restarts=[], exhausted=True,
        )

    all_samples = np.concatenate([res[0] for res in results])
    infos = [res[1] for res in results]
    return GammaPosterior(
        samples=all_samples, cap=cap, seed=seed, p0=p0, p_high=p_high, t=t,
        restarts=infos, exhausted=False,
    )
