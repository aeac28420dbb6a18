"""Dirichlet-process Gaussian mixture fitted by coordinate-ascent variational inference.

The model is a truncated stick-breaking mixture over the M-dimensional score
space with a Normal-Inverse-Wishart base measure:

    v_k ~ Beta(1, concentration)          k = 1..T-1, v_T = 1
    pi_k = v_k * prod_{j<k} (1 - v_j)
    Sigma_k ~ InvWishart(Psi_0, nu_0)
    mu_k | Sigma_k ~ Normal(m_0, Sigma_k / lambda_0)
    s_i | z_i = k ~ Normal(mu_k, Sigma_k)

The variational family is mean field: Beta sticks, NIW component factors, and
categorical responsibilities. Updates follow the standard conjugate
coordinate-ascent scheme; internally the Wishart-on-precision parameterization
is used, but all reported quantities are NIW (Psi is the inverse-Wishart scale
of the covariance).

The ELBO is evaluated right after each responsibility update via

    ELBO = sum_i logsumexp_k log rho_ik
           - sum_k KL(q(v_k) || p(v_k)) - sum_k KL(q(mu_k, Sigma_k) || prior)

which is exact when responsibilities are at their optimum, and is
non-decreasing across iterations by the usual coordinate-ascent argument.

After fitting, components with at least one hard-assigned observation are kept
and the leftover density (inactive soft counts plus the prior mass) is spread
uniformly over them, collapsing the posterior over weights to a finite
Dirichlet.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import digamma, gammaln
from scipy.stats import invwishart
from sklearn.cluster import KMeans

logger = logging.getLogger(__name__)

_MIN_ITER = 10  # convergence is never declared before this many iterations


class DpgmmError(RuntimeError):
    """Fit failure: empty input or a covariance update that is not SPD."""


@dataclass(frozen=True)
class DpgmmConfig:
    """Priors and fitting controls for the mixture.

    Defaults follow weakly informative choices: zero prior mean, identity
    prior scale, dof M+2 (so the prior expected covariance is the identity).
    `prior_mean` / `prior_scale_matrix` / `prior_dof` of None are resolved to
    those defaults once the data dimension is known.
    """

    max_components: int = 100
    concentration: float = 1.0
    prior_mean: np.ndarray | None = None
    prior_scale_matrix: np.ndarray | None = None
    prior_dof: float | None = None
    prior_mean_strength: float = 1.0
    max_iter: int = 500
    elbo_tol: float = 1e-6
    reg_covar: float = 1e-6
    init: str = "kmeans"
    seed: int = 0

    def __post_init__(self):
        if self.max_components < 1:
            raise ValueError(f"max_components must be >= 1, got {self.max_components}")
        if self.concentration <= 0:
            raise ValueError(f"concentration must be > 0, got {self.concentration}")
        if self.prior_mean_strength <= 0:
            raise ValueError(
                f"prior_mean_strength must be > 0, got {self.prior_mean_strength}"
            )
        if self.reg_covar < 0:
            raise ValueError(f"reg_covar must be >= 0, got {self.reg_covar}")
        if self.init not in ("kmeans", "random"):
            raise ValueError(f"init must be 'kmeans' or 'random', got {self.init!r}")

    def resolve_priors(self, n_features: int) -> tuple[np.ndarray, np.ndarray, float]:
        m0 = (
            np.zeros(n_features)
            if self.prior_mean is None
            else np.asarray(self.prior_mean, dtype=float)
        )
        psi0 = (
            np.eye(n_features)
            if self.prior_scale_matrix is None
            else np.asarray(self.prior_scale_matrix, dtype=float)
        )
        nu0 = float(self.prior_dof) if self.prior_dof is not None else n_features + 2.0
        if m0.shape != (n_features,):
            raise ValueError(f"prior_mean shape {m0.shape} != ({n_features},)")
        if psi0.shape != (n_features, n_features):
            raise ValueError(f"prior_scale_matrix shape {psi0.shape} is wrong")
        if not np.allclose(psi0, psi0.T):
            raise ValueError("prior_scale_matrix must be symmetric")
        if np.linalg.eigvalsh(psi0).min() <= 0:
            raise ValueError("prior_scale_matrix must be positive definite")
        if nu0 <= n_features - 1:
            raise ValueError(f"prior_dof must exceed M-1={n_features - 1}, got {nu0}")
        return m0, psi0, nu0


@dataclass(frozen=True)
class MixturePosterior:
    """Collapsed posterior over the active components.

    Arrays are indexed by active component: `alpha` are the Dirichlet weight
    parameters, (`mean`, `strength`, `scale`, `dof`) the NIW location/scale
    factors, `expected_weight` = alpha / alpha.sum(), and `counts` the
    effective observation counts (inactive mass already folded in).
    """

    alpha: np.ndarray
    mean: np.ndarray
    strength: np.ndarray
    scale: np.ndarray
    dof: np.ndarray
    expected_weight: np.ndarray
    counts: np.ndarray
    n_features: int

    @property
    def k_active(self) -> int:
        return self.alpha.shape[0]

    def reordered(self, order: np.ndarray) -> "MixturePosterior":
        """The same posterior with components permuted by `order`."""
        idx = np.asarray(order, dtype=int)
        return MixturePosterior(
            alpha=self.alpha[idx],
            mean=self.mean[idx],
            strength=self.strength[idx],
            scale=self.scale[idx],
            dof=self.dof[idx],
            expected_weight=self.expected_weight[idx],
            counts=self.counts[idx],
            n_features=self.n_features,
        )

    def to_dict(self) -> dict:
        return {
            "n_features": self.n_features,
            "components": [
                {
                    "alpha": float(self.alpha[k]),
                    "mean": [float(v) for v in self.mean[k]],
                    "strength": float(self.strength[k]),
                    "scale": [[float(v) for v in row] for row in self.scale[k]],
                    "dof": float(self.dof[k]),
                    "expected_weight": float(self.expected_weight[k]),
                    "count": float(self.counts[k]),
                }
                for k in range(self.k_active)
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MixturePosterior":
        comps = d["components"]
        alpha = np.array([c["alpha"] for c in comps])
        return cls(
            alpha=alpha,
            mean=np.array([c["mean"] for c in comps]),
            strength=np.array([c["strength"] for c in comps]),
            scale=np.array([c["scale"] for c in comps]),
            dof=np.array([c["dof"] for c in comps]),
            expected_weight=alpha / alpha.sum(),
            counts=np.array([c.get("count", a) for c, a in zip(comps, alpha)]),
            n_features=int(d["n_features"]),
        )


@dataclass(frozen=True)
class FitDiagnostics:
    elbo_trace: list[float] = field(default_factory=list)
    iterations: int = 0
    converged: bool = False
    seed_used: int = 0


def _kl_beta(a: float | np.ndarray, b, a0, b0):
    """KL(Beta(a, b) || Beta(a0, b0))."""

    def log_beta(x, y):
        return gammaln(x) + gammaln(y) - gammaln(x + y)

    return (
        log_beta(a0, b0)
        - log_beta(a, b)
        + (a - a0) * digamma(a)
        + (b - b0) * digamma(b)
        - (a + b - a0 - b0) * digamma(a + b)
    )


def _expected_log_det_precision(nu: np.ndarray, logdet_psi: np.ndarray, m: int):
    """E[log |Sigma^-1|] under Wishart(Psi^-1, nu) on the precision."""
    js = np.arange(1, m + 1)
    return (
        digamma(0.5 * (nu[..., None] + 1.0 - js)).sum(axis=-1)
        + m * np.log(2.0)
        - logdet_psi
    )


def _log_multigamma(a, m: int):
    """Vectorized log of the multivariate gamma function."""
    a = np.asarray(a, dtype=float)
    js = np.arange(1, m + 1)
    return m * (m - 1) / 4.0 * np.log(np.pi) + gammaln(
        a[..., None] + 0.5 * (1.0 - js)
    ).sum(axis=-1)


def _log_wishart_z(nu, logdet_psi, m: int):
    """Log normalizer of Wishart(Psi^-1, nu) in the inverse-scale parameterization."""
    return 0.5 * nu * m * np.log(2.0) - 0.5 * nu * logdet_psi + _log_multigamma(0.5 * nu, m)


def _kl_normal_wishart(m1, lam1, psi1, nu1, m0, lam0, psi0, nu0) -> float:
    """KL between two Normal-Wishart factors given in NIW (inverse-scale) form.

    Both arguments describe q(mu, Lambda) = N(mu | m, (lam Lambda)^-1)
    W(Lambda | Psi^-1, nu); the covariance-side scale Psi is what is stored.
    """
    p1 = np.linalg.inv(psi1)
    _, logdet1 = np.linalg.slogdet(psi1)
    return float(
        _kl_normal_wishart_batch(
            m1[None], np.atleast_1d(np.asarray(lam1, dtype=float)),
            psi1[None], np.atleast_1d(np.asarray(nu1, dtype=float)),
            0.5 * (p1 + p1.T)[None], np.atleast_1d(logdet1),
            m0, lam0, psi0, nu0,
        )[0]
    )


def _kl_normal_wishart_batch(
    m1, lam1, psi1, nu1, prec1, logdet1, m0, lam0, psi0, nu0
) -> np.ndarray:
    """Per-component KL(q(mu_k, Lambda_k) || prior) for a (T, ...) batch.

    `prec1` and `logdet1` are the precomputed inverses / log-determinants of
    the component scales, which the E-step already has at hand.
    """
    mm = m1.shape[-1]
    _, logdet0 = np.linalg.slogdet(psi0)
    diff = m1 - m0
    quad = np.einsum("tm,tmp,tp->t", diff, prec1, diff)
    kl_normal = 0.5 * (
        lam0 * nu1 * quad + mm * lam0 / lam1 - mm + mm * np.log(lam1 / lam0)
    )
    elogdet = _expected_log_det_precision(nu1, logdet1, mm)
    tr = np.einsum("mp,tpm->t", psi0, prec1)
    kl_wishart = (
        0.5 * (nu1 - nu0) * elogdet
        - 0.5 * nu1 * mm
        + 0.5 * nu1 * tr
        - _log_wishart_z(nu1, logdet1, mm)
        + _log_wishart_z(nu0, logdet0, mm)
    )
    return kl_normal + kl_wishart


class _VariationalState:
    """Mutable fit state over the T truncation slots."""

    def __init__(self, s: np.ndarray, config: DpgmmConfig):
        self.s = s
        self.n, self.m = s.shape
        self.t = config.max_components
        self.config = config
        self.m0, self.psi0, self.nu0 = config.resolve_priors(self.m)
        self.lam0 = config.prior_mean_strength
        # slot parameters, filled by the first m_step
        self.stick_a = np.ones(max(self.t - 1, 0))
        self.stick_b = np.full(max(self.t - 1, 0), config.concentration)
        self.mean = np.tile(self.m0, (self.t, 1))
        self.lam = np.full(self.t, self.lam0)
        self.psi = np.tile(self.psi0, (self.t, 1, 1))
        self.nu = np.full(self.t, self.nu0)
        # (N, M^2) flattened outer products s_i s_i^T, reused every M-step
        self._s_outer = (s[:, :, None] * s[:, None, :]).reshape(self.n, self.m * self.m)

    def init_resp(self, rng: np.random.Generator) -> np.ndarray:
        if self.config.init == "kmeans":
            k = min(self.t, self.n)
            labels = KMeans(
                n_clusters=k,
                n_init=1,
                random_state=int(rng.integers(2**31 - 1)),
            ).fit_predict(self.s)
            resp = np.zeros((self.n, self.t))
            resp[np.arange(self.n), labels] = 1.0
            return resp
        resp = rng.random((self.n, self.t))
        return resp / resp.sum(axis=1, keepdims=True)

    def m_step(self, resp: np.ndarray):
        cfg = self.config
        nk = resp.sum(axis=0) + 10.0 * np.finfo(float).eps
        xbar = (resp.T @ self.s) / nk[:, None]
        # S_k = sum_i r_ik (s_i - xbar_k)(s_i - xbar_k)^T / N_k + reg_covar * I
        second = (resp.T @ self._s_outer).reshape(self.t, self.m, self.m)
        cov = second / nk[:, None, None] - xbar[:, :, None] * xbar[:, None, :]
        cov[:, np.arange(self.m), np.arange(self.m)] += cfg.reg_covar

        if self.t > 1:
            tail = np.concatenate([np.cumsum(nk[::-1])[::-1][1:], [0.0]])
            self.stick_a = 1.0 + nk[:-1]
            self.stick_b = cfg.concentration + tail[:-1]
        self.lam = self.lam0 + nk
        self.nu = self.nu0 + nk
        self.mean = (self.lam0 * self.m0 + nk[:, None] * xbar) / self.lam[:, None]
        dm = xbar - self.m0
        self.psi = (
            self.psi0
            + nk[:, None, None] * cov
            + (self.lam0 * nk / self.lam)[:, None, None]
            * np.einsum("tm,tp->tmp", dm, dm)
        )
        self.nk = nk

    def _chol_all(self) -> tuple[np.ndarray, np.ndarray]:
        try:
            chol = np.linalg.cholesky(self.psi)
        except np.linalg.LinAlgError:
            for k in range(self.t):
                if np.linalg.eigvalsh(self.psi[k]).min() <= 0:
                    raise DpgmmError(
                        f"covariance update for component {k} is not SPD "
                        f"even after reg_covar={self.config.reg_covar} jitter"
                    ) from None
            raise
        logdet = 2.0 * np.log(np.diagonal(chol, axis1=1, axis2=2)).sum(axis=1)
        return chol, logdet

    def e_step(self) -> tuple[np.ndarray, np.ndarray]:
        """Responsibilities and per-row logsumexp of the unnormalized log densities."""
        _, logdet_psi = self._chol_all()
        prec = np.linalg.inv(self.psi)
        prec = 0.5 * (prec + prec.transpose(0, 2, 1))

        if self.t > 1:
            elog_v = digamma(self.stick_a) - digamma(self.stick_a + self.stick_b)
            elog_1mv = digamma(self.stick_b) - digamma(self.stick_a + self.stick_b)
            elog_pi = np.concatenate([elog_v, [0.0]])  # v_T = 1
            elog_pi += np.concatenate([[0.0], np.cumsum(elog_1mv)])
        else:
            elog_pi = np.zeros(1)

        elogdet = _expected_log_det_precision(self.nu, logdet_psi, self.m)
        # (s - m)^T P (s - m) expanded so everything is a flat matrix product
        pm = np.matmul(prec, self.mean[:, :, None])[:, :, 0]
        quad = (
            self._s_outer @ prec.reshape(self.t, self.m * self.m).T
            - 2.0 * (self.s @ pm.T)
            + (self.mean * pm).sum(axis=1)[None, :]
        )
        log_rho = (
            elog_pi[None, :]
            + 0.5 * elogdet[None, :]
            - 0.5 * self.m * np.log(2.0 * np.pi)
            - 0.5 * (self.m / self.lam[None, :] + self.nu[None, :] * quad)
        )
        mx = log_rho.max(axis=1)
        shifted = np.exp(log_rho - mx[:, None])
        norm = shifted.sum(axis=1)
        lse = mx + np.log(norm)
        resp = shifted / norm[:, None]
        self._prec = prec
        self._logdet_psi = logdet_psi
        return resp, lse

    def elbo(self, lse: np.ndarray) -> float:
        """Uses the precision/log-det cache of the E-step that produced `lse`."""
        total = float(lse.sum())
        if self.t > 1:
            total -= float(
                _kl_beta(self.stick_a, self.stick_b, 1.0, self.config.concentration).sum()
            )
        total -= float(
            _kl_normal_wishart_batch(
                self.mean, self.lam, self.psi, self.nu,
                self._prec, self._logdet_psi,
                self.m0, self.lam0, self.psi0, self.nu0,
            ).sum()
        )
        return total


def fit(scores, config: DpgmmConfig) -> tuple[MixturePosterior, FitDiagnostics]:
    """Fit the mixture to a transformed score matrix.

    Accepts a ScoreMatrix (must be transformed) or a plain (N, M) array.
    Returns the collapsed posterior over active components and the fit
    diagnostics with the full ELBO trace.
    """
    s = _as_array(scores)
    if s.size == 0:
        raise DpgmmError("empty score matrix")
    n, m = s.shape
    if n <= m:
        logger.warning("N=%d <= M=%d: mixture fit is poorly determined", n, m)

    state = _VariationalState(s, config)
    rng = np.random.default_rng(config.seed)
    resp = state.init_resp(rng)
    state.m_step(resp)

    trace: list[float] = []
    converged = False
    for it in range(config.max_iter):
        resp, lse = state.e_step()
        trace.append(state.elbo(lse))
        if it >= _MIN_ITER:
            prev = trace[-2]
            rel = abs(trace[-1] - prev) / max(abs(prev), 1.0)
            if rel < config.elbo_tol:
                converged = True
                break
        if it < config.max_iter - 1:
            state.m_step(resp)

    post = collapse_active(resp, state, config)
    diag = FitDiagnostics(
        elbo_trace=trace,
        iterations=len(trace),
        converged=converged,
        seed_used=config.seed,
    )
    return post, diag


def _as_array(scores) -> np.ndarray:
    if hasattr(scores, "values") and hasattr(scores, "transformed"):
        if not scores.transformed:
            raise DpgmmError("score matrix must be transformed before fitting")
        return np.asarray(scores.values, dtype=float)
    return np.asarray(scores, dtype=float)


def collapse_active(resp: np.ndarray, state, config: DpgmmConfig) -> MixturePosterior:
    """Collapse the truncated fit to a finite Dirichlet over active components.

    A component is active when at least one observation hard-assigns to it
    (argmax responsibility); this can never be empty. Soft counts stranded on
    inactive slots, plus the prior concentration, are spread uniformly:

        alpha_k = N_k + (concentration + inactive_mass) / K_active

    so that sum(alpha) = N + concentration. The stored effective counts fold
    the inactive mass in (they sum to N); the NIW factors are kept as fitted.
    """
    hard = np.argmax(resp, axis=1)
    active = np.unique(hard)
    soft = resp.sum(axis=0)
    inactive_mass = float(soft.sum() - soft[active].sum())
    k_active = active.shape[0]

    counts = soft[active] + inactive_mass / k_active
    alpha = counts + config.concentration / k_active
    return MixturePosterior(
        alpha=alpha,
        mean=state.mean[active].copy(),
        strength=state.lam[active].copy(),
        scale=state.psi[active].copy(),
        dof=state.nu[active].copy(),
        expected_weight=alpha / alpha.sum(),
        counts=counts,
        n_features=state.m,
    )


def sample_niw(
    post: MixturePosterior, k: int, rng: np.random.Generator, size: int = 1
) -> tuple[np.ndarray, np.ndarray]:
    """Draw (mu, Sigma) samples from component k's NIW posterior.

    Sigma ~ InvWishart(scale_k, dof_k), mu | Sigma ~ Normal(mean_k, Sigma / strength_k).
    Returns mu with shape (size, M) and Sigma with shape (size, M, M).
    """
    m = post.n_features
    sigma = invwishart.rvs(
        df=float(post.dof[k]), scale=post.scale[k], size=size, random_state=rng
    )
    sigma = np.asarray(sigma, dtype=float).reshape(size, m, m)
    chol = np.linalg.cholesky(sigma / post.strength[k])
    z = rng.standard_normal((size, m))
    mu = post.mean[k] + np.einsum("zmp,zp->zm", chol, z)
    return mu, sigma


def sample_component_params(
    post: MixturePosterior, k: int, rng: np.random.Generator
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One joint draw: weights from Dirichlet(alpha), (mu_k, Sigma_k) from the NIW."""
    pi = rng.dirichlet(post.alpha)
    mu, sigma = sample_niw(post, k, rng, size=1)
    return pi, mu[0], sigma[0]
