"""Exact EM for the Factor, FactorClient and InterceptClient variants.

A client intercept is absorbed into the factor: with a~_i = a_i / sigma_a the
augmented factor (f_i, a~_i) is standard normal a priori and its loading is
(l_j, sigma_a). The E-step is then a K'-dimensional Gaussian conditioning
per user (K' = K + 1 with a client intercept, else K).

The M-step is block-coordinate ("backfitting"): beta, loadings, sigma2_a and
the noise variances are each set to the exact maximizer of the expected
complete-data log-likelihood with the others held fixed. Those blocks are
written against posterior moments of (f_i, a_i) on the original scale, so the
same code also serves the variational solver (which adds item intercepts).
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass

import numpy as np

from .core import (
    FitReport,
    ModelConfig,
    ModelParams,
    PosteriorSummary,
    RatingsTriples,
    BipartiteIndex,
    validate_and_index,
)
from .errors import (
    InvalidVariant,
    NonFiniteInput,
    NonPositiveDefinite,
    SingularGram,
    SingularItemMoment,
)

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)


def _check_finite(params):
    for name in ("beta", "loadings", "psi"):
        if not np.all(np.isfinite(getattr(params, name))):
            raise NonFiniteInput(f"non-finite values in {name}")
    for name in ("sigma2_a", "sigma2_b"):
        v = getattr(params, name)
        if v is not None and not np.isfinite(v):
            raise NonFiniteInput(f"non-finite {name}")


def residuals(params, data):
    """r_ij = y_ij - x_ij' beta for every observed entry."""
    return data.ratings - data.covariates @ params.beta


def _batched_inverse(prec):
    """Inverse and log-determinant of a stack of SPD matrices."""
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        raise NonPositiveDefinite("posterior precision is not positive definite") from None
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    cov = np.linalg.inv(prec)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    return cov, logdet


def gaussian_factor_posterior(params, data, index, offset=None, return_loglik=False):
    """Condition the augmented factor of every user on that user's ratings.

    ``offset`` is subtracted from the residuals first (the variational
    solver passes mu_b,j here). With ``return_loglik`` the exact marginal
    log-likelihood of the ratings is returned too, evaluated through the
    determinant lemma and the Woodbury identity at O(N K'^2 + R K'^3) cost.
    """
    _check_finite(params)
    tl = params.augmented_loadings()
    kk = tl.shape[1]
    w = 1.0 / params.psi[data.items]
    r = residuals(params, data)
    if offset is not None:
        r = r - offset
    le = tl[data.items]
    prec = index.user_sum(w[:, None, None] * le[:, :, None] * le[:, None, :])
    prec += np.eye(kk)
    rhs = index.user_sum((w * r)[:, None] * le)
    cov, logdet = _batched_inverse(prec)
    mu = np.einsum("rab,rb->ra", cov, rhs)
    post = PosteriorSummary(
        mu_f=mu,
        sigma_f=cov,
        user_counts=index.user_counts.copy(),
        item_counts=index.item_counts.copy(),
    )
    if not return_loglik:
        return post
    n = data.n_entries
    quad = np.sum(w * r * r) - np.einsum("ra,ra->", rhs, mu)
    ll = -0.5 * (n * LOG_2PI + np.sum(np.log(params.psi[data.items])) + logdet.sum() + quad)
    return post, float(ll)


def e_step(params: ModelParams, data: RatingsTriples, index: BipartiteIndex) -> PosteriorSummary:
    """Exact posterior N(mu_f,i, Sigma_f,i) of each user's augmented factor."""
    return gaussian_factor_posterior(params, data, index)


def marginal_loglik(params: ModelParams, data: RatingsTriples, index: BipartiteIndex) -> float:
    """sum_i log N(y_i | X_i beta, L_i L_i' + Psi_i), constants included."""
    if params.variant.has_item_intercept:
        raise InvalidVariant("marginal likelihood does not factor over users with item intercepts")
    return gaussian_factor_posterior(params, data, index, return_loglik=True)[1]


# -- M-step blocks ------------------------------------------------------------


@dataclass
class EntryMoments:
    """Posterior moments of (f_i, a_i), original scale, expanded per entry.

    ``m`` / ``S`` are per-entry copies of the user mean and covariance;
    ``mb`` / ``vb`` the item-intercept mean and variance (zeros when absent).
    The a_i coordinate (if any) is last.
    """

    m: np.ndarray
    S: np.ndarray
    mb: np.ndarray
    vb: np.ndarray
    user_m: np.ndarray
    user_S: np.ndarray
    k: int
    intercept: bool

    @classmethod
    def from_posterior(cls, post, params, data):
        m, S = post.mu_f, post.sigma_f
        intercept = params.variant.has_client_intercept
        if intercept:
            scale = np.ones(m.shape[1])
            scale[-1] = params.sigma_a
            m = m * scale
            S = S * scale[:, None] * scale[None, :]
        n = data.n_entries
        if post.mu_b is not None:
            mb, vb = post.mu_b[data.items], post.var_b[data.items]
        else:
            mb, vb = np.zeros(n), np.zeros(n)
        return cls(
            m=m[data.users],
            S=S[data.users],
            mb=mb,
            vb=vb,
            user_m=m,
            user_S=S,
            k=params.k,
            intercept=intercept,
        )

    def design_loadings(self, params, data):
        """Per-entry loading on (f_i, a_i): (l_j, 1) or l_j."""
        d = params.loadings[data.items]
        if self.intercept:
            d = np.hstack([d, np.ones((len(d), 1))])
        return d

    def expected_sq_error(self, params, data):
        """E_q[(y - x'beta - f'l - a - b)^2] for each entry."""
        d = self.design_loadings(params, data)
        resid = residuals(params, data) - np.einsum("na,na->n", self.m, d) - self.mb
        spread = np.einsum("na,nab,nb->n", d, self.S, d)
        return resid * resid + spread + self.vb


def m_step_beta(data, index, mom: EntryMoments, params):
    """Weighted least squares of the posterior-adjusted ratings on x.

    Weights are 1 / Psi_jj; with a shared noise variance this is the plain
    normal-equations solution. ``index`` is unused but kept for a uniform
    block signature.
    """
    p = data.p
    if p == 0:
        return np.zeros(0)
    d = mom.design_loadings(params, data)
    target = data.ratings - np.einsum("na,na->n", mom.m, d) - mom.mb
    w = 1.0 / params.psi[data.items]
    x = data.covariates
    gram = (x * w[:, None]).T @ x
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        raise SingularGram("covariate Gram matrix is singular (collinear covariates?)")
    return np.linalg.solve(gram, x.T @ (w * target))


def m_step_loadings(data, index, mom: EntryMoments, params):
    """Per-item solve for the factor block of the loadings.

    With a client intercept only l_j is solved; the cross moment E[f_i a_i]
    enters the right-hand side. Items with no ratings keep their loadings.
    """
    k = mom.k
    loadings = params.loadings.copy()
    if k == 0:
        return loadings
    mf = mom.m[:, :k]
    Sff = mom.S[:, :k, :k]
    r = residuals(params, data) - mom.mb
    rhs_e = r[:, None] * mf
    if mom.intercept:
        rhs_e = rhs_e - (mom.S[:, :k, k] + mf * mom.m[:, k:k + 1])
    A = index.item_sum(Sff + mf[:, :, None] * mf[:, None, :])
    rhs = index.item_sum(rhs_e)
    rated = index.item_counts > 0
    try:
        np.linalg.cholesky(A[rated])
    except np.linalg.LinAlgError:
        raise SingularItemMoment("item second-moment matrix is not positive definite") from None
    loadings[rated] = np.linalg.solve(A[rated], rhs[rated][:, :, None])[:, :, 0]
    return loadings


def m_step_psi(data, index, mom: EntryMoments, params, mode, floor):
    """Noise variances from the fully expanded expected squared error."""
    e2 = mom.expected_sq_error(params, data)
    psi = params.psi.copy()
    if mode == "shared":
        psi[:] = max(e2.sum() / data.n_entries, floor)
        return psi
    counts = index.item_counts
    rated = counts > 0
    psi[rated] = np.maximum(index.item_sum(e2)[rated] / counts[rated], floor)
    return psi


def m_step_sigma_a(mom: EntryMoments, floor):
    """Mean over users of E[a_i^2] = sigma_a^2 (mu^2 + Sigma) of the last coordinate."""
    second = mom.user_m[:, -1] ** 2 + mom.user_S[:, -1, -1]
    return max(float(second.mean()), floor)


def m_step_sigma_b(post: PosteriorSummary, floor):
    """Mean over items of E_q[b_j^2]."""
    return max(float(np.mean(post.mu_b ** 2 + post.var_b)), floor)


def backfit(params, data, index, post, config, callback=None):
    """One M-step: ``config.backfit_passes`` sweeps of exact block updates.

    Order per sweep is beta, loadings, sigma2_a, sigma2_b, noise. Moments
    are frozen at the E-step values throughout, so every block maximizes the
    same expected complete-data log-likelihood. ``callback(block, params)``
    is invoked after each block update.
    """
    mom = EntryMoments.from_posterior(post, params, data)
    new = params.copy()
    floor = config.variance_floor
    variant = params.variant

    def done(block):
        if callback is not None:
            callback(block, new)

    for _ in range(config.backfit_passes):
        new.beta = m_step_beta(data, index, mom, new)
        done("beta")
        if variant.has_factors:
            new.loadings = m_step_loadings(data, index, mom, new)
            done("loadings")
        if variant.has_client_intercept:
            new.sigma2_a = m_step_sigma_a(mom, floor)
            done("sigma2_a")
        if variant.has_item_intercept:
            if config.fixed_sigma2_b is None:
                new.sigma2_b = m_step_sigma_b(post, floor)
            done("sigma2_b")
        new.psi = m_step_psi(data, index, mom, new, config.psi_mode, floor)
        done("psi")
    return new


# -- initialization and driver -------------------------------------------------


def init_params(config: ModelConfig, p, n_items):
    """Starting values: standard normal beta and loadings, chi-square(1) variances.

    Draws come from independent child streams of ``SeedSequence(config.seed)``,
    one per parameter block. ``deterministic_init`` replaces them with
    beta = 0, small fixed loadings and unit variances.
    """
    variant, k, floor = config.variant, config.k, config.variance_floor
    if config.deterministic_init:
        beta = np.zeros(p)
        jj, kk = np.meshgrid(np.arange(n_items), np.arange(k), indexing="ij")
        loadings = 0.1 * np.cos(1.0 + jj * k + kk) + 0.05 * (kk == 0)
        psi = np.ones(n_items)
        s2a = s2b = 1.0
    else:
        streams = [np.random.default_rng(s) for s in np.random.SeedSequence(config.seed).spawn(5)]
        beta = streams[0].standard_normal(p)
        loadings = streams[1].standard_normal((n_items, k))
        if config.psi_mode == "shared":
            psi = np.full(n_items, streams[2].chisquare(1))
        else:
            psi = streams[2].chisquare(1, size=n_items)
        s2a = float(streams[3].chisquare(1))
        s2b = float(streams[4].chisquare(1))
    if config.fixed_sigma2_b is not None:
        s2b = config.fixed_sigma2_b
    return ModelParams(
        variant=variant,
        beta=beta,
        loadings=loadings.reshape(n_items, k),
        psi=np.maximum(psi, floor),
        psi_mode=config.psi_mode,
        sigma2_a=max(s2a, floor) if variant.has_client_intercept else None,
        sigma2_b=(s2b if config.fixed_sigma2_b is not None else max(s2b, floor))
        if variant.has_item_intercept
        else None,
    )


def relative_change(new, old):
    return abs(new - old) / max(abs(old), 1e-300)


def fit_em(data: RatingsTriples, config: ModelConfig, index=None, params=None):
    """Fit by exact EM. Returns ``(params, posterior, report)``.

    ``params`` overrides the initialization. Iteration stops when the
    relative change in marginal log-likelihood falls below ``config.tol``;
    hitting ``max_iter`` is reported through ``report.converged``.
    """
    variant = config.variant
    if variant.solver != "em":
        raise InvalidVariant(f"{variant.value} needs the variational solver")
    if index is None:
        index = validate_and_index(data)
    if params is None:
        params = init_params(config, data.p, data.n_items)

    report = FitReport(objective="loglik")
    report.unrated_items = np.flatnonzero(index.item_counts == 0).tolist()
    post, ll = gaussian_factor_posterior(params, data, index, return_loglik=True)
    report.objective_trace.append(ll)
    for it in range(1, config.max_iter + 1):
        t0 = time.perf_counter()
        params = backfit(params, data, index, post, config)
        post, ll_new = gaussian_factor_posterior(params, data, index, return_loglik=True)
        report.seconds_per_iteration.append(time.perf_counter() - t0)
        report.objective_trace.append(ll_new)
        report.iterations = it
        logger.debug("EM iteration %d: loglik %.10g", it, ll_new)
        if relative_change(ll_new, ll) < config.tol:
            report.converged = True
            break
        ll = ll_new
    return params, post, report
