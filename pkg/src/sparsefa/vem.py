"""Factored variational EM for the InterceptBoth and FactorBoth variants.

With both client and item intercepts the user factors and the b_j are coupled
a posteriori, so q is restricted to q_f(f~_1..f~_R) q_b(b_1..b_C). Each
q-update is the exact maximizer of F with the other block fixed, and the
M-step reuses the block updates of :mod:`sparsefa.em` with the factored
moments, so F never decreases along the iteration.
"""

from __future__ import annotations

import logging
import time

import numpy as np

from .core import (
    FitReport,
    ModelConfig,
    PosteriorSummary,
    prior_posterior,
    validate_and_index,
)
from .em import (
    LOG_2PI,
    EntryMoments,
    backfit,
    gaussian_factor_posterior,
    init_params,
    relative_change,
    residuals,
    _check_finite,
)
from .errors import InvalidVariant, NonPositiveDefinite

logger = logging.getLogger(__name__)

# The variational state has the same shape as an exact posterior summary.
VariationalState = PosteriorSummary


def update_q_b(state, params, data, index):
    """Optimal Gaussian q(b_j) given q_f: returns ``(mu_b, var_b)``."""
    _check_finite(params)
    w = 1.0 / params.psi[data.items]
    tl = params.augmented_loadings()
    fitted = np.einsum("na,na->n", state.mu_f[data.users], tl[data.items])
    r = residuals(params, data) - fitted
    var_b = 1.0 / (index.item_sum(w) + 1.0 / params.sigma2_b)
    mu_b = var_b * index.item_sum(w * r)
    return mu_b, var_b


def update_q_f(state, params, data, index):
    """Optimal Gaussian q(f~_i) given q_b: returns ``(mu_f, sigma_f)``."""
    post = gaussian_factor_posterior(params, data, index, offset=state.mu_b[data.items])
    return post.mu_f, post.sigma_f


def rescale_intercept(state, old_sigma_a, new_sigma_a):
    """Re-express q over a_i / sigma_a after sigma_a changes, keeping q(a_i) fixed."""
    out = state.copy()
    c = old_sigma_a / new_sigma_a
    out.mu_f[:, -1] *= c
    out.sigma_f[:, -1, :] *= c
    out.sigma_f[:, :, -1] *= c
    return out


def compute_elbo(state, params, data, index):
    """F(q, theta) = E_q log p(Y, f~, b | theta) + H(q), no constants dropped."""
    tl = params.augmented_loadings()
    psi_e = params.psi[data.items]
    le = tl[data.items]
    m, S = state.mu_f, state.sigma_f
    mb = state.mu_b[data.items] if state.mu_b is not None else 0.0
    vb = state.var_b[data.items] if state.var_b is not None else 0.0
    resid = residuals(params, data) - np.einsum("na,na->n", m[data.users], le) - mb
    e2 = resid ** 2 + np.einsum("na,nab,nb->n", le, S[data.users], le) + vb
    f = -0.5 * np.sum(LOG_2PI + np.log(psi_e) + e2 / psi_e)

    try:
        chol = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise NonPositiveDefinite("q_f covariance is not positive definite") from None
    logdet = 2.0 * np.log(np.diagonal(chol, axis1=-2, axis2=-1)).sum(axis=-1)
    kk = m.shape[1]
    tr = np.trace(S, axis1=-2, axis2=-1)
    f -= 0.5 * np.sum(tr + np.sum(m * m, axis=1) - kk - logdet)

    if state.mu_b is not None:
        if np.any(state.var_b <= 0):
            raise NonPositiveDefinite("q_b variance must be positive")
        s2b = params.sigma2_b
        ratio = state.var_b / s2b
        f -= 0.5 * np.sum(ratio + state.mu_b ** 2 / s2b - 1.0 - np.log(ratio))
    return float(f)


def vem_m_step(state, data, index, params, config, callback=None):
    """Backfitting M-step; returns ``(params, state)`` with q re-expressed
    for the updated sigma_a (q(a_i) itself is unchanged).

    ``callback(block, params, state)`` fires after every block with the
    state consistent with those params, so F can be tracked per block.
    """
    def on_block(block, p):
        if callback is not None:
            callback(block, p, rescale_intercept(state, params.sigma_a, p.sigma_a))

    new = backfit(params, data, index, state, config, callback=on_block)
    return new, rescale_intercept(state, params.sigma_a, new.sigma_a)


def q_sweep(state, params, data, index):
    state = state.copy()
    state.mu_b, state.var_b = update_q_b(state, params, data, index)
    state.mu_f, state.sigma_f = update_q_f(state, params, data, index)
    return state


def fit_vem(data, config: ModelConfig, index=None, params=None):
    """Fit by factored variational EM. Returns ``(params, state, report)``.

    q starts at the prior. Each iteration runs ``config.inner_sweeps``
    q_b / q_f sweeps, then one M-step; F is recorded after both halves. A
    last q sweep under the final parameters produces the returned state.
    """
    variant = config.variant
    if variant.solver != "vem":
        raise InvalidVariant(f"{variant.value} is fitted by exact EM")
    if index is None:
        index = validate_and_index(data)
    if params is None:
        params = init_params(config, data.p, data.n_items)
    if config.fixed_sigma2_b is not None:
        params.sigma2_b = config.fixed_sigma2_b

    state = prior_posterior(
        variant, config.k, data.n_users, data.n_items, params.sigma2_b,
        index.user_counts.copy(), index.item_counts.copy(),
    )
    report = FitReport(objective="elbo")
    report.unrated_items = np.flatnonzero(index.item_counts == 0).tolist()
    f_old = compute_elbo(state, params, data, index)
    report.objective_trace.append(f_old)
    for it in range(1, config.max_iter + 1):
        t0 = time.perf_counter()
        for _ in range(config.inner_sweeps):
            state = q_sweep(state, params, data, index)
        report.e_step_trace.append(compute_elbo(state, params, data, index))
        params, state = vem_m_step(state, data, index, params, config)
        f_new = compute_elbo(state, params, data, index)
        report.seconds_per_iteration.append(time.perf_counter() - t0)
        report.objective_trace.append(f_new)
        report.iterations = it
        logger.debug("VEM iteration %d: F %.10g", it, f_new)
        if relative_change(f_new, f_old) < config.tol:
            report.converged = True
            break
        f_old = f_new
    state = q_sweep(state, params, data, index)
    return params, state, report

