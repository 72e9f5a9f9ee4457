"""Comparison baseline: OLS on covariates, then rank-K hard impute of the residuals."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.linalg

from .errors import DimensionMismatch, InvalidDimensions, SingularGram, SvdFailure

logger = logging.getLogger(__name__)


def ols_regression(data):
    """Least-squares coefficients of rating on x over the observed entries."""
    x, y = data.covariates, data.ratings
    if x.shape[1] == 0:
        return np.zeros(0)
    gram = x.T @ x
    ev = np.linalg.eigvalsh(gram)
    if ev[0] <= 1e-12 * max(ev[-1], 1e-300):
        raise SingularGram("covariate Gram matrix is singular")
    return np.linalg.solve(gram, x.T @ y)


@dataclass
class ResidualMatrix:
    """Dense R x C workspace; observed cells hold y - x'beta_ols."""

    values: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_ratings(cls, data, beta):
        values = np.zeros((data.n_users, data.n_items))
        mask = np.zeros_like(values, dtype=bool)
        values[data.users, data.items] = data.ratings - data.covariates @ beta
        mask[data.users, data.items] = True
        return cls(values, mask)


@dataclass
class HardImputeResult:
    U: np.ndarray
    D: np.ndarray
    V: np.ndarray
    iterations: int
    converged: bool
    train_sse: list = field(default_factory=list)

    def fitted(self):
        return (self.U * self.D) @ self.V.T


def _truncated_svd(a, k, v0=None):
    """Top-k singular triplets, largest first.

    Large matrices go through ARPACK (full precision, warm-started from
    ``v0``); small or all-zero ones, where ARPACK is either unusable or no
    faster, through a dense SVD.
    """
    try:
        if min(a.shape) <= max(100, k + 1) or not a.any():
            u, s, vt = np.linalg.svd(a, full_matrices=False)
            return u[:, :k], s[:k], vt[:k].T
        if v0 is None or not np.any(v0):
            v0 = np.full(min(a.shape), 1.0)
        u, s, vt = scipy.sparse.linalg.svds(a, k=k, v0=v0, tol=0)
    except (np.linalg.LinAlgError, ValueError, scipy.sparse.linalg.ArpackError) as exc:
        raise SvdFailure(str(exc)) from None
    order = np.argsort(s)[::-1]
    return u[:, order], s[order], vt[order].T


def hard_impute(residuals: ResidualMatrix, K, tol=1e-5, max_iter=300):
    """Rank-K matrix completion by iterated truncated SVD.

    Unobserved cells start at 0. Each step replaces them with the current
    rank-K fit and recomputes the best rank-K approximation; iteration stops
    once the fit moves by less than ``tol`` in relative Frobenius norm (the
    zero-filled matrix counts as the fit before the first step).
    """
    R, C = residuals.values.shape
    if not 1 <= K <= min(R, C):
        raise InvalidDimensions(f"K must be in 1..{min(R, C)}, got {K}")
    obs, mask = residuals.values, residuals.mask
    filled = np.where(mask, obs, 0.0)
    fit = filled
    sse = []
    converged = False
    it = 0
    v0 = None
    for it in range(1, max_iter + 1):
        U, D, V = _truncated_svd(filled, K, v0)
        v0 = (U if R <= C else V).sum(axis=1)
        new_fit = (U * D) @ V.T
        sse.append(float(np.sum((obs - new_fit)[mask] ** 2)))
        change = np.linalg.norm(new_fit - fit) / max(np.linalg.norm(new_fit), 1e-300)
        fit = new_fit
        if change < tol:
            converged = True
            break
        filled = np.where(mask, obs, fit)
    logger.debug("hard impute: %d iterations, converged=%s", it, converged)
    return HardImputeResult(U=U, D=D, V=V, iterations=it, converged=converged, train_sse=sse)


def baseline_predict(beta_ols, factorization, user, item, x):
    """x'beta_ols plus the completed residual; unseen entities get x'beta_ols."""
    return float(baseline_predict_many(beta_ols, factorization, [user], [item], np.reshape(x, (1, -1)))[0])


def baseline_predict_many(beta_ols, factorization, users, items, x, user_counts=None, item_counts=None):
    """Vectorized baseline prediction.

    ``users`` / ``items`` outside the factorization's range (or ``None``) are
    unseen; so are entities with zero training ratings when counts are given.
    """
    U, D, V = factorization
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != len(beta_ols):
        raise DimensionMismatch(f"x has length {x.shape[1]}, beta has length {len(beta_ols)}")
    users = np.array([-1 if u is None else u for u in users], dtype=np.int64)
    items = np.array([-1 if j is None else j for j in items], dtype=np.int64)
    pred = x @ beta_ols
    ok = (users >= 0) & (users < U.shape[0]) & (items >= 0) & (items < V.shape[0])
    if user_counts is not None:
        ok[ok] &= np.asarray(user_counts)[users[ok]] > 0
    if item_counts is not None:
        ok[ok] &= np.asarray(item_counts)[items[ok]] > 0
    pred[ok] += np.einsum("nk,k,nk->n", U[users[ok]], D, V[items[ok]])
    return pred
