"""Domain types, sparse bipartite indexing, the prediction rule and metrics.

Ratings are held as flat entry arrays (one row per observed user-item pair).
Every solver works on these arrays plus a :class:`BipartiteIndex`, which
provides per-user and per-item grouped sums in a single sparse product.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import (
    DimensionMismatch,
    DuplicatePair,
    EmptyInput,
    InconsistentCovariateLength,
    IndexOutOfRange,
    InvalidVariant,
    LengthMismatch,
)

VARIANCE_FLOOR = 1e-6


class ModelVariant(str, enum.Enum):
    """The five model variants fitted to MovieLens.

    ``INTERCEPT_CLIENT``  y = x'b + a_i + e
    ``INTERCEPT_BOTH``    y = x'b + a_i + b_j + e
    ``FACTOR``            y = x'b + f_i'l_j + e
    ``FACTOR_CLIENT``     y = x'b + f_i'l_j + a_i + e
    ``FACTOR_BOTH``       y = x'b + f_i'l_j + a_i + b_j + e
    """

    INTERCEPT_CLIENT = "intercept-client"
    INTERCEPT_BOTH = "intercept-both"
    FACTOR = "factor"
    FACTOR_CLIENT = "factor-client"
    FACTOR_BOTH = "factor-both"

    @property
    def has_client_intercept(self):
        return self is not ModelVariant.FACTOR

    @property
    def has_item_intercept(self):
        return self in (ModelVariant.INTERCEPT_BOTH, ModelVariant.FACTOR_BOTH)

    @property
    def has_factors(self):
        return self in (ModelVariant.FACTOR, ModelVariant.FACTOR_CLIENT, ModelVariant.FACTOR_BOTH)

    @property
    def solver(self):
        """``"vem"`` when a_i and b_j are coupled a posteriori, else ``"em"``."""
        return "vem" if self.has_item_intercept else "em"

    def check_k(self, k):
        if self.has_factors and k < 1:
            raise InvalidVariant(f"variant {self.value} requires K >= 1, got {k}")
        if not self.has_factors and k != 0:
            raise InvalidVariant(f"variant {self.value} requires K = 0, got {k}")

    def aug_dim(self, k):
        """Length of the augmented factor (f_i, a_i / sigma_a)."""
        return k + int(self.has_client_intercept)


def as_variant(v):
    try:
        return ModelVariant(v)
    except ValueError:
        raise InvalidVariant(f"unknown variant {v!r}") from None


@dataclass(frozen=True)
class RatingsTriples:
    """Observed ratings as parallel arrays.

    ``users[e]``, ``items[e]`` are 0-based indices of entry ``e``; ``covariates``
    is an ``(N, p)`` design matrix. ``n_users`` / ``n_items`` may exceed the
    largest index present (entities without ratings).
    """

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray
    covariates: np.ndarray
    n_users: int
    n_items: int

    def __post_init__(self):
        users = np.asarray(self.users, dtype=np.int64).reshape(-1)
        items = np.asarray(self.items, dtype=np.int64).reshape(-1)
        ratings = np.asarray(self.ratings, dtype=float).reshape(-1)
        x = np.asarray(self.covariates, dtype=float)
        n = len(ratings)
        if x.ndim == 1 and n > 0 and x.size == 0:
            x = x.reshape(n, 0)
        if x.ndim != 2 or x.shape[0] != n:
            raise InconsistentCovariateLength(
                f"covariates must have shape (N, p) with N={n}, got {x.shape}"
            )
        if len(users) != n or len(items) != n:
            raise LengthMismatch("users, items and ratings must have equal length")
        for name, val in (("users", users), ("items", items), ("ratings", ratings), ("covariates", x)):
            val.setflags(write=False)
            object.__setattr__(self, name, val)
        object.__setattr__(self, "n_users", int(self.n_users))
        object.__setattr__(self, "n_items", int(self.n_items))

    @classmethod
    def from_entries(cls, entries, n_users, n_items, p=None):
        """Build from ``(user, item, rating, covariates)`` tuples."""
        entries = list(entries)
        lengths = {len(e[3]) for e in entries}
        if len(lengths) > 1:
            raise InconsistentCovariateLength(f"covariate vectors have lengths {sorted(lengths)}")
        if p is None:
            p = lengths.pop() if lengths else 0
        elif lengths and lengths != {p}:
            raise InconsistentCovariateLength(f"expected covariates of length {p}")
        x = np.array([e[3] for e in entries], dtype=float).reshape(len(entries), p)
        return cls(
            users=[e[0] for e in entries],
            items=[e[1] for e in entries],
            ratings=[e[2] for e in entries],
            covariates=x,
            n_users=n_users,
            n_items=n_items,
        )

    @property
    def n_entries(self):
        return len(self.ratings)

    @property
    def p(self):
        return self.covariates.shape[1]

    def entries(self):
        for e in range(self.n_entries):
            yield (int(self.users[e]), int(self.items[e]), float(self.ratings[e]),
                   tuple(float(v) for v in self.covariates[e]))


@dataclass(frozen=True)
class BipartiteIndex:
    """Entry positions grouped by user and by item.

    ``user_order[user_ptr[i]:user_ptr[i+1]]`` are the entries of user ``i``
    sorted by item index (and symmetrically for items). ``user_incidence`` is
    the sparse ``R x N`` 0/1 matrix used for grouped sums.
    """

    user_order: np.ndarray
    user_ptr: np.ndarray
    item_order: np.ndarray
    item_ptr: np.ndarray
    user_incidence: sp.csr_matrix = field(repr=False)
    item_incidence: sp.csr_matrix = field(repr=False)

    @property
    def user_counts(self):
        return np.diff(self.user_ptr)

    @property
    def item_counts(self):
        return np.diff(self.item_ptr)

    @property
    def by_user(self):
        return [self.user_order[a:b] for a, b in zip(self.user_ptr[:-1], self.user_ptr[1:])]

    @property
    def by_item(self):
        return [self.item_order[a:b] for a, b in zip(self.item_ptr[:-1], self.item_ptr[1:])]

    def user_sum(self, values):
        """Sum per-entry ``values`` (shape ``(N, ...)``) within each user."""
        return _grouped_sum(self.user_incidence, values)

    def item_sum(self, values):
        return _grouped_sum(self.item_incidence, values)


def _grouped_sum(incidence, values):
    values = np.asarray(values, dtype=float)
    flat = values.reshape(values.shape[0], -1)
    out = np.asarray(incidence @ flat)
    return out.reshape((incidence.shape[0],) + values.shape[1:])


def validate_and_index(raw: RatingsTriples) -> BipartiteIndex:
    """Check the ratings invariants and build the user/item grouping."""
    n = raw.n_entries
    if n == 0:
        raise EmptyInput("no ratings")
    R, C = raw.n_users, raw.n_items
    for name, idx, bound in (("user", raw.users, R), ("item", raw.items, C)):
        bad = np.flatnonzero((idx < 0) | (idx >= bound))
        if bad.size:
            e = bad[0]
            raise IndexOutOfRange(f"entry {e}: {name} index {idx[e]} outside [0, {bound})")
    if n > R * C:
        raise LengthMismatch(f"{n} entries exceed R*C = {R * C}")

    user_order = np.lexsort((raw.items, raw.users))
    u_sorted, i_sorted = raw.users[user_order], raw.items[user_order]
    dup = np.flatnonzero((u_sorted[1:] == u_sorted[:-1]) & (i_sorted[1:] == i_sorted[:-1]))
    if dup.size:
        e = dup[0]
        raise DuplicatePair(int(u_sorted[e]), int(i_sorted[e]))
    item_order = np.lexsort((raw.users, raw.items))

    user_ptr = np.concatenate([[0], np.cumsum(np.bincount(raw.users, minlength=R))])
    item_ptr = np.concatenate([[0], np.cumsum(np.bincount(raw.items, minlength=C))])
    ones = np.ones(n)
    cols = np.arange(n)
    return BipartiteIndex(
        user_order=user_order,
        user_ptr=user_ptr,
        item_order=item_order,
        item_ptr=item_ptr,
        user_incidence=sp.csr_matrix((ones, (raw.users, cols)), shape=(R, n)),
        item_incidence=sp.csr_matrix((ones, (raw.items, cols)), shape=(C, n)),
    )


@dataclass
class ModelParams:
    """Fitted parameters.

    ``psi`` always has one entry per item; in ``"shared"`` mode all entries
    are equal to sigma2_e. ``loadings`` is ``(C, K)`` with ``K = 0`` allowed.
    """

    variant: ModelVariant
    beta: np.ndarray
    loadings: np.ndarray
    psi: np.ndarray
    psi_mode: str = "per-item"
    sigma2_a: float | None = None
    sigma2_b: float | None = None

    def __post_init__(self):
        self.variant = as_variant(self.variant)
        self.beta = np.asarray(self.beta, dtype=float).reshape(-1)
        self.loadings = np.asarray(self.loadings, dtype=float)
        if self.loadings.ndim == 1:
            self.loadings = self.loadings.reshape(-1, 1)
        self.psi = np.asarray(self.psi, dtype=float).reshape(-1)
        if self.psi_mode not in ("per-item", "shared"):
            raise ValueError(f"psi_mode must be 'per-item' or 'shared', got {self.psi_mode!r}")
        if self.variant.has_client_intercept != (self.sigma2_a is not None):
            raise InvalidVariant(f"sigma2_a must be set iff {self.variant.value} has client intercepts")
        if self.variant.has_item_intercept != (self.sigma2_b is not None):
            raise InvalidVariant(f"sigma2_b must be set iff {self.variant.value} has item intercepts")
        if len(self.psi) != self.loadings.shape[0]:
            raise DimensionMismatch("psi and loadings disagree on the number of items")

    @property
    def k(self):
        return self.loadings.shape[1]

    @property
    def n_items(self):
        return self.loadings.shape[0]

    @property
    def sigma_a(self):
        return float(np.sqrt(self.sigma2_a)) if self.sigma2_a is not None else None

    @property
    def sigma2_e(self):
        return float(self.psi[0]) if self.psi_mode == "shared" else None

    def augmented_loadings(self):
        """Rows ``(l_j, sigma_a)``; plain ``l_j`` without a client intercept."""
        if not self.variant.has_client_intercept:
            return self.loadings
        col = np.full((self.n_items, 1), self.sigma_a)
        return np.hstack([self.loadings, col])

    def copy(self):
        return ModelParams(
            variant=self.variant,
            beta=self.beta.copy(),
            loadings=self.loadings.copy(),
            psi=self.psi.copy(),
            psi_mode=self.psi_mode,
            sigma2_a=self.sigma2_a,
            sigma2_b=self.sigma2_b,
        )


@dataclass
class PosteriorSummary:
    """Per-user moments of the augmented factor and per-item b_j moments.

    ``mu_f`` is ``(R, K')`` and ``sigma_f`` is ``(R, K', K')``; when a client
    intercept is present the last coordinate is a_i / sigma_a. ``mu_b`` and
    ``var_b`` are ``None`` for variants without item intercepts. The rating
    counts drive the unseen-entity fallback at prediction time.
    """

    mu_f: np.ndarray
    sigma_f: np.ndarray
    user_counts: np.ndarray
    item_counts: np.ndarray
    mu_b: np.ndarray | None = None
    var_b: np.ndarray | None = None

    @property
    def n_users(self):
        return self.mu_f.shape[0]

    @property
    def n_items(self):
        return len(self.item_counts)

    def copy(self):
        return PosteriorSummary(
            mu_f=self.mu_f.copy(),
            sigma_f=self.sigma_f.copy(),
            user_counts=self.user_counts.copy(),
            item_counts=self.item_counts.copy(),
            mu_b=None if self.mu_b is None else self.mu_b.copy(),
            var_b=None if self.var_b is None else self.var_b.copy(),
        )


def prior_posterior(variant, k, n_users, n_items, sigma2_b=None, user_counts=None, item_counts=None):
    """Posterior summary equal to the prior (mean 0, identity covariance)."""
    kk = variant.aug_dim(k)
    return PosteriorSummary(
        mu_f=np.zeros((n_users, kk)),
        sigma_f=np.broadcast_to(np.eye(kk), (n_users, kk, kk)).copy(),
        user_counts=np.zeros(n_users, dtype=np.int64) if user_counts is None else np.asarray(user_counts),
        item_counts=np.zeros(n_items, dtype=np.int64) if item_counts is None else np.asarray(item_counts),
        mu_b=np.zeros(n_items) if variant.has_item_intercept else None,
        var_b=np.full(n_items, sigma2_b) if variant.has_item_intercept else None,
    )


@dataclass
class FitReport:
    """Objective trace and timing of a fit.

    ``objective_trace[0]`` is the objective at the initial parameters, and
    entry ``t`` the value after iteration ``t``. For variational fits
    ``e_step_trace[t-1]`` holds F after the q-update of iteration ``t`` (before
    its M-step), so the two traces interleave into the ELBO chain.
    """

    objective: str
    iterations: int = 0
    objective_trace: list = field(default_factory=list)
    e_step_trace: list = field(default_factory=list)
    converged: bool = False
    seconds_per_iteration: list = field(default_factory=list)
    unrated_items: list = field(default_factory=list)

    def to_dict(self):
        return {
            "objective": self.objective,
            "iterations": self.iterations,
            "converged": self.converged,
            "objective_trace": [float(v) for v in self.objective_trace],
            "e_step_trace": [float(v) for v in self.e_step_trace],
            "seconds_per_iteration": [float(v) for v in self.seconds_per_iteration],
            "unrated_items": [int(j) for j in self.unrated_items],
        }


@dataclass(frozen=True)
class ModelConfig:
    variant: ModelVariant = ModelVariant.FACTOR
    k: int = 1
    psi_mode: str = "per-item"
    tol: float = 1e-6
    max_iter: int = 200
    backfit_passes: int = 1
    inner_sweeps: int = 1
    seed: int = 0
    deterministic_init: bool = False
    variance_floor: float = VARIANCE_FLOOR
    fixed_sigma2_b: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "variant", as_variant(self.variant))
        self.variant.check_k(self.k)
        if self.psi_mode not in ("per-item", "shared"):
            raise ValueError(f"psi_mode must be 'per-item' or 'shared', got {self.psi_mode!r}")
        if self.max_iter < 1 or self.backfit_passes < 1 or self.inner_sweeps < 1:
            raise ValueError("max_iter, backfit_passes and inner_sweeps must be >= 1")


def _seen(counts, idx):
    idx = np.asarray(idx)
    ok = (idx >= 0) & (idx < len(counts))
    out = np.zeros(idx.shape, dtype=bool)
    out[ok] = counts[idx[ok]] > 0
    return out


def predict_many(params: ModelParams, post: PosteriorSummary, users, items, x):
    """Vectorized prediction rule.

    Pass ``-1`` (or any out-of-range index) for an entity unknown at
    training time. Terms belonging to an unseen entity are dropped; when both
    are unseen the prediction is ``x @ beta``.
    """
    users = np.asarray(users, dtype=np.int64).reshape(-1)
    items = np.asarray(items, dtype=np.int64).reshape(-1)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(1, -1)
    if x.shape[1] != len(params.beta):
        raise DimensionMismatch(f"x has length {x.shape[1]}, beta has length {len(params.beta)}")
    if not (len(users) == len(items) == x.shape[0]):
        raise DimensionMismatch("users, items and x rows must align")

    pred = x @ params.beta
    u_seen = _seen(post.user_counts, users)
    i_seen = _seen(post.item_counts, items)
    k = params.k
    both = u_seen & i_seen
    if k:
        uu, ii = users[both], items[both]
        pred[both] += np.einsum("nk,nk->n", post.mu_f[uu, :k], params.loadings[ii])
    if params.variant.has_client_intercept:
        pred[u_seen] += params.sigma_a * post.mu_f[users[u_seen], k]
    if params.variant.has_item_intercept:
        pred[i_seen] += post.mu_b[items[i_seen]]
    return pred


def predict_rating(params, post, user, item, x):
    """Predict a single rating; ``user`` / ``item`` may be ``None`` if unknown."""
    u = -1 if user is None else int(user)
    j = -1 if item is None else int(item)
    x = np.asarray(x, dtype=float).reshape(-1)
    return float(predict_many(params, post, [u], [j], x.reshape(1, -1))[0])


def mean_square_error(predicted, actual):
    predicted = np.asarray(predicted, dtype=float).reshape(-1)
    actual = np.asarray(actual, dtype=float).reshape(-1)
    if len(predicted) != len(actual):
        raise LengthMismatch(f"{len(predicted)} predictions for {len(actual)} ratings")
    if len(actual) == 0:
        raise EmptyInput("cannot compute MSE of zero ratings")
    return float(np.mean((predicted - actual) ** 2))
