"""MovieLens-100K ingestion, covariate construction and a synthetic generator."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .core import ModelParams, ModelVariant, RatingsTriples, as_variant
from .errors import (
    DuplicateUserId,
    InvalidDimensions,
    InvalidSplit,
    MalformedLine,
    RatingOutOfRange,
    UnknownItem,
    UnknownUser,
    WrongFlagCount,
)

N_GENRES = 19
N_COVARIATES = 3 + N_GENRES  # intercept, age, gender, genre flags


@dataclass(frozen=True)
class UserRecord:
    user_id: int
    age: int
    gender: str
    occupation: str
    zip: str


@dataclass(frozen=True)
class ItemRecord:
    item_id: int
    title: str
    genre_flags: tuple


class RawRatings(NamedTuple):
    """Ratings keyed by external (1-based) ids; timestamps dropped."""

    user_ids: np.ndarray
    item_ids: np.ndarray
    ratings: np.ndarray

    def __len__(self):
        return len(self.ratings)


def _lines(path, encoding="utf-8"):
    with open(path, "rb") as fh:
        raw = fh.read()
    for lineno, line in enumerate(raw.decode(encoding).splitlines(), start=1):
        if line.strip():
            yield lineno, line


def parse_users(path):
    """Read ``u.user``: ``user_id|age|gender|occupation|zip``."""
    users, seen = [], set()
    for lineno, line in _lines(path):
        fields = line.split("|")
        if len(fields) != 5:
            raise MalformedLine(lineno, line, "expected 5 fields")
        try:
            uid, age = int(fields[0]), int(fields[1])
        except ValueError:
            raise MalformedLine(lineno, line, "non-integer id or age") from None
        if age <= 0 or fields[2] not in ("M", "F"):
            raise MalformedLine(lineno, line, "age must be positive, gender M or F")
        if uid in seen:
            raise DuplicateUserId(f"line {lineno}: user id {uid} repeated")
        seen.add(uid)
        users.append(UserRecord(uid, age, fields[2], fields[3], fields[4]))
    return users


def parse_items(path):
    """Read ``u.item``; the file is latin-1, so titles are decoded as such."""
    items = []
    for lineno, line in _lines(path, encoding="latin-1"):
        fields = line.split("|")
        if len(fields) < 6:
            raise MalformedLine(lineno, line, "too few fields")
        flags = fields[5:]
        if len(flags) != N_GENRES:
            raise WrongFlagCount(f"line {lineno}: {len(flags)} genre flags, expected {N_GENRES}")
        if any(f not in ("0", "1") for f in flags):
            raise MalformedLine(lineno, line, "genre flags must be 0 or 1")
        try:
            iid = int(fields[0])
        except ValueError:
            raise MalformedLine(lineno, line, "non-integer item id") from None
        items.append(ItemRecord(iid, fields[1], tuple(int(f) for f in flags)))
    return items


def parse_ratings(path):
    """Read ``u.data`` / ``uN.base`` / ``uN.test`` (tab separated)."""
    users, items, ratings = [], [], []
    for lineno, line in _lines(path):
        fields = line.split("\t")
        if len(fields) != 4:
            raise MalformedLine(lineno, line, "expected 4 tab-separated fields")
        try:
            u, i, r = int(fields[0]), int(fields[1]), float(fields[2])
            int(fields[3])
        except ValueError:
            raise MalformedLine(lineno, line, "non-numeric field") from None
        if not 1 <= r <= 5:
            raise RatingOutOfRange(f"line {lineno}: rating {r} outside 1..5")
        users.append(u)
        items.append(i)
        ratings.append(r)
    return RawRatings(
        np.array(users, dtype=np.int64),
        np.array(items, dtype=np.int64),
        np.array(ratings, dtype=float),
    )


def age_standardization(users, raw):
    """Mean and (population) standard deviation of age over distinct users in ``raw``."""
    ages = {u.user_id: u.age for u in users}
    present = np.unique(raw.user_ids)
    missing = [int(u) for u in present if int(u) not in ages]
    if missing:
        raise UnknownUser(f"ratings reference unknown user ids {missing[:5]}")
    vals = np.array([ages[int(u)] for u in present], dtype=float)
    sd = vals.std()
    return float(vals.mean()), float(sd) if sd > 0 else 1.0


def build_covariates(users, items, raw, age_stats=None):
    """Attach x_ij = (1, std age, gender, 19 genre flags) and remap ids.

    Users and items are indexed 0-based in ascending external-id order,
    over everything listed in the user and item tables, so a training and a
    test split built from the same tables share one index space. ``age_stats``
    (mean, sd) defaults to :func:`age_standardization` on ``raw``.
    """
    user_ids = sorted(u.user_id for u in users)
    item_ids = sorted(i.item_id for i in items)
    u_index = {uid: k for k, uid in enumerate(user_ids)}
    i_index = {iid: k for k, iid in enumerate(item_ids)}
    for uid in np.unique(raw.user_ids):
        if int(uid) not in u_index:
            raise UnknownUser(f"rating references unknown user id {uid}")
    for iid in np.unique(raw.item_ids):
        if int(iid) not in i_index:
            raise UnknownItem(f"rating references unknown item id {iid}")
    mean, sd = age_stats if age_stats is not None else age_standardization(users, raw)

    user_x = np.zeros((len(users), 2))
    for u in users:
        user_x[u_index[u.user_id]] = ((u.age - mean) / sd, 1.0 if u.gender == "M" else 0.0)
    item_x = np.zeros((len(items), N_GENRES))
    for it in items:
        item_x[i_index[it.item_id]] = it.genre_flags

    uu = np.array([u_index[int(v)] for v in raw.user_ids], dtype=np.int64)
    ii = np.array([i_index[int(v)] for v in raw.item_ids], dtype=np.int64)
    x = np.hstack([np.ones((len(uu), 1)), user_x[uu], item_x[ii]])
    return RatingsTriples(uu, ii, raw.ratings, x, n_users=len(users), n_items=len(items))


def load_ml100k_split(raw_dir, split_id):
    """Parse ``u.user``, ``u.item`` and split ``uN`` into (train, test) triples.

    Age standardization uses the training split only.
    """
    if split_id not in (1, 2, 3, 4, 5):
        raise InvalidSplit(f"ML-100K has splits 1..5, got {split_id}")
    raw_dir = Path(raw_dir)
    users = parse_users(raw_dir / "u.user")
    items = parse_items(raw_dir / "u.item")
    base = parse_ratings(raw_dir / f"u{split_id}.base")
    test = parse_ratings(raw_dir / f"u{split_id}.test")
    stats = age_standardization(users, base)
    return (
        build_covariates(users, items, base, stats),
        build_covariates(users, items, test, stats),
    )


# -- synthetic data ------------------------------------------------------------


@dataclass
class SyntheticTruth:
    params: ModelParams
    f: np.ndarray
    a: np.ndarray | None
    b: np.ndarray | None


def generate_synthetic(
    R,
    C,
    K,
    p,
    ratings_per_user,
    variant=ModelVariant.FACTOR,
    seed=0,
    sigma2_e=1.0,
    sigma2_a=1.0,
    sigma2_b=1.0,
    psi=None,
):
    """Sample ratings from the generative model of ``variant``.

    beta and the loadings are i.i.d. standard normal, f_i ~ N(0, I_K),
    a_i ~ N(0, sigma2_a), b_j ~ N(0, sigma2_b). Noise has variance ``psi[j]``
    when a per-item vector is given, else ``sigma2_e``. When ``p >= 1`` the
    first covariate is the constant 1 and the rest are standard normal.
    Each user rates a uniformly random subset of ``ratings_per_user`` items.
    """
    variant = as_variant(variant)
    if R < 1 or C < 1 or K < 0 or p < 0:
        raise InvalidDimensions(f"invalid dimensions R={R}, C={C}, K={K}, p={p}")
    if not 1 <= ratings_per_user <= C:
        raise InvalidDimensions(f"ratings_per_user must be in 1..{C}, got {ratings_per_user}")
    if variant.has_factors != (K >= 1):
        raise InvalidDimensions(f"variant {variant.value} incompatible with K={K}")

    rng = [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(8)]
    beta = rng[0].standard_normal(p)
    loadings = rng[1].standard_normal((C, K))
    f = rng[2].standard_normal((R, K))
    a = np.sqrt(sigma2_a) * rng[3].standard_normal(R) if variant.has_client_intercept else None
    b = np.sqrt(sigma2_b) * rng[4].standard_normal(C) if variant.has_item_intercept else None

    chosen = np.argsort(rng[5].random((R, C)), axis=1)[:, :ratings_per_user]
    chosen.sort(axis=1)
    users = np.repeat(np.arange(R), ratings_per_user)
    items = chosen.reshape(-1)
    n = len(users)

    x = np.empty((n, p))
    if p:
        x[:, 0] = 1.0
        x[:, 1:] = rng[6].standard_normal((n, p - 1))
    psi_vec = np.full(C, float(sigma2_e)) if psi is None else np.asarray(psi, dtype=float)
    if psi_vec.shape != (C,):
        raise InvalidDimensions(f"psi must have length C={C}")
    noise = np.sqrt(psi_vec[items]) * rng[7].standard_normal(n)

    y = x @ beta + np.einsum("nk,nk->n", f[users], loadings[items]) + noise
    if a is not None:
        y += a[users]
    if b is not None:
        y += b[items]

    truth = SyntheticTruth(
        params=ModelParams(
            variant=variant,
            beta=beta,
            loadings=loadings,
            psi=psi_vec,
            psi_mode="shared" if psi is None else "per-item",
            sigma2_a=float(sigma2_a) if variant.has_client_intercept else None,
            sigma2_b=float(sigma2_b) if variant.has_item_intercept else None,
        ),
        f=f,
        a=a,
        b=b,
    )
    return RatingsTriples(users, items, y, x, n_users=R, n_items=C), truth
