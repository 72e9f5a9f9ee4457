import numpy as np
import pytest

from conftest import random_params
from oracles import condition_user, dense_loglik, quadratic_minimizer
from sparsefa.core import (
    VARIANCE_FLOOR,
    ModelConfig,
    ModelParams,
    PosteriorSummary,
    RatingsTriples,
    prior_posterior,
    validate_and_index,
)
from sparsefa.data import generate_synthetic
from sparsefa.em import (
    EntryMoments,
    backfit,
    e_step,
    fit_em,
    init_params,
    m_step_beta,
    m_step_loadings,
    m_step_psi,
    m_step_sigma_a,
    marginal_loglik,
)
from sparsefa.errors import InvalidVariant, NonFiniteInput, SingularGram


def sparse_instance(R, C, p, rpu, seed):
    """Random observation pattern with a varying number of ratings per user."""
    rng = np.random.default_rng(seed)
    entries = []
    for u in range(R):
        n = rng.integers(0, min(rpu, C) + 1)
        for j in sorted(rng.choice(C, size=n, replace=False)):
            x = np.concatenate([[1.0], rng.standard_normal(p - 1)]) if p else []
            entries.append((u, int(j), float(rng.normal(2, 1.5)), tuple(x)))
    return RatingsTriples.from_entries(entries, R, C, p=p)


# -- E-step ---------------------------------------------------------------------

def test_e_step_unrated_user_gets_prior():
    data = RatingsTriples([0], [0], [3.0], [[1.0]], n_users=2, n_items=1)
    params = ModelParams("factor-client", [1.0], [[0.7]], [0.5], sigma2_a=2.0)
    post = e_step(params, data, validate_and_index(data))
    np.testing.assert_array_equal(post.mu_f[1], [0.0, 0.0])
    np.testing.assert_allclose(post.sigma_f[1], np.eye(2), atol=1e-15)


def test_e_step_scalar_example():
    data = RatingsTriples([0], [0], [2.0], np.zeros((1, 0)), 1, 1)
    params = ModelParams("factor", [], [[1.0]], [1.0])
    post = e_step(params, data, validate_and_index(data))
    assert post.sigma_f[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
    assert post.mu_f[0, 0] == pytest.approx(1.0, abs=1e-15)


def test_e_step_complete_data_formula():
    data, truth = generate_synthetic(9, 6, 2, 0, 6, "factor", seed=2)
    params = truth.params.copy()
    params.psi = np.linspace(0.5, 2.0, 6)
    post = e_step(params, data, validate_and_index(data))
    L, Pinv = params.loadings, np.diag(1 / params.psi)
    V = np.linalg.inv(L.T @ Pinv @ L + np.eye(2))
    Y = np.zeros((9, 6))
    Y[data.users, data.items] = data.ratings
    np.testing.assert_allclose(post.sigma_f, np.broadcast_to(V, (9, 2, 2)), atol=1e-12)
    np.testing.assert_allclose(post.mu_f, Y @ (V @ L.T @ Pinv).T, atol=1e-12)


@pytest.mark.parametrize("variant,k", [("factor", 1), ("factor", 3), ("factor-client", 2), ("intercept-client", 0)])
@pytest.mark.parametrize("seed", range(3))
def test_e_step_matches_brute_force_conditioning(variant, k, seed):
    rng = np.random.default_rng(seed)
    data = sparse_instance(8, 12, 3, 12, seed)
    params = random_params(variant, k, 3, 12, rng)
    post = e_step(params, data, validate_and_index(data))
    for u in range(8):
        mean, cov = condition_user(params, data, u)
        np.testing.assert_allclose(post.mu_f[u], mean, atol=1e-10)
        np.testing.assert_allclose(post.sigma_f[u], cov, atol=1e-10)


def test_e_step_rejects_non_finite():
    data = RatingsTriples([0], [0], [2.0], [[1.0]], 1, 1)
    params = ModelParams("factor", [np.nan], [[1.0]], [1.0])
    with pytest.raises(NonFiniteInput):
        e_step(params, data, validate_and_index(data))


# -- marginal likelihood ----------------------------------------------------------

def test_loglik_without_latent_terms_is_diagonal_gaussian():
    data = sparse_instance(6, 4, 2, 4, 0)
    rng = np.random.default_rng(1)
    params = ModelParams("factor", rng.standard_normal(2), np.zeros((4, 0)), rng.uniform(0.5, 2, 4))
    r = data.ratings - data.covariates @ params.beta
    psi = params.psi[data.items]
    expected = np.sum(-0.5 * np.log(2 * np.pi * psi) - r ** 2 / (2 * psi))
    assert marginal_loglik(params, data, validate_and_index(data)) == pytest.approx(expected, rel=1e-13)


@pytest.mark.parametrize("variant,k", [("factor", 2), ("factor-client", 1), ("intercept-client", 0)])
def test_loglik_matches_dense_gaussian(variant, k):
    rng = np.random.default_rng(7)
    complete = RatingsTriples(np.repeat(np.arange(5), 4), np.tile(np.arange(4), 5),
                              rng.normal(2, 1, 20), np.column_stack([np.ones(20), rng.standard_normal(20)]), 5, 4)
    sparse = sparse_instance(6, 5, 2, 4, 5)
    for data in (complete, sparse):
        params = random_params(variant, k, 2, data.n_items, rng)
        ll = marginal_loglik(params, data, validate_and_index(data))
        assert ll == pytest.approx(dense_loglik(params, data), abs=1e-10)


def test_loglik_refuses_item_intercepts():
    data = sparse_instance(3, 3, 1, 3, 0)
    params = random_params("factor-both", 1, 1, 3, np.random.default_rng(0))
    with pytest.raises(InvalidVariant):
        marginal_loglik(params, data, validate_and_index(data))


# -- M-step blocks --------------------------------------------------------------

def _moments(params, data):
    index = validate_and_index(data)
    post = e_step(params, data, index)
    return index, post, EntryMoments.from_posterior(post, params, data)


def test_beta_is_ols_without_factors():
    data = sparse_instance(10, 6, 3, 5, 1)
    params = ModelParams("factor", np.zeros(3), np.zeros((6, 2)), np.full(6, 0.8), psi_mode="shared")
    index, post, mom = _moments(params, data)
    ols = np.linalg.lstsq(data.covariates, data.ratings, rcond=None)[0]
    np.testing.assert_allclose(m_step_beta(data, index, mom, params), ols, atol=1e-10)


@pytest.mark.parametrize("variant,k", [("factor", 2), ("factor-client", 2), ("intercept-client", 0)])
def test_beta_matches_normal_equations(variant, k):
    rng = np.random.default_rng(4)
    data = sparse_instance(10, 4, 3, 4, 2)
    params = random_params(variant, k, 3, 4, rng)
    index, post, mom = _moments(params, data)
    # target in the augmented parameterization: y - mu_f' l~_j
    tl = params.loadings if variant == "factor" else np.hstack([params.loadings, np.full((4, 1), np.sqrt(params.sigma2_a))])
    target = data.ratings - np.sum(post.mu_f[data.users] * tl[data.items], axis=1)
    sw = np.sqrt(1 / params.psi[data.items])
    expected = np.linalg.lstsq(data.covariates * sw[:, None], target * sw, rcond=None)[0]
    np.testing.assert_allclose(m_step_beta(data, index, mom, params), expected, atol=1e-10)


def test_beta_singular_gram():
    x = np.column_stack([np.ones(4), 2 * np.ones(4)])
    data = RatingsTriples([0, 0, 1, 1], [0, 1, 0, 1], [1.0, 2.0, 3.0, 4.0], x, 2, 2)
    params = ModelParams("factor", np.zeros(2), np.ones((2, 1)), np.ones(2))
    index, post, mom = _moments(params, data)
    with pytest.raises(SingularGram):
        m_step_beta(data, index, mom, params)


def test_loadings_scalar_solve():
    data = RatingsTriples([0], [0], [3.0], np.zeros((1, 0)), 1, 1)
    params = ModelParams("factor", [], [[0.2]], [1.0])
    post = PosteriorSummary(np.array([[1.0]]), np.zeros((1, 1, 1)), np.array([1]), np.array([1]))
    mom = EntryMoments.from_posterior(post, params, data)
    assert m_step_loadings(data, validate_and_index(data), mom, params)[0, 0] == pytest.approx(3.0, abs=1e-14)


def test_loadings_zero_for_zero_residuals():
    data = sparse_instance(10, 5, 2, 4, 3)
    beta = np.array([0.5, -1.0])
    data = RatingsTriples(data.users, data.items, data.covariates @ beta, data.covariates, 10, 5)
    params = ModelParams("factor", beta, np.full((5, 2), 0.3), np.ones(5))
    index, post, mom = _moments(params, data)
    np.testing.assert_allclose(m_step_loadings(data, index, mom, params), 0.0, atol=1e-14)


@pytest.mark.parametrize("variant", ["factor", "factor-client"])
def test_loadings_minimize_expected_loss(variant):
    rng = np.random.default_rng(8)
    data = sparse_instance(20, 8, 2, 6, 4)
    params = random_params(variant, 2, 2, 8, rng)
    index, post, mom = _moments(params, data)
    new = m_step_loadings(data, index, mom, params)
    r = data.ratings - data.covariates @ params.beta
    s_a = [] if variant == "factor" else [np.sqrt(params.sigma2_a)]
    for j in range(8):
        ents = np.flatnonzero(data.items == j)
        if not len(ents):
            continue

        def loss(l):
            # E[(r - f~' l~)^2] in the augmented parameterization, l~ = (l, sigma_a)
            lt = np.concatenate([l, s_a])
            total = 0.0
            for e in ents:
                m, S = post.mu_f[data.users[e]], post.sigma_f[data.users[e]]
                total += (r[e] - m @ lt) ** 2 + lt @ S @ lt
            return total

        np.testing.assert_allclose(new[j], quadratic_minimizer(loss, 2), atol=1e-8)


def test_psi_floor_and_point_mass():
    data = sparse_instance(6, 3, 2, 3, 5)
    beta = np.array([1.0, 0.5])
    exact = RatingsTriples(data.users, data.items, data.covariates @ beta, data.covariates, 6, 3)
    params = ModelParams("factor", beta, np.ones((3, 1)), np.ones(3))
    index = validate_and_index(exact)
    zero = PosteriorSummary(np.zeros((6, 1)), np.zeros((6, 1, 1)), index.user_counts, index.item_counts)
    mom = EntryMoments.from_posterior(zero, params, exact)
    np.testing.assert_array_equal(m_step_psi(exact, index, mom, params, "per-item", VARIANCE_FLOOR)[index.item_counts > 0], VARIANCE_FLOOR)

    index = validate_and_index(data)
    mu = np.arange(6, dtype=float).reshape(6, 1) / 4
    point = PosteriorSummary(mu, np.zeros((6, 1, 1)), index.user_counts, index.item_counts)
    mom = EntryMoments.from_posterior(point, params, data)
    resid = data.ratings - data.covariates @ beta - mu[data.users, 0]
    psi = m_step_psi(data, index, mom, params, "per-item", VARIANCE_FLOOR)
    for j in range(3):
        if index.item_counts[j]:
            assert psi[j] == pytest.approx(np.mean(resid[data.items == j] ** 2), rel=1e-12)
    shared = m_step_psi(data, index, mom, params, "shared", VARIANCE_FLOOR)
    np.testing.assert_allclose(shared, np.mean(resid ** 2), rtol=1e-12)


def test_psi_full_expansion_equals_shortened_form():
    rng = np.random.default_rng(9)
    data = sparse_instance(20, 8, 2, 6, 6)
    params = random_params("factor", 2, 2, 8, rng)
    index, post, mom = _moments(params, data)
    params.loadings = m_step_loadings(data, index, mom, params)
    psi = m_step_psi(data, index, mom, params, "per-item", VARIANCE_FLOOR)
    r = data.ratings - data.covariates @ params.beta
    for j in range(8):
        ents = np.flatnonzero(data.items == j)
        if not len(ents):
            continue
        l = params.loadings[j]
        terms = [r[e] ** 2 - l @ (post.sigma_f[data.users[e]] + np.outer(post.mu_f[data.users[e]], post.mu_f[data.users[e]])) @ l
                 for e in ents]
        assert psi[j] == pytest.approx(np.mean(terms), abs=1e-10)


def test_sigma_a_fixed_point_at_prior():
    params = ModelParams("factor-client", [0.0], np.ones((3, 1)), np.ones(3), sigma2_a=2.5)
    data = RatingsTriples([0], [0], [1.0], [[1.0]], 4, 3)
    mom = EntryMoments.from_posterior(prior_posterior(params.variant, 1, 4, 3), params, data)
    assert m_step_sigma_a(mom, VARIANCE_FLOOR) == pytest.approx(2.5, rel=1e-14)


def test_sigma_a_point_mass():
    params = ModelParams("intercept-client", [0.0], np.zeros((3, 0)), np.ones(3), sigma2_a=0.64)
    data = RatingsTriples([0], [0], [1.0], [[1.0]], 4, 3)
    post = PosteriorSummary(np.full((4, 1), 1.5), np.zeros((4, 1, 1)), np.ones(4), np.ones(3))
    mom = EntryMoments.from_posterior(post, params, data)
    assert m_step_sigma_a(mom, VARIANCE_FLOOR) == pytest.approx(0.64 * 1.5 ** 2, rel=1e-14)


@pytest.mark.parametrize("variant,k", [("factor", 2), ("factor-client", 1), ("intercept-client", 0)])
def test_each_block_does_not_decrease_loglik(variant, k):
    """The expected complete-data objective rises per block, hence so does the likelihood."""
    data = sparse_instance(30, 10, 2, 6, 7)
    index = validate_and_index(data)
    params = random_params(variant, k, 2, 10, np.random.default_rng(3))
    post = e_step(params, data, index)
    start = marginal_loglik(params, data, index)
    values = []
    backfit(params, data, index, post, ModelConfig(variant=variant, k=k),
            callback=lambda block, p: values.append(marginal_loglik(p, data, index)))
    assert values[-1] >= start - 1e-8 * (1 + abs(start))


# -- driver ---------------------------------------------------------------------

def test_infinite_tolerance_stops_after_one_iteration():
    data, _ = generate_synthetic(30, 8, 1, 2, 5, "factor", seed=1)
    _, _, report = fit_em(data, ModelConfig(variant="factor", k=1, tol=np.inf))
    assert report.iterations == 1 and report.converged
    assert len(report.objective_trace) == 2 and len(report.seconds_per_iteration) == 1


@pytest.mark.parametrize("variant,k,psi_mode", [
    ("factor", 2, "per-item"), ("factor-client", 2, "shared"), ("intercept-client", 0, "per-item"),
])
def test_em_trace_monotone(variant, k, psi_mode):
    data, _ = generate_synthetic(150, 20, max(k, 0), 3, 8, variant, seed=4)
    _, _, report = fit_em(data, ModelConfig(variant=variant, k=k, psi_mode=psi_mode, max_iter=60, seed=2))
    trace = np.array(report.objective_trace)
    assert np.all(np.diff(trace) >= -1e-8 * (1 + np.abs(trace[1:])))


def test_seeded_initialization():
    cfg = ModelConfig(variant="factor-client", k=2, seed=5)
    a, b = init_params(cfg, 3, 7), init_params(cfg, 3, 7)
    np.testing.assert_array_equal(a.loadings, b.loadings)
    assert a.sigma2_a == b.sigma2_a
    c = init_params(ModelConfig(variant="factor-client", k=2, seed=6), 3, 7)
    assert not np.array_equal(a.loadings, c.loadings)
    d = init_params(ModelConfig(variant="factor", k=2, deterministic_init=True), 3, 7)
    assert np.all(d.beta == 0) and np.all(d.psi == 1) and np.ptp(d.loadings) > 0


def test_unrated_items_keep_loadings_and_are_reported():
    data = sparse_instance(20, 6, 2, 3, 8)
    keep = data.items != 5
    data = RatingsTriples(data.users[keep], data.items[keep], data.ratings[keep], data.covariates[keep], 20, 6)
    cfg = ModelConfig(variant="factor", k=1, max_iter=5)
    start = init_params(cfg, 2, 6)
    params, _, report = fit_em(data, cfg, params=start.copy())
    assert report.unrated_items == [5]
    np.testing.assert_array_equal(params.loadings[5], start.loadings[5])


@pytest.mark.slow
def test_sigma_a_vanishes_when_generator_has_none():
    # On this instance the likelihood is maximized on the boundary sigma2_a = 0,
    # which EM approaches only like 1/t, hence the large iteration budget.
    data, _ = generate_synthetic(200, 10, 0, 2, 10, "intercept-client", seed=0, sigma2_a=0.0)
    cfg = ModelConfig(variant="intercept-client", k=0, psi_mode="shared", tol=0.0, max_iter=100_000)
    params, _, report = fit_em(data, cfg)
    assert params.sigma2_a <= 10 * VARIANCE_FLOOR
