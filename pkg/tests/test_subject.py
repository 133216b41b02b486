import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats
from scipy.special import digamma

from conftest import Model, random_gw, random_spd, random_volume
from oracles import kl_normal_gamma, naive_impute_moments, vbgmm_step
from vbmix.errors import ValidationError
from vbmix.gaussian import GaussWishartParams
from vbmix.subject import (
    OMEGA_FLOOR,
    FitOptions,
    SubjectPosterior,
    SufficientStats,
    TemplatePrior,
    elbo,
    fit_subject,
    impute_moments,
    update_gauss_wishart,
    update_omega,
    update_responsibilities,
)
from vbmix.volume import MultiChannelVolume


def _hyper(rng, K, M, data=None):
    out = []
    for _ in range(K):
        mu = rng.normal(0, 3, M) if data is None else data[rng.integers(len(data))]
        out.append(GaussWishartParams(mu, 1.0, np.eye(M) / (M + 1.0), M + 1.0))
    return tuple(out)


# -- responsibilities --------------------------------------------------------


def test_single_class_gets_everything(rng):
    vol = random_volume(rng, (4, 4, 2), 3)
    resp = update_responsibilities(vol, TemplatePrior.stationary(1), _hyper(rng, 1, 3))
    assert np.all(resp == 1.0)


def test_identical_components_give_uniform_rows(rng):
    vol = random_volume(rng, (4, 4, 2), 2)
    q = random_gw(rng, 2)
    resp = update_responsibilities(vol, TemplatePrior.stationary(4), (q,) * 4)
    np.testing.assert_allclose(resp, 0.25, atol=1e-15)


def test_scalar_em_oracle_in_plug_in_limit():
    rng = np.random.default_rng(1)
    means, sds, props = np.array([-3.0, 4.0]), np.array([1.0, 1.5]), np.array([0.3, 0.7])
    g = rng.normal(0, 4, 200)
    big = 1e10
    gw = tuple(GaussWishartParams([m], big, [[1.0 / (s * s * big)]], big) for m, s in zip(means, sds))
    vol = MultiChannelVolume((200, 1, 1), g[:, None])
    resp = update_responsibilities(vol, TemplatePrior.stationary(2, np.log(props)), gw)
    g = vol.data[:, 0].astype(float)  # float32 storage
    lik = props * stats.norm.pdf(g[:, None], means, sds)
    oracle = lik / lik.sum(axis=1, keepdims=True)
    assert np.max(np.abs(resp - oracle)) < 1e-8


def test_empty_voxels_take_prior(rng):
    data = rng.standard_normal((6, 2))
    data[2] = np.nan
    vol = MultiChannelVolume((6, 1, 1), data)
    tmpl = TemplatePrior.stationary(3, [0.0, -1.0, 0.5])
    resp = update_responsibilities(vol, tmpl, _hyper(rng, 3, 2))
    np.testing.assert_allclose(resp[2], np.exp(tmpl.log_pi()[0]), rtol=1e-15)


# -- imputation moments ------------------------------------------------------


def test_fully_observed_stats_are_plain_moments(rng):
    vol = random_volume(rng, (3, 3, 3), 3, p_missing=0.0)
    gw = _hyper(rng, 2, 3)
    resp = rng.dirichlet(np.ones(2), vol.n_voxels)
    st_ = impute_moments(vol, gw, resp)
    X = vol.data.astype(float)
    for k in range(2):
        assert np.allclose(st_.s1[k], resp[:, k] @ X, rtol=1e-13)
        assert np.allclose(st_.s2[k], (X * resp[:, k][:, None]).T @ X, rtol=1e-13)


def test_all_missing_voxel_contributes_marginal(rng):
    data = np.array([[np.nan, np.nan, np.nan]])
    vol = MultiChannelVolume((2, 1, 1), np.vstack([data, [[1.0, 2.0, 3.0]]]))
    gw = (random_gw(rng, 3),)
    resp = np.array([[0.6], [0.0]])
    st_ = impute_moments(vol, gw, resp, include_empty=True)
    q = gw[0]
    Sigma = np.linalg.inv(q.nu * q.V)
    np.testing.assert_allclose(st_.s1[0], 0.6 * q.mu, rtol=1e-13)
    np.testing.assert_allclose(st_.s2[0], 0.6 * (np.outer(q.mu, q.mu) + Sigma), rtol=1e-12)
    assert impute_moments(vol, gw, resp).n[0] == 0.0


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_grouped_accumulation_matches_naive_loop(seed):
    rng = np.random.default_rng(seed)
    vol = random_volume(rng, (5, 5, 2), 3, p_missing=0.4)
    gw = tuple(random_gw(rng, 3) for _ in range(2))
    resp = rng.dirichlet(np.ones(2), vol.n_voxels)
    got = impute_moments(vol, gw, resp, include_empty=True)
    n, s1, s2 = naive_impute_moments(vol.data.astype(float), resp, [(q.mu, q.nu * q.V) for q in gw], True)
    for a, b in ((got.n, n), (got.s1, s1), (got.s2, s2)):
        assert np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))) < 1e-12


# -- Gauss-Wishart update ----------------------------------------------------


def test_no_data_limit_returns_prior(rng):
    hyper = (random_gw(rng, 3), random_gw(rng, 3))
    stats_ = SufficientStats(np.zeros(2), np.zeros((2, 3)), np.zeros((2, 3, 3)))
    for q, p in zip(update_gauss_wishart(stats_, hyper), hyper):
        assert q.allclose(p, rtol=1e-12)


def test_b_accumulates_counts():
    p = GaussWishartParams([0.0], 1.0, [[1.0]], 2.0)
    stats_ = SufficientStats(np.array([10.0]), np.array([[5.0]]), np.array([[[20.0]]]))
    (q,) = update_gauss_wishart(stats_, (p,))
    assert q.b == 11.0 and q.nu == 12.0


def test_single_voxel_normal_gamma_update():
    m0, b0, V0, nu0, x = 0.5, 2.0, 0.4, 3.0, 2.3
    p = GaussWishartParams([m0], b0, [[V0]], nu0)
    stats_ = SufficientStats(np.array([1.0]), np.array([[x]]), np.array([[[x * x]]]))
    (q,) = update_gauss_wishart(stats_, (p,))
    # shape/rate form: rate' = rate + b0 (x - m0)^2 / (2 (b0 + 1))
    rate = 1 / (2 * V0) + b0 * (x - m0) ** 2 / (2 * (b0 + 1))
    assert q.b == pytest.approx(b0 + 1, rel=1e-15)
    assert q.mu[0] == pytest.approx((b0 * m0 + x) / (b0 + 1), rel=1e-14)
    assert q.nu == pytest.approx(nu0 + 1, rel=1e-15)
    assert q.V[0, 0] == pytest.approx(1 / (2 * rate), rel=1e-13)


def test_as_written_variant_scales_prior_term():
    p = GaussWishartParams([0.0], 1.0, [[0.5]], 4.0)
    stats_ = SufficientStats(np.zeros(1), np.zeros((1, 1)), np.zeros((1, 1, 1)))
    (q,) = update_gauss_wishart(stats_, (p,), "as-written")
    assert q.V[0, 0] == pytest.approx(0.5 / 4.0)
    with pytest.raises(ValidationError):
        update_gauss_wishart(stats_, (p,), "other")


# -- omega -------------------------------------------------------------------


def test_omega_uniform_resp_is_constant():
    resp = np.full((30, 4), 0.25)
    om = update_omega(resp, TemplatePrior.stationary(4))
    np.testing.assert_allclose(om, 0.0, atol=1e-15)


def test_omega_absorbing_class():
    resp = np.zeros((10, 3))
    resp[:, 1] = 1.0
    om = update_omega(resp, TemplatePrior.stationary(3))
    assert om[1] == 0.0 and om[0] == OMEGA_FLOOR and om[2] == OMEGA_FLOOR


def test_omega_matches_column_means(rng):
    resp = rng.dirichlet(np.ones(3), 200)
    om = update_omega(resp, TemplatePrior.stationary(3))
    pi = np.exp(om) / np.exp(om).sum()
    np.testing.assert_allclose(pi, resp.mean(axis=0), atol=1e-12)


def test_omega_step_never_decreases_with_spatial_template(rng):
    D, K = 300, 4
    logits = rng.normal(0, 2, (D, K))
    resp = rng.dirichlet(np.ones(K), D)
    tmpl = TemplatePrior(logits, np.zeros(K))

    def objective(om):
        return float(np.sum(resp * tmpl.with_omega(om).log_pi()))

    om = tmpl.omega
    for _ in range(20):
        new = update_omega(resp, tmpl, om)
        assert objective(new) >= objective(om) - 1e-12
        om = new


# -- ELBO --------------------------------------------------------------------


def test_elbo_scalar_hand_computation():
    g, p = 0.75, GaussWishartParams([0.0], 1.0, [[0.5]], 3.0)
    q = GaussWishartParams([0.6], 2.0, [[0.3]], 4.0)
    vol = MultiChannelVolume((1, 1, 1), [[g]])
    terms = elbo(vol, TemplatePrior.stationary(1), SubjectPosterior(np.ones((1, 1)), (q,)), (p,))
    loglik = (
        0.5 * (digamma(2.0) + math.log(2) + math.log(0.3))
        - 0.5 * math.log(2 * math.pi) - 0.5 / 2.0 - 0.5 * 4.0 * 0.3 * (g - 0.6) ** 2
    )
    kl = kl_normal_gamma((0.6, 2.0, 0.3, 4.0), (0.0, 1.0, 0.5, 3.0))
    assert terms.kl_z == 0.0 and terms.kl_h == 0.0
    assert terms.loglik_observed == pytest.approx(loglik, abs=1e-13)
    assert terms.kl_gw == pytest.approx(kl, abs=1e-12)
    assert terms.eq10 == pytest.approx(loglik - kl, abs=1e-12)


def test_elbo_forms_agree_fully_observed(rng):
    vol = random_volume(rng, (6, 6, 3), 3, p_missing=0.0)
    model = Model(_hyper(rng, 3, 3, vol.data), TemplatePrior.stationary(3))
    _, trace = fit_subject(vol, model, FitOptions(max_iters=10))
    for t in trace.entries:
        assert t.kl_h == 0.0
        assert abs(t.eq10 - t.eq11) <= 1e-8 * abs(t.eq10)


def test_elbo_forms_agree_with_missing(rng):
    vol = random_volume(rng, (6, 6, 3), 4, p_missing=0.35)
    model = Model(_hyper(rng, 3, 4, vol.data[np.isfinite(vol.data).all(1)]), TemplatePrior.stationary(3))
    _, trace = fit_subject(vol, model, FitOptions(max_iters=15, elbo_rel_tol=1e-14))
    assert any(t.kl_h != 0.0 for t in trace.entries)
    np.testing.assert_allclose(trace.values, trace.values_eq11, rtol=1e-8, atol=0)


# -- fit_subject -------------------------------------------------------------


def test_max_iters_one():
    rng = np.random.default_rng(4)
    vol = random_volume(rng, (4, 4, 4), 2)
    model = Model(_hyper(rng, 2, 2), TemplatePrior.stationary(2))
    _, trace = fit_subject(vol, model, FitOptions(max_iters=1))
    assert len(trace) == 1


@pytest.mark.parametrize("seed", range(5))
def test_monotone_trace(seed):
    rng = np.random.default_rng(100 + seed)
    vol = random_volume(rng, (8, 8, 4), 3, p_missing=0.3)
    model = Model(_hyper(rng, 4, 3), TemplatePrior.stationary(4))
    _, trace = fit_subject(vol, model, FitOptions(max_iters=30, elbo_rel_tol=1e-15))
    v = trace.values
    assert np.all(np.diff(v) >= -1e-9 * np.abs(v[1:]))


def test_spatial_template_and_omega_update_monotone(rng):
    vol = random_volume(rng, (6, 6, 4), 2, p_missing=0.2)
    tmpl = TemplatePrior(rng.normal(0, 1, (vol.n_voxels, 3)), np.zeros(3))
    model = Model(_hyper(rng, 3, 2), tmpl)
    _, trace = fit_subject(vol, model, FitOptions(max_iters=25, update_omega=True, elbo_rel_tol=1e-15))
    v = trace.values
    assert np.all(np.diff(v) >= -1e-9 * np.abs(v[1:]))


def test_matches_standard_vbgmm_when_fully_observed(rng):
    vol = random_volume(rng, (6, 5, 4), 2, p_missing=0.0)
    X = vol.data.astype(float)
    hyper = tuple(
        GaussWishartParams(X[i], rng.uniform(0.5, 2), random_spd(rng, 2) / 4.0, 4.0) for i in (0, 10, 50)
    )
    omega = np.array([0.0, -0.5, 0.3])
    model = Model(hyper, TemplatePrior.stationary(3, omega))
    log_pi = np.broadcast_to(model.template.log_pi(), (vol.n_voxels, 3))
    prior = [(p.mu, p.b, p.V, p.nu) for p in hyper]
    state = {"post": list(prior)}

    def check(it, post, terms):
        r, new = vbgmm_step(X, log_pi, prior, state["post"])
        state["post"] = new
        assert np.max(np.abs(post.resp - r)) < 1e-10
        for q, (m, beta, W, nu) in zip(post.gw, new):
            assert np.max(np.abs(q.mu - m)) < 1e-10 and abs(q.b - beta) < 1e-10
            assert np.max(np.abs(q.V - W)) < 1e-10 and abs(q.nu - nu) < 1e-10

    _, trace = fit_subject(vol, model, FitOptions(max_iters=12, elbo_rel_tol=1e-15), callback=check)
    assert len(trace) == 12


def test_permutation_equivariance(rng):
    vol = random_volume(rng, (5, 5, 4), 3, p_missing=0.25)
    hyper = _hyper(rng, 3, 3)
    omega = np.array([0.0, -0.2, -0.7])
    perm = [2, 0, 1]
    a, _ = fit_subject(vol, Model(hyper, TemplatePrior.stationary(3, omega)), FitOptions(max_iters=8))
    b, _ = fit_subject(
        vol,
        Model([hyper[i] for i in perm], TemplatePrior.stationary(3, omega[perm])),
        FitOptions(max_iters=8),
    )
    np.testing.assert_allclose(b.resp, a.resp[:, perm], rtol=1e-10, atol=1e-13)


def test_posterior_means_near_truth_with_strong_prior():
    rng = np.random.default_rng(21)
    means = np.array([[0.0, 0.0], [6.0, 3.0]])
    cov = np.array([[1.0, 0.3], [0.3, 0.5]])
    labels = rng.integers(0, 2, 2000)
    X = means[labels] + rng.multivariate_normal(np.zeros(2), cov, 2000)
    X[rng.random((2000, 2)) < 0.2] = np.nan
    vol = MultiChannelVolume((20, 10, 10), X)
    nu0 = 50.0
    hyper = tuple(GaussWishartParams(m + 0.3, 5.0, np.linalg.inv(cov) / nu0, nu0) for m in means)
    post, _ = fit_subject(vol, Model(hyper, TemplatePrior.stationary(2)), FitOptions(max_iters=30))
    for q, m in zip(post.gw, means):
        sd = np.sqrt(np.diag(np.linalg.inv(q.b * q.nu * q.V)))
        assert np.all(np.abs(q.mu - m) < 3 * sd)


def test_dimension_mismatch_rejected(rng):
    vol = random_volume(rng, (2, 2, 2), 3)
    with pytest.raises(ValidationError):
        fit_subject(vol, Model(_hyper(rng, 2, 2), TemplatePrior.stationary(2)))
