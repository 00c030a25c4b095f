import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ulc.errors import ConfigurationError, InsufficientDataError
from ulc.noise_model import (
    ClassGmm,
    build_correction_state,
    clean_probability,
    correct_label,
    fit_classwise,
    fit_gmm2,
    noise_model_scores,
    normalize_losses,
    partition,
    posterior_clean,
)


@pytest.fixture
def bimodal():
    gen = np.random.default_rng(0)
    return np.concatenate([gen.normal(0.1, 0.01, 100), gen.normal(0.9, 0.01, 100)])


def test_normalize_losses():
    assert normalize_losses(np.array([2.0, 4.0, 6.0])).tolist() == [0.0, 0.5, 1.0]
    assert normalize_losses(np.full(4, 3.0)).tolist() == [0.5] * 4
    x = np.array([0.0, 0.3, 1.0])
    assert np.array_equal(normalize_losses(x), x)
    with pytest.raises(InsufficientDataError):
        normalize_losses(np.array([]))


def test_fit_recovers_known_mixture(bimodal):
    fit = fit_gmm2(bimodal)
    assert fit.converged
    assert fit.mu0 == pytest.approx(0.1, abs=0.02)
    assert fit.mu1 == pytest.approx(0.9, abs=0.02)
    assert fit.pi0 == pytest.approx(0.5, abs=0.05)
    assert fit.pi0 + fit.pi1 == pytest.approx(1.0, abs=1e-9)
    assert min(fit.var0, fit.var1) >= 1e-6
    assert fit.is_global


def test_log_likelihood_nondecreasing():
    gen = np.random.default_rng(1)
    x = np.concatenate([gen.normal(0.2, 0.1, 150), gen.normal(0.6, 0.2, 50)])
    fit = fit_gmm2(x, tol=1e-12, max_iter=200)
    history = np.array(fit.log_likelihoods)
    assert len(history) >= 2
    assert (np.diff(history) >= -1e-12).all()


def test_fit_degenerate_and_errors():
    fit = fit_gmm2(np.full(10, 0.4))
    assert fit.mu0 == fit.mu1
    assert not fit.converged
    assert posterior_clean(fit, 0.4) == pytest.approx(0.5)
    assert posterior_clean(fit, 0.9) == pytest.approx(0.5)
    with pytest.raises(InsufficientDataError):
        fit_gmm2(np.array([0.5]))


def test_posterior_values(bimodal):
    fit = fit_gmm2(bimodal)
    assert posterior_clean(fit, 0.1) >= 0.99
    assert posterior_clean(fit, 0.9) <= 0.01
    post = posterior_clean(fit, np.array([0.1, 0.9]))
    assert post.shape == (2,)


def test_posterior_symmetric_crossover():
    fit = ClassGmm(mu0=0.2, mu1=0.8, var0=0.01, var1=0.01, pi0=0.5, pi1=0.5, converged=True)
    assert posterior_clean(fit, 0.5) == pytest.approx(0.5)


@settings(max_examples=50, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.05, 0.95))
def test_posterior_monotone_with_equal_variances(a, b, pi0):
    fit = ClassGmm(mu0=0.3, mu1=0.7, var0=0.02, var1=0.02, pi0=pi0, pi1=1 - pi0, converged=True)
    lo, hi = min(a, b), max(a, b)
    assert posterior_clean(fit, lo) >= posterior_clean(fit, hi) - 1e-12


def test_posterior_monotone_between_means_unequal_variances():
    fit = ClassGmm(mu0=0.2, mu1=0.7, var0=0.005, var1=0.05, pi0=0.6, pi1=0.4, converged=True)
    post = posterior_clean(fit, np.linspace(0.2, 0.7, 51))
    assert (np.diff(post) <= 1e-12).all()


def test_components_are_ordered():
    gen = np.random.default_rng(3)
    x = np.concatenate([gen.normal(0.8, 0.05, 30), gen.normal(0.2, 0.05, 170)])
    fit = fit_gmm2(x)
    assert fit.mu0 <= fit.mu1
    assert fit.pi0 > fit.pi1


def test_classwise_fallback_and_global():
    gen = np.random.default_rng(4)
    losses = np.concatenate([gen.uniform(0, 1, 40), gen.uniform(0, 1, 3)])
    labels = np.array([0] * 40 + [1] * 3)
    fits = fit_classwise(losses, labels, min_class_size=10)
    assert set(fits.per_class) == {0}
    assert fits.per_class[0].class_index == 0
    assert fits.gmm_for(1) is fits.global_fit
    post = fits.posteriors(losses, labels)
    assert np.allclose(post[40:], posterior_clean(fits.global_fit, losses[40:]))


def _per_class_mixture(gen, n, clean_mu, noisy_mu, noise_rate):
    noisy = gen.random(n) < noise_rate
    loss = np.where(noisy, gen.normal(noisy_mu, 0.03, n), gen.normal(clean_mu, 0.03, n))
    return np.clip(loss, 0, None), noisy


def test_class_specific_rescues_minority_clean_samples():
    gen = np.random.default_rng(5)
    maj_loss, maj_noisy = _per_class_mixture(gen, 1000, 0.1, 0.9, 0.5)
    min_loss, min_noisy = _per_class_mixture(gen, 100, 0.6, 1.4, 0.5)
    losses = normalize_losses(np.concatenate([maj_loss, min_loss]))
    labels = np.array([0] * 1000 + [1] * 100)
    minority_clean = np.concatenate([np.zeros(1000, bool), ~min_noisy])

    agnostic = posterior_clean(fit_gmm2(losses), losses)
    specific = fit_classwise(losses, labels).posteriors(losses, labels)
    assert (agnostic[minority_clean] < 0.5).mean() > 0.5
    assert (specific[minority_clean] < 0.5).mean() < 0.2


def test_classwise_matches_global_on_exchangeable_classes():
    gen = np.random.default_rng(6)
    losses, _ = _per_class_mixture(gen, 2000, 0.2, 0.7, 0.4)
    labels = np.repeat([0, 1], 1000)
    gen.shuffle(labels)
    specific = fit_classwise(losses, labels).posteriors(losses, labels)
    agnostic = posterior_clean(fit_gmm2(losses), losses)
    assert np.abs(specific - agnostic).max() <= 0.05


def test_clean_probability_examples():
    assert clean_probability(0.25, 0.36, 0.5) == pytest.approx(0.4)
    assert clean_probability(0.37, 0.8, 0.0) == 0.37
    assert clean_probability(0.9, 1.0, 0.1) == 0.0
    with pytest.raises(ConfigurationError):
        clean_probability(0.5, 0.5, 1.5)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0.01, 0.99))
def test_clean_probability_monotone(p1, p2, eps, r):
    lo, hi = min(p1, p2), max(p1, p2)
    assert clean_probability(lo, eps, r) <= clean_probability(hi, eps, r) + 1e-12
    assert clean_probability(hi, lo, r) >= clean_probability(hi, hi, r) - 1e-12


def test_correct_label_examples():
    noisy = np.array([1.0, 0.0])
    pred = np.array([0.2, 0.8])
    assert np.allclose(correct_label(1.0, noisy, pred), noisy)
    assert np.allclose(correct_label(0.0, noisy, pred), pred)
    assert np.allclose(correct_label(0.5, noisy, pred), [0.6, 0.4])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=10), st.integers(0, 2**16))
def test_correct_label_rows_normalized(omegas, seed):
    gen = np.random.default_rng(seed)
    n = len(omegas)
    noisy = np.eye(3)[gen.integers(0, 3, n)]
    pred = gen.dirichlet(np.ones(3), n)
    y = correct_label(np.array(omegas), noisy, pred)
    assert np.allclose(y.sum(axis=1), 1.0, atol=1e-6)


def test_partition_examples():
    labeled, unlabeled = partition(np.array([0.4, 0.5, 0.6]), 0.5)
    assert labeled.tolist() == [1, 2]
    assert unlabeled.tolist() == [0]
    labeled, unlabeled = partition(np.ones(4), 0.6)
    assert unlabeled.size == 0
    with pytest.raises(ConfigurationError):
        partition(np.ones(2), 1.0)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=30), st.floats(0.01, 0.99))
def test_partition_is_disjoint_cover(omegas, tau):
    labeled, unlabeled = partition(np.array(omegas), tau)
    assert sorted(labeled.tolist() + unlabeled.tolist()) == list(range(len(omegas)))
    assert all(omegas[i] >= tau for i in labeled)


def test_build_correction_state_composes():
    p_loss = np.array([0.9, 0.2, 0.6])
    eps = np.array([0.1, 0.5, 0.3])
    noisy = np.eye(2)[[0, 1, 0]]
    pred = np.array([[0.7, 0.3], [0.6, 0.4], [0.5, 0.5]])
    state = build_correction_state(p_loss, eps, noisy, pred, r=0.1, tau=0.5)
    assert np.allclose(state.clean_prob, clean_probability(p_loss, eps, 0.1))
    assert np.allclose(state.corrected_labels.sum(axis=1), 1.0)
    assert state.labeled_idx.tolist() == [0, 2]
    assert state.labeled_fraction == pytest.approx(2 / 3)


def test_noise_model_scores_reductions():
    gen = np.random.default_rng(7)
    losses, _ = _per_class_mixture(gen, 200, 0.2, 0.8, 0.3)
    labels = np.repeat([0, 1], 100)
    eps = gen.uniform(0, 1, 200)
    scores = noise_model_scores(losses, labels, eps, r=0.0)
    assert np.allclose(scores["eucs"], scores["csm"])
    scores = noise_model_scores(losses, labels, eps, r=0.1, min_class_size=1000)
    assert np.allclose(scores["csm"], scores["cam"])
