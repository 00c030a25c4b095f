from dataclasses import replace

import numpy as np
import pytest
from scipy.special import softmax

from ulc.config import MixMatchConfig, UlcConfig, apply_ablations
from ulc.correction_loop import (
    DIAGNOSTIC_COLUMNS,
    STREAM_MC,
    CoTeachingState,
    MixedBatch,
    guess_labels,
    lambda_u_at,
    mixmatch_lite,
    model_noise_epoch,
    run_ulc,
    sharpen,
    ssl_epoch,
    ssl_losses,
    warmup,
)
from ulc.errors import ContractError, ReportIOError
from ulc.network import VARIANCE_PARAMS, PARAM_NAMES, ce_loss_and_grad, derive_seed, forward, init_model, per_sample_ce
from ulc.noise_model import clean_probability, fit_classwise, fit_gmm2, posterior_clean
from ulc.uncertainty import mc_predict


def test_sharpen():
    assert np.allclose(sharpen(np.array([0.6, 0.4]), 0.5), [0.692, 0.308], atol=1e-3)
    p = np.array([[0.2, 0.3, 0.5]])
    assert np.allclose(sharpen(p, 1.0), p)


def _onehot(labels, c=2):
    return np.eye(c)[labels]


def test_mixmatch_fixed_half_lambda_averages(toy_model, rng):
    config = UlcConfig(mixmatch=MixMatchConfig(temperature=1.0))
    x_l = rng.normal(size=(4, 2))
    y_l = _onehot([0, 1, 1, 0])
    x_u = rng.normal(size=(3, 2))
    mixed = mixmatch_lite(x_l, y_l, x_u, toy_model, config, seed=1, lam=0.5)
    assert mixed.lam == 0.5
    assert mixed.x_labeled.shape == (4, 2) and mixed.x_unlabeled.shape == (3, 2)
    sources = np.concatenate([x_l, x_u])
    for row in mixed.x_labeled:
        pairs = [(i, j) for i in range(7) for j in range(7) if np.allclose(row, 0.5 * (sources[i] + sources[j]))]
        assert pairs
    assert np.allclose(mixed.y_labeled.sum(axis=1), 1.0)
    assert np.allclose(mixed.y_unlabeled.sum(axis=1), 1.0)


def test_mixmatch_lambda_prime_is_max(toy_model, rng):
    mixed = mixmatch_lite(rng.normal(size=(2, 2)), _onehot([0, 1]), rng.normal(size=(2, 2)), toy_model, UlcConfig(), 3, lam=0.2)
    assert mixed.lam == pytest.approx(0.8)


def test_mixmatch_beta_draw_in_upper_half(toy_model, rng):
    mixed = mixmatch_lite(rng.normal(size=(2, 2)), _onehot([0, 1]), rng.normal(size=(2, 2)), toy_model, UlcConfig(), 3)
    assert 0.5 <= mixed.lam <= 1.0


def test_mixmatch_deterministic(toy_model, rng):
    x_l, x_u = rng.normal(size=(3, 2)), rng.normal(size=(3, 2))
    a = mixmatch_lite(x_l, _onehot([0, 1, 0]), x_u, toy_model, UlcConfig(), seed=5)
    b = mixmatch_lite(x_l, _onehot([0, 1, 0]), x_u, toy_model, UlcConfig(), seed=5)
    assert np.array_equal(a.x_unlabeled, b.x_unlabeled) and np.array_equal(a.y_labeled, b.y_labeled)


def test_mixmatch_empty_labeled(toy_model, rng):
    mixed = mixmatch_lite(np.zeros((0, 2)), np.zeros((0, 2)), rng.normal(size=(3, 2)), toy_model, UlcConfig(), 0)
    assert mixed.labeled_count == 0
    assert mixed.x_unlabeled.shape == (3, 2)
    with pytest.raises(ContractError):
        mixmatch_lite(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros((0, 2)), toy_model, UlcConfig(), 0)


def test_guess_labels_averages_both_networks(toy_model, rng):
    peer = init_model(input_dim=2, class_count=2, hidden_width=8, dropout_rate=0.0, seed=12)
    x = rng.normal(size=(5, 2))
    probs = [softmax(forward(m, x, mode="deterministic").logits, axis=1) for m in (toy_model, peer)]
    guessed = guess_labels([toy_model, peer], x, passes=2, temperature=1.0, rng=rng)
    assert np.allclose(guessed, (probs[0] + probs[1]) / 2)
    assert np.allclose(guess_labels(toy_model, x, 2, 1.0, rng), probs[0])


def test_mixmatch_co_guesses_with_peer(toy_model, rng):
    peer = init_model(input_dim=2, class_count=2, hidden_width=8, dropout_rate=0.0, seed=12)
    config = UlcConfig(mixmatch=MixMatchConfig(temperature=1.0))
    x_u = rng.normal(size=(3, 2))
    mixed = mixmatch_lite(np.zeros((0, 2)), np.zeros((0, 2)), x_u, toy_model, config, seed=2, lam=1.0, peer=peer)
    expected = guess_labels([toy_model, peer], x_u, 1, 1.0, rng)
    assert np.allclose(mixed.y_unlabeled, expected)


def _batch(rng, n_x=3, n_u=3, c=2):
    return MixedBatch(
        x_labeled=rng.normal(size=(n_x, 2)),
        y_labeled=rng.dirichlet(np.ones(c), n_x),
        x_unlabeled=rng.normal(size=(n_u, 2)),
        y_unlabeled=rng.dirichlet(np.ones(c), n_u),
        lam=0.7,
    )


def test_zero_variance_loss_is_cross_entropy(toy_model, rng):
    mixed = _batch(rng, n_u=0)
    config = UlcConfig(aleatoric=False)
    loss, grads = ssl_losses(toy_model, mixed, config, seed=4)
    ce, ce_grads = ce_loss_and_grad(toy_model, mixed.x_labeled, mixed.y_labeled, mode="train", seed=4)
    assert loss == pytest.approx(ce)
    assert not set(grads) & set(VARIANCE_PARAMS)
    for name in grads:
        assert np.allclose(grads[name], ce_grads[name])


def test_lambda_u_zero_keeps_labeled_loss(toy_model, rng):
    mixed = _batch(rng)
    config = UlcConfig()
    only_x = MixedBatch(mixed.x_labeled, mixed.y_labeled, mixed.x_unlabeled[:0], mixed.y_unlabeled[:0], mixed.lam)
    loss, _ = ssl_losses(toy_model, mixed, config, seed=2, lambda_u=0.0)
    loss_with_u, _ = ssl_losses(toy_model, mixed, config, seed=2, lambda_u=10.0)
    assert loss_with_u > loss
    config_off = UlcConfig(aleatoric=False)
    assert ssl_losses(toy_model, mixed, config_off, seed=2, lambda_u=0.0)[0] == pytest.approx(
        ssl_losses(toy_model, only_x, config_off, seed=2, lambda_u=0.0)[0]
    )


def test_unlabeled_loss_averages_over_classes(toy_model, rng):
    mixed = _batch(rng, n_x=0, n_u=4)
    config = UlcConfig(aleatoric=False)
    loss, _ = ssl_losses(toy_model, mixed, config, seed=3, lambda_u=2.0)
    base, _ = ssl_losses(toy_model, mixed, config, seed=3, lambda_u=0.0)
    probs = softmax(forward(toy_model, mixed.x_unlabeled, mode="deterministic").logits, axis=1)
    assert base == 0.0
    assert loss == pytest.approx(2.0 * np.mean((probs - mixed.y_unlabeled) ** 2))


@pytest.mark.parametrize("uniform_prior_reg", [0.0, 0.5])
def test_ssl_gradient_matches_finite_differences(rng, uniform_prior_reg):
    model = init_model(input_dim=2, class_count=2, hidden_width=8, dropout_rate=0.3, seed=12)
    model.params["var_W"] = rng.normal(0.0, 0.3, size=model.params["var_W"].shape)
    model.params["sigma_raw"] = rng.normal(-2.0, 0.5, size=(2, 2))
    mixed = _batch(rng)
    config = UlcConfig(aleatoric_samples=5, lambda_u=3.0, uniform_prior_reg=uniform_prior_reg)

    def loss():
        return ssl_losses(model, mixed, config, seed=17)[0]

    _, grads = ssl_losses(model, mixed, config, seed=17)
    assert set(grads) == set(PARAM_NAMES)
    h = 1e-5
    for name in PARAM_NAMES:
        param = model.params[name]
        numeric = np.zeros_like(param)
        for i in np.ndindex(param.shape):
            old = param[i]
            param[i] = old + h
            up = loss()
            param[i] = old - h
            down = loss()
            param[i] = old
            numeric[i] = (up - down) / (2 * h)
        denom = max(np.linalg.norm(numeric), 1e-8)
        assert np.linalg.norm(grads[name] - numeric) / denom <= 1e-2, name


def test_lambda_u_rampup():
    config = UlcConfig(warmup_epochs=10, lambda_u=25.0, lambda_u_rampup=16)
    assert lambda_u_at(config, 11) == pytest.approx(25.0 / 16)
    assert lambda_u_at(config, 26) == 25.0
    assert lambda_u_at(config, 60) == 25.0
    assert lambda_u_at(replace(config, lambda_u_rampup=0), 11) == 25.0


def test_warmup_freezes_variances_and_is_deterministic(small_experiment, tiny_config):
    train, _ = small_experiment
    a = CoTeachingState.create(train.dim, train.class_count, tiny_config)
    initial = [net.copy() for net in a.networks]
    warmup(a, train, tiny_config)
    b = warmup(CoTeachingState.create(train.dim, train.class_count, tiny_config), train, tiny_config)
    for k in range(2):
        for name in VARIANCE_PARAMS:
            assert np.array_equal(a.networks[k].params[name], initial[k].params[name])
        assert not np.array_equal(a.networks[k].params["W1"], initial[k].params["W1"])
        for name in PARAM_NAMES:
            assert np.array_equal(a.networks[k].params[name], b.networks[k].params[name])
    assert not np.array_equal(a.networks[0].params["W1"], a.networks[1].params["W1"])


def test_warmup_fits_clean_labels_first(small_experiment):
    train, _ = small_experiment
    config = UlcConfig(warmup_epochs=20, max_epochs=20, hidden_width=32, seed=1)
    state = warmup(CoTeachingState.create(train.dim, train.class_count, config), train, config)
    losses = per_sample_ce(state.networks[0], train.features, train.noisy_labels)
    assert losses[~train.is_noisy].mean() < losses[train.is_noisy].mean()


def test_model_noise_epoch_composes(small_experiment, tiny_config):
    train, _ = small_experiment
    state = warmup(CoTeachingState.create(train.dim, train.class_count, tiny_config), train, tiny_config)
    corrections, inputs = model_noise_epoch(state, train, tiny_config, epoch=3)
    assert state.corrections is corrections

    ens0 = mc_predict(state.networks[0], train.features, tiny_config.mc_passes, derive_seed(7, STREAM_MC, 3, 0))
    assert np.array_equal(ens0.epsilon, inputs[0].epsilon)
    fits = fit_classwise(inputs[1].losses, train.noisy_labels, min_class_size=tiny_config.min_class_size)
    expected = clean_probability(fits.posteriors(inputs[1].losses, train.noisy_labels), ens0.epsilon, tiny_config.r)
    assert np.allclose(corrections[0].clean_prob, expected)
    for c in corrections:
        assert np.allclose(c.corrected_labels.sum(axis=1), 1.0, atol=1e-6)
        cover = np.concatenate([c.labeled_idx, c.unlabeled_idx])
        assert sorted(cover.tolist()) == list(range(train.size))
        assert (c.clean_prob[c.labeled_idx] >= tiny_config.tau).all()


def test_identical_networks_give_identical_corrections(small_experiment):
    train, _ = small_experiment
    config = UlcConfig(dropout=0.0, hidden_width=8, mc_passes=2)
    net = init_model(train.dim, train.class_count, 8, 0.0, seed=3)
    state = CoTeachingState(networks=[net, net.copy()])
    corrections, _ = model_noise_epoch(state, train, config, epoch=1)
    assert np.allclose(corrections[0].clean_prob, corrections[1].clean_prob)
    assert np.array_equal(corrections[0].labeled_idx, corrections[1].labeled_idx)


def test_class_agnostic_ablation_uses_one_fit(small_experiment, tiny_config):
    train, _ = small_experiment
    config = apply_ablations(tiny_config, ["dividemix"])
    state = warmup(CoTeachingState.create(train.dim, train.class_count, config), train, config)
    corrections, inputs = model_noise_epoch(state, train, config, epoch=3)
    expected = posterior_clean(fit_gmm2(inputs[1].losses), inputs[1].losses)
    assert np.allclose(corrections[0].clean_prob, expected)


def test_ssl_epoch_updates_variances_only_when_aleatoric(small_experiment, tiny_config):
    train, _ = small_experiment
    for config, moves in ((tiny_config, True), (apply_ablations(tiny_config, ["aul"]), False)):
        state = warmup(CoTeachingState.create(train.dim, train.class_count, config), train, config)
        corrections, _ = model_noise_epoch(state, train, config, epoch=3)
        before = state.networks[0]
        after, loss = ssl_epoch(before, train, corrections[0], config, epoch=3, k=0)
        assert np.isfinite(loss)
        assert (not np.array_equal(after.params["sigma_raw"], before.params["sigma_raw"])) is moves


def test_run_ulc_report(small_experiment, tiny_config):
    train, test = small_experiment
    seen = []
    result = run_ulc(train, test, tiny_config, on_epoch=seen.append)
    report = result.report
    assert [e.epoch for e in report.epochs] == [1, 2, 3, 4]
    assert [e.phase for e in report.epochs] == ["warmup", "warmup", "ssl", "ssl"]
    assert seen == report.epochs
    assert report.best_acc == max(e.test_acc for e in report.epochs)
    assert report.last_acc == report.epochs[-1].test_acc
    assert all(0.0 <= a <= 1.0 for a in report.per_class_acc if a is not None)
    ssl = report.epochs[-1]
    assert 0.0 < ssl.labeled_fraction <= 1.0
    assert set(ssl.noise_auc) >= {"cam", "csm", "eucs", "eucs_minority", "cam_majority"}
    assert report.config["seed"] == 7
    assert len(result.state.corrections) == 2


def test_run_ulc_is_deterministic(small_experiment, tiny_config):
    train, test = small_experiment
    a = run_ulc(train, test, tiny_config).report
    b = run_ulc(train, test, tiny_config).report
    assert a.to_dict() == b.to_dict()


def test_run_ulc_diagnostics(tmp_path, small_experiment, tiny_config):
    train, test = small_experiment
    run_ulc(train, test, tiny_config, diagnostics_dir=str(tmp_path))
    files = sorted(p.name for p in tmp_path.iterdir())
    assert files == ["epoch003_net1.csv", "epoch003_net2.csv", "epoch004_net1.csv", "epoch004_net2.csv"]
    lines = (tmp_path / "epoch003_net1.csv").read_text().splitlines()
    assert lines[0].split(",") == list(DIAGNOSTIC_COLUMNS)
    assert len(lines) == train.size + 1
    with pytest.raises(ReportIOError):
        run_ulc(train, test, tiny_config, diagnostics_dir=str(tmp_path / "missing"))


def test_ssl_epoch_co_guesses_without_touching_peer(small_experiment, tiny_config):
    train, _ = small_experiment
    state = warmup(CoTeachingState.create(train.dim, train.class_count, tiny_config), train, tiny_config)
    corrections, _ = model_noise_epoch(state, train, tiny_config, epoch=3)
    peer = state.networks[1]
    peer_before = peer.copy()
    alone, _ = ssl_epoch(state.networks[0], train, corrections[0], tiny_config, epoch=3, k=0)
    co, _ = ssl_epoch(state.networks[0], train, corrections[0], tiny_config, epoch=3, k=0, peer=peer)
    for name in PARAM_NAMES:
        assert np.array_equal(peer.params[name], peer_before.params[name])
    assert not np.array_equal(alone.params["W1"], co.params["W1"])


def test_empty_clean_set_warns_once_per_epoch(small_experiment, tiny_config, capsys):
    train, _ = small_experiment
    state = warmup(CoTeachingState.create(train.dim, train.class_count, tiny_config), train, tiny_config)
    corrections, _ = model_noise_epoch(state, train, tiny_config, epoch=3)
    empty = replace(corrections[0], labeled_idx=np.array([], dtype=np.int64), unlabeled_idx=np.arange(train.size))
    capsys.readouterr()
    _, loss = ssl_epoch(state.networks[0], train, empty, tiny_config, epoch=3, k=0, peer=state.networks[1])
    assert np.isfinite(loss)
    assert train.size > 2 * tiny_config.batch_size
    assert capsys.readouterr().err.count("clean set is empty") == 1


def test_run_ulc_records_per_class_accuracy_every_epoch(small_experiment, tiny_config):
    train, test = small_experiment
    report = run_ulc(train, test, tiny_config).report
    for e in report.epochs:
        assert len(e.per_class_acc) == train.class_count
        assert all(0.0 <= a <= 1.0 for a in e.per_class_acc)
    assert report.epochs[-1].per_class_acc == report.per_class_acc


def test_diagnostics_hold_corrected_labels(tmp_path, small_experiment, tiny_config):
    train, test = small_experiment
    result = run_ulc(train, test, tiny_config, diagnostics_dir=str(tmp_path))
    rows = (tmp_path / "epoch004_net1.csv").read_text().splitlines()[1:]
    column = DIAGNOSTIC_COLUMNS.index("corrected_label")
    labels = [int(row.split(",")[column]) for row in rows]
    assert all(0 <= y < train.class_count for y in labels)
    assert len(labels) == train.size
    assert result.report.epochs[-1].phase == "ssl"
