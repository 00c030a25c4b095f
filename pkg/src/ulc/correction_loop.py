#!/usr/bin/python3
# -*- coding: utf-8 -*-
"""
Uncertainty-aware label correction with two co-teaching networks.

One run is:

    warm-up        CE + confidence penalty on all observed labels
    every epoch    for each network: MC-dropout ensemble -> losses, epsilon;
                   mixture fitted on the *other* network's losses -> p_loss;
                   omega, refined labels, clean/unlabeled split
                   then MixMatch-lite batches and the aleatoric SSL loss
    inference      mean deterministic softmax of both networks
"""

import csv
import os
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np
from scipy.special import expit, log_softmax

from ulc.config import UlcConfig
from ulc.dataset import Dataset
from ulc.errors import ContractError, ReportIOError, TrainingDivergenceError
from ulc.evaluation import EpochRecord, Report, auc_or_none, compare_noise_models, evaluate, raise_divergence
from ulc.network import (
    VARIANCE_PARAMS,
    ModelState,
    as_soft_labels,
    backward,
    ce_loss_and_grad,
    derive_seed,
    forward,
    init_model,
    minibatches,
    sgd_step,
)
from ulc.noise_model import (
    CorrectionState,
    build_correction_state,
    fit_classwise,
    fit_gmm2,
    noise_model_scores,
    normalize_losses,
    posterior_clean,
)
from ulc.tools import Tools
from ulc.uncertainty import corrupted_prediction, corrupted_prediction_grads, draw_noise, mc_predict, zero_noise

STREAM_INIT = 100
STREAM_WARMUP_BATCH = 101
STREAM_WARMUP_DROPOUT = 102
STREAM_MC = 103
STREAM_SSL_BATCH = 104
STREAM_SSL_STEP = 105

NETWORKS = 2

DIAGNOSTIC_COLUMNS = (
    "sample_id", "observed_label", "loss", "epsilon", "p_loss", "omega", "corrected_label", "is_noisy_truth"
)


@dataclass(eq=False)
class CoTeachingState:
    """Two independently initialized networks and their latest correction states."""

    networks: List[ModelState]
    corrections: List[Optional[CorrectionState]] = field(default_factory=lambda: [None] * NETWORKS)

    @classmethod
    def create(cls, input_dim: int, class_count: int, config: UlcConfig) -> "CoTeachingState":
        return cls(
            networks=[
                init_model(
                    input_dim,
                    class_count,
                    config.hidden_width,
                    config.dropout,
                    seed=derive_seed(config.seed, STREAM_INIT, k),
                )
                for k in range(NETWORKS)
            ]
        )


@dataclass(eq=False)
class UlcResult:
    """Trained networks plus the run report."""

    state: CoTeachingState
    report: Report


@dataclass(eq=False)
class MixedBatch:
    """Mixed labeled (X') and unlabeled (U') features with their soft targets."""

    x_labeled: np.ndarray
    y_labeled: np.ndarray
    x_unlabeled: np.ndarray
    y_unlabeled: np.ndarray
    lam: float

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.x_labeled, self.x_unlabeled])

    @property
    def labeled_count(self) -> int:
        return int(self.x_labeled.shape[0])


def _warmup_epoch(model: ModelState, data: Dataset, config: UlcConfig, epoch: int, k: int):
    batch_rng = np.random.default_rng([config.seed, STREAM_WARMUP_BATCH, epoch, k])
    drop_rng = np.random.default_rng([config.seed, STREAM_WARMUP_DROPOUT, epoch, k])
    losses = []
    for idx in minibatches(data.size, config.batch_size, batch_rng):
        loss, grads = ce_loss_and_grad(
            model,
            data.features[idx],
            data.noisy_labels[idx],
            entropy_weight=config.entropy_weight,
            mode="train",
            rng=drop_rng,
        )
        if not np.isfinite(loss):
            raise_divergence(loss, epoch, "warmup", network=k)
        for name in VARIANCE_PARAMS:
            grads.pop(name)
        model = sgd_step(model, grads, config.lr, config.momentum)
        losses.append(loss)
    return model, float(np.mean(losses))


def warmup_epoch(state: CoTeachingState, data: Dataset, config: UlcConfig, epoch: int) -> float:
    """
    One warm-up epoch for both networks, variance parameters frozen

    Returns:
        float: mean training loss over both networks
    """
    losses = []
    for k in range(NETWORKS):
        state.networks[k], loss = _warmup_epoch(state.networks[k], data, config, epoch, k)
        losses.append(loss)
    return float(np.mean(losses))


def warmup(state: CoTeachingState, data: Dataset, config: UlcConfig) -> CoTeachingState:
    """
    Train both networks on every observed label for warmup_epochs epochs

    The objective is cross-entropy plus entropy_weight times the negative
    prediction entropy. sigma_raw and the variance head stay at their
    initial values.
    """
    for epoch in range(1, config.warmup_epochs + 1):
        loss = warmup_epoch(state, data, config, epoch)
        Tools.debug(f"warm-up epoch {epoch}: loss {loss:.4f}")
    return state


def _clean_posterior(losses: np.ndarray, labels: np.ndarray, config: UlcConfig) -> np.ndarray:
    if config.class_specific:
        fits = fit_classwise(
            losses, labels, min_class_size=config.min_class_size, tol=config.gmm_tol, max_iter=config.gmm_max_iter
        )
        return fits.posteriors(losses, labels)
    fit = fit_gmm2(losses, tol=config.gmm_tol, max_iter=config.gmm_max_iter)
    return np.atleast_1d(posterior_clean(fit, losses))


@dataclass(eq=False)
class NoiseModelInputs:
    """What one network contributes to noise modeling in an epoch."""

    losses: np.ndarray  # normalized CE of the MC mean against the observed label
    epsilon: np.ndarray
    mean_prob: np.ndarray


def ensemble_inputs(model: ModelState, data: Dataset, config: UlcConfig, seed: int) -> NoiseModelInputs:
    ens = mc_predict(model, data.features, config.mc_passes, seed)
    picked = ens.mean_prob[np.arange(data.size), data.noisy_labels]
    raw = -np.log(np.clip(picked, 1e-12, None))
    return NoiseModelInputs(losses=normalize_losses(raw), epsilon=ens.epsilon, mean_prob=ens.mean_prob)


def model_noise_epoch(state: CoTeachingState, data: Dataset, config: UlcConfig, epoch: int = 0):
    """
    Noise modeling for both networks

    Network k gets its loss posterior from mixtures fitted on the other
    network's losses, and its epsilon and predicted labels from its own
    MC-dropout ensemble.

    Returns:
        tuple: (list of CorrectionState per network, list of NoiseModelInputs per network)
    """
    inputs = [
        ensemble_inputs(state.networks[k], data, config, derive_seed(config.seed, STREAM_MC, epoch, k))
        for k in range(NETWORKS)
    ]
    noisy_onehot = data.noisy_onehot()
    corrections = []
    for k in range(NETWORKS):
        other = inputs[NETWORKS - 1 - k]
        p_loss = _clean_posterior(other.losses, data.noisy_labels, config)
        corrections.append(
            build_correction_state(
                p_loss,
                inputs[k].epsilon,
                noisy_onehot,
                inputs[k].mean_prob,
                r=config.r,
                tau=config.tau,
                losses=other.losses,
            )
        )
    state.corrections = corrections
    return corrections, inputs


def sharpen(p: np.ndarray, temperature: float) -> np.ndarray:
    """Row-wise p^(1/T) renormalized; T = 1 is the identity."""
    p = np.asarray(p, dtype=np.float64)
    if temperature == 1.0:
        return p / p.sum(axis=-1, keepdims=True)
    sharp = np.power(p, 1.0 / temperature)
    return sharp / sharp.sum(axis=-1, keepdims=True)


def guess_labels(models, x: np.ndarray, passes: int, temperature: float, rng: np.random.Generator):
    """
    Co-guessed pseudo-labels: sharpened mean of `passes` dropout predictions
    of every network in models (one ModelState or a list)
    """
    if isinstance(models, ModelState):
        models = [models]
    probs = [
        np.exp(log_softmax(forward(m, x, mode="train", rng=rng).logits, axis=1))
        for m in models
        for _ in range(passes)
    ]
    return sharpen(np.mean(probs, axis=0), temperature)


def mixmatch_lite(
    x_labeled: np.ndarray,
    y_labeled: np.ndarray,
    x_unlabeled: np.ndarray,
    model: ModelState,
    config: UlcConfig,
    seed: int,
    lam: Optional[float] = None,
    peer: Optional[ModelState] = None,
) -> MixedBatch:
    """
    Feature-space MixMatch

    Labeled targets (refined labels) are sharpened; unlabeled samples get
    the sharpened mean of M dropout predictions of the trained network and,
    when given, of its peer. Each row is mixed with a partner from a shuffle
    of the whole labeled + unlabeled batch using
    lambda' = max(lambda, 1 - lambda), lambda ~ Beta(alpha, alpha).

    Args:
        x_labeled (np.ndarray): batch from the clean set, may be empty
        y_labeled (np.ndarray): its refined soft labels
        x_unlabeled (np.ndarray): batch from the rejected set
        model (ModelState): network guessing the pseudo-labels
        config (UlcConfig): mixmatch settings
        seed (int): seeds the guesses, lambda and the shuffle
        lam (float, optional): fixed mixing coefficient instead of a Beta draw
        peer (ModelState, optional): the other co-teaching network

    Returns:
        MixedBatch: X' and U' in input order of their un-mixed sources
    """
    mm = config.mixmatch
    rng = np.random.default_rng(seed)
    c = model.class_count
    x_labeled = np.asarray(x_labeled, dtype=np.float64).reshape(-1, model.input_dim)
    x_unlabeled = np.asarray(x_unlabeled, dtype=np.float64).reshape(-1, model.input_dim)
    n_l, n_u = x_labeled.shape[0], x_unlabeled.shape[0]
    if n_l == 0 and n_u == 0:
        raise ContractError("mixmatch needs at least one labeled or unlabeled sample")
    y_l = sharpen(as_soft_labels(y_labeled, c), mm.temperature) if n_l else np.zeros((0, c))
    guessers = [model] if peer is None else [model, peer]
    y_u = guess_labels(guessers, x_unlabeled, mm.augmentations, mm.temperature, rng) if n_u else np.zeros((0, c))

    if lam is None:
        lam = float(rng.beta(mm.alpha, mm.alpha))
    lam = max(lam, 1.0 - lam)
    all_x = np.concatenate([x_labeled, x_unlabeled])
    all_y = np.concatenate([y_l, y_u])
    perm = rng.permutation(all_x.shape[0])
    mixed_x = lam * all_x + (1.0 - lam) * all_x[perm]
    mixed_y = lam * all_y + (1.0 - lam) * all_y[perm]
    return MixedBatch(
        x_labeled=mixed_x[:n_l],
        y_labeled=mixed_y[:n_l],
        x_unlabeled=mixed_x[n_l:],
        y_unlabeled=mixed_y[n_l:],
        lam=lam,
    )


def ssl_losses(
    model: ModelState,
    mixed: MixedBatch,
    config: UlcConfig,
    seed: int,
    lambda_u: Optional[float] = None,
):
    """
    Aleatoric-aware semi-supervised loss and its gradients

        loss_x = -mean_{X'} y . log mean_t softmax(v_hat_t)
        loss_u =  mean_{U'} || y - mean_t softmax(v_hat_t) ||^2 / C
        loss   =  loss_x + lambda_u * loss_u (+ uniform_prior_reg * KL(uniform || mean prediction))

    loss_u is averaged over classes as well as samples; lambda_u = 25 is
    calibrated for that scale.

    The same seed fixes both the dropout masks and the corruption draws,
    so repeated calls see common random numbers.

    Args:
        model (ModelState): network being trained
        mixed (MixedBatch): output of mixmatch_lite
        config (UlcConfig): aleatoric switch, sample count, regularizer weight
        seed (int): dropout and corruption seed
        lambda_u (float, optional): unlabeled weight, config.lambda_u by default

    Raises:
        TrainingDivergenceError: non-finite loss

    Returns:
        tuple: (loss, grads) with gradients for every parameter, or without
            the variance parameters when aleatoric modeling is off
    """
    if lambda_u is None:
        lambda_u = config.lambda_u
    rng = np.random.default_rng(seed)
    x = mixed.features
    rec = forward(model, x, mode="train", rng=rng)
    b, c = rec.logits.shape
    n_x = mixed.labeled_count
    n_u = b - n_x
    if config.aleatoric:
        sigma, sigma_x = model.sigma(), rec.sigma_x
        noise = draw_noise(rng, config.aleatoric_samples, b, c)
    else:
        sigma, sigma_x = np.zeros((c, c)), np.zeros_like(rec.sigma_x)
        noise = zero_noise(b, c)
    pred = corrupted_prediction(rec.logits, sigma, sigma_x, noise)
    mean = pred.mean_prob

    dlog_mean = np.zeros((b, c))
    dmean = np.zeros((b, c))
    loss_x = 0.0
    if n_x:
        loss_x = float(-np.mean(np.sum(mixed.y_labeled * pred.log_mean[:n_x], axis=1)))
        dlog_mean[:n_x] = -mixed.y_labeled / n_x
    loss_u = 0.0
    if n_u:
        diff = mean[n_x:] - mixed.y_unlabeled
        loss_u = float(np.mean(diff**2))
        dmean[n_x:] = lambda_u * 2.0 * diff / (n_u * c)
    loss_reg = 0.0
    if config.uniform_prior_reg:
        prior = np.full(c, 1.0 / c)
        pbar = mean.mean(axis=0)
        loss_reg = float(np.sum(prior * np.log(prior / pbar)))
        dmean += config.uniform_prior_reg * (-prior / pbar)[None, :] / b
    loss = loss_x + lambda_u * loss_u + config.uniform_prior_reg * loss_reg
    if not np.isfinite(loss):
        raise TrainingDivergenceError(
            "non-finite semi-supervised loss",
            diagnostics={"loss_x": loss_x, "loss_u": loss_u, "loss_reg": loss_reg},
        )

    dv, dsigma, dsigma_x = corrupted_prediction_grads(pred, dlog_mean=dlog_mean, dmean=dmean)
    if config.aleatoric:
        grads = backward(model, rec, dv, dsigma_x)
        grads["sigma_raw"] = dsigma * expit(model.params["sigma_raw"])
    else:
        grads = backward(model, rec, dv)
        for name in VARIANCE_PARAMS:
            grads.pop(name)
    return loss, grads


def lambda_u_at(config: UlcConfig, epoch: int) -> float:
    """Linearly ramped unlabeled weight for a 1-based epoch number."""
    if config.lambda_u_rampup == 0:
        return config.lambda_u
    ramp = np.clip((epoch - config.warmup_epochs) / config.lambda_u_rampup, 0.0, 1.0)
    return float(config.lambda_u * ramp)


def ssl_epoch(
    model: ModelState,
    data: Dataset,
    correction: CorrectionState,
    config: UlcConfig,
    epoch: int,
    k: int = 0,
    peer: Optional[ModelState] = None,
):
    """
    One pass of MixMatch-lite + SSL updates for one network

    One pass over the labeled set in batches of batch_size, each paired
    with an equally sized random draw from the unlabeled set. With an empty
    labeled set the pass runs over the unlabeled set instead.

    Args:
        peer (ModelState, optional): co-guesses the pseudo-labels, left unchanged

    Returns:
        tuple: (updated model, mean loss)
    """
    rng = np.random.default_rng([config.seed, STREAM_SSL_BATCH, epoch, k])
    labeled = correction.labeled_idx
    unlabeled = correction.unlabeled_idx
    b = config.batch_size
    if not len(labeled):
        Tools.log(f"Warning: clean set is empty in epoch {epoch}, training on pseudo-labels only")
    source = labeled if len(labeled) else unlabeled
    lambda_u = lambda_u_at(config, epoch)
    losses = []
    for it, idx in enumerate(minibatches(len(source), b, rng)):
        if len(labeled):
            lab = labeled[idx]
            size = min(len(lab), len(unlabeled))
            unl = rng.choice(unlabeled, size=size, replace=False) if size else unlabeled[:0]
        else:
            lab = labeled
            unl = unlabeled[idx]
        step_seed = derive_seed(config.seed, STREAM_SSL_STEP, epoch, k, it)
        mixed = mixmatch_lite(
            data.features[lab],
            correction.corrected_labels[lab],
            data.features[unl],
            model,
            config,
            seed=step_seed,
            peer=peer,
        )
        loss, grads = ssl_losses(model, mixed, config, seed=step_seed + 1, lambda_u=lambda_u)
        model = sgd_step(model, grads, config.lr, config.momentum)
        losses.append(loss)
    return model, float(np.mean(losses))


def dump_diagnostics(
    directory: str, epoch: int, k: int, data: Dataset, correction: CorrectionState
) -> str:
    """Per-sample loss, epsilon, p_loss, omega and arg-max corrected label of one network as CSV."""
    if not os.path.isdir(directory):
        raise ReportIOError("directory does not exist", directory)
    path = os.path.join(directory, f"epoch{epoch:03d}_net{k + 1}.csv")
    noisy = data.is_noisy
    corrected = correction.corrected_labels.argmax(axis=1)
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(DIAGNOSTIC_COLUMNS)
            for i in range(data.size):
                writer.writerow(
                    (
                        i,
                        int(data.noisy_labels[i]),
                        repr(float(correction.losses[i])),
                        repr(float(correction.epsilon[i])),
                        repr(float(correction.p_loss[i])),
                        repr(float(correction.clean_prob[i])),
                        int(corrected[i]),
                        int(noisy[i]),
                    )
                )
    except OSError as e:
        raise ReportIOError(f"cannot write diagnostics ({e.strerror})", path)
    return path


def _noise_comparison(data: Dataset, inputs, config: UlcConfig):
    scores = noise_model_scores(
        inputs[1].losses,
        data.noisy_labels,
        inputs[0].epsilon,
        config.r,
        min_class_size=config.min_class_size,
        tol=config.gmm_tol,
        max_iter=config.gmm_max_iter,
    )
    return compare_noise_models(scores, data.is_noisy, data.noisy_labels, data.meta.minority_classes)


def run_ulc(
    train: Dataset,
    test: Dataset,
    config: UlcConfig,
    ablations=(),
    diagnostics_dir: Optional[str] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> UlcResult:
    """
    Full training run: warm-up, then noise modeling and SSL every epoch

    Epoch numbers run from 1 to max_epochs and include the warm-up epochs.
    Training-set AUC and the noise-model comparison refer to the first
    network; test accuracy uses the mean prediction of both.

    Args:
        train (Dataset): noisy training set
        test (Dataset): clean test set
        config (UlcConfig): full configuration
        ablations: preset names already applied to config, echoed in the report
        diagnostics_dir (str, optional): per-epoch per-sample CSV dumps go here
        on_epoch (callable, optional): called with each finished EpochRecord

    Returns:
        UlcResult: trained state and report
    """
    if train.dim != test.dim or train.class_count != test.class_count:
        raise ContractError("train and test sets differ in dimension or class count")
    if diagnostics_dir is not None and not os.path.isdir(diagnostics_dir):
        raise ReportIOError("directory does not exist", diagnostics_dir)
    start = Tools.clock()
    state = CoTeachingState.create(train.dim, train.class_count, config)
    records: List[EpochRecord] = []
    for epoch in range(1, config.max_epochs + 1):
        if epoch <= config.warmup_epochs:
            loss = warmup_epoch(state, train, config, epoch)
            acc = evaluate(state.networks, test)
            record = EpochRecord(
                epoch=epoch,
                phase="warmup",
                test_acc=acc.overall,
                minority_acc=acc.minority,
                majority_acc=acc.majority,
                per_class_acc=acc.per_class,
                train_loss=loss,
            )
        else:
            corrections, inputs = model_noise_epoch(state, train, config, epoch)
            if diagnostics_dir is not None:
                for k, correction in enumerate(corrections):
                    dump_diagnostics(diagnostics_dir, epoch, k, train, correction)
            losses = []
            for k in range(NETWORKS):
                state.networks[k], loss = ssl_epoch(
                    state.networks[k], train, corrections[k], config, epoch, k, peer=state.networks[NETWORKS - 1 - k]
                )
                losses.append(loss)
            acc = evaluate(state.networks, test)
            comparison = _noise_comparison(train, inputs, config)
            record = EpochRecord(
                epoch=epoch,
                phase="ssl",
                test_acc=acc.overall,
                minority_acc=acc.minority,
                majority_acc=acc.majority,
                per_class_acc=acc.per_class,
                auc=auc_or_none(corrections[0].clean_prob, ~train.is_noisy),
                labeled_fraction=float(np.mean([c.labeled_fraction for c in corrections])),
                train_loss=float(np.mean(losses)),
                noise_auc=comparison,
            )
        records.append(record)
        Tools.log(_progress_line(record, config.max_epochs))
        if on_epoch is not None:
            on_epoch(record)
    acc = evaluate(state.networks, test)
    report = Report(
        method="ulc",
        seed=config.seed,
        config=config.to_dict(),
        epochs=records,
        per_class_acc=acc.per_class,
        minority_acc=acc.minority,
        majority_acc=acc.majority,
        final_auc=records[-1].auc,
        ablations=list(ablations),
        wall_clock_seconds=Tools.clock() - start,
    )
    return UlcResult(state=state, report=report)


def _progress_line(record: EpochRecord, total: int) -> str:
    parts = [f"[{record.phase}] epoch {record.epoch}/{total}", f"loss {record.train_loss:.4f}"]
    if record.labeled_fraction is not None:
        parts.append(f"labeled {record.labeled_fraction:.3f}")
    if record.auc is not None:
        parts.append(f"auc {record.auc:.4f}")
    parts.append(f"test acc {record.test_acc:.4f}")
    return ", ".join(parts)
