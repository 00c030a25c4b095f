"""
Epistemic and aleatoric uncertainty.

Epistemic: MC-dropout ensembles and the normalized entropy of their mean
prediction. Aleatoric: Gaussian logit corruption

    v_hat = (I + delta) v + delta_x,   delta_jk ~ N(0, sigma_jk),   delta_x_j ~ N(0, sigma_x_j)

drawn with the reparametrization trick (standard normals times the square
root of the variance) so that the Monte Carlo loss is differentiable in v,
sigma and sigma_x for a fixed set of standard-normal draws.
"""

from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
from scipy.special import entr, logsumexp, log_softmax, softmax

from ulc.errors import ConfigurationError, ContractError, ShapeError
from ulc.network import ModelState, forward


@dataclass(eq=False)
class EnsemblePrediction:
    """T stochastic softmax outputs, their mean and the derived epistemic uncertainty."""

    member_probs: np.ndarray  # T x B x C (T x C for a single sample)
    mean_prob: np.ndarray  # B x C (C)
    epsilon: np.ndarray  # B (scalar)


def epistemic_uncertainty(mean_prob: np.ndarray):
    """
    Normalized entropy -sum_j p_j log p_j / log C, in [0, 1]

    Args:
        mean_prob (np.ndarray): C probabilities or a B x C matrix of rows

    Raises:
        ContractError: negative entries or rows not summing to 1

    Returns:
        float for a single vector, otherwise a B-vector
    """
    p = np.asarray(mean_prob, dtype=np.float64)
    if (p < 0).any():
        raise ContractError("probabilities must be non-negative")
    if not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
        raise ContractError("probabilities must sum to 1")
    c = p.shape[-1]
    eps = np.clip(entr(p).sum(axis=-1) / np.log(c), 0.0, 1.0)
    return float(eps) if p.ndim == 1 else eps


def mc_predict(model: ModelState, x: np.ndarray, T: int, seed: int) -> EnsemblePrediction:
    """
    MC-dropout ensemble of T stochastic forward passes

    Args:
        model (ModelState): network
        x (np.ndarray): B x d batch or one d-vector
        T (int): number of passes, >= 1
        seed (int): seeds every dropout mask

    Returns:
        EnsemblePrediction: member softmax rows, their mean and epsilon
    """
    if T < 1:
        raise ConfigurationError(f"number of MC passes must be >= 1, got {T}")
    single = np.asarray(x).ndim == 1
    rng = np.random.default_rng(seed)
    members = np.stack(
        [softmax(forward(model, x, mode="mc", rng=rng).logits, axis=1) for _ in range(T)]
    )
    mean = members.mean(axis=0)
    eps = epistemic_uncertainty(mean)
    if single:
        return EnsemblePrediction(member_probs=members[:, 0], mean_prob=mean[0], epsilon=float(eps[0]))
    return EnsemblePrediction(member_probs=members, mean_prob=mean, epsilon=eps)


@dataclass(eq=False)
class CorruptionNoise:
    """Standard-normal draws for T corrupted copies of a B x C logit batch."""

    z: np.ndarray  # T x B x C x C, class-dependent factor
    e: np.ndarray  # T x B x C, instance-dependent factor

    @property
    def samples(self) -> int:
        return int(self.z.shape[0])


def draw_noise(rng: np.random.Generator, T: int, batch: int, class_count: int) -> CorruptionNoise:
    if T < 1:
        raise ConfigurationError(f"number of aleatoric samples must be >= 1, got {T}")
    return CorruptionNoise(
        z=rng.standard_normal((T, batch, class_count, class_count)),
        e=rng.standard_normal((T, batch, class_count)),
    )


def zero_noise(batch: int, class_count: int) -> CorruptionNoise:
    """A single draw of all-zero noise: corruption becomes the identity."""
    return CorruptionNoise(z=np.zeros((1, batch, class_count, class_count)), e=np.zeros((1, batch, class_count)))


def _check_variances(v: np.ndarray, sigma: np.ndarray, sigma_x: np.ndarray) -> None:
    c = v.shape[-1]
    if sigma.shape != (c, c):
        raise ShapeError(f"sigma must be {c} x {c}, got {sigma.shape}")
    if sigma_x.shape != v.shape:
        raise ShapeError(f"sigma_x must match logits shape {v.shape}, got {sigma_x.shape}")
    if (sigma < 0).any() or (sigma_x < 0).any():
        raise ContractError("variances must be non-negative")


def corrupt_logits(v: np.ndarray, sigma: np.ndarray, sigma_x: np.ndarray, noise: CorruptionNoise) -> np.ndarray:
    """
    T corrupted copies (I + delta_t) v + delta_x_t of a B x C logit batch

    Returns:
        np.ndarray: T x B x C corrupted logits
    """
    _check_variances(v, sigma, sigma_x)
    delta = np.sqrt(sigma)[None, None] * noise.z
    mixed = np.einsum("tbjk,bk->tbj", delta, v)
    return v[None] + mixed + np.sqrt(sigma_x)[None] * noise.e


def sample_corrupted_logits(
    logits: np.ndarray,
    sigma: np.ndarray,
    sigma_x: np.ndarray,
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    One corrupted draw of a logit vector (or a B x C batch)

    Args:
        logits (np.ndarray): C logits or B x C
        sigma (np.ndarray): C x C class-dependent variances, >= 0
        sigma_x (np.ndarray): instance variances shaped like logits, >= 0
        seed (int, optional): noise seed
        rng (np.random.Generator, optional): takes precedence over seed

    Returns:
        np.ndarray: corrupted logits, same shape as the input
    """
    v = np.asarray(logits, dtype=np.float64)
    single = v.ndim == 1
    v2 = np.atleast_2d(v)
    sx = np.atleast_2d(np.asarray(sigma_x, dtype=np.float64))
    sigma = np.asarray(sigma, dtype=np.float64)
    _check_variances(v2, sigma, sx)
    if rng is None:
        rng = np.random.default_rng(seed)
    out = corrupt_logits(v2, sigma, sx, draw_noise(rng, 1, v2.shape[0], v2.shape[1]))[0]
    return out[0] if single else out


@dataclass(eq=False)
class CorruptedPrediction:
    """Monte Carlo mean of softmax over corrupted logits, with what its gradient needs."""

    v: np.ndarray
    sigma: np.ndarray
    sigma_x: np.ndarray
    noise: CorruptionNoise
    log_probs: np.ndarray  # T x B x C, log softmax of each corrupted draw
    log_mean: np.ndarray  # B x C, log of the MC mean probability

    @property
    def mean_prob(self) -> np.ndarray:
        return np.exp(self.log_mean)


def corrupted_prediction(
    v: np.ndarray, sigma: np.ndarray, sigma_x: np.ndarray, noise: CorruptionNoise
) -> CorruptedPrediction:
    """log (1/T) sum_t softmax(v_hat_t), computed with logsumexp."""
    v_hat = corrupt_logits(v, sigma, sigma_x, noise)
    log_probs = log_softmax(v_hat, axis=2)
    log_mean = logsumexp(log_probs, axis=0) - np.log(noise.samples)
    return CorruptedPrediction(v=v, sigma=sigma, sigma_x=sigma_x, noise=noise, log_probs=log_probs, log_mean=log_mean)


def corrupted_prediction_grads(
    pred: CorruptedPrediction,
    dlog_mean: Optional[np.ndarray] = None,
    dmean: Optional[np.ndarray] = None,
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Chain upstream gradients through the corruption sampler

    Args:
        pred (CorruptedPrediction): forward result
        dlog_mean (np.ndarray, optional): dL/d log mean_prob, B x C
        dmean (np.ndarray, optional): dL/d mean_prob, B x C

    Returns:
        tuple: (dL/dv, dL/dsigma, dL/dsigma_x), gradients w.r.t. the variances
            themselves; zero where a variance is exactly zero
    """
    t = pred.noise.samples
    probs = np.exp(pred.log_probs)
    g_ls = np.zeros_like(pred.log_probs)
    if dlog_mean is not None:
        weights = np.exp(pred.log_probs - logsumexp(pred.log_probs, axis=0, keepdims=True))
        g_ls += dlog_mean[None] * weights
    if dmean is not None:
        g_ls += dmean[None] * probs / t
    dv_hat = g_ls - probs * g_ls.sum(axis=2, keepdims=True)

    std = np.sqrt(pred.sigma)
    std_x = np.sqrt(pred.sigma_x)
    delta = std[None, None] * pred.noise.z
    dv = dv_hat.sum(axis=0) + np.einsum("tbj,tbjk->bk", dv_hat, delta)
    dstd = np.einsum("tbj,tbjk,bk->jk", dv_hat, pred.noise.z, pred.v)
    dstd_x = np.einsum("tbj,tbj->bj", dv_hat, pred.noise.e)
    with np.errstate(divide="ignore", invalid="ignore"):
        dsigma = np.where(std > 0, dstd / (2.0 * std), 0.0)
        dsigma_x = np.where(std_x > 0, dstd_x / (2.0 * std_x), 0.0)
    return dv, dsigma, dsigma_x


def stochastic_mean_prob(
    model: ModelState,
    x: np.ndarray,
    T: int,
    seed: int,
    clamp_variances: bool = False,
) -> np.ndarray:
    """
    Mean softmax over T corrupted draws of one deterministic forward pass

    Args:
        model (ModelState): network supplying logits, sigma_x and sigma
        x (np.ndarray): B x d batch or one d-vector
        T (int): number of corrupted draws, >= 1
        seed (int): noise seed
        clamp_variances (bool): use zero variances, reducing to the plain softmax

    Returns:
        np.ndarray: B x C mean probabilities (C for a single sample)
    """
    single = np.asarray(x).ndim == 1
    rec = forward(model, x, mode="deterministic")
    if clamp_variances:
        sigma = np.zeros((model.class_count, model.class_count))
        sigma_x = np.zeros_like(rec.sigma_x)
    else:
        sigma, sigma_x = model.sigma(), rec.sigma_x
    rng = np.random.default_rng(seed)
    noise = draw_noise(rng, T, rec.logits.shape[0], model.class_count)
    mean = corrupted_prediction(rec.logits, sigma, sigma_x, noise).mean_prob
    return mean[0] if single else mean
