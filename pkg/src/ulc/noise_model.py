"""
Loss-based label-noise modeling.

A two-component 1-D Gaussian mixture is fitted by EM to (normalized)
per-sample losses, either once over all samples (class-agnostic) or
separately for every observed class (class-specific, with a global fit as
fallback for tiny classes). The small-mean component's responsibility is
the loss-based clean probability, which is fused with epistemic uncertainty

    omega = (1 - epsilon)^r * p_loss^(1 - r)

and used to refine labels and to split the data into a labeled (clean)
and an unlabeled (rejected) part.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple

import numpy as np
from scipy.special import logsumexp

from ulc.errors import ConfigurationError, ContractError, InsufficientDataError
from ulc.tools import Tools

VARIANCE_FLOOR = 1e-6
GLOBAL = None  # class_index marker of the class-agnostic fit


@dataclass(frozen=True)
class ClassGmm:
    """Two-component 1-D Gaussian mixture; component 0 has the smaller mean."""

    mu0: float
    mu1: float
    var0: float
    var1: float
    pi0: float
    pi1: float
    converged: bool
    class_index: Optional[int] = GLOBAL
    n_iter: int = 0
    log_likelihoods: Tuple[float, ...] = ()

    @property
    def is_global(self) -> bool:
        return self.class_index is GLOBAL


def normalize_losses(losses: np.ndarray) -> np.ndarray:
    """
    Min-max scale losses to [0, 1]; a constant vector maps to 0.5

    Args:
        losses (np.ndarray): N loss values, N >= 1

    Returns:
        np.ndarray: scaled losses
    """
    losses = np.asarray(losses, dtype=np.float64)
    if losses.size < 1:
        raise InsufficientDataError("cannot normalize an empty loss vector")
    lo, hi = losses.min(), losses.max()
    if hi - lo <= 0:
        return np.full_like(losses, 0.5)
    return (losses - lo) / (hi - lo)


def _log_weighted_densities(x: np.ndarray, mu: np.ndarray, var: np.ndarray, pi: np.ndarray) -> np.ndarray:
    """N x 2 matrix of log(pi_k N(x; mu_k, var_k))."""
    x = x[:, None]
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi)
    return log_pi - 0.5 * np.log(2.0 * np.pi * var) - (x - mu) ** 2 / (2.0 * var)


def _median_split(x: np.ndarray):
    med = np.median(x)
    low = x <= med
    if low.all():
        low = x < med
    return low


def _ordered(mu, var, pi, converged, class_index, n_iter, history) -> ClassGmm:
    swap = mu[0] > mu[1] or (mu[0] == mu[1] and pi[1] > pi[0])
    order = (1, 0) if swap else (0, 1)
    return ClassGmm(
        mu0=float(mu[order[0]]),
        mu1=float(mu[order[1]]),
        var0=float(var[order[0]]),
        var1=float(var[order[1]]),
        pi0=float(pi[order[0]]),
        pi1=float(pi[order[1]]),
        converged=converged,
        class_index=class_index,
        n_iter=n_iter,
        log_likelihoods=tuple(history),
    )


def fit_gmm2(
    losses: np.ndarray,
    tol: float = 1e-4,
    max_iter: int = 100,
    floor: float = VARIANCE_FLOOR,
    class_index: Optional[int] = GLOBAL,
) -> ClassGmm:
    """
    EM for a two-component 1-D Gaussian mixture

    Initialized from a median split. Stops when the mean per-sample
    log-likelihood improves by less than tol, or after max_iter iterations.
    Variances are floored at `floor` (a constrained M-step, so the
    likelihood stays nondecreasing).

    Args:
        losses (np.ndarray): at least 2 values
        tol (float): convergence threshold on the mean log-likelihood
        max_iter (int): iteration cap
        floor (float): variance floor
        class_index (int, optional): observed class the fit belongs to, GLOBAL for all

    Raises:
        InsufficientDataError: fewer than 2 samples

    Returns:
        ClassGmm: ordered fit; all-identical input gives the degenerate
            equal-means fit flagged not converged
    """
    x = np.asarray(losses, dtype=np.float64).ravel()
    n = x.size
    if n < 2:
        raise InsufficientDataError(f"need at least 2 samples to fit a mixture, got {n}")
    low = _median_split(x)
    if low.all() or not low.any():
        mu = np.array([x.mean(), x.mean()])
        var = np.array([floor, floor])
        pi = np.array([0.5, 0.5])
        return _ordered(mu, var, pi, False, class_index, 0, [])

    mu = np.array([x[low].mean(), x[~low].mean()])
    var = np.maximum(np.array([x[low].var(), x[~low].var()]), floor)
    pi = np.array([low.mean(), 1.0 - low.mean()])

    history = []
    converged = False
    it = 0
    log_w = _log_weighted_densities(x, mu, var, pi)
    history.append(float(logsumexp(log_w, axis=1).mean()))
    for it in range(1, max_iter + 1):
        # E-step
        resp = np.exp(log_w - logsumexp(log_w, axis=1, keepdims=True))
        nk = resp.sum(axis=0)
        # M-step
        pi = nk / n
        safe = np.where(nk > 0, nk, 1.0)
        mu = np.where(nk > 0, (resp * x[:, None]).sum(axis=0) / safe, mu)
        var = np.where(nk > 0, (resp * (x[:, None] - mu) ** 2).sum(axis=0) / safe, var)
        var = np.maximum(var, floor)
        log_w = _log_weighted_densities(x, mu, var, pi)
        history.append(float(logsumexp(log_w, axis=1).mean()))
        if history[-1] - history[-2] < tol:
            converged = True
            break
    return _ordered(mu, var, pi, converged, class_index, it, history)


def posterior_clean(gmm: ClassGmm, loss):
    """
    Responsibility of the small-mean (clean) component

    Args:
        gmm (ClassGmm): fitted mixture
        loss (float | np.ndarray): loss value(s)

    Returns:
        float or np.ndarray in [0, 1]
    """
    x = np.atleast_1d(np.asarray(loss, dtype=np.float64))
    log_w = _log_weighted_densities(
        x, np.array([gmm.mu0, gmm.mu1]), np.array([gmm.var0, gmm.var1]), np.array([gmm.pi0, gmm.pi1])
    )
    post = np.exp(log_w[:, 0] - logsumexp(log_w, axis=1))
    return float(post[0]) if np.ndim(loss) == 0 else post


@dataclass(eq=False)
class ClasswiseGmm:
    """Per-class fits plus the always-present global fit."""

    global_fit: ClassGmm
    per_class: Dict[int, ClassGmm] = field(default_factory=dict)

    def gmm_for(self, class_index: int) -> ClassGmm:
        return self.per_class.get(int(class_index), self.global_fit)

    def posteriors(self, losses: np.ndarray, labels: np.ndarray) -> np.ndarray:
        """Clean posterior of every sample under the fit of its observed class."""
        losses = np.asarray(losses, dtype=np.float64)
        labels = np.asarray(labels)
        out = np.empty_like(losses)
        for c in np.unique(labels):
            idx = labels == c
            out[idx] = posterior_clean(self.gmm_for(int(c)), losses[idx])
        return out


def fit_classwise(
    losses: np.ndarray,
    observed_labels: np.ndarray,
    min_class_size: int = 10,
    tol: float = 1e-4,
    max_iter: int = 100,
) -> ClasswiseGmm:
    """
    One GMM per observed class with at least min_class_size samples

    Smaller classes are served by the global fit over all losses.

    Raises:
        InsufficientDataError: if the global fit itself fails
    """
    losses = np.asarray(losses, dtype=np.float64)
    labels = np.asarray(observed_labels)
    if losses.shape != labels.shape:
        raise ContractError("one observed label per loss value is required")
    global_fit = fit_gmm2(losses, tol=tol, max_iter=max_iter, class_index=GLOBAL)
    per_class = {}
    for c in np.unique(labels):
        idx = labels == c
        if idx.sum() < min_class_size:
            Tools.debug(f"class {int(c)} has {int(idx.sum())} samples, using the global fit")
            continue
        try:
            fit = fit_gmm2(losses[idx], tol=tol, max_iter=max_iter, class_index=int(c))
        except InsufficientDataError:
            Tools.log(f"Warning: mixture fit failed for class {int(c)}, using the global fit")
            continue
        if not fit.converged:
            Tools.debug(f"mixture for class {int(c)} stopped after {fit.n_iter} iterations without converging")
        per_class[int(c)] = fit
    return ClasswiseGmm(global_fit=global_fit, per_class=per_class)


def clean_probability(p_loss, epsilon, r: float):
    """
    Weighted geometric mean omega = (1 - epsilon)^r * p_loss^(1 - r)

    Args:
        p_loss (float | np.ndarray): loss-based clean posterior in [0, 1]
        epsilon (float | np.ndarray): normalized epistemic uncertainty in [0, 1]
        r (float): uncertainty ratio in [0, 1]

    Returns:
        float or np.ndarray: clean probability
    """
    if not 0.0 <= r <= 1.0:
        raise ConfigurationError(f"uncertainty ratio r must be in [0, 1], got {r}")
    p = np.clip(np.asarray(p_loss, dtype=np.float64), 0.0, 1.0)
    eps = np.clip(np.asarray(epsilon, dtype=np.float64), 0.0, 1.0)
    omega = np.power(1.0 - eps, r) * np.power(p, 1.0 - r)
    return float(omega) if omega.ndim == 0 else omega


def correct_label(omega, noisy_onehot: np.ndarray, mean_pred: np.ndarray) -> np.ndarray:
    """
    Refined label y = omega * y_noisy + (1 - omega) * y_pred, renormalized

    Works on a single C-row with scalar omega, or on N x C rows with an
    N-vector of omegas.
    """
    y_noisy = np.asarray(noisy_onehot, dtype=np.float64)
    y_pred = np.asarray(mean_pred, dtype=np.float64)
    w = np.asarray(omega, dtype=np.float64)
    if y_noisy.ndim == 2:
        w = w.reshape(-1, 1)
    y = w * y_noisy + (1.0 - w) * y_pred
    return y / y.sum(axis=-1, keepdims=True)


def partition(omega: np.ndarray, tau: float) -> Tuple[np.ndarray, np.ndarray]:
    """
    Split indices at the clean threshold (inclusive)

    Returns:
        tuple: (labeled indices with omega >= tau, unlabeled indices), both sorted
    """
    if not 0.0 < tau < 1.0:
        raise ConfigurationError(f"clean threshold tau must be in (0, 1), got {tau}")
    omega = np.asarray(omega, dtype=np.float64)
    clean = omega >= tau
    return np.flatnonzero(clean), np.flatnonzero(~clean)


@dataclass(eq=False)
class CorrectionState:
    """Clean probabilities, refined labels and the clean/unlabeled split for one network."""

    clean_prob: np.ndarray
    corrected_labels: np.ndarray
    labeled_idx: np.ndarray
    unlabeled_idx: np.ndarray
    # diagnostics
    losses: Optional[np.ndarray] = None
    p_loss: Optional[np.ndarray] = None
    epsilon: Optional[np.ndarray] = None

    @property
    def labeled_fraction(self) -> float:
        return len(self.labeled_idx) / len(self.clean_prob)


def build_correction_state(
    p_loss: np.ndarray,
    epsilon: np.ndarray,
    noisy_onehot: np.ndarray,
    mean_pred: np.ndarray,
    r: float,
    tau: float,
    losses: Optional[np.ndarray] = None,
) -> CorrectionState:
    """Fuse, correct and partition in one go."""
    omega = clean_probability(p_loss, epsilon, r)
    omega = np.atleast_1d(omega)
    labeled, unlabeled = partition(omega, tau)
    return CorrectionState(
        clean_prob=omega,
        corrected_labels=correct_label(omega, noisy_onehot, mean_pred),
        labeled_idx=labeled,
        unlabeled_idx=unlabeled,
        losses=losses,
        p_loss=np.asarray(p_loss, dtype=np.float64),
        epsilon=np.asarray(epsilon, dtype=np.float64),
    )


def noise_model_scores(
    losses: np.ndarray,
    observed_labels: np.ndarray,
    epsilon: np.ndarray,
    r: float,
    min_class_size: int = 10,
    tol: float = 1e-4,
    max_iter: int = 100,
) -> Dict[str, np.ndarray]:
    """
    Clean scores of the three noise-modeling variants on the same losses

    Returns:
        dict: "cam" class-agnostic posterior, "csm" class-specific posterior,
            "eucs" class-specific posterior fused with epistemic uncertainty
    """
    fits = fit_classwise(losses, observed_labels, min_class_size=min_class_size, tol=tol, max_iter=max_iter)
    cam = posterior_clean(fits.global_fit, np.asarray(losses, dtype=np.float64))
    csm = fits.posteriors(losses, observed_labels)
    return {"cam": np.atleast_1d(cam), "csm": csm, "eucs": np.atleast_1d(clean_probability(csm, epsilon, r))}
