"""
Dropout MLP with an aleatoric variance head, analytic gradients and SGD.

Architecture: d -> H -> H -> C logits, ReLU, inverted dropout after each
hidden layer. The variance head maps the last hidden layer to C raw values,
softplus-transformed to the per-instance variances sigma_x. A global C x C
matrix sigma_raw (softplus-transformed) holds the class-dependent variances.
"""

import os
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np
from scipy.special import expit, log_softmax

from ulc.errors import ConfigurationError, ContractError, ReportIOError, ShapeError, TrainingDivergenceError

PARAM_NAMES = ("W1", "b1", "W2", "b2", "W3", "b3", "var_W", "var_b", "sigma_raw")
VARIANCE_PARAMS = ("var_W", "var_b", "sigma_raw")
FORWARD_MODES = {"train", "deterministic", "mc"}

INIT_VARIANCE = 0.05
CHECKPOINT_VERSION = 1


def softplus(x: np.ndarray) -> np.ndarray:
    return np.logaddexp(0.0, x)


def softplus_inv(y: float) -> float:
    return float(y + np.log(-np.expm1(-y)))


@dataclass(eq=False)
class ModelState:
    """Parameters, momentum buffers and dropout rate of one network."""

    params: Dict[str, np.ndarray]
    buffers: Dict[str, np.ndarray]
    dropout_rate: float

    @property
    def input_dim(self) -> int:
        return int(self.params["W1"].shape[0])

    @property
    def hidden_width(self) -> int:
        return int(self.params["W1"].shape[1])

    @property
    def class_count(self) -> int:
        return int(self.params["W3"].shape[1])

    def sigma(self) -> np.ndarray:
        """Class-dependent variances, C x C, strictly positive."""
        return softplus(self.params["sigma_raw"])

    def copy(self) -> "ModelState":
        return ModelState(
            params={k: v.copy() for k, v in self.params.items()},
            buffers={k: v.copy() for k, v in self.buffers.items()},
            dropout_rate=self.dropout_rate,
        )


@dataclass(eq=False)
class ForwardRecord:
    """Outputs of one forward pass plus the activations backward needs."""

    logits: np.ndarray  # B x C
    sigma_x: np.ndarray  # B x C
    x: np.ndarray
    z1: np.ndarray
    a1: np.ndarray
    z2: np.ndarray
    a2: np.ndarray
    s: np.ndarray  # pre-softplus variance head output
    mask1: np.ndarray
    mask2: np.ndarray


def init_model(
    input_dim: int, class_count: int, hidden_width: int = 64, dropout_rate: float = 0.3, seed: int = 0
) -> ModelState:
    """
    He-initialized MLP with small positive initial corruption variances

    Args:
        input_dim (int): feature dimension d
        class_count (int): number of classes C
        hidden_width (int): width H of both hidden layers
        dropout_rate (float): dropout probability in [0, 1)
        seed (int): initialization seed

    Returns:
        ModelState: fresh parameters with zero momentum buffers
    """
    if input_dim < 1 or class_count < 2 or hidden_width < 1:
        raise ConfigurationError(f"invalid sizes d={input_dim} C={class_count} H={hidden_width}")
    if not 0.0 <= dropout_rate < 1.0:
        raise ConfigurationError(f"dropout must be in [0, 1), got {dropout_rate}")
    rng = np.random.default_rng(seed)
    h = hidden_width
    params = {
        "W1": rng.normal(0.0, np.sqrt(2.0 / input_dim), size=(input_dim, h)),
        "b1": np.zeros(h),
        "W2": rng.normal(0.0, np.sqrt(2.0 / h), size=(h, h)),
        "b2": np.zeros(h),
        "W3": rng.normal(0.0, np.sqrt(1.0 / h), size=(h, class_count)),
        "b3": np.zeros(class_count),
        "var_W": rng.normal(0.0, 0.01, size=(h, class_count)),
        "var_b": np.full(class_count, softplus_inv(INIT_VARIANCE)),
        "sigma_raw": np.full((class_count, class_count), softplus_inv(INIT_VARIANCE)),
    }
    buffers = {k: np.zeros_like(v) for k, v in params.items()}
    return ModelState(params=params, buffers=buffers, dropout_rate=float(dropout_rate))


def _dropout_mask(rng: np.random.Generator, shape, rate: float) -> np.ndarray:
    if rate == 0.0:
        return np.ones(shape)
    keep = 1.0 - rate
    return (rng.random(shape) < keep) / keep


def forward(
    model: ModelState,
    x: np.ndarray,
    mode: str = "deterministic",
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
) -> ForwardRecord:
    """
    Forward pass

    Args:
        model (ModelState): network
        x (np.ndarray): B x d batch or a single d-vector
        mode (str): "deterministic" uses the dropout expectation (no mask),
            "train" and "mc" sample fresh inverted-dropout masks
        seed (int, optional): seeds the masks of a stochastic mode
        rng (np.random.Generator, optional): mask generator, takes precedence over seed

    Returns:
        ForwardRecord: logits, sigma_x and cached activations
    """
    if mode not in FORWARD_MODES:
        raise ConfigurationError(f"mode must be in {sorted(FORWARD_MODES)}, got {mode!r}")
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ShapeError(f"input has shape {x.shape}, model expects (*, {model.input_dim})")
    p = model.params
    h = model.hidden_width
    if mode == "deterministic":
        mask1 = np.ones((x.shape[0], h))
        mask2 = mask1
    else:
        if rng is None:
            if seed is None:
                raise ConfigurationError(f"mode {mode!r} needs a seed or a generator")
            rng = np.random.default_rng(seed)
        mask1 = _dropout_mask(rng, (x.shape[0], h), model.dropout_rate)
        mask2 = _dropout_mask(rng, (x.shape[0], h), model.dropout_rate)
    z1 = x @ p["W1"] + p["b1"]
    a1 = np.maximum(z1, 0.0) * mask1
    z2 = a1 @ p["W2"] + p["b2"]
    a2 = np.maximum(z2, 0.0) * mask2
    logits = a2 @ p["W3"] + p["b3"]
    s = a2 @ p["var_W"] + p["var_b"]
    return ForwardRecord(
        logits=logits, sigma_x=softplus(s), x=x, z1=z1, a1=a1, z2=z2, a2=a2, s=s, mask1=mask1, mask2=mask2
    )


def backward(
    model: ModelState, rec: ForwardRecord, dlogits: np.ndarray, dsigma_x: Optional[np.ndarray] = None
) -> Dict[str, np.ndarray]:
    """
    Backpropagate loss gradients w.r.t. logits (and sigma_x) to every parameter

    sigma_raw gets a zero gradient here; its gradient comes from the
    corruption sampler and is added by the caller.
    """
    p = model.params
    grads = {}
    grads["W3"] = rec.a2.T @ dlogits
    grads["b3"] = dlogits.sum(axis=0)
    da2 = dlogits @ p["W3"].T
    if dsigma_x is not None:
        ds = dsigma_x * expit(rec.s)
        grads["var_W"] = rec.a2.T @ ds
        grads["var_b"] = ds.sum(axis=0)
        da2 = da2 + ds @ p["var_W"].T
    else:
        grads["var_W"] = np.zeros_like(p["var_W"])
        grads["var_b"] = np.zeros_like(p["var_b"])
    dz2 = da2 * rec.mask2 * (rec.z2 > 0)
    grads["W2"] = rec.a1.T @ dz2
    grads["b2"] = dz2.sum(axis=0)
    da1 = dz2 @ p["W2"].T
    dz1 = da1 * rec.mask1 * (rec.z1 > 0)
    grads["W1"] = rec.x.T @ dz1
    grads["b1"] = dz1.sum(axis=0)
    grads["sigma_raw"] = np.zeros_like(p["sigma_raw"])
    return grads


def as_soft_labels(labels: np.ndarray, class_count: int) -> np.ndarray:
    """
    Hard label vector -> one-hot rows; soft rows are validated and returned

    Raises:
        ContractError: negative entries or rows not summing to 1
    """
    labels = np.asarray(labels)
    if labels.ndim == 1:
        if labels.min() < 0 or labels.max() >= class_count:
            raise ContractError(f"hard labels outside [0, {class_count})")
        return np.eye(class_count)[labels.astype(np.int64)]
    labels = labels.astype(np.float64)
    if labels.shape[1] != class_count:
        raise ShapeError(f"label rows have {labels.shape[1]} entries, expected {class_count}")
    if (labels < 0).any() or not np.allclose(labels.sum(axis=1), 1.0, atol=1e-6):
        raise ContractError("label rows must be non-negative and sum to 1")
    return labels


def ce_loss_and_grad(
    model: ModelState,
    x: np.ndarray,
    labels: np.ndarray,
    entropy_weight: float = 0.0,
    mode: str = "deterministic",
    seed: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
):
    """
    Cross-entropy with an optional confidence penalty

    loss = mean_i [-y_i . log softmax(v_i)] + entropy_weight * mean_i [sum_j p_ij log p_ij]

    The second term is the negative prediction entropy, so a positive weight
    discourages over-confident predictions during warm-up.

    Returns:
        tuple: (loss, grads) with zero gradients for the variance head and sigma_raw
    """
    rec = forward(model, x, mode=mode, seed=seed, rng=rng)
    y = as_soft_labels(labels, model.class_count)
    b = rec.logits.shape[0]
    if y.shape[0] != b:
        raise ShapeError(f"{y.shape[0]} label rows for a batch of {b}")
    logp = log_softmax(rec.logits, axis=1)
    prob = np.exp(logp)
    neg_entropy = np.sum(prob * logp, axis=1)
    loss = float(-np.mean(np.sum(y * logp, axis=1)) + entropy_weight * np.mean(neg_entropy))
    dlogits = (prob - y) / b
    if entropy_weight:
        dlogits = dlogits + entropy_weight * prob * (logp - neg_entropy[:, None]) / b
    return loss, backward(model, rec, dlogits)


def sgd_step(model: ModelState, grads: Dict[str, np.ndarray], lr: float, momentum: float = 0.9) -> ModelState:
    """
    SGD with momentum: buffer <- momentum * buffer + grad; param <- param - lr * buffer

    Only tensors present in grads are updated, so callers freeze a tensor
    by leaving it out.

    Raises:
        TrainingDivergenceError: if any gradient is non-finite

    Returns:
        ModelState: updated copy
    """
    for name, g in grads.items():
        if name not in model.params:
            raise ShapeError(f"gradient for unknown parameter {name!r}")
        if g.shape != model.params[name].shape:
            raise ShapeError(f"gradient {name} has shape {g.shape}, parameter has {model.params[name].shape}")
        if not np.all(np.isfinite(g)):
            raise TrainingDivergenceError(
                f"non-finite gradient for {name}", diagnostics={"parameter": name, "lr": lr}
            )
    new = model.copy()
    for name, g in grads.items():
        buf = momentum * new.buffers[name] + g
        new.buffers[name] = buf
        new.params[name] = new.params[name] - lr * buf
    return new


def save_checkpoint(model: ModelState, path: str) -> None:
    """
    Dump every tensor and momentum buffer to a versioned .npz file

    Args:
        model (ModelState): network to save
        path (str): destination file
    """
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise ReportIOError("directory does not exist", directory)
    arrays = {f"param_{k}": v for k, v in model.params.items()}
    arrays.update({f"buffer_{k}": v for k, v in model.buffers.items()})
    with open(path, "wb") as f:
        np.savez(
            f,
            format_version=np.array(CHECKPOINT_VERSION),
            dropout_rate=np.array(model.dropout_rate),
            **arrays,
        )


def load_checkpoint(path: str) -> ModelState:
    """
    Load a checkpoint written by save_checkpoint

    Raises:
        ReportIOError: unreadable file or unsupported version
    """
    try:
        with np.load(path) as data:
            version = int(data["format_version"])
            if version != CHECKPOINT_VERSION:
                raise ReportIOError(f"unsupported checkpoint version {version}", path)
            params = {k: data[f"param_{k}"].copy() for k in PARAM_NAMES}
            buffers = {k: data[f"buffer_{k}"].copy() for k in PARAM_NAMES}
            dropout_rate = float(data["dropout_rate"])
    except (OSError, KeyError, ValueError) as e:
        raise ReportIOError(f"cannot read checkpoint ({e})", path)
    return ModelState(params=params, buffers=buffers, dropout_rate=dropout_rate)


def derive_seed(*keys: int) -> int:
    """Independent integer seed for a (seed, stream, ...) key."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches covering range(n) once; the last batch may be short."""
    order = rng.permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def predict_proba(models, x: np.ndarray) -> np.ndarray:
    """Mean deterministic softmax of one or more networks."""
    if isinstance(models, ModelState):
        models = [models]
    probs = [np.exp(log_softmax(forward(m, x, mode="deterministic").logits, axis=1)) for m in models]
    return np.mean(probs, axis=0)


def per_sample_ce(model: ModelState, x: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """Deterministic cross-entropy of every sample against its hard label."""
    logp = log_softmax(forward(model, x, mode="deterministic").logits, axis=1)
    return -logp[np.arange(len(labels)), np.asarray(labels, dtype=np.int64)]
