#!/usr/bin/python3
# -*- coding: utf-8 -*-
"""
Configuration for the ULC training loop.

This module centralizes:
- MixMatch-lite hyper-parameters
- the full training configuration echoed into every report
- the named ablation presets that switch off one component at a time

Presets are plain override maps applied on top of a base configuration so
that every ablation row shares all other hyper-parameters with full ULC.
"""

from dataclasses import asdict, dataclass, field, replace
from typing import Dict, Iterable, List, Optional

from ulc.errors import ConfigurationError


@dataclass(frozen=True)
class MixMatchConfig:
    """Hyper-parameters of the feature-space MixMatch-lite step."""

    alpha: float = 4.0  # Beta(alpha, alpha) mixing parameter
    temperature: float = 0.5  # sharpening temperature
    augmentations: int = 2  # stochastic forward passes used to guess labels

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigurationError(f"mixmatch alpha must be > 0, got {self.alpha}")
        if self.temperature <= 0:
            raise ConfigurationError(f"sharpening temperature must be > 0, got {self.temperature}")
        if self.augmentations < 1:
            raise ConfigurationError(f"mixmatch augmentations must be >= 1, got {self.augmentations}")


@dataclass(frozen=True)
class UlcConfig:
    """Configuration of one ULC (or baseline) training run."""

    # Schedule
    warmup_epochs: int = 10
    max_epochs: int = 120
    batch_size: int = 64
    lr: float = 0.02
    momentum: float = 0.9

    # Semi-supervised objective
    lambda_u: float = 25.0
    lambda_u_rampup: int = 16  # epochs after warm-up; 0 applies lambda_u at once
    uniform_prior_reg: float = 0.0
    mixmatch: MixMatchConfig = field(default_factory=MixMatchConfig)

    # Uncertainty
    mc_passes: int = 10
    aleatoric_samples: int = 10

    # Noise modeling
    r: float = 0.1
    tau: float = 0.5
    gmm_tol: float = 1e-4
    gmm_max_iter: int = 100
    min_class_size: int = 10

    # Warm-up
    entropy_weight: float = 1.0

    # Network
    hidden_width: int = 64
    dropout: float = 0.3

    # Component switches (ablations)
    class_specific: bool = True
    aleatoric: bool = True

    seed: int = 0

    def __post_init__(self):
        for name in ("warmup_epochs", "max_epochs", "batch_size", "mc_passes", "aleatoric_samples",
                     "gmm_max_iter", "min_class_size", "hidden_width"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.warmup_epochs > self.max_epochs:
            raise ConfigurationError(
                f"warmup_epochs ({self.warmup_epochs}) cannot exceed max_epochs ({self.max_epochs})"
            )
        if self.lr < 0:
            raise ConfigurationError(f"lr must be >= 0, got {self.lr}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigurationError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.lambda_u < 0:
            raise ConfigurationError(f"lambda_u must be >= 0, got {self.lambda_u}")
        if self.lambda_u_rampup < 0:
            raise ConfigurationError(f"lambda_u_rampup must be >= 0, got {self.lambda_u_rampup}")
        if self.uniform_prior_reg < 0:
            raise ConfigurationError(f"uniform_prior_reg must be >= 0, got {self.uniform_prior_reg}")
        if not 0.0 <= self.r <= 1.0:
            raise ConfigurationError(f"uncertainty ratio r must be in [0, 1], got {self.r}")
        if not 0.0 < self.tau < 1.0:
            raise ConfigurationError(f"clean threshold tau must be in (0, 1), got {self.tau}")
        if self.gmm_tol <= 0:
            raise ConfigurationError(f"gmm_tol must be > 0, got {self.gmm_tol}")
        if self.entropy_weight < 0:
            raise ConfigurationError(f"entropy_weight must be >= 0, got {self.entropy_weight}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError(f"dropout must be in [0, 1), got {self.dropout}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UlcConfig":
        d = dict(d)
        mixmatch = d.pop("mixmatch", None)
        if isinstance(mixmatch, dict):
            d["mixmatch"] = MixMatchConfig(**mixmatch)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)


def tau_for_noise_rate(rate: float) -> float:
    """Clean-probability threshold: 0.6 for 90% noise and above, 0.5 otherwise."""
    return 0.6 if rate >= 0.9 else 0.5


@dataclass(frozen=True)
class AblationPreset:
    """A named set of config overrides."""

    name: str
    description: str
    overrides: Dict[str, object]


ABLATIONS = {
    "csm": AblationPreset(
        name="csm",
        description="ULC w/o CSM: one class-agnostic GMM over all losses",
        overrides={"class_specific": False},
    ),
    "eum": AblationPreset(
        name="eum",
        description="ULC w/o EUM: clean probability from the loss posterior alone (r = 0)",
        overrides={"r": 0.0},
    ),
    "aul": AblationPreset(
        name="aul",
        description="ULC w/o AUL: logit corruption variances clamped to 0",
        overrides={"aleatoric": False},
    ),
    "dividemix": AblationPreset(
        name="dividemix",
        description="Loss-only reduction: class-agnostic GMM, r = 0, no logit corruption",
        overrides={"class_specific": False, "r": 0.0, "aleatoric": False},
    ),
}


def get_ablation(name: str) -> Optional[AblationPreset]:
    """
    Get ablation preset by name.

    Args:
        name: preset identifier (e.g., "csm", "dividemix")

    Returns:
        AblationPreset or None if not found
    """
    return ABLATIONS.get(name)


def get_ablation_names() -> List[str]:
    """Get all preset names."""
    return list(ABLATIONS.keys())


def apply_ablations(config: UlcConfig, names: Iterable[str]) -> UlcConfig:
    """
    Apply named presets on top of a configuration.

    Args:
        config: base configuration
        names: preset identifiers, applied in order

    Raises:
        ConfigurationError: for an unknown preset

    Returns:
        New UlcConfig with the overrides applied
    """
    overrides: Dict[str, object] = {}
    for name in names:
        preset = get_ablation(name)
        if preset is None:
            raise ConfigurationError(f"unknown ablation {name!r}; choose from {get_ablation_names()}")
        overrides.update(preset.overrides)
    return replace(config, **overrides) if overrides else config
