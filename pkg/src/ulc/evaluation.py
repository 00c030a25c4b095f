#!/usr/bin/python3
# -*- coding: utf-8 -*-
"""
Metrics, reports and the plain cross-entropy baseline.
"""

import csv
import json
import os
from dataclasses import dataclass, field, fields
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from ulc.config import UlcConfig
from ulc.dataset import Dataset
from ulc.errors import ContractError, ParseError, ReportIOError, TrainingDivergenceError, UndefinedMetricError
from ulc.network import ce_loss_and_grad, derive_seed, init_model, minibatches, per_sample_ce, predict_proba, sgd_step
from ulc.tools import Tools

NOISE_MODELS = ("cam", "csm", "eucs")
NOISE_GROUPS = ("all", "minority", "majority")
REPORT_FORMATS = {"json", "csv"}
SUMMARY_SUFFIX = ".summary.json"

STREAM_BASELINE_INIT = 20
STREAM_BASELINE_BATCH = 21
STREAM_BASELINE_DROPOUT = 22


def auc(scores: Sequence[float], positives: Sequence[bool]) -> float:
    """
    Area under the ROC curve from the Mann-Whitney rank statistic

    Ties get the average rank, so an all-tied score vector gives exactly 0.5.

    Args:
        scores (Sequence[float]): higher means "more likely positive"
        positives (Sequence[bool]): ground truth

    Raises:
        UndefinedMetricError: when only one class is present

    Returns:
        float: AUC in [0, 1]
    """
    scores = np.asarray(scores, dtype=np.float64)
    pos = np.asarray(positives, dtype=bool)
    if scores.shape != pos.shape:
        raise ContractError(f"{scores.size} scores for {pos.size} labels")
    n_pos = int(pos.sum())
    n_neg = pos.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both positive and negative samples")
    ranks = rankdata(scores)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_or_none(scores, positives) -> Optional[float]:
    try:
        return auc(scores, positives)
    except UndefinedMetricError:
        return None


@dataclass(frozen=True)
class ClassAccuracy:
    """Per-class recall; None marks a class absent from the evaluated labels."""

    per_class: List[Optional[float]]
    overall: float
    minority: Optional[float]
    majority: Optional[float]


def per_class_accuracy(preds, truth, class_count: int, minority_classes=()) -> ClassAccuracy:
    """
    Per-class recall and minority/majority means

    Args:
        preds: predicted labels
        truth: true labels
        class_count (int): C
        minority_classes: class indices aggregated as "minority"; the rest are "majority"

    Returns:
        ClassAccuracy: missing classes are None and left out of the aggregates
    """
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise ContractError(f"{preds.size} predictions for {truth.size} labels")
    if truth.size and (truth.min() < 0 or truth.max() >= class_count):
        raise ContractError(f"labels outside [0, {class_count})")
    per_class: List[Optional[float]] = []
    for c in range(class_count):
        idx = truth == c
        per_class.append(float((preds[idx] == c).mean()) if idx.any() else None)
    minority = set(int(c) for c in minority_classes)

    def _mean(classes):
        vals = [per_class[c] for c in classes if per_class[c] is not None]
        return float(np.mean(vals)) if vals else None

    return ClassAccuracy(
        per_class=per_class,
        overall=float((preds == truth).mean()) if truth.size else 0.0,
        minority=_mean(sorted(minority)),
        majority=_mean([c for c in range(class_count) if c not in minority]),
    )


def compare_noise_models(
    scores: Dict[str, np.ndarray],
    is_noisy: np.ndarray,
    observed_labels: np.ndarray,
    minority_classes=(),
) -> Dict[str, Optional[float]]:
    """
    Clean/noisy AUC of each noise-modeling variant, overall and per class group

    Samples are grouped by their observed label. Clean samples are the positives.

    Returns:
        dict: keys like "eucs" and "csm_minority"; None where a group lacks
            clean or noisy samples
    """
    clean = ~np.asarray(is_noisy, dtype=bool)
    observed = np.asarray(observed_labels)
    minority = np.isin(observed, list(minority_classes))
    groups = {"all": np.ones_like(clean), "minority": minority, "majority": ~minority}
    out: Dict[str, Optional[float]] = {}
    for name in NOISE_MODELS:
        for group in NOISE_GROUPS:
            key = name if group == "all" else f"{name}_{group}"
            idx = groups[group]
            out[key] = auc_or_none(np.asarray(scores[name])[idx], clean[idx]) if idx.any() else None
    return out


def noise_auc_keys() -> List[str]:
    return [n if g == "all" else f"{n}_{g}" for n in NOISE_MODELS for g in NOISE_GROUPS]


@dataclass
class EpochRecord:
    """Metrics of one training epoch."""

    epoch: int
    phase: str  # "warmup", "ssl" or "ce"
    test_acc: float
    minority_acc: Optional[float] = None
    majority_acc: Optional[float] = None
    per_class_acc: List[Optional[float]] = field(default_factory=list)
    auc: Optional[float] = None
    labeled_fraction: Optional[float] = None
    train_loss: Optional[float] = None
    noise_auc: Dict[str, Optional[float]] = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "noise_auc"}
        d["noise_auc"] = {k: self.noise_auc.get(k) for k in noise_auc_keys()} if self.noise_auc else {}
        return d

    def to_row(self) -> dict:
        row = {f.name: getattr(self, f.name) for f in fields(self) if f.name != "noise_auc"}
        row["per_class_acc"] = ";".join("" if a is None else repr(a) for a in self.per_class_acc)
        for k in noise_auc_keys():
            row[f"auc_{k}"] = self.noise_auc.get(k)
        return row

    @classmethod
    def from_dict(cls, d: dict) -> "EpochRecord":
        return cls(**{f.name: d.get(f.name) for f in fields(cls) if f.name in d})


def csv_columns() -> List[str]:
    return [f.name for f in fields(EpochRecord) if f.name != "noise_auc"] + [f"auc_{k}" for k in noise_auc_keys()]


@dataclass
class Report:
    """Outcome of one training run."""

    method: str
    seed: int
    config: dict
    epochs: List[EpochRecord]
    per_class_acc: List[Optional[float]]
    minority_acc: Optional[float]
    majority_acc: Optional[float]
    final_auc: Optional[float] = None
    ablations: List[str] = field(default_factory=list)
    wall_clock_seconds: Optional[float] = None

    @property
    def best_acc(self) -> float:
        return max(e.test_acc for e in self.epochs)

    @property
    def last_acc(self) -> float:
        return self.epochs[-1].test_acc

    def to_dict(self, include_timing: bool = False) -> dict:
        d = {
            "method": self.method,
            "seed": self.seed,
            "ablations": list(self.ablations),
            "config": self.config,
            "best_acc": self.best_acc,
            "last_acc": self.last_acc,
            "final_auc": self.final_auc,
            "per_class_acc": list(self.per_class_acc),
            "minority_acc": self.minority_acc,
            "majority_acc": self.majority_acc,
            "epochs": [e.to_dict() for e in self.epochs],
        }
        if include_timing:
            d["wall_clock_seconds"] = self.wall_clock_seconds
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Report":
        try:
            return cls(
                method=d["method"],
                seed=int(d["seed"]),
                config=d["config"],
                epochs=[EpochRecord.from_dict(e) for e in d["epochs"]],
                per_class_acc=d["per_class_acc"],
                minority_acc=d.get("minority_acc"),
                majority_acc=d.get("majority_acc"),
                final_auc=d.get("final_auc"),
                ablations=d.get("ablations", []),
                wall_clock_seconds=d.get("wall_clock_seconds"),
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ParseError(f"malformed report ({e})", field=str(e))


def _check_directory(path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(directory):
        raise ReportIOError("directory does not exist", directory)


def emit_report(report: Report, path: str, fmt: str = "json", include_timing: bool = False) -> List[str]:
    """
    Write a report to disk

    "json" writes the full report. "csv" writes the per-epoch table to path
    and the JSON summary (everything but the epochs) next to it with a
    .summary.json suffix. Per-class accuracies share one CSV cell, separated
    by semicolons. Output is byte-identical for identical reports.

    Raises:
        ReportIOError: missing directory or failed write

    Returns:
        list: written file paths
    """
    if fmt not in REPORT_FORMATS:
        raise ReportIOError(f"unknown report format {fmt!r}", path)
    _check_directory(path)
    written = []
    try:
        if fmt == "json":
            with open(path, "w", encoding="utf-8") as f:
                json.dump(report.to_dict(include_timing), f, indent=2)
                f.write("\n")
            written.append(path)
        else:
            with open(path, "w", encoding="utf-8", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=csv_columns(), lineterminator="\n")
                writer.writeheader()
                for e in report.epochs:
                    writer.writerow({k: "" if v is None else v for k, v in e.to_row().items()})
            written.append(path)
            summary_path = os.path.splitext(path)[0] + SUMMARY_SUFFIX
            summary = report.to_dict(include_timing)
            summary.pop("epochs")
            with open(summary_path, "w", encoding="utf-8") as f:
                json.dump(summary, f, indent=2)
                f.write("\n")
            written.append(summary_path)
    except OSError as e:
        raise ReportIOError(f"cannot write report ({e.strerror})", path)
    return written


def read_report(path: str) -> Report:
    """Load a JSON report written by emit_report."""
    try:
        with open(path, encoding="utf-8") as f:
            data = json.load(f)
    except OSError as e:
        raise ReportIOError(f"cannot read report ({e.strerror})", path)
    except json.JSONDecodeError as e:
        raise ParseError(f"report is not valid JSON: {e.msg}", line=e.lineno)
    return Report.from_dict(data)


def evaluate(models, test: Dataset) -> ClassAccuracy:
    """Accuracy of the averaged deterministic prediction on a test set."""
    preds = predict_proba(models, test.features).argmax(axis=1)
    return per_class_accuracy(preds, test.true_labels, test.class_count, test.meta.minority_classes)


def run_baseline_ce(train: Dataset, test: Dataset, config: UlcConfig) -> Report:
    """
    Train one network with plain cross-entropy on the observed labels

    Args:
        train (Dataset): noisy training set
        test (Dataset): clean test set
        config (UlcConfig): schedule and network settings; max_epochs, lr,
            momentum, batch_size, hidden_width, dropout and seed are used

    Returns:
        Report: per-epoch test accuracy and small-loss AUC
    """
    start = Tools.clock()
    seed = config.seed
    model = init_model(
        train.dim, train.class_count, config.hidden_width, config.dropout, seed=derive_seed(seed, STREAM_BASELINE_INIT)
    )
    batch_rng = np.random.default_rng([seed, STREAM_BASELINE_BATCH])
    drop_rng = np.random.default_rng([seed, STREAM_BASELINE_DROPOUT])
    records = []
    acc = None
    for epoch in range(1, config.max_epochs + 1):
        losses = []
        for idx in minibatches(train.size, config.batch_size, batch_rng):
            loss, grads = ce_loss_and_grad(
                model, train.features[idx], train.noisy_labels[idx], mode="train", rng=drop_rng
            )
            if not np.isfinite(loss):
                raise_divergence(loss, epoch, "ce")
            for name in ("var_W", "var_b", "sigma_raw"):
                grads.pop(name)
            model = sgd_step(model, grads, config.lr, config.momentum)
            losses.append(loss)
        acc = evaluate(model, test)
        clean_score = -per_sample_ce(model, train.features, train.noisy_labels)
        records.append(
            EpochRecord(
                epoch=epoch,
                phase="ce",
                test_acc=acc.overall,
                minority_acc=acc.minority,
                majority_acc=acc.majority,
                per_class_acc=acc.per_class,
                auc=auc_or_none(clean_score, ~train.is_noisy),
                train_loss=float(np.mean(losses)),
            )
        )
        Tools.debug(f"ce epoch {epoch}: loss {records[-1].train_loss:.4f} test acc {acc.overall:.4f}")
    return Report(
        method="ce",
        seed=seed,
        config=config.to_dict(),
        epochs=records,
        per_class_acc=acc.per_class,
        minority_acc=acc.minority,
        majority_acc=acc.majority,
        final_auc=records[-1].auc,
        wall_clock_seconds=Tools.clock() - start,
    )


def raise_divergence(loss: float, epoch: int, phase: str, **extra) -> None:
    """Abort training on a non-finite loss, with the epoch context as diagnostics."""
    raise TrainingDivergenceError(
        f"non-finite loss in {phase} epoch {epoch}", diagnostics={"epoch": epoch, "phase": phase, "loss": loss, **extra}
    )
