#!/usr/bin/python3
# -*- coding: utf-8 -*-
"""
Seed sweeps and cross-seed summaries.
"""

from dataclasses import replace
from multiprocessing.pool import ThreadPool as Pool
from typing import Callable, Dict, Iterable, List, Optional

import numpy as np

from ulc.config import UlcConfig
from ulc.correction_loop import run_ulc
from ulc.dataset import Dataset
from ulc.errors import ConfigurationError
from ulc.evaluation import Report, run_baseline_ce
from ulc.tools import Tools

METHODS = {"ulc", "ce"}


def make_runner(
    train: Dataset,
    test: Dataset,
    config: UlcConfig,
    method: str = "ulc",
    ablations: Iterable[str] = (),
) -> Callable[[int], Report]:
    """
    Bind one training setup to a function of the seed

    Args:
        train (Dataset): training set shared by every seed
        test (Dataset): test set shared by every seed
        config (UlcConfig): base configuration, its seed is replaced per run
        method (str): "ulc" or "ce"
        ablations: preset names already applied to config

    Returns:
        callable: seed -> Report
    """
    if method not in METHODS:
        raise ConfigurationError(f"method must be in {sorted(METHODS)}, got {method!r}")
    ablations = list(ablations)

    def run(seed: int) -> Report:
        seeded = replace(config, seed=seed)
        if method == "ce":
            return run_baseline_ce(train, test, seeded)
        return run_ulc(train, test, seeded, ablations=ablations).report

    return run


def run_seed_sweep(run: Callable[[int], Report], seeds: Iterable[int], jobs: int = 1) -> List[Report]:
    """
    Run one setup for several seeds

    Seeds share no mutable state, so with jobs > 1 they run in a thread
    pool. Reports come back in seed order either way.

    Args:
        run (callable): seed -> Report, e.g. from make_runner
        seeds: seeds to run
        jobs (int): concurrent runs

    Returns:
        list: one Report per seed
    """
    seeds = list(seeds)
    if jobs < 1:
        raise ConfigurationError(f"jobs must be >= 1, got {jobs}")
    if not seeds:
        return []
    Tools.log(f"running {len(seeds)} seed(s) with {min(jobs, len(seeds))} job(s)")
    if jobs == 1 or len(seeds) == 1:
        return [run(s) for s in seeds]
    with Pool(min(jobs, len(seeds))) as p:  # Exec in ThreadPool
        return p.map(run, seeds)


def _run_key(report: Report) -> str:
    return "+".join([report.method] + sorted(report.ablations))


def _stats(values: List[Optional[float]]) -> Dict[str, Optional[float]]:
    vals = [v for v in values if v is not None]
    if not vals:
        return {"mean": None, "std": None}
    return {"mean": float(np.mean(vals)), "std": float(np.std(vals))}


def summarize(reports: Iterable[Report]) -> List[dict]:
    """
    Mean and standard deviation of best/last accuracy per method and ablation set

    Returns:
        list: one summary dict per run key, sorted by key
    """
    groups: Dict[str, List[Report]] = {}
    for r in reports:
        groups.setdefault(_run_key(r), []).append(r)
    out = []
    for key in sorted(groups):
        runs = sorted(groups[key], key=lambda r: r.seed)
        out.append(
            {
                "run": key,
                "seeds": [r.seed for r in runs],
                "best_acc": _stats([r.best_acc for r in runs]),
                "last_acc": _stats([r.last_acc for r in runs]),
                "best_last_gap": _stats([r.best_acc - r.last_acc for r in runs]),
                "final_auc": _stats([r.final_auc for r in runs]),
                "minority_acc": _stats([r.minority_acc for r in runs]),
                "majority_acc": _stats([r.majority_acc for r in runs]),
            }
        )
    return out
