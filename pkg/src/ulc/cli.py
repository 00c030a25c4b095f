#!/usr/bin/python3
# -*- coding: utf-8 -*-
"""
Command line entry point: generate, train, baseline, report.

Machine output (JSON lines, error objects) goes to stdout, progress and
warnings to stderr.
"""

import functools
import json
import os
import sys
from dataclasses import replace

import click

from ulc import dataset as ds
from ulc.config import MixMatchConfig, UlcConfig, apply_ablations, get_ablation_names, tau_for_noise_rate
from ulc.correction_loop import run_ulc
from ulc.errors import ConfigurationError, ReportIOError, UlcError
from ulc.evaluation import REPORT_FORMATS, emit_report, read_report, run_baseline_ce
from ulc.experiments import make_runner, run_seed_sweep, summarize
from ulc.network import save_checkpoint
from ulc.tools import ErrJson, Tools

NOISE_CHOICES = ("sym", "asym", "none")


def handle_errors(f):
    """Turn package errors into error JSON on stdout and exit code 2."""

    @functools.wraps(f)
    def wrapper(*args, **kwargs):
        try:
            return f(*args, **kwargs)
        except (UlcError, ValueError) as e:
            Tools.log(f"Error: {e}")
            err = ErrJson()
            err.add_error(e)
            err.write_json()
            click.get_current_context().exit(2)

    return wrapper


def _write_line(obj: dict) -> None:
    sys.stdout.write(json.dumps(obj, sort_keys=True))
    sys.stdout.write("\n")


def config_options(f):
    """Every UlcConfig field as a flag."""
    defaults = UlcConfig()
    options = [
        click.option("--warmup-epochs", type=int, default=defaults.warmup_epochs, show_default=True),
        click.option("--max-epochs", type=int, default=defaults.max_epochs, show_default=True),
        click.option("--batch-size", type=int, default=defaults.batch_size, show_default=True),
        click.option("--lr", type=float, default=defaults.lr, show_default=True),
        click.option("--momentum", type=float, default=defaults.momentum, show_default=True),
        click.option("--lambda-u", type=float, default=defaults.lambda_u, show_default=True),
        click.option("--lambda-u-rampup", type=int, default=defaults.lambda_u_rampup, show_default=True),
        click.option("--uniform-prior-reg", type=float, default=defaults.uniform_prior_reg, show_default=True),
        click.option("--mixmatch-alpha", type=float, default=defaults.mixmatch.alpha, show_default=True),
        click.option("--temperature", type=float, default=defaults.mixmatch.temperature, show_default=True),
        click.option("--augmentations", type=int, default=defaults.mixmatch.augmentations, show_default=True),
        click.option("--mc-passes", type=int, default=defaults.mc_passes, show_default=True),
        click.option("--aleatoric-samples", type=int, default=defaults.aleatoric_samples, show_default=True),
        click.option("--r", "r", type=float, default=defaults.r, show_default=True, help="Uncertainty ratio"),
        click.option("--tau", type=float, default=defaults.tau, show_default=True, help="Clean threshold"),
        click.option("--tau-auto", is_flag=True, help="0.6 at noise rate >= 0.9, else 0.5"),
        click.option("--gmm-tol", type=float, default=defaults.gmm_tol, show_default=True),
        click.option("--gmm-max-iter", type=int, default=defaults.gmm_max_iter, show_default=True),
        click.option("--min-class-size", type=int, default=defaults.min_class_size, show_default=True),
        click.option("--entropy-weight", type=float, default=defaults.entropy_weight, show_default=True),
        click.option("--hidden-width", type=int, default=defaults.hidden_width, show_default=True),
        click.option("--dropout", type=float, default=defaults.dropout, show_default=True),
        click.option("--seed", type=int, default=defaults.seed, show_default=True),
        click.option("--seeds", type=str, default=None, help="Comma separated seeds for a sweep"),
        click.option("--jobs", type=int, default=1, show_default=True, help="Concurrent seeds"),
        click.option("--data", "data_path", type=str, required=True, help="Training dataset file"),
        click.option("--test", "test_path", type=str, required=True, help="Test dataset file"),
        click.option("--out", type=str, default=None, help="Report file"),
        click.option("--format", "fmt", type=click.Choice(sorted(REPORT_FORMATS)), default="json", show_default=True),
        click.option("--timing", is_flag=True, help="Include wall-clock seconds in the report"),
    ]
    for option in reversed(options):
        f = option(f)
    return f


def build_config(opts: dict, noise_rate: float) -> UlcConfig:
    tau = tau_for_noise_rate(noise_rate) if opts.pop("tau_auto") else opts.pop("tau")
    opts.pop("tau", None)
    mixmatch = MixMatchConfig(
        alpha=opts.pop("mixmatch_alpha"),
        temperature=opts.pop("temperature"),
        augmentations=opts.pop("augmentations"),
    )
    return UlcConfig(tau=tau, mixmatch=mixmatch, seed=Tools.seedFromEnv(opts.pop("seed")), **opts)


def _parse_seeds(text, seed: int):
    if not text or Tools.getEnvInt("ULC_SEED") is not None:
        return [seed]
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise ConfigurationError(f"seeds must be comma separated integers, got {text!r}")


def _seed_path(path: str, seed: int, many: bool) -> str:
    if not many:
        return path
    stem, ext = os.path.splitext(path)
    return f"{stem}_seed{seed}{ext}"


def _split_run_options(kwargs: dict):
    run = {k: kwargs.pop(k) for k in ("seeds", "jobs", "data_path", "test_path", "out", "fmt", "timing")}
    return run, kwargs


def _emit(reports, run: dict) -> None:
    many = len(reports) > 1
    for report in reports:
        for e in report.epochs:
            _write_line({"seed": report.seed, **e.to_dict()})
        if run["out"]:
            emit_report(report, _seed_path(run["out"], report.seed, many), run["fmt"], run["timing"])
    if many:
        for row in summarize(reports):
            _write_line({"summary": row})


@click.group()
@click.version_option(package_name="ulc-label-correction")
def cli():
    """Uncertainty-aware label correction on synthetic noisy, imbalanced data."""


@cli.command()
@click.option("--classes", type=int, default=10, show_default=True)
@click.option("--dim", type=int, default=8, show_default=True)
@click.option("--per-class", type=int, default=500, show_default=True)
@click.option("--test-per-class", type=int, default=200, show_default=True)
@click.option("--imbalance-ratio", type=float, default=1.0, show_default=True)
@click.option("--noise", type=click.Choice(NOISE_CHOICES), default="sym", show_default=True)
@click.option("--noise-rate", type=float, default=0.0, show_default=True)
@click.option("--noise-convention", type=click.Choice(sorted(ds.NOISE_CONVENTIONS)), default="exclude-self")
@click.option("--center-spread", type=float, default=1.5, show_default=True)
@click.option("--within-std", type=float, default=1.0, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", type=str, required=True, help="Training dataset file")
@click.option("--test-out", type=str, default=None, help="Balanced clean test dataset file")
@handle_errors
def generate(
    classes, dim, per_class, test_per_class, imbalance_ratio, noise, noise_rate, noise_convention,
    center_spread, within_std, seed, out, test_out,
):
    """Write a synthetic training set (and optionally its test set)."""
    seed = Tools.seedFromEnv(seed)
    train, test = ds.make_experiment(
        classes=classes,
        dim=dim,
        per_class=per_class,
        test_per_class=test_per_class,
        imbalance_ratio=imbalance_ratio,
        noise=noise,
        noise_rate=noise_rate,
        seed=seed,
        convention=noise_convention,
        center_spread=center_spread,
        within_std=within_std,
    )
    ds.save(train, out)
    if test_out:
        ds.save(test, test_out)
    _write_line(
        {
            "train": out,
            "test": test_out,
            "size": train.size,
            "class_counts": train.class_counts().tolist(),
            "noisy_fraction": float(train.is_noisy.mean()),
            "minority_classes": list(train.meta.minority_classes),
        }
    )


@cli.command()
@config_options
@click.option("--ablate", multiple=True, type=click.Choice(get_ablation_names()), help="Disable a component")
@click.option("--dump-diagnostics", type=str, default=None, help="Directory for per-epoch per-sample CSVs")
@click.option("--checkpoint", type=str, default=None, help="Directory for final network checkpoints")
@handle_errors
def train(ablate, dump_diagnostics, checkpoint, **kwargs):
    """Train with uncertainty-aware label correction."""
    run, opts = _split_run_options(kwargs)
    train_set, test_set = ds.load(run["data_path"]), ds.load(run["test_path"])
    config = apply_ablations(build_config(opts, train_set.meta.rate), ablate)
    for directory in (dump_diagnostics, checkpoint):
        if directory is not None and not os.path.isdir(directory):
            raise ReportIOError("directory does not exist", directory)
    seeds = _parse_seeds(run["seeds"], config.seed)
    many = len(seeds) > 1

    def run_one(seed: int):
        diagnostics = dump_diagnostics
        if diagnostics is not None and many:
            diagnostics = os.path.join(diagnostics, f"seed{seed}")
            os.makedirs(diagnostics, exist_ok=True)
        result = run_ulc(train_set, test_set, replace(config, seed=seed), ablations=ablate, diagnostics_dir=diagnostics)
        if checkpoint is not None:
            for k, net in enumerate(result.state.networks):
                save_checkpoint(net, os.path.join(checkpoint, _seed_path(f"net{k + 1}.npz", seed, many)))
        return result.report

    _emit(run_seed_sweep(run_one, seeds, run["jobs"]), run)


@cli.command()
@config_options
@handle_errors
def baseline(**kwargs):
    """Train one network with plain cross-entropy on the observed labels."""
    run, opts = _split_run_options(kwargs)
    train_set, test_set = ds.load(run["data_path"]), ds.load(run["test_path"])
    config = build_config(opts, train_set.meta.rate)
    seeds = _parse_seeds(run["seeds"], config.seed)
    reports = run_seed_sweep(make_runner(train_set, test_set, config, method="ce"), seeds, run["jobs"])
    _emit(reports, run)


@cli.command()
@click.argument("reports", nargs=-1, required=True)
@click.option("--out", type=str, default=None, help="Write the summary JSON here as well")
@handle_errors
def report(reports, out):
    """Aggregate JSON reports into mean/std of best and last accuracy."""
    rows = summarize([read_report(path) for path in reports])
    for row in rows:
        _write_line({"summary": row})
    if out:
        directory = os.path.dirname(os.path.abspath(out))
        if not os.path.isdir(directory):
            raise ReportIOError("directory does not exist", directory)
        with open(out, "w", encoding="utf-8") as f:
            json.dump(rows, f, indent=2, sort_keys=True)
            f.write("\n")


def main() -> None:
    cli(prog_name="ulc")


if __name__ == "__main__":
    main()
