"""Command-line entry point (``crnas``)."""
from __future__ import annotations

import functools
import json
import logging
import sys
from pathlib import Path

import click
import numpy as np
import torch
import yaml

from . import config as config_mod, genome as gn
from .config import ConfigError, RunConfig
from .evaluation import (MergePlan, build_merge_plan, correlation_matrix, evaluate_suite, run_suite,
                         write_matrix_csv)
from .pipeline import StageError, clip_ra, load_data, retrain as retrain_genome, run_pipeline
from .report import write_report
from .search import run as run_search, write_archive, write_trace
from .supernet import load_supernet, save_supernet, train_supernet
from .surrogate import SurrogateModel, fit_low_fidelity


def _load_config(config_path, seed, out, **sections) -> RunConfig:
    raw = {}
    if config_path:
        raw = yaml.safe_load(Path(config_path).read_text()) or {}
    for section, values in sections.items():
        values = {k: v for k, v in values.items() if v is not None}
        if values:
            raw[section] = {**(raw.get(section) or {}), **values}
    return config_mod.from_dict(raw, seed, out)


def stage_command(name: str):
    """Map any failure to a nonzero exit that names the stage."""

    def wrap(fn):
        @functools.wraps(fn)
        def inner(*args, **kwargs):
            workers = kwargs.get("workers") or 1
            torch.set_num_threads(max(1, workers))
            try:
                return fn(*args, **kwargs)
            except StageError as exc:
                click.echo(f"error: stage {exc.stage} failed: {exc.message}", err=True)
                sys.exit(2)
            except (ConfigError, FileNotFoundError) as exc:
                click.echo(f"error: stage {name} failed: {exc}", err=True)
                sys.exit(2)
            except Exception as exc:  # noqa: BLE001
                click.echo(f"error: stage {name} failed: {type(exc).__name__}: {exc}", err=True)
                sys.exit(1)

        return inner

    return wrap


def common(fn):
    fn = click.option("--workers", type=int, default=1, show_default=True, help="CPU threads to use.")(fn)
    fn = click.option("--out", type=click.Path(), default=None, help="Output file or directory.")(fn)
    fn = click.option("--seed", type=int, default=None, help="Global seed (overrides the config).")(fn)
    fn = click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), default=None,
                      help="YAML run configuration.")(fn)
    return fn


def _out(out, default: str) -> Path:
    p = Path(out or default)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p


def _plan(path, names) -> MergePlan:
    return MergePlan.load(path) if path else MergePlan.identity(names)


@click.group()
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug).")
def main(verbose: int):
    """Robustness-aware architecture search at desk scale."""
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(message)s")


@main.command("train-supernet")
@common
@click.option("--data", type=click.Path(exists=True, file_okay=False), default=None,
              help="Directory of CIFAR binary batches; synthetic data when omitted.")
@click.option("--epochs", type=int, default=None)
@stage_command("train-supernet")
def train_supernet_cmd(config_path, seed, out, workers, data, epochs):
    """Train the weight-sharing supernet and write its checkpoint."""
    data_section = {"source": "cifar", "path": data} if data else {}
    cfg = _load_config(config_path, seed, None, data=data_section, supernet={"epochs": epochs})
    train, _ = load_data(cfg)
    s = cfg.supernet
    net, history = train_supernet(train, s.train(cfg.stage_seed("train-supernet")),
                                  s.net(train.num_classes, train.images.shape[1]))
    path = _out(out, "supernet.ckpt")
    save_supernet(path, net, {"config_hash": cfg.hash(), "history": history})
    click.echo(f"wrote {path} (final loss {history[-1]:.4f})")


@main.command("sample-correlate")
@common
@click.option("--supernet", "supernet_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--samples", type=int, default=None, help="Number of sampled sub-networks.")
@click.option("--tau", type=float, default=None, help="Merge threshold.")
@stage_command("sample-correlate")
def sample_correlate_cmd(config_path, seed, out, workers, supernet_path, samples, tau):
    """Correlate the evaluations over sampled sub-networks and build a merge plan."""
    cfg = _load_config(config_path, seed, None, merge={"samples": samples, "tau": tau})
    net, _ = load_supernet(supernet_path)
    _, test = load_data(cfg)
    suite = cfg.suite()
    names = [s.kind for s in suite]
    rng = np.random.default_rng(cfg.stage_seed("sample-correlate"))
    genomes = [gn.random_genome(rng) for _ in range(cfg.merge.samples)]
    reports = [run_suite(net, g, suite, test, cfg.low) for g in genomes]
    acc = np.array([r.accuracies for r in reports])
    corr = correlation_matrix(acc, cfg.merge.method)
    plan = build_merge_plan(corr, cfg.merge.tau, acc, names, cfg.merge.linkage)
    d = Path(out or "analysis")
    d.mkdir(parents=True, exist_ok=True)
    write_matrix_csv(d / "correlation.csv", corr, names)
    payload = {**plan.to_dict(), "config_hash": cfg.hash()}
    (d / "plan.json").write_text(json.dumps(payload, indent=2) + "\n")
    times = {n: float(np.mean([r.wall_times[i] for r in reports])) for i, n in enumerate(names)}
    (d / "attack_times.json").write_text(json.dumps(times, indent=2) + "\n")
    click.echo(f"wrote {d}/plan.json ({plan.n} evaluations merged into {plan.m})")


@main.command("fit-surrogate")
@common
@click.option("--supernet", "supernet_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--pairs", type=int, default=None, help="Low-fidelity training pairs.")
@stage_command("fit-surrogate")
def fit_surrogate_cmd(config_path, seed, out, workers, supernet_path, plan_path, pairs):
    """Fit the surrogate on low-fidelity evaluations of random genomes."""
    cfg = _load_config(config_path, seed, None, surrogate={"pairs": pairs})
    net, _ = load_supernet(supernet_path)
    _, test = load_data(cfg)
    suite = cfg.suite()
    plan = _plan(plan_path, [s.kind for s in suite])
    rng = np.random.default_rng(cfg.stage_seed("fit-surrogate"))
    genomes = list(dict.fromkeys(gn.random_genome(rng) for _ in range(cfg.surrogate.pairs)))
    data = [(g, clip_ra(evaluate_suite(net, g, plan, test, cfg.low, suite).ra)) for g in genomes]
    model = fit_low_fidelity(data, cfg.surrogate.epochs, cfg.surrogate.lr,
                             seed=cfg.stage_seed("fit-surrogate") % 2**31, hidden=cfg.surrogate.hidden)
    path = _out(out, "surrogate.ckpt")
    model.save(path, {"config_hash": cfg.hash()})
    click.echo(f"wrote {path} (training mse {model.history[-1]['mse']:.3e})")


@main.command("search")
@common
@click.option("--supernet", "supernet_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--surrogate", "surrogate_path", type=click.Path(exists=True, dir_okay=False), default=None,
              help="Fitted surrogate; one is fitted on low-fidelity data when omitted.")
@stage_command("search")
def search_cmd(config_path, seed, out, workers, supernet_path, plan_path, surrogate_path):
    """Run the surrogate-assisted evolutionary search."""
    cfg = _load_config(config_path, seed, None)
    net, _ = load_supernet(supernet_path)
    _, test = load_data(cfg)
    suite = cfg.suite()
    plan = _plan(plan_path, [s.kind for s in suite])
    if surrogate_path:
        surrogate, _ = SurrogateModel.load(surrogate_path)
    else:
        rng = np.random.default_rng(cfg.stage_seed("fit-surrogate"))
        genomes = list(dict.fromkeys(gn.random_genome(rng) for _ in range(cfg.surrogate.pairs)))
        data = [(g, clip_ra(evaluate_suite(net, g, plan, test, cfg.low, suite).ra)) for g in genomes]
        surrogate = fit_low_fidelity(data, cfg.surrogate.epochs, cfg.surrogate.lr,
                                     seed=cfg.stage_seed("fit-surrogate") % 2**31, hidden=cfg.surrogate.hidden)
    result = run_search(cfg.evo(), lambda g: clip_ra(evaluate_suite(net, g, plan, test, cfg.high, suite).ra),
                        surrogate, plan=plan)
    d = Path(out or "search")
    d.mkdir(parents=True, exist_ok=True)
    write_archive(d / "archive.jsonl", result.archive)
    write_trace(d / "trace.csv", result.trace)
    (d / "best.txt").write_text(f"{gn.to_text(result.best)}\n{result.best_ra:.6f}\n")
    click.echo(f"best RA {result.best_ra:.4f}: {gn.to_text(result.best)}")


@main.command("evaluate")
@common
@click.option("--supernet", "supernet_path", type=click.Path(exists=True, dir_okay=False), required=True)
@click.option("--genome", "genome_text", required=True, help="32 comma-separated integers.")
@click.option("--plan", "plan_path", type=click.Path(exists=True, dir_okay=False), default=None)
@click.option("--fidelity", type=click.Choice(["low", "high"]), default="high", show_default=True)
@stage_command("evaluate")
def evaluate_cmd(config_path, seed, out, workers, supernet_path, genome_text, plan_path, fidelity):
    """Evaluate one sub-network of the supernet on the (merged) suite."""
    cfg = _load_config(config_path, seed, None)
    g = gn.parse(genome_text)
    net, _ = load_supernet(supernet_path)
    _, test = load_data(cfg)
    suite = cfg.suite()
    plan = _plan(plan_path, [s.kind for s in suite])
    report = evaluate_suite(net, g, plan, test, cfg.low if fidelity == "low" else cfg.high, suite)
    text = json.dumps(report.to_dict(), indent=2)
    if out:
        _out(out, out).write_text(text + "\n")
    click.echo(text)


@main.command("retrain")
@common
@click.option("--genome", "genome_text", required=True, help="32 comma-separated integers.")
@click.option("--epochs", type=int, default=None)
@stage_command("retrain")
def retrain_cmd(config_path, seed, out, workers, genome_text, epochs):
    """Train one architecture standalone and evaluate it on the full suite."""
    cfg = _load_config(config_path, seed, None, retrain={"epochs": epochs})
    rec = retrain_genome(cfg, gn.parse(genome_text), out or "retrain")
    click.echo(f"clean accuracy {rec['clean_accuracy']:.4f}; wrote {out or 'retrain'}/retrain.json")


@main.command("report")
@common
@click.option("--run", "run_dir", type=click.Path(exists=True, file_okay=False), required=True)
@stage_command("report")
def report_cmd(config_path, seed, out, workers, run_dir):
    """Render figures and the summary for a run directory."""
    cfg = _load_config(config_path, 0 if seed is None else seed, None)
    plan = MergePlan.from_dict(json.loads((Path(run_dir) / "plan.json").read_text()))
    summary = write_report(run_dir, cfg.suite(), plan)
    click.echo(json.dumps({k: summary[k] for k in ("n", "m", "figures")}))


@main.command("run-all")
@common
@stage_command("run-all")
def run_all_cmd(config_path, seed, out, workers):
    """Run every stage in order, reusing valid checkpoints in the run directory."""
    cfg = _load_config(config_path, seed, out)
    run_dir = run_pipeline(cfg, workers=workers)
    best = (run_dir / "best.txt").read_text().split()
    click.echo(f"run directory {run_dir}; best RA {best[1]}: {best[0]}")


if __name__ == "__main__":
    main()
