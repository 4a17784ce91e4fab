"""End-to-end run orchestration with resumable, hash-checked stages.

Each stage writes its artifacts into the run directory followed by a marker
``stages/<name>.json`` holding the config hash and a digest of every output.
A stage is reused only when its marker matches the current config and its
outputs are unchanged; otherwise it and everything downstream is rerun.
"""
from __future__ import annotations

import hashlib
import json
import logging
import time
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import checkpoint, genome as gn
from .config import STAGES, RunConfig
from .data import Dataset, load_cifar_binary, synthetic_dataset
from .evaluation import (MergePlan, build_merge_plan, correlation_matrix, evaluate_suite, run_suite,
                         undefined_pairs, write_matrix_csv)
from .search import run as run_search, write_archive, write_trace
from .report import write_report
from .supernet import (Network, Supernet, TrainConfig, accuracy, load_supernet, save_supernet, train_model,
                       train_supernet)
from .surrogate import SurrogateModel, fit_low_fidelity

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class StageError(RuntimeError):
    """A stage failed; ``stage`` names it for the CLI exit message."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"{stage}: {message}")
        self.stage = stage
        self.message = message


class ConfigMismatch(StageError):
    pass


OUTPUTS = {
    "train-supernet": ["supernet.ckpt", "supernet_history.csv"],
    "sample-correlate": ["sampled_accuracy.csv", "correlation.csv", "plan.json", "attack_times.json"],
    "fit-surrogate": ["surrogate.ckpt", "low_fidelity.jsonl"],
    "search": ["archive.jsonl", "trace.csv", "evaluations.jsonl", "best.txt"],
    "report": ["summary.json", "evaluation_cost.csv"],
}


def load_data(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    d = cfg.data
    if d.source == "cifar":
        train = load_cifar_binary(d.path, "train", d.classes)
        test = load_cifar_binary(d.path, "test", d.classes)
        return train.subset(min(d.train_size, len(train))), test.subset(min(d.test_size, len(test)))
    train = synthetic_dataset(cfg.stage_seed("data-train"), d.classes, d.train_size, d.resolution, "train")
    test = synthetic_dataset(cfg.stage_seed("data-test"), d.classes, d.test_size, d.resolution, "test")
    return train, test


def clip_ra(ra: float) -> float:
    return float(min(max(ra, 0.0), 1.0))


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _jsonl(path: Path, records) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


class Run:
    """A run directory bound to one config."""

    def __init__(self, cfg: RunConfig, out: str | Path | None = None, workers: int = 1):
        self.cfg = cfg
        self.dir = Path(out or cfg.output)
        self.hash = cfg.hash()
        self.workers = max(1, int(workers))
        self._data: tuple[Dataset, Dataset] | None = None

    @property
    def data(self) -> tuple[Dataset, Dataset]:
        if self._data is None:
            self._data = load_data(self.cfg)
        return self._data

    def path(self, name: str) -> Path:
        return self.dir / name

    def marker(self, stage: str) -> Path:
        return self.dir / "stages" / f"{stage}.json"

    def is_done(self, stage: str) -> bool:
        m = self.marker(stage)
        if not m.exists():
            return False
        rec = json.loads(m.read_text())
        if rec["config_hash"] != self.hash:
            raise ConfigMismatch(stage, f"run directory {self.dir} was produced by config {rec['config_hash']}, "
                                        f"current config is {self.hash}")
        for name, digest in rec["outputs"].items():
            p = self.path(name)
            if not p.exists() or _digest(p) != digest:
                return False
        return True

    def check_hash(self) -> None:
        """Refuse to touch a run directory that belongs to a different config."""
        for stage in STAGES:
            self.is_done(stage)
        man = self.path(MANIFEST)
        if man.exists():
            rec = json.loads(man.read_text())
            if rec.get("config_hash") != self.hash:
                raise ConfigMismatch("manifest", f"{man} records config {rec.get('config_hash')}, "
                                                 f"current config is {self.hash}")

    def _finish(self, stage: str, seconds: float) -> None:
        outputs = {name: _digest(self.path(name)) for name in OUTPUTS[stage] if self.path(name).exists()}
        rec = {"stage": stage, "config_hash": self.hash, "seed": self.cfg.stage_seed(stage),
               "seconds": round(seconds, 3), "outputs": outputs}
        self.marker(stage).parent.mkdir(parents=True, exist_ok=True)
        self.marker(stage).write_text(json.dumps(rec, indent=2) + "\n")

    def write_manifest(self, statuses: dict[str, str]) -> None:
        rec = {"config_hash": self.hash, "seed": self.cfg.seed, "stage_seeds": self.cfg.stage_seeds(),
               "stages": statuses, "config": self.cfg.to_dict()}
        self.path(MANIFEST).write_text(json.dumps(rec, indent=2) + "\n")

    def stage(self, name: str, fn: Callable[[], None]) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        self.marker(name).unlink(missing_ok=True)
        torch.set_num_threads(self.workers)
        t0 = time.perf_counter()
        try:
            fn()
        except StageError:
            raise
        except Exception as exc:  # noqa: BLE001 - rewrap with the stage name for the CLI
            raise StageError(name, f"{type(exc).__name__}: {exc}") from exc
        self._finish(name, time.perf_counter() - t0)
        log.info("stage %s done in %.1fs", name, time.perf_counter() - t0)

    # stage bodies

    def train_supernet(self) -> None:
        train, _ = self.data
        s = self.cfg.supernet
        net_cfg = s.net(train.num_classes, train.images.shape[1])
        net, history = train_supernet(train, s.train(self.cfg.stage_seed("train-supernet")), net_cfg)
        save_supernet(self.path("supernet.ckpt"), net, {"config_hash": self.hash, "history": history})
        with open(self.path("supernet_history.csv"), "w") as fh:
            fh.write("epoch,loss\n")
            fh.writelines(f"{i},{v:.6f}\n" for i, v in enumerate(history))

    def load_supernet(self) -> Supernet:
        net, meta = load_supernet(self.path("supernet.ckpt"))
        self._expect(meta, "supernet.ckpt")
        return net

    def _expect(self, meta: dict, name: str) -> None:
        if meta.get("config_hash") != self.hash:
            raise ConfigMismatch(name, f"artifact was produced by config {meta.get('config_hash')}, "
                                       f"current config is {self.hash}")

    def sample_correlate(self) -> None:
        net = self.load_supernet()
        _, test = self.data
        suite = self.cfg.suite()
        names = [s.kind for s in suite]
        rng = np.random.default_rng(self.cfg.stage_seed("sample-correlate"))
        genomes = [gn.random_genome(rng) for _ in range(self.cfg.merge.samples)]
        reports = [run_suite(net, g, suite, test, self.cfg.low) for g in genomes]
        acc = np.array([r.accuracies for r in reports])
        with open(self.path("sampled_accuracy.csv"), "w") as fh:
            fh.write("genome," + ",".join(names) + "\n")
            for g, row in zip(genomes, acc):
                fh.write(f"\"{gn.to_text(g)}\"," + ",".join(f"{v:.6f}" for v in row) + "\n")
        corr = correlation_matrix(acc, self.cfg.merge.method)
        write_matrix_csv(self.path("correlation.csv"), corr, names)
        for i, j in undefined_pairs(corr):
            log.warning("correlation of %s and %s undefined; never merged", names[i], names[j])
        if self.cfg.merge.plan:
            plan = MergePlan.load(self.cfg.merge.plan)
        else:
            plan = build_merge_plan(corr, self.cfg.merge.tau, acc, names, self.cfg.merge.linkage)
        d = plan.to_dict()
        d["config_hash"] = self.hash
        self.path("plan.json").write_text(json.dumps(d, indent=2) + "\n")
        # timings vary between runs, so they live apart from the deterministic plan
        times = {n: float(np.mean([r.wall_times[i] for r in reports])) for i, n in enumerate(names)}
        self.path("attack_times.json").write_text(json.dumps(times, indent=2) + "\n")

    def load_plan(self) -> MergePlan:
        d = json.loads(self.path("plan.json").read_text())
        self._expect(d, "plan.json")
        return MergePlan.from_dict(d)

    def fit_surrogate(self) -> None:
        net = self.load_supernet()
        plan = self.load_plan()
        _, test = self.data
        suite = self.cfg.suite()
        s = self.cfg.surrogate
        rng = np.random.default_rng(self.cfg.stage_seed("fit-surrogate"))
        pairs, seen = [], set()
        while len(pairs) < s.pairs:
            g = gn.random_genome(rng)
            if g in seen:
                continue
            seen.add(g)
            pairs.append((g, clip_ra(evaluate_suite(net, g, plan, test, self.cfg.low, suite).ra)))
        _jsonl(self.path("low_fidelity.jsonl"), ({"genome": gn.to_text(g), "ra": ra} for g, ra in pairs))
        model = fit_low_fidelity(pairs, s.epochs, s.lr, seed=self.cfg.stage_seed("fit-surrogate") % 2**31,
                                 hidden=s.hidden)
        model.save(self.path("surrogate.ckpt"), {"config_hash": self.hash})

    def load_surrogate(self) -> SurrogateModel:
        model, meta = SurrogateModel.load(self.path("surrogate.ckpt"))
        self._expect(meta, "surrogate.ckpt")
        return model

    def search(self) -> None:
        net = self.load_supernet()
        plan = self.load_plan()
        surrogate = self.load_surrogate()
        _, test = self.data
        suite = self.cfg.suite()
        evaluations = []

        def evaluate(g):
            report = evaluate_suite(net, g, plan, test, self.cfg.high, suite)
            evaluations.append(report.to_dict())
            return clip_ra(report.ra)

        result = run_search(self.cfg.evo(), evaluate, surrogate, plan=plan)
        write_archive(self.path("archive.jsonl"), result.archive)
        write_trace(self.path("trace.csv"), result.trace)
        _jsonl(self.path("evaluations.jsonl"), evaluations)
        self.path("best.txt").write_text(f"{gn.to_text(result.best)}\n{result.best_ra:.6f}\n")
        surrogate.save(self.path("surrogate_final.ckpt"), {"config_hash": self.hash})

    def report(self) -> None:
        write_report(self.dir, self.cfg.suite(), self.load_plan())


def run_pipeline(cfg: RunConfig, out: str | Path | None = None, workers: int = 1,
                 only: tuple[str, ...] | None = None) -> Path:
    """Run (or resume) every stage in order; returns the run directory."""
    run = Run(cfg, out, workers)
    run.dir.mkdir(parents=True, exist_ok=True)
    run.check_hash()
    bodies = {"train-supernet": run.train_supernet, "sample-correlate": run.sample_correlate,
              "fit-surrogate": run.fit_surrogate, "search": run.search, "report": run.report}
    statuses = {s: "pending" for s in STAGES}
    stale = False
    for stage in STAGES:
        if only is not None and stage not in only:
            statuses[stage] = "skipped"
            continue
        if not stale and run.is_done(stage):
            statuses[stage] = "reused"
            continue
        stale = True
        run.write_manifest({**statuses, stage: "running"})
        run.stage(stage, bodies[stage])
        statuses[stage] = "done"
    run.write_manifest(statuses)
    return run.dir


def retrain(cfg: RunConfig, genome, out: str | Path) -> dict:
    """Train the genome standalone from scratch and evaluate it on the full suite."""
    train, test = load_data(cfg)
    torch.manual_seed(cfg.stage_seed("retrain"))
    model = Network(gn.check(genome), cfg.supernet.net(train.num_classes, train.images.shape[1]))
    r = cfg.retrain
    history = train_model(model, train, TrainConfig(epochs=r.epochs, batch_size=r.batch_size, lr=r.lr,
                                                    seed=cfg.stage_seed("retrain")))
    report = run_suite(model, None, cfg.suite(), test, cfg.high)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    rec = {"genome": gn.to_text(genome), "config_hash": cfg.hash(), "history": history,
           "clean_accuracy": accuracy(model, test), **report.to_dict()}
    (out / "retrain.json").write_text(json.dumps(rec, indent=2) + "\n")
    checkpoint.save(out / "retrained.ckpt", model.state_dict(), checkpoint.SUPERNET_MAGIC,
                    {"kind": "standalone", "genome": gn.to_text(genome), "config_hash": cfg.hash()})
    return rec
