"""Summary tables and figures for a finished run directory.

Figures are PNGs written next to the CSV/JSONL they are drawn from. Every
input is optional; a missing file just drops its figure.
"""
from __future__ import annotations

import csv
import json
from pathlib import Path
from typing import Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import genome as gn  # noqa: E402
from .attacks import AttackSpec  # noqa: E402
from .evaluation import MergePlan, kendall_tau, read_matrix_csv  # noqa: E402
from .search import read_archive  # noqa: E402
from .surrogate import SurrogateModel  # noqa: E402

STYLE = {
    "figure.figsize": (6.0, 4.0),
    "figure.dpi": 120,
    "font.size": 9,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "savefig.bbox": "tight",
}
ACCENT = "#2b6cb0"
MUTED = "#a0aec0"


def _save(fig, path: Path) -> Path:
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_correlation(corr: np.ndarray, names: Sequence[str], path: Path, plan: MergePlan | None = None) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(6.5, 5.5))
        im = ax.imshow(np.nan_to_num(corr, nan=0.0), vmin=-1, vmax=1, cmap="RdBu_r")
        ax.set_xticks(range(len(names)), names, rotation=60, ha="right")
        ax.set_yticks(range(len(names)), names)
        ax.grid(False)
        for i in range(len(names)):
            for j in range(len(names)):
                text = "nan" if np.isnan(corr[i, j]) else f"{corr[i, j]:.2f}"
                ax.text(j, i, text, ha="center", va="center", fontsize=6)
        title = "Correlation of robustness evaluations"
        if plan is not None:
            title += f" (tau={plan.threshold:g}, {plan.n} to {plan.m})"
        ax.set_title(title)
        fig.colorbar(im, ax=ax, shrink=0.8)
        return _save(fig, path)


def plot_trace(trace: list[dict], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        gens = [int(r["generation"]) for r in trace]
        ax.plot(gens, [float(r["best_ra"]) for r in trace], marker="o", color=ACCENT)
        ax.set_xlabel("generation")
        ax.set_ylabel("archive best RA")
        ax2 = ax.twinx()
        ax2.bar(gens, [int(r["archive_size"]) for r in trace], color=MUTED, alpha=0.3)
        ax2.set_ylabel("archive size")
        ax2.grid(False)
        ax.set_zorder(ax2.get_zorder() + 1)
        ax.patch.set_visible(False)
        ax.set_title("Search progress")
        return _save(fig, path)


def plot_surrogate(truth: np.ndarray, preds: dict[str, np.ndarray], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(4.5, 4.5))
        colors = [MUTED, ACCENT]
        for (label, p), c in zip(preds.items(), colors):
            ax.scatter(truth, p, s=14, color=c, label=f"{label} (tau={kendall_tau(truth, p):.2f})")
        lo = float(min(truth.min(), *(p.min() for p in preds.values())))
        hi = float(max(truth.max(), *(p.max() for p in preds.values())))
        ax.plot([lo, hi], [lo, hi], color="black", lw=0.8, ls="--")
        ax.set_xlabel("high-fidelity RA")
        ax.set_ylabel("surrogate prediction")
        ax.legend()
        ax.set_title("Surrogate on archived genomes")
        return _save(fig, path)


def plot_cost(names: Sequence[str], seconds: Sequence[float], representative: Sequence[bool], path: Path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots()
        colors = [ACCENT if r else MUTED for r in representative]
        ax.bar(range(len(names)), seconds, color=colors)
        ax.set_xticks(range(len(names)), names, rotation=60, ha="right")
        ax.set_ylabel("mean seconds per evaluation")
        full, kept = sum(seconds), sum(s for s, r in zip(seconds, representative) if r)
        saved = 1 - kept / full if full > 0 else 0.0
        ax.set_title(f"Evaluation cost: merged plan keeps dark bars ({saved:.0%} time saved)")
        return _save(fig, path)


def _read_trace(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_report(run_dir: str | Path, suite: Sequence[AttackSpec], plan: MergePlan) -> dict:
    run_dir = Path(run_dir)
    names = [s.kind for s in suite]
    summary: dict = {"n": plan.n, "m": plan.m, "threshold": plan.threshold,
                     "groups": plan.to_dict()["groups"], "figures": []}

    times_file = run_dir / "attack_times.json"
    times = json.loads(times_file.read_text()) if times_file.exists() else {}
    reps = set(plan.representatives)
    seconds = [float(times.get(n, 0.0)) for n in names]
    with open(run_dir / "evaluation_cost.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["evaluation", "mean_seconds", "representative", "group"])
        for i, n in enumerate(names):
            group = next(k for k, g in enumerate(plan.groups) if i in g)
            w.writerow([n, f"{seconds[i]:.6f}", int(i in reps), group])
    if times:
        full, kept = sum(seconds), sum(seconds[i] for i in reps)
        summary["time_full"] = full
        summary["time_merged"] = kept
        summary["time_reduction"] = 1 - kept / full if full > 0 else 0.0
        summary["figures"].append(plot_cost(names, seconds, [i in reps for i in range(len(names))],
                                            run_dir / "evaluation_cost.png").name)

    if (run_dir / "correlation.csv").exists():
        corr, cnames = read_matrix_csv(run_dir / "correlation.csv")
        summary["figures"].append(plot_correlation(corr, cnames, run_dir / "correlation.png", plan).name)

    if (run_dir / "trace.csv").exists():
        summary["figures"].append(plot_trace(_read_trace(run_dir / "trace.csv"), run_dir / "trace.png").name)

    if (run_dir / "archive.jsonl").exists():
        archive = read_archive(run_dir / "archive.jsonl")
        best = max(archive, key=lambda g: (archive[g].ra, -archive[g].generation))
        summary.update(best=gn.to_text(best), best_ra=archive[best].ra, archive_size=len(archive))
        genomes = list(archive)
        truth = np.array([archive[g].ra for g in genomes])
        preds = {}
        for label, name in (("low-fidelity fit", "surrogate.ckpt"), ("after fine-tuning", "surrogate_final.ckpt")):
            if (run_dir / name).exists():
                model, _ = SurrogateModel.load(run_dir / name)
                preds[label] = model.predict_many(genomes)
        if preds and len(genomes) > 1:
            summary["surrogate_tau"] = {k: kendall_tau(truth, p) for k, p in preds.items()}
            summary["figures"].append(plot_surrogate(truth, preds, run_dir / "surrogate.png").name)

    (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, default=float) + "\n")
    return summary
