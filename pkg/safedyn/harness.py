"""
Multi-seed, multi-arm sweeps and the report bundle built from their metric files.
"""
import csv
import json
import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .agent import train
from .config import OPTIMIZERS, TrainConfig, from_dict, load_config, to_dict, with_overrides
from .errors import ConfigError
from .metrics import MetricsWriter, load_metrics
from .utils import population_std

logger = logging.getLogger(__name__)

MANIFEST_VERSION = 1
STD_CONVENTION = "population standard deviation (ddof=0)"


@dataclass
class SweepSpec:
    """
    Seeds x arms grid of training runs.

    Attributes:
        config (TrainConfig): Base configuration.
        seeds (list): Distinct run seeds.
        arms (list): Arm names; an arm named after an optimizer selects it.
        output_dir (str): Root of the run directories and the manifest.
        overrides (dict): Arm name -> nested config overrides.
        workers (int): Parallel processes; 1 runs in-process.
    """
    config: TrainConfig
    seeds: list
    arms: list = field(default_factory=lambda: list(OPTIMIZERS))
    output_dir: str = "runs"
    overrides: dict = field(default_factory=dict)
    workers: int = 1

    def __post_init__(self):
        if not self.seeds:
            raise ConfigError("sweep needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigError(f"sweep seeds must be distinct, got {self.seeds}")
        if not self.arms or len(set(self.arms)) != len(self.arms):
            raise ConfigError(f"sweep arms must be non-empty and distinct, got {self.arms}")
        unknown = set(self.overrides) - set(self.arms)
        if unknown:
            raise ConfigError(f"overrides for unknown arms: {sorted(unknown)}")

    def arm_config(self, arm, seed):
        base = {"optimizer": arm} if arm in OPTIMIZERS else {}
        config = with_overrides(self.config, base)
        config = with_overrides(config, self.overrides.get(arm, {}))
        return with_overrides(config, {"seed": seed})


def load_sweep_spec(filename, output_dir=None):
    """
    Reads a sweep file: {"config": {...} | "config_file": path, "seeds": [...], "arms": [...],
    "overrides": {...}, "workers": n}.

    Raises:
        ConfigError: Missing file, invalid JSON or unknown keys.
    """
    try:
        with open(filename, "r") as f:
            data = json.load(f)
    except FileNotFoundError as e:
        raise ConfigError(f"sweep file not found: {filename}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"sweep file {filename} is not valid JSON: {e}") from e
    known = {"config", "config_file", "seeds", "arms", "overrides", "workers", "output_dir"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown sweep field(s): {sorted(unknown)}")
    if "config_file" in data:
        path = os.path.join(os.path.dirname(filename), data["config_file"])
        config = load_config(path)
    else:
        config = from_dict(TrainConfig, data.get("config", {}))
    return SweepSpec(config=config, seeds=list(data.get("seeds", [0])), arms=list(data.get("arms", OPTIMIZERS)),
                     output_dir=output_dir or data.get("output_dir", "runs"), overrides=data.get("overrides", {}),
                     workers=int(data.get("workers", 1)))


def run_dir(arm, seed):
    return os.path.join(arm, f"seed-{seed}")


def run_single(config, out_dir):
    """
    Trains one run into `out_dir` (metrics.jsonl, ledger.jsonl, checkpoints/).

    Returns:
        RunMetrics: The run's metrics.
    """
    os.makedirs(out_dir, exist_ok=True)
    with MetricsWriter(os.path.join(out_dir, "metrics.jsonl")) as sink:
        return train(config, sink=sink, checkpoint_dir=os.path.join(out_dir, "checkpoints"),
                     ledger_path=os.path.join(out_dir, "ledger.jsonl"))


def _run_entry(job):
    config_data, arm, seed, root = job
    rel = run_dir(arm, seed)
    entry = {"arm": arm, "seed": seed, "path": rel, "metrics": os.path.join(rel, "metrics.jsonl")}
    try:
        metrics = run_single(from_dict(TrainConfig, config_data), os.path.join(root, rel))
    except Exception as e:
        logger.error(f"Run {rel} failed: {e}")
        entry.update(status="failed", reason=f"{type(e).__name__}: {e}")
        return entry
    if metrics.aborted:
        entry.update(status="failed", reason=metrics.final.reason)
    else:
        entry.update(status="completed", reason=None)
    return entry


def run_sweep(spec):
    """
    Runs every (arm, seed) pair and writes manifest.json into the output directory.

    Failed runs are recorded in the manifest; the sweep continues.

    Returns:
        dict: The manifest.
    """
    os.makedirs(spec.output_dir, exist_ok=True)
    jobs = [(to_dict(spec.arm_config(arm, seed)), arm, seed, spec.output_dir)
            for arm in spec.arms for seed in spec.seeds]
    logger.info(f"Sweep of {len(jobs)} runs ({len(spec.arms)} arms x {len(spec.seeds)} seeds) "
                f"into {spec.output_dir}")
    if spec.workers > 1:
        with ProcessPoolExecutor(max_workers=spec.workers) as pool:
            entries = list(pool.map(_run_entry, jobs))
    else:
        entries = [_run_entry(job) for job in jobs]

    manifest = {"version": MANIFEST_VERSION, "arms": list(spec.arms), "seeds": list(spec.seeds), "runs": entries}
    with open(os.path.join(spec.output_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    failed = sum(1 for e in entries if e["status"] != "completed")
    logger.info(f"Sweep finished: {len(entries) - failed} completed, {failed} failed")
    return manifest


def load_manifest(filename):
    with open(filename, "r") as f:
        manifest = json.load(f)
    manifest["root"] = os.path.dirname(os.path.abspath(filename))
    return manifest


@dataclass
class ReportBundle:
    """
    Attributes:
        summary (list): Per-arm rows of final accumulated training cost, sorted by mean.
        curves (list): Per-arm, per-epoch rows of median/std of J_hat and Jc_hat.
        budget (float): Per-episode budget d_scaled drawn as the reference line.
        files (list): Written file paths.
    """
    summary: list
    curves: list
    budget: float
    files: list = field(default_factory=list)


def _fmt(x):
    return repr(float(x))


def summarize(runs):
    """
    Args:
        runs (dict): Arm -> list of RunMetrics.

    Returns:
        list: Rows {arm, runs, mean, std, median} of the final accumulated cost, ascending by mean.
    """
    rows = []
    for arm, metrics in runs.items():
        finals = [m.final.accumulated_cost for m in metrics]
        rows.append({"arm": arm, "runs": len(finals), "mean": float(np.mean(finals)),
                     "std": population_std(finals), "median": float(np.median(finals))})
    return sorted(rows, key=lambda r: (r["mean"], r["arm"]))


def learning_curves(runs):
    rows = []
    for arm in sorted(runs):
        metrics = runs[arm]
        epochs = sorted({r.epoch for m in metrics for r in m.records})
        for epoch in epochs:
            at = [r for m in metrics for r in m.records if r.epoch == epoch]
            j = [r.J_hat for r in at]
            jc = [r.Jc_hat for r in at]
            rows.append({"arm": arm, "epoch": epoch, "runs": len(at),
                         "J_median": float(np.median(j)), "J_std": population_std(j),
                         "Jc_median": float(np.median(jc)), "Jc_std": population_std(jc)})
    return rows


def _write_csv(rows, filename):
    if not rows:
        return
    with open(filename, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        keys = list(rows[0])
        writer.writerow(keys)
        for row in rows:
            writer.writerow([_fmt(row[k]) if isinstance(row[k], float) else row[k] for k in keys])


def _write_json(payload, filename):
    with open(filename, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True)
        f.write("\n")


def plot_report(bundle, out_dir):
    """Renders accumulated_cost.png and learning_curves.png (matplotlib, Agg backend)."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    files = []
    fig, ax = plt.subplots(figsize=(5, 4))
    arms = [r["arm"] for r in bundle.summary]
    ax.bar(arms, [r["mean"] for r in bundle.summary], yerr=[r["std"] for r in bundle.summary], capsize=4,
           color="tab:blue")
    ax.set_ylabel("Accumulated training cost")
    ax.set_title("Final accumulated cost (mean, population std)")
    ax.grid(True, axis="y")
    path = os.path.join(out_dir, "accumulated_cost.png")
    fig.savefig(path)
    plt.close(fig)
    files.append(path)
    logger.debug(f"Accumulated cost plot saved to {path}")

    fig, (ax_j, ax_c) = plt.subplots(1, 2, figsize=(10, 4))
    for arm in sorted({r["arm"] for r in bundle.curves}):
        rows = [r for r in bundle.curves if r["arm"] == arm]
        epochs = np.array([r["epoch"] for r in rows])
        for ax, key in ((ax_j, "J"), (ax_c, "Jc")):
            med = np.array([r[f"{key}_median"] for r in rows])
            std = np.array([r[f"{key}_std"] for r in rows])
            ax.plot(epochs, med, label=arm)
            ax.fill_between(epochs, med - std, med + std, alpha=0.2)
    ax_c.axhline(bundle.budget, color="k", linestyle="--", label="budget")
    ax_j.set_xlabel("Epoch")
    ax_j.set_ylabel("Evaluation return")
    ax_c.set_xlabel("Epoch")
    ax_c.set_ylabel("Evaluation episode cost")
    for ax in (ax_j, ax_c):
        ax.legend(loc="best")
        ax.grid(True)
    path = os.path.join(out_dir, "learning_curves.png")
    fig.savefig(path)
    plt.close(fig)
    files.append(path)
    logger.debug(f"Learning curve plot saved to {path}")
    return files


def report(manifest, out_dir, plots=True):
    """
    Builds the report bundle of a sweep.

    Args:
        manifest (str or dict): Path to manifest.json, or a manifest loaded by `load_manifest`.
        out_dir (str): Output directory of tables and plots.
        plots (bool, optional): Also render PNG plots.

    Returns:
        ReportBundle: Tables (written as CSV and JSON, byte-identical across reruns) and plot paths.

    Raises:
        ValueError: If the manifest has no completed run.
    """
    if isinstance(manifest, str):
        manifest = load_manifest(manifest)
    root = manifest.get("root", ".")
    completed = [e for e in manifest.get("runs", []) if e.get("status") == "completed"]
    if not completed:
        logger.error("Manifest lists no completed run")
        raise ValueError("report needs a manifest with at least one completed run")

    runs = {}
    budget = None
    for entry in completed:
        metrics = load_metrics(os.path.join(root, entry["metrics"]))
        runs.setdefault(entry["arm"], []).append(metrics)
        budget = metrics.header.budget if budget is None else budget
    bundle = ReportBundle(summarize(runs), learning_curves(runs), budget)

    os.makedirs(out_dir, exist_ok=True)
    tables = {"summary": bundle.summary, "curves": bundle.curves}
    for name, rows in tables.items():
        csv_path = os.path.join(out_dir, f"{name}.csv")
        _write_csv(rows, csv_path)
        bundle.files.append(csv_path)
    json_path = os.path.join(out_dir, "report.json")
    _write_json({"std_convention": STD_CONVENTION, "budget": budget, **tables}, json_path)
    bundle.files.append(json_path)

    if plots:
        try:
            bundle.files.extend(plot_report(bundle, out_dir))
        except ImportError:
            logger.warning("matplotlib is not installed; skipping plots (pip install safedyn[plotting])")
    logger.info(f"Report of {len(completed)} runs written to {out_dir}")
    return bundle
