"""Run-directory artifacts: metrics CSV, stitch-matrix dumps, manifests,
comparison tables.

Every artifact carries the run's config hash and seed (CSV files as a leading
comment line, JSON files as fields). Floats are written in shortest
round-trip decimal form so equal runs produce byte-identical files.
"""

from __future__ import annotations

import os

import numpy as np

from . import jsonio
from .training import Metrics, TrainHistory

METRICS_CSV = "metrics.csv"
ALPHAS_CSV = "alphas.csv"
SORTED_ALPHAS_CSV = "alphas_sorted.csv"
CHECKPOINT_FILE = "checkpoint.json"
MANIFEST_FILE = "manifest.json"
FINAL_METRICS_FILE = "final_metrics.json"
COMPARISON_CSV = "comparison.csv"


def _f(x) -> str:
    if x is None:
        return ""
    return repr(float(x))


def _header(config_hash: str, seed: int) -> str:
    return f"# config_hash={config_hash} seed={seed}\n"


def write_metrics_csv(path, history: TrainHistory, config_hash: str, seed: int) -> None:
    """Loss per iteration (tasks and weighted total) plus eval-split rows.

    Accuracy columns are empty on the per-iteration loss rows; rows emitted at
    evaluation points carry the eval-split loss and accuracies.
    """
    eval_rows = {}
    for it, metrics in history.evals:
        for task, m in metrics.items():
            eval_rows[(it, task)] = m
    lines = [_header(config_hash, seed),
             "iteration,task,loss,overall_acc,mean_per_class_acc\n"]
    for i, it in enumerate(history.iterations):
        for task, series in (("A", history.loss_a), ("B", history.loss_b)):
            if not np.isnan(series[i]):
                lines.append(f"{it},{task},{_f(series[i])},,\n")
        lines.append(f"{it},total,{_f(history.loss_total[i])},,\n")
        for task in ("A", "B"):
            m = eval_rows.get((it, task))
            if m is not None:
                lines.append(
                    f"{it},{task}_eval,{_f(m.loss)},{_f(m.overall_accuracy)},"
                    f"{_f(m.mean_per_class_accuracy)}\n"
                )
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.writelines(lines)


def _alpha_rows_for_task(mats: np.ndarray, task: str):
    """Same/different-task weights seen from the receiving stream.

    Matrices are source-by-destination, so stream A receives via column 0
    (same-task weight [0,0], different-task weight [1,0]) and stream B via
    column 1.
    """
    if task == "A":
        return mats[:, 0, 0], mats[:, 1, 0]
    return mats[:, 1, 1], mats[:, 0, 1]


def write_alpha_snapshot_csv(path, history: TrainHistory, config_hash: str, seed: int) -> None:
    """Per-evaluation stitch matrices, one row per (site, task, unit index)."""
    lines = [_header(config_hash, seed), "iteration,site,task,unit,alpha_s,alpha_d\n"]
    for it, snapshot in history.alpha_snapshots:
        for site, mats in snapshot.items():
            for task in ("A", "B"):
                s_vals, d_vals = _alpha_rows_for_task(mats, task)
                for u, (s, d) in enumerate(zip(s_vals, d_vals)):
                    lines.append(f"{it},{site},{task},{u},{_f(s)},{_f(d)}\n")
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.writelines(lines)


def sorted_alpha_lines(units, config_hash: str, seed: int) -> list:
    """CSV lines of sorted mixing weights per site and receiving task.

    The same-task and different-task columns are each sorted independently
    (ascending), so a row's two values generally come from different channels.
    """
    lines = [_header(config_hash, seed), "site,task,rank,alpha_s,alpha_d\n"]
    for unit in units:
        mats = np.asarray(unit.alphas)
        for task in ("A", "B"):
            s_vals, d_vals = _alpha_rows_for_task(mats, task)
            s_sorted = np.sort(s_vals)
            d_sorted = np.sort(d_vals)
            for rank in range(mats.shape[0]):
                lines.append(
                    f"{unit.site},{task},{rank},{_f(s_sorted[rank])},{_f(d_sorted[rank])}\n"
                )
    return lines


def write_sorted_alpha_csv(path, units, config_hash: str, seed: int) -> None:
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.writelines(sorted_alpha_lines(units, config_hash, seed))


def metrics_payload(metrics_by_split: dict) -> dict:
    return {split: {task: m.as_dict() for task, m in by_task.items()}
            for split, by_task in metrics_by_split.items()}


def write_final_metrics(path, metrics_by_split: dict, config_hash: str, seed: int) -> None:
    jsonio.dump_file({
        "config_hash": config_hash,
        "seed": seed,
        "metrics": metrics_payload(metrics_by_split),
    }, path)


def write_manifest(path, payload: dict) -> None:
    jsonio.dump_file(payload, path)


def write_comparison_csv(path, rows, config_hash: str, seed: int) -> None:
    """rows: (run, split_index_or_empty, task, overall, mean_per_class, loss)."""
    lines = [_header(config_hash, seed),
             "run,split_index,task,overall_acc,mean_per_class_acc,loss\n"]
    for run, k, task, acc, mpc, loss in rows:
        k_s = "" if k is None else str(k)
        lines.append(f"{run},{k_s},{task},{_f(acc)},{_f(mpc)},{_f(loss)}\n")
    with open(path, "w", encoding="ascii", newline="") as fh:
        fh.writelines(lines)


class RunLoadError(RuntimeError):
    """A run directory is missing required artifacts."""


def load_run(run_dir: str) -> dict:
    manifest_path = os.path.join(run_dir, MANIFEST_FILE)
    final_path = os.path.join(run_dir, FINAL_METRICS_FILE)
    if not os.path.isfile(manifest_path):
        raise RunLoadError(f"missing {MANIFEST_FILE} in {run_dir}")
    if not os.path.isfile(final_path):
        raise RunLoadError(f"missing {FINAL_METRICS_FILE} in {run_dir}")
    return {
        "dir": run_dir,
        "name": os.path.basename(os.path.normpath(run_dir)),
        "manifest": jsonio.load_file(manifest_path),
        "final": jsonio.load_file(final_path),
    }


def comparison_report(runs: list, baseline: dict, split: str = "test") -> dict:
    """Per-task metric deltas plus per-class deltas ordered by label scarcity.

    Every run must have been produced on the same dataset as the baseline.
    Per-class rows are sorted by ascending training-label count (task B counts
    only mask-true labels), which lines data-starved classes up first.
    """
    base_hash = baseline["manifest"]["dataset"]["hash"]
    for run in runs:
        if run["manifest"]["dataset"]["hash"] != base_hash:
            raise RunLoadError(
                f"run {run['name']} used a different dataset than the baseline"
            )
    base_metrics = baseline["final"]["metrics"].get(split, {})
    summary_rows = []
    per_class_rows = []
    counts_by_task = {
        "A": baseline["manifest"]["dataset"].get("counts_a_train", []),
        "B": baseline["manifest"]["dataset"].get("counts_b_train_masked", []),
    }
    for run in runs:
        run_metrics = run["final"]["metrics"].get(split, {})
        for task in sorted(set(run_metrics) & set(base_metrics)):
            rm, bm = run_metrics[task], base_metrics[task]
            summary_rows.append({
                "run": run["name"], "task": task,
                "overall_acc": rm["overall_accuracy"],
                "baseline_overall_acc": bm["overall_accuracy"],
                "delta_overall": rm["overall_accuracy"] - bm["overall_accuracy"],
                "mean_per_class_acc": rm["mean_per_class_accuracy"],
                "baseline_mean_per_class_acc": bm["mean_per_class_accuracy"],
                "delta_mean_per_class": (rm["mean_per_class_accuracy"]
                                         - bm["mean_per_class_accuracy"]),
            })
            counts = counts_by_task.get(task, [])
            classes = range(len(rm["per_class_accuracy"]))
            ordered = sorted(classes, key=lambda c: (counts[c] if c < len(counts) else 0, c))
            for c in ordered:
                ra = rm["per_class_accuracy"][c]
                ba = bm["per_class_accuracy"][c]
                if ra is None or ba is None:
                    continue
                per_class_rows.append({
                    "run": run["name"], "task": task, "class": c,
                    "train_labels": counts[c] if c < len(counts) else 0,
                    "baseline_acc": ba, "acc": ra, "delta": ra - ba,
                })
    return {"split": split, "baseline": baseline["name"],
            "summary": summary_rows, "per_class": per_class_rows}


def write_report_csvs(out_dir: str, report: dict) -> list:
    os.makedirs(out_dir, exist_ok=True)
    summary_path = os.path.join(out_dir, "report_summary.csv")
    with open(summary_path, "w", encoding="ascii", newline="") as fh:
        fh.write(f"# baseline={report['baseline']} split={report['split']}\n")
        fh.write("run,task,overall_acc,baseline_overall_acc,delta_overall,"
                 "mean_per_class_acc,baseline_mean_per_class_acc,delta_mean_per_class\n")
        for r in report["summary"]:
            fh.write(f"{r['run']},{r['task']},{_f(r['overall_acc'])},"
                     f"{_f(r['baseline_overall_acc'])},{_f(r['delta_overall'])},"
                     f"{_f(r['mean_per_class_acc'])},{_f(r['baseline_mean_per_class_acc'])},"
                     f"{_f(r['delta_mean_per_class'])}\n")
    per_class_path = os.path.join(out_dir, "report_per_class.csv")
    with open(per_class_path, "w", encoding="ascii", newline="") as fh:
        fh.write(f"# baseline={report['baseline']} split={report['split']} "
                 f"order=ascending_train_labels\n")
        fh.write("run,task,class,train_labels,baseline_acc,acc,delta\n")
        for r in report["per_class"]:
            fh.write(f"{r['run']},{r['task']},{r['class']},{r['train_labels']},"
                     f"{_f(r['baseline_acc'])},{_f(r['acc'])},{_f(r['delta'])}\n")
    return [summary_path, per_class_path]


def format_report_text(report: dict) -> str:
    lines = [f"baseline: {report['baseline']} (split: {report['split']})"]
    for r in report["summary"]:
        lines.append(
            f"  {r['run']:<24s} task {r['task']}  overall {r['overall_acc']:.4f} "
            f"({r['delta_overall']:+.4f})  mean/class {r['mean_per_class_acc']:.4f} "
            f"({r['delta_mean_per_class']:+.4f})"
        )
    return "\n".join(lines)
