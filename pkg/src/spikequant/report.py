"""Run reports: delimited output, JSON, and rendered figures.

Every pipeline run produces a four-row accuracy table (the source graph
plus the three spiking variants), op counters, timing, and the full
resolved configuration.  The CSV side is deterministic: equal configs and
seeds give byte-identical files.  Timing lives only in the JSON, which is
allowed to differ between runs.  Figures are rendered to PNG files next
to the delimited output.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field

import numpy as np

VARIANT_ORDER = ("ann", "snn_alpha", "snn_beta", "snn_gamma")


@dataclass
class RunReport:
    config: dict
    version: str
    rows: list = field(default_factory=list)     # {"variant", "accuracy", "delta_acc"}
    ops: dict | None = None
    timing: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)
    failed_stage: str | None = None
    error: str | None = None

    def add_row(self, variant: str, accuracy: float, ann_accuracy: float):
        self.rows.append({
            "variant": variant,
            "accuracy": float(accuracy),
            "delta_acc": float(accuracy) - float(ann_accuracy),
        })


def write_report_csv(report: RunReport, path: str):
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["variant", "accuracy", "delta_acc"])
        for row in report.rows:
            w.writerow([row["variant"], f"{row['accuracy']:.6f}", f"{row['delta_acc']:.6f}"])


def write_report_json(report: RunReport, path: str):
    payload = {
        "version": report.version,
        "config": report.config,
        "rows": report.rows,
        "ops": report.ops,
        "timing": report.timing,
        "extras": report.extras,
    }
    if report.failed_stage:
        payload["failed_stage"] = report.failed_stage
        payload["error"] = report.error
    with open(path, "w") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=_jsonable)
        f.write("\n")


def _jsonable(v):
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    if isinstance(v, np.ndarray):
        return v.tolist()
    raise TypeError(f"not JSON serializable: {type(v).__name__}")


def write_metrics_csv(history: list, path: str):
    cols = ["epoch", "loss", "train_acc"] + (["test_acc"] if history and "test_acc" in history[0] else [])
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(cols)
        for row in history:
            w.writerow([row["epoch"]] + [f"{row[c]:.6f}" for c in cols[1:]])


def write_loss_curves(curves: dict, path: str):
    """Per-stage fine-tuning loss, one row per optimizer step."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["stage", "step", "loss"])
        for stage in sorted(curves):
            for step, loss in enumerate(curves[stage]):
                w.writerow([stage, step, f"{loss:.8f}"])


def dump_trace(trace, outdir: str, sample: int = 0):
    """One CSV per spiking stage (step, neuron, spike) plus a JSON summary."""
    os.makedirs(outdir, exist_ok=True)
    summary = {"mode": trace.mode, "steps": trace.steps, "stages": []}
    for pos, spikes in enumerate(trace.spikes):
        flat = spikes[:, sample].reshape(trace.steps, -1)
        path = os.path.join(outdir, f"stage{pos}_spikes.csv")
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["step", "neuron", "spike"])
            for t in range(trace.steps):
                for j in range(flat.shape[1]):
                    w.writerow([t, j, int(flat[t, j])])
        summary["stages"].append({
            "neurons": int(flat.shape[1]),
            "events": int(np.abs(spikes[:, sample]).sum()),
            "mean_rate": float(trace.rates[pos][sample].mean()),
            "threshold": float(trace.thresholds[pos]),
        })
    with open(os.path.join(outdir, "trace_summary.json"), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
        f.write("\n")


# ---------------------------------------------------------------------------
# figures


def _new_axes(width=5.2):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(width, width / 1.618))
    return fig, ax


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    import matplotlib.pyplot as plt

    plt.close(fig)


def render_figures(report: RunReport, outdir: str) -> list:
    """Render the standard report figures; returns the written paths."""
    written = []
    if report.rows:
        fig, ax = _new_axes()
        names = [r["variant"] for r in report.rows]
        accs = [100.0 * r["accuracy"] for r in report.rows]
        bars = ax.bar(names, accs, color=["#777777", "#4878d0", "#ee854a", "#6acc64"][: len(names)])
        ax.bar_label(bars, fmt="%.2f", padding=2, fontsize=8)
        ax.set_ylabel("test accuracy [%]")
        ax.set_ylim(0, 105)
        ax.set_title("graph vs spiking variants")
        path = os.path.join(outdir, "accuracy.png")
        _save(fig, path)
        written.append(path)
    if report.ops:
        fig, ax = _new_axes()
        ax.bar(["graph", "spiking"], [report.ops["ann_ops"], report.ops["snn_ops"]],
               color=["#777777", "#6acc64"])
        ax.set_ylabel("synaptic ops (batch total)")
        ax.set_title(f"op ratio {report.ops['ratio']:.3f}")
        path = os.path.join(outdir, "ops.png")
        _save(fig, path)
        written.append(path)
    rates = report.extras.get("mean_rates")
    if rates:
        fig, ax = _new_axes()
        ax.plot(range(1, len(rates) + 1), rates, marker="o")
        ax.set_xlabel("spiking stage")
        ax.set_ylabel("mean firing rate")
        ax.set_ylim(0, 1)
        ax.set_title("per-stage mean firing rate")
        path = os.path.join(outdir, "firing_rates.png")
        _save(fig, path)
        written.append(path)
    curves = report.extras.get("finetune_curves")
    if curves:
        fig, ax = _new_axes()
        for stage in sorted(curves, key=int):
            ax.plot(curves[stage], label=f"stage {stage}", linewidth=0.9)
        ax.set_xlabel("optimizer step")
        ax.set_ylabel("proxy loss")
        if any(l > 0 for c in curves.values() for l in c):
            ax.set_yscale("log")
        ax.legend(fontsize=7, ncol=2)
        ax.set_title("fine-tuning loss by stage")
        path = os.path.join(outdir, "finetune_loss.png")
        _save(fig, path)
        written.append(path)
    return written


def write_report(report: RunReport, outdir: str, figures: bool = True) -> dict:
    """Write report.csv + report.json (+ figures) into outdir."""
    os.makedirs(outdir, exist_ok=True)
    paths = {
        "csv": os.path.join(outdir, "report.csv"),
        "json": os.path.join(outdir, "report.json"),
    }
    write_report_csv(report, paths["csv"])
    write_report_json(report, paths["json"])
    if figures:
        paths["figures"] = render_figures(report, outdir)
    return paths
