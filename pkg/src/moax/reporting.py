"""Rendering of budget tables, training curves, and trace summaries.

The delimited CSV files are the authoritative data path; the figures are a
convenience rendering of the same numbers, written next to the CSVs by the
report command. All floats in CSVs use 17 significant digits so values
round-trip exactly.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .allocation import BudgetReport
from .instrumentation import ActivationTrace, Histogram, proportion_below

_DPI = 120


def _fmt(x: float) -> str:
    return f"{x:.17g}"


# -- budget tables ------------------------------------------------------------

def write_budget_csv(report: BudgetReport, path) -> None:
    with open(path, "w") as fh:
        fh.write("name,trainable_units,active_units,active_mode,"
                 "adapter_params,gate_params,trainable_params,notes\n")
        for r in report.rows:
            active = _fmt(r.active_units) if r.active_units is not None else ""
            notes = r.notes.replace(",", ";")
            fh.write(f"{r.name},{_fmt(r.trainable_units)},{active},{r.active_mode},"
                     f"{r.adapter_params},{r.gate_params},{r.trainable_params},{notes}\n")


def budget_table_text(report: BudgetReport) -> str:
    headers = ["name", "trainable", "active", "mode", "adapter", "gate", "notes"]
    rows = []
    for r in report.rows:
        rows.append([
            r.name,
            f"{r.trainable_units:.6g}",
            f"{r.active_units:.6g}" if r.active_units is not None else "-",
            r.active_mode,
            str(r.adapter_params),
            str(r.gate_params),
            r.notes or "-",
        ])
    widths = [max(len(headers[i]), *(len(row[i]) for row in rows)) if rows else len(headers[i])
              for i in range(len(headers))]
    lines = [f"baseline: {report.baseline_name} (trainable 1, active 2)"]
    lines.append("  ".join(h.ljust(widths[i]) for i, h in enumerate(headers)))
    lines.append("  ".join("-" * w for w in widths))
    for row in rows:
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)))
    return "\n".join(lines) + "\n"


def save_budget_figure(report: BudgetReport, path) -> None:
    names = [r.name for r in report.rows]
    trainable = [r.trainable_units for r in report.rows]
    active = [r.active_units if r.active_units is not None else 0.0 for r in report.rows]
    x = np.arange(len(names))
    fig, ax = plt.subplots(figsize=(max(6.0, 1.2 * len(names)), 4.0))
    ax.bar(x - 0.2, trainable, width=0.4, label="trainable units")
    ax.bar(x + 0.2, active, width=0.4, label="active units (static)")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("units (baseline = 1 / 2)")
    ax.set_title(f"parameter budgets vs {report.baseline_name}")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


# -- training curves ----------------------------------------------------------

def write_training_csv(records: list[dict], path) -> None:
    with open(path, "w") as fh:
        fh.write("step,loss,ce_loss,aux_count,aux_balance,eval_loss,eval_accuracy\n")
        for r in records:
            eval_loss = _fmt(r["eval_loss"]) if r.get("eval_loss") is not None else ""
            eval_acc = _fmt(r["eval_accuracy"]) if r.get("eval_accuracy") is not None else ""
            fh.write(f"{r['step']},{_fmt(r['loss'])},{_fmt(r['ce_loss'])},"
                     f"{_fmt(r['aux_count'])},{_fmt(r['aux_balance'])},{eval_loss},{eval_acc}\n")


def save_training_figure(records: list[dict], path) -> None:
    steps = [r["step"] for r in records]
    losses = [r["loss"] for r in records]
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    ax.plot(steps, losses, lw=1.0, label="train loss")
    evals = [(r["step"], r["eval_loss"]) for r in records if r.get("eval_loss") is not None]
    if evals:
        ax.plot([e[0] for e in evals], [e[1] for e in evals], "o-", ms=3, label="eval loss")
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title("training loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


# -- trace summaries ----------------------------------------------------------

def save_proportions_figure(trace: ActivationTrace, path,
                            thresholds: tuple[float, ...] = (1e-3,)) -> None:
    layers = trace.layers()
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for thr in thresholds:
        props = [proportion_below(trace, layer, thr) for layer in layers]
        ax.plot(layers, props, "o-", label=f"below {thr:g}")
    ax.set_xlabel("layer")
    ax.set_ylabel("proportion of output elements")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title("adapter-path magnitudes under threshold, by layer")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)


def save_histograms_figure(hists: list[Histogram], path) -> None:
    fig, axes = plt.subplots(1, 2, figsize=(11.0, 4.0), sharey=True)
    for ax, source in zip(axes, ("base", "adapter")):
        for h in hists:
            if h.source != source:
                continue
            centers = np.sqrt(np.asarray(h.edges[:-1]) * np.asarray(h.edges[1:]))
            ax.plot(centers, h.cumulative, lw=1.0, label=f"layer {h.layer}")
        ax.set_xscale("log")
        ax.set_xlabel("|output element|")
        ax.set_title(f"{source} path, cumulative")
    axes[0].set_ylabel("fraction of elements")
    handles, labels = axes[0].get_legend_handles_labels()
    if len(labels) <= 10:
        axes[1].legend(handles, labels, fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=_DPI)
    plt.close(fig)
