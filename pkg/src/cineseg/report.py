"""Figure rendering for the CLI report paths.

Every figure lands next to the delimited output it illustrates. The Agg
backend keeps rendering headless and deterministic; PNG metadata is pinned
so identical runs produce identical bytes.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .chords import CATEGORIES, ChordReport

_PNG_META = {"Software": "cineseg"}

_CATEGORY_COLORS = {
    "viable": "#2a9d8f",
    "likely_viable": "#e9c46a",
    "likely_nonviable": "#f4a261",
    "nonviable": "#e76f51",
}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=110, metadata=_PNG_META)
    plt.close(fig)
    return path


def save_objective_traces(traces: dict, path) -> Path:
    """Per-frame objective traces from the motion solver, log scale."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, trace in traces.items():
        ax.semilogy(range(len(trace)), trace, lw=0.9, label=label)
    ax.set_xlabel("accepted step")
    ax.set_ylabel("objective")
    ax.set_title("motion objective per frame")
    if len(traces) <= 10:
        ax.legend(fontsize=7)
    ax.grid(alpha=0.3)
    return _save(fig, path)


def save_loss_trace(trace, path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(1, len(trace) + 1), trace, marker="o")
    ax.set_xlabel("cycle")
    ax.set_ylabel("joint loss")
    ax.set_title("training loss per cycle")
    ax.grid(alpha=0.3)
    return _save(fig, path)


def save_sweep_curve(rows: list[dict], path) -> Path:
    """Dice versus frame proportion, one line per pathology class."""
    fig, ax = plt.subplots(figsize=(5.5, 4))
    props = [r["proportion"] for r in rows]
    for key, label in (("scar_dice", "scar"), ("edema_dice", "edema")):
        ax.plot(props, [r[key] for r in rows], marker="o", label=label)
    ax.set_xlabel("frame proportion")
    ax.set_ylabel("Dice")
    ax.set_ylim(0.0, 1.0)
    ax.set_title("segmentation vs. frames aggregated")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, path)


def save_metrics_chart(per_class: list[dict], path) -> Path:
    """Grouped bar chart of the ratio metrics per class."""
    keys = ("dice", "precision", "sensitivity", "specificity", "npv")
    fig, ax = plt.subplots(figsize=(6.5, 4))
    width = 0.8 / max(len(per_class), 1)
    xs = np.arange(len(keys))
    for j, row in enumerate(per_class):
        vals = [row[k] if row[k] is not None else 0.0 for k in keys]
        ax.bar(xs + j * width, vals, width=width, label=row["class"])
    ax.set_xticks(xs + width * (len(per_class) - 1) / 2)
    ax.set_xticklabels(keys)
    ax.set_ylim(0.0, 1.05)
    ax.set_title("segmentation metrics")
    ax.legend()
    ax.grid(alpha=0.3, axis="y")
    return _save(fig, path)


def save_chord_profile(report: ChordReport, path) -> Path:
    """Transmurality per chord index, colored by viability category."""
    fig, (ax, ax2) = plt.subplots(1, 2, figsize=(9, 3.8),
                                  gridspec_kw={"width_ratios": [2.2, 1.0]})
    for chord in report.chords:
        if not chord.valid:
            continue
        from .chords import categorize
        cat = categorize(chord.transmurality)
        ax.bar(chord.index, chord.transmurality, width=1.0,
               color=_CATEGORY_COLORS[cat])
    for bound in (25, 50, 75):
        ax.axhline(bound, color="gray", lw=0.6, ls="--")
    ax.set_xlabel("chord index")
    ax.set_ylabel("transmurality (%)")
    ax.set_ylim(0, 100)
    ax.set_title("chord transmurality")
    counts = [report.counts[c] for c in CATEGORIES]
    ax2.bar(range(len(CATEGORIES)), counts,
            color=[_CATEGORY_COLORS[c] for c in CATEGORIES])
    ax2.set_xticks(range(len(CATEGORIES)))
    ax2.set_xticklabels(CATEGORIES, rotation=30, ha="right", fontsize=7)
    ax2.set_ylabel("chords")
    ax2.set_title("category counts")
    fig.tight_layout()
    return _save(fig, path)


# ---------------------------------------------------------------------------
# Delimited output helpers shared by the CLI
# ---------------------------------------------------------------------------

def write_json(doc, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def write_csv(rows: list[dict], fieldnames: list[str], path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row.get(k)) for k in fieldnames})
    return path


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v
