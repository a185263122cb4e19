#!/usr/bin/env python
# -*- coding: utf-8 -*-
"""
Accuracy-vs-flips chart and summary table from an experiment directory
(aggregate.csv, plus report.json when present) or from a single attack
directory (trace.json). Output depends only on those files.
"""

import json
import logging
import os

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import pandas as pd

import bdfa
import bdfa_attack
from bdfa_errors import ReportError

logger = logging.getLogger(__name__)

AGGREGATE_FILE = "aggregate.csv"
REPORT_FILE = "report.json"
SVG_FILE = "accuracy.svg"
MARKDOWN_FILE = "summary.md"
REQUIRED_COLUMNS = ["mode", "flip", "mean", "min", "max"]

MODE_COLORS = {"bdfa": "#c0392b", "bfa": "#2c3e50", "noise": "#8e44ad", "random": "#7f8c8d"}
MODE_LABELS = {
    "bdfa": "BDFA (distilled data)",
    "bfa": "BFA (real data)",
    "noise": "Gaussian noise",
    "random": "random flips",
}

REFERENCE_CAPTION = (
    "Full-scale reference values: 8-bit ResNet50 on CIFAR-100 has a 75.96% baseline and drops to "
    "3.6 ± 1.6% after 30 BDFA flips; VGG16 on CIFAR-10 after 30 flips: BDFA 24.3 ± 2.9 vs BFA 11.5 ± 2.9."
)

SVG_STYLE = {
    "svg.hashsalt": "bdfa-report",
    "svg.fonttype": "none",
    "font.family": "DejaVu Sans",
    "font.size": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
}


def read_aggregate(folder: str) -> pd.DataFrame:
    """
    Loads and validates aggregate.csv. Errors name the file line (header is line 1).
    """
    path = os.path.join(folder, AGGREGATE_FILE)
    if not os.path.isfile(path):
        raise ReportError("no %s in %s" % (AGGREGATE_FILE, folder))
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise ReportError("malformed %s: %s" % (path, e))
    missing = [column for column in REQUIRED_COLUMNS if column not in frame.columns]
    if missing:
        raise ReportError("malformed %s: missing columns %s" % (path, missing))

    rows = []
    for position, row in enumerate(frame.itertuples(index=False), start=2):
        values = row._asdict()
        try:
            parsed = {
                "mode": values["mode"].strip(),
                "flip": int(values["flip"]),
                "mean": float(values["mean"]),
                "min": float(values["min"]),
                "max": float(values["max"]),
            }
        except ValueError as e:
            raise ReportError("malformed %s row %d: %s" % (path, position, e))
        if not parsed["mode"] or parsed["flip"] < 0:
            raise ReportError("malformed %s row %d: empty mode or negative flip" % (path, position))
        if not parsed["min"] - 1e-12 <= parsed["mean"] <= parsed["max"] + 1e-12:
            raise ReportError("malformed %s row %d: expected min <= mean <= max" % (path, position))
        rows.append(parsed)
    if not rows:
        raise ReportError("malformed %s: no data rows" % path)
    return pd.DataFrame(rows, columns=REQUIRED_COLUMNS)


def _trace_aggregate(folder):
    trace = bdfa_attack.load_trace(folder)
    aggregate = bdfa.aggregate_traces({trace.mode: {0: trace}})
    if aggregate[["mean", "min", "max"]].isna().any().any():
        raise ReportError("trace in %s has no accuracy values to plot" % folder)
    return aggregate[REQUIRED_COLUMNS]


def _read_context(folder):
    path = os.path.join(folder, REPORT_FILE)
    if not os.path.isfile(path):
        return {}
    with open(path) as report_file:
        return json.load(report_file)


def _modes(aggregate):
    # Known modes first in a fixed order, then anything else alphabetically.
    present = set(aggregate["mode"])
    return [mode for mode in MODE_COLORS if mode in present] + sorted(present - set(MODE_COLORS))


def write_svg(aggregate: pd.DataFrame, path: str, title: str = None):
    """Mean accuracy line with a shaded min/max band per attack mode."""
    with plt.rc_context(SVG_STYLE):
        figure, axes = plt.subplots(figsize=(6.4, 4.0), dpi=100)
        for mode in _modes(aggregate):
            rows = aggregate[aggregate["mode"] == mode].sort_values("flip")
            color = MODE_COLORS.get(mode, "#16a085")
            label = MODE_LABELS.get(mode, mode)
            axes.fill_between(rows["flip"], 100.0 * rows["min"], 100.0 * rows["max"], color=color, alpha=0.2, lw=0)
            axes.plot(rows["flip"], 100.0 * rows["mean"], color=color, linewidth=1.5, label=label)
        axes.set_xlim(0, max(1, int(aggregate["flip"].max())))
        axes.set_ylim(0, 100)
        axes.set_xlabel("bit flips")
        axes.set_ylabel("top-1 accuracy (%)")
        if title:
            axes.set_title(title)
        axes.legend(loc="upper right", frameon=False)
        figure.tight_layout()
        figure.savefig(path, format="svg", metadata={"Date": None, "Creator": "bdfa_app"})
        plt.close(figure)
    return path


def summary_table(aggregate: pd.DataFrame, network: str = "-", dataset: str = "-", flips_to_threshold=None):
    """Markdown table: accuracy before the attack and after the last flip, ± the larger band deviation."""
    flips_to_threshold = flips_to_threshold or {}
    final_flip = int(aggregate["flip"].max())
    lines = [
        "| Network | Dataset | Mode | Acc@0 (%%) | Acc@%d (%%) | Flips to threshold |" % final_flip,
        "|---|---|---|---|---|---|",
    ]
    for mode in _modes(aggregate):
        rows = aggregate[aggregate["mode"] == mode].set_index("flip").sort_index()
        clean = rows.iloc[0]
        final = rows.iloc[-1]
        deviation = max(final["max"] - final["mean"], final["mean"] - final["min"])
        reached = flips_to_threshold.get(mode, {}).get("mean")
        flips = "-" if reached is None else "%.1f" % reached
        lines.append(
            "| %s | %s | %s | %.2f | %.2f ± %.2f | %s |"
            % (network, dataset, mode.upper(), 100 * clean["mean"], 100 * final["mean"], 100 * deviation, flips)
        )
    return "\n".join(lines)


def report(folder: str, out_folder: str = None):
    """
    Writes accuracy.svg and summary.md for the experiment in folder.
    Returns (svg_path, markdown_path).
    """
    out_folder = out_folder or folder
    os.makedirs(out_folder, exist_ok=True)
    if not os.path.isfile(os.path.join(folder, AGGREGATE_FILE)) and os.path.isfile(
        os.path.join(folder, bdfa_attack.TRACE_JSON)
    ):
        aggregate = _trace_aggregate(folder)
    else:
        aggregate = read_aggregate(folder)
    context = _read_context(folder)
    network = context.get("network", "-")
    dataset = context.get("dataset", "-")
    title = "%s / %s" % (network, dataset) if context else None

    svg_path = write_svg(aggregate, os.path.join(out_folder, SVG_FILE), title)
    table = summary_table(aggregate, network, dataset, context.get("flips_to_threshold"))
    threshold = context.get("threshold")
    caption = "Top-1 accuracy after each bit flip: mean over seeds, ± the largest deviation to the min/max band."
    if threshold is not None:
        caption += " Threshold for flips-to-threshold: %.1f%%." % (100 * threshold)
    markdown = "\n".join(["# Bit-flip attack summary", "", table, "", caption, "", REFERENCE_CAPTION, ""])
    markdown_path = os.path.join(out_folder, MARKDOWN_FILE)
    with open(markdown_path, "w", encoding="utf-8") as markdown_file:
        markdown_file.write(markdown)
    logger.info("report written to %s", out_folder)
    return svg_path, markdown_path
