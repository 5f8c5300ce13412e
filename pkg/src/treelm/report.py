"""Comparison report: markdown and TSV accuracy tables over model variants,
plus rendered figures.  Input is a results directory of suite TSVs named
``<model>.seed<k>.suite.tsv`` (and optional ``<model>.seed<k>.ppl.tsv``)."""

from __future__ import annotations

import os
import re

import numpy as np

from .checkpoint import atomic_write
from .evalsuite import aggregate_results, read_suite_tsv

# Fixed column order; only columns present in the results directory appear.
MODEL_COLUMNS = [
    ("small-lstm", "Small LSTM"),
    ("s-dsa-lstm", "S-DSA-LSTM"),
    ("rnng", "RNNG"),
    ("full-lstm", "Full LSTM"),
    ("ba-lstm", "BA-LSTM"),
    ("dsa-lstm", "DSA-LSTM"),
]

_SUITE_RE = re.compile(r"^(?P<model>[a-z0-9-]+)\.seed(?P<seed>\d+)\.suite\.tsv$")
_PPL_RE = re.compile(r"^(?P<model>[a-z0-9-]+)\.seed(?P<seed>\d+)\.ppl\.tsv$")


def collect_results(results_dir):
    """(suite results by model id, perplexities by model id), seed-sorted."""
    suites, ppls = {}, {}
    for name in sorted(os.listdir(results_dir)):
        match = _SUITE_RE.match(name)
        if match:
            result = read_suite_tsv(os.path.join(results_dir, name),
                                    match["model"], int(match["seed"]))
            suites.setdefault(match["model"], []).append(result)
            continue
        match = _PPL_RE.match(name)
        if match:
            with open(os.path.join(results_dir, name), encoding="utf-8") as fh:
                header = fh.readline().rstrip("\n").split("\t")
                row = fh.readline().rstrip("\n").split("\t")
            value = float(row[header.index("ppl")])
            ppls.setdefault(match["model"], []).append(value)
    if not suites:
        raise ValueError(f"no suite results (*.seedN.suite.tsv) in {results_dir}")
    return suites, ppls


def _ordered_models(suites):
    known = [mid for mid, _ in MODEL_COLUMNS if mid in suites]
    extra = sorted(set(suites) - {mid for mid, _ in MODEL_COLUMNS})
    return known + extra


def comparison_table(suites):
    """Per-construction (mean, stdev) per model plus the aggregate row.

    Fails listing the difference if models cover different constructions.
    Returns (construction tags, model ids, cells, n_seeds by model) where
    cells[tag or 'AGGREGATE'][model] = (mean, stdev).
    """
    models = _ordered_models(suites)
    tags = sorted(suites[models[0]][0].constructions)
    for model in models:
        got = sorted(suites[model][0].constructions)
        if got != tags:
            diff = sorted(set(tags).symmetric_difference(got))
            raise ValueError(
                f"model {model!r} covers different constructions: {diff}")
    cells = {tag: {} for tag in tags}
    cells["AGGREGATE"] = {}
    seeds = {}
    for model in models:
        table, agg = aggregate_results(suites[model])
        for tag in tags:
            cells[tag][model] = table[tag]
        cells["AGGREGATE"][model] = agg
        seeds[model] = len(suites[model])
    return tags, models, cells, seeds


def _fmt(mean, std, with_std):
    return f"{mean:.3f} ± {std:.3f}" if with_std else f"{mean:.3f}"


def write_report(results_dir, out_prefix, figures=True):
    """Render <prefix>.tsv, <prefix>.md and (optionally) <prefix>_*.png."""
    suites, ppls = collect_results(results_dir)
    tags, models, cells, seeds = comparison_table(suites)
    multi_seed = any(n > 1 for n in seeds.values())
    display = dict(MODEL_COLUMNS)
    written = []

    tsv_path = out_prefix + ".tsv"

    def tsv_writer(fh):
        cols = ["construction"]
        for model in models:
            cols.append(f"{model}_mean")
            if multi_seed:
                cols.append(f"{model}_stdev")
        fh.write(("\t".join(cols) + "\n").encode())
        for tag in tags + ["AGGREGATE"]:
            row = [tag]
            for model in models:
                mean, std = cells[tag][model]
                row.append(f"{mean:.6f}")
                if multi_seed:
                    row.append(f"{std:.6f}")
            fh.write(("\t".join(row) + "\n").encode())

    atomic_write(tsv_path, tsv_writer)
    written.append(tsv_path)

    md_path = out_prefix + ".md"

    def md_writer(fh):
        def line(text=""):
            fh.write((text + "\n").encode())

        line("# Targeted syntactic evaluation")
        line()
        line("Accuracy per construction; the best model in each row is "
             "starred. Values are means"
             + (" ± population stdev across seeds." if multi_seed else "."))
        line()
        headers = ["Construction"] + [display.get(m, m) for m in models]
        line("| " + " | ".join(headers) + " |")
        line("|" + "---|" * len(headers))
        for tag in tags + ["AGGREGATE"]:
            label = "Average of all constructions" if tag == "AGGREGATE" else tag
            best = max(cells[tag][m][0] for m in models)
            row = [label]
            for model in models:
                mean, std = cells[tag][model]
                text = _fmt(mean, std, multi_seed)
                if mean == best:
                    text += " *"
                row.append(text)
            line("| " + " | ".join(row) + " |")
        line()
        line("Seeds per model: "
             + ", ".join(f"{display.get(m, m)}: {seeds[m]}" for m in models))
        if ppls:
            line()
            line("## Validation perplexity")
            line()
            line("| Model | Perplexity |")
            line("|---|---|")
            for model in models:
                if model in ppls:
                    values = np.array(ppls[model])
                    line(f"| {display.get(model, model)} | "
                         f"{_fmt(values.mean(), values.std(), len(values) > 1)} |")

    atomic_write(md_path, md_writer)
    written.append(md_path)

    if figures:
        written.extend(render_figures(out_prefix, tags, models, cells,
                                      display, ppls))
    return written


def render_figures(out_prefix, tags, models, cells, display, ppls):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    written = []
    width = 0.8 / len(models)
    x = np.arange(len(tags))
    fig, ax = plt.subplots(figsize=(max(6, 1.2 * len(tags)), 4))
    for i, model in enumerate(models):
        means = [cells[tag][model][0] for tag in tags]
        stds = [cells[tag][model][1] for tag in tags]
        ax.bar(x + i * width, means, width, yerr=stds, capsize=2,
               label=display.get(model, model))
    ax.set_xticks(x + 0.4 - width / 2)
    ax.set_xticklabels(tags, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("accuracy")
    ax.set_ylim(0, 1.05)
    ax.legend(fontsize=8)
    ax.set_title("Minimal-pair accuracy by construction")
    fig.tight_layout()
    acc_path = out_prefix + "_accuracy.png"
    fig.savefig(acc_path, metadata={"Software": None})
    plt.close(fig)
    written.append(acc_path)

    fig, ax = plt.subplots(figsize=(6, 4))
    names = [display.get(m, m) for m in models]
    means = [cells["AGGREGATE"][m][0] for m in models]
    stds = [cells["AGGREGATE"][m][1] for m in models]
    ax.bar(names, means, yerr=stds, capsize=3)
    ax.set_ylabel("aggregate accuracy")
    ax.set_ylim(0, 1.05)
    ax.set_title("Average of all constructions")
    plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
    fig.tight_layout()
    agg_path = out_prefix + "_aggregate.png"
    fig.savefig(agg_path, metadata={"Software": None})
    plt.close(fig)
    written.append(agg_path)

    if ppls:
        fig, ax = plt.subplots(figsize=(6, 4))
        present = [m for m in models if m in ppls]
        values = [float(np.mean(ppls[m])) for m in present]
        ax.bar([display.get(m, m) for m in present], values)
        ax.set_ylabel("validation perplexity")
        ax.set_title("Perplexity trade-off")
        plt.setp(ax.get_xticklabels(), rotation=20, ha="right")
        fig.tight_layout()
        ppl_path = out_prefix + "_ppl.png"
        fig.savefig(ppl_path, metadata={"Software": None})
        plt.close(fig)
        written.append(ppl_path)
    return written
