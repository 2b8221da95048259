"""Figure rendering for emitted experiment reports.

Kept out of the experiment runners so the core pipeline has no plotting
dependency; the CLI calls into here after writing the CSVs.  PNGs carry no
timestamps, so reruns are byte-stable.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

from .experiments import ExperimentReport

_PNG_META = {"Software": "xlssl"}


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=120, metadata=_PNG_META)
    plt.close(fig)
    return path


def render_report_figures(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """Render one figure per report section present; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    aggregates = report.aggregate()
    written: list[Path] = []

    sweep = [a for a in aggregates if a["kind"] == "ssl_sweep"]
    if sweep:
        written.append(_save(_ssl_sweep_figure(sweep), out_dir / "figure_ssl_sweep.png"))

    taus = [a for a in aggregates if a["kind"] == "tau_sweep"]
    if taus:
        written.append(_save(_tau_sweep_figure(taus), out_dir / "figure_tau_sweep.png"))

    bounds = [a for a in aggregates if a["kind"] in ("cross_lingual", "multi_lingual")]
    if bounds:
        sweep_best = max(sweep, key=lambda a: a["n_labeled"]) if sweep else None
        written.append(
            _save(_bounds_figure(bounds, sweep_best), out_dir / "figure_bounds.png")
        )
    return written


def _ssl_sweep_figure(sweep: list[dict]):
    """Grouped bars: target UA per labeled count and mode, with narrow dark
    bars for the source-language UA of the same runs."""
    modes = sorted({a["mode"] for a in sweep})
    counts = sorted({a["n_labeled"] for a in sweep})
    x = np.arange(len(counts), dtype=np.float64)
    width = 0.72 / max(len(modes), 1)
    fig, ax = plt.subplots(figsize=(7.0, 4.0))
    for k, mode in enumerate(modes):
        by_count = {a["n_labeled"]: a for a in sweep if a["mode"] == mode}
        tgt = [by_count[c]["ua_target_mean"] if c in by_count else np.nan for c in counts]
        err = [by_count[c]["ua_target_std"] if c in by_count else 0.0 for c in counts]
        src = [by_count[c]["ua_source_mean"] if c in by_count else np.nan for c in counts]
        pos = x + (k - (len(modes) - 1) / 2) * width
        ax.bar(pos, tgt, width * 0.82, yerr=err, capsize=2, label=f"target ({mode})")
        ax.bar(pos + width * 0.28, src, width * 0.18, color="black", label=f"source ({mode})")
    ax.set_xticks(x)
    ax.set_xticklabels([str(c) for c in counts])
    ax.set_xlabel("labeled target utterances")
    ax.set_ylabel("unweighted accuracy")
    ax.set_ylim(0, 1.0)
    ax.legend(fontsize=8)
    ax.set_title("Pseudo-label adaptation vs. available target labels")
    fig.tight_layout()
    return fig


def _tau_sweep_figure(taus: list[dict]):
    order = sorted(taus, key=lambda a: a["tau"])
    labels = [f"{a['tau']:.2f}" for a in order]
    x = np.arange(len(order), dtype=np.float64)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(x - 0.18, [a["ua_target_mean"] for a in order], 0.36,
           yerr=[a["ua_target_std"] for a in order], capsize=2, label="target")
    ax.bar(x + 0.18, [a["ua_source_mean"] for a in order], 0.36,
           yerr=[a["ua_source_std"] for a in order], capsize=2, label="source")
    ax.set_xticks(x)
    ax.set_xticklabels(labels)
    ax.set_xlabel("confidence threshold")
    ax.set_ylabel("unweighted accuracy")
    ax.set_ylim(0, 1.0)
    ax.legend(fontsize=8)
    ax.set_title("Hard pseudo-labels: threshold ablation")
    fig.tight_layout()
    return fig


def _bounds_figure(bounds: list[dict], sweep_best: dict | None):
    names = []
    values = []
    errs = []
    for kind, label in (("cross_lingual", "lower bound"), ("multi_lingual", "upper bound")):
        for a in bounds:
            if a["kind"] == kind and a["ua_target_mean"] is not None:
                names.append(f"{label}\n({a['target_lang']})")
                values.append(a["ua_target_mean"])
                errs.append(a["ua_target_std"] or 0.0)
    if sweep_best is not None and sweep_best["ua_target_mean"] is not None:
        names.append(f"ssl {sweep_best['mode']}\n(n={sweep_best['n_labeled']})")
        values.append(sweep_best["ua_target_mean"])
        errs.append(sweep_best["ua_target_std"] or 0.0)
    fig, ax = plt.subplots(figsize=(6.0, 4.0))
    ax.bar(np.arange(len(names)), values, 0.6, yerr=errs, capsize=3)
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, fontsize=8)
    ax.set_ylabel("target unweighted accuracy")
    ax.set_ylim(0, 1.0)
    ax.set_title("Bounds vs. semi-supervised adaptation")
    fig.tight_layout()
    return fig
