"""Experiment runners: cross-lingual lower bound, multi-lingual upper
bound, labeled-count sweep, confidence-threshold sweep, and the composite
synthetic benchmark.

Reports hold one row per (run kind, seed); aggregates are mean +/- std over
seeds.  All UA values are fractions in [0, 1].  Published full-corpus
reference accuracies ship as a separate, clearly non-verified column so
full-scale reruns can be diffed against them; nothing in this package
measures or asserts those numbers.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .corpus import (
    CorpusManifest,
    SplitAssignment,
    partition_target,
    split_speaker_independent,
)
from .errors import ConfigError, DataError
from .evaluation import SyntheticData, SyntheticSpec, generate_synthetic
from .features import ArrayFeatureSource
from .semisup import LossConfig
from .trainer import TrainConfig, TrainData, TrainHistory, TrainResult, evaluate_ua, train

EXPERIMENT_KINDS = ("cross_lingual", "multi_lingual", "ssl_sweep", "tau_sweep", "synthetic")

# Published reference accuracies (fractions) from the original full-corpus
# study; informational only, never measured or verified by this package.
REFERENCE_LOWER_UA = {
    "french": 0.5432,
    "german": 0.6056,
    "italian": 0.4928,
    "persian": 0.1828,
}
REFERENCE_SOURCE_ONLY_UA = 0.7913  # source language alone, fully supervised
REFERENCE_UPPER_UA = {
    ("english", "french"): (0.6008, 0.5802),
    ("english", "german"): (0.7504, 0.7324),
    ("english", "italian"): (0.7378, 0.5928),
    ("english", "persian"): (0.7126, 0.8643),
}
REFERENCE_TAU_UA = {
    ("french", 0.50): (0.5199, 0.4568),
    ("french", 0.65): (0.4976, 0.4959),
    ("french", 0.85): (0.5525, 0.4835),
    ("german", 0.50): (0.5982, 0.7559),
    ("german", 0.65): (0.6129, 0.6948),
    ("german", 0.85): (0.6060, 0.6901),
    ("italian", 0.50): (0.6105, 0.4810),
    ("italian", 0.65): (0.5580, 0.4167),
    ("italian", 0.85): (0.6218, 0.4690),
    ("persian", 0.50): (0.5877, 0.7599),
    ("persian", 0.65): (0.5016, 0.7415),
    ("persian", 0.85): (0.5669, 0.7313),
}


@dataclass(frozen=True)
class ExperimentPlan:
    kind: str
    mode: str = "hard"
    labeled_counts: tuple[int, ...] = (0, 25, 50, 75, 100)
    taus: tuple[float, ...] = (0.50, 0.65, 0.85)
    n_labeled: int = 100
    seeds: tuple[int, ...] = (0, 1, 2)
    train: TrainConfig = field(default_factory=TrainConfig)
    synthetic: SyntheticSpec | None = None

    def __post_init__(self) -> None:
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}")
        if self.mode not in ("hard", "soft"):
            raise ConfigError(f"experiment mode must be hard or soft, got {self.mode!r}")
        if not self.seeds:
            raise ConfigError("need at least one seed")
        for t in self.taus:
            if not (0.0 < t < 1.0):
                raise ConfigError(f"tau values must lie in (0, 1), got {t}")
        if any(n < 0 for n in self.labeled_counts):
            raise ConfigError("labeled counts must be nonnegative")


@dataclass(frozen=True)
class ReportRow:
    kind: str
    source_lang: str
    target_lang: str
    n_labeled: int | None
    tau: float | None
    mode: str
    seed: int
    ua_source: float
    ua_target: float | None


@dataclass
class ExperimentReport:
    rows: list[ReportRow] = field(default_factory=list)

    def aggregate(self) -> list[dict]:
        """Mean/std over seeds for every (kind, langs, n_labeled, tau, mode)
        group, in first-appearance order."""
        groups: dict[tuple, list[ReportRow]] = {}
        order: list[tuple] = []
        for row in self.rows:
            key = (row.kind, row.source_lang, row.target_lang, row.n_labeled, row.tau, row.mode)
            if key not in groups:
                groups[key] = []
                order.append(key)
            groups[key].append(row)
        out = []
        for key in order:
            rows = groups[key]
            kind, src, tgt, n_labeled, tau, mode = key
            src_vals = np.array([r.ua_source for r in rows], dtype=np.float64)
            tgt_vals = [r.ua_target for r in rows if r.ua_target is not None]
            entry = {
                "kind": kind,
                "source_lang": src,
                "target_lang": tgt,
                "n_labeled": n_labeled,
                "tau": tau,
                "mode": mode,
                "n_seeds": len(rows),
                "ua_source_mean": float(src_vals.mean()),
                "ua_source_std": float(src_vals.std()),
                "ua_target_mean": float(np.mean(tgt_vals)) if tgt_vals else None,
                "ua_target_std": float(np.std(tgt_vals)) if tgt_vals else None,
                "reference_ua_target": _reference_for(kind, src, tgt, tau),
            }
            out.append(entry)
        return out


def _reference_for(kind: str, src: str, tgt: str, tau: float | None) -> float | None:
    if kind == "cross_lingual":
        return REFERENCE_LOWER_UA.get(tgt)
    if kind == "multi_lingual":
        ref = REFERENCE_UPPER_UA.get((src, tgt))
        return ref[1] if ref else None
    if kind == "tau_sweep" and tau is not None:
        ref = REFERENCE_TAU_UA.get((tgt, round(tau, 2)))
        return ref[1] if ref else None
    return None


@dataclass
class DomainData:
    """One language's split data plus its feature source."""

    language: str
    features: object
    manifest: CorpusManifest
    split: SplitAssignment

    def labels_for(self, part: str) -> dict[str, int]:
        by_id = self.manifest.by_id()
        out: dict[str, int] = {}
        for rid in self.split.ids(part):
            rec = by_id[rid]
            if rec.emotion is None:
                raise DataError(f"record {rid!r} in {part} split has no label")
            out[rid] = int(rec.emotion)
        return out

    def train_records(self):
        by_id = self.manifest.by_id()
        return [by_id[rid] for rid in self.split.train]


def synthetic_domains(spec: SyntheticSpec, seed: int) -> tuple[DomainData, DomainData]:
    """Regenerate the benchmark for one seed and split each domain."""
    data: SyntheticData = generate_synthetic(replace(spec, seed=spec.seed + seed))
    features = ArrayFeatureSource(data.embeddings)
    out = []
    for manifest in (data.source_manifest, data.target_manifest):
        split = split_speaker_independent(manifest, (0.6, 0.2, 0.2), seed=seed)
        out.append(
            DomainData(language=manifest.language, features=features, manifest=manifest, split=split)
        )
    return out[0], out[1]


def domain_from_manifest(
    manifest: CorpusManifest,
    split: SplitAssignment,
    features,
) -> DomainData:
    return DomainData(
        language=manifest.language, features=features, manifest=manifest, split=split
    )


def assemble_train_data(
    source: DomainData,
    target: DomainData | None,
    n_labeled: int | None,
    seed: int,
) -> TrainData:
    """Build the training pools for one run.

    n_labeled=None marks a fully supervised run: the target (when present)
    contributes its whole labeled training split.  Validation covers only
    the languages contributing labeled training data, so zero-label runs
    never select checkpoints on target labels.
    """
    features = source.features
    target_labeled: dict[str, int] = {}
    unlabeled: tuple[str, ...] = ()
    validation = {source.language: source.labels_for("val")}
    if target is not None:
        features = _merge_features(source.features, target.features)
        if n_labeled is None:
            target_labeled = target.labels_for("train")
        else:
            partition = partition_target(target.train_records(), n_labeled, seed=seed)
            train_labels = target.labels_for("train")
            target_labeled = {rid: train_labels[rid] for rid in partition.labeled_ids}
            unlabeled = partition.unlabeled_ids
        if target_labeled:
            validation[target.language] = target.labels_for("val")
    return TrainData(
        features=features,
        source_labeled=source.labels_for("train"),
        target_labeled=target_labeled,
        unlabeled_ids=unlabeled,
        validation=validation,
    )


def _run_once(
    cfg: TrainConfig,
    seed: int,
    mode: str,
    source: DomainData,
    target: DomainData | None,
    n_labeled: int | None,
    tau: float | None = None,
) -> tuple[TrainResult, float, float | None]:
    """Train one configuration and score the source/target test sets."""
    loss = cfg.loss
    if tau is not None:
        loss = LossConfig(
            mode=loss.mode,
            tau=tau,
            balance_weight=loss.balance_weight,
            entropy_weight=loss.entropy_weight,
        )
    run_cfg = replace(cfg, seed=seed, loss=loss)
    data = assemble_train_data(source, target, n_labeled, seed)
    result = train(run_cfg, data, mode=mode)
    ua_source = evaluate_ua(result.params, data.features, source.labels_for("test"))
    ua_target = (
        evaluate_ua(result.params, data.features, target.labels_for("test"))
        if target is not None
        else None
    )
    return result, ua_source, ua_target


def _merge_features(a, b):
    if a is b:
        return a
    from .features import CompositeFeatureSource

    return CompositeFeatureSource([a, b])


@dataclass
class ExperimentResult:
    report: ExperimentReport
    histories: dict[tuple, TrainHistory] = field(default_factory=dict)


def run_cross_lingual(plan: ExperimentPlan, builder) -> ExperimentResult:
    """Supervised training on the source only; the target is test-only."""
    result = ExperimentResult(ExperimentReport())
    for seed in plan.seeds:
        source, target = builder(seed)
        run, ua_src, _ = _run_once(plan.train, seed, "supervised", source, None, None)
        ua_tgt = evaluate_ua(run.params, target.features, target.labels_for("test"))
        result.histories[("cross_lingual", seed)] = run.history
        result.report.rows.append(
            ReportRow(
                kind="cross_lingual",
                source_lang=source.language,
                target_lang=target.language,
                n_labeled=0,
                tau=None,
                mode="supervised",
                seed=seed,
                ua_source=ua_src,
                ua_target=ua_tgt,
            )
        )
    return result


def run_multi_lingual(plan: ExperimentPlan, builder) -> ExperimentResult:
    """Fully supervised training on source plus target (the upper bound)."""
    result = ExperimentResult(ExperimentReport())
    for seed in plan.seeds:
        source, target = builder(seed)
        run, ua_src, ua_tgt = _run_once(plan.train, seed, "supervised", source, target, None)
        result.histories[("multi_lingual", seed)] = run.history
        result.report.rows.append(
            ReportRow(
                kind="multi_lingual",
                source_lang=source.language,
                target_lang=target.language,
                n_labeled=None,
                tau=None,
                mode="supervised",
                seed=seed,
                ua_source=ua_src,
                ua_target=ua_tgt,
            )
        )
    return result


def run_ssl_sweep(plan: ExperimentPlan, builder) -> ExperimentResult:
    """Pseudo-label training across the labeled-count grid."""
    result = ExperimentResult(ExperimentReport())
    for seed in plan.seeds:
        source, target = builder(seed)
        for n_labeled in plan.labeled_counts:
            run, ua_src, ua_tgt = _run_once(
                plan.train, seed, plan.mode, source, target, n_labeled
            )
            result.histories[("ssl_sweep", plan.mode, n_labeled, seed)] = run.history
            result.report.rows.append(
                ReportRow(
                    kind="ssl_sweep",
                    source_lang=source.language,
                    target_lang=target.language,
                    n_labeled=n_labeled,
                    tau=plan.train.loss.tau,
                    mode=plan.mode,
                    seed=seed,
                    ua_source=ua_src,
                    ua_target=ua_tgt,
                )
            )
    return result


def run_tau_sweep(plan: ExperimentPlan, builder) -> ExperimentResult:
    """Hard pseudo-label runs across the confidence-threshold grid."""
    if plan.mode != "hard":
        raise ConfigError("the threshold sweep applies to hard pseudo-labels")
    result = ExperimentResult(ExperimentReport())
    for seed in plan.seeds:
        source, target = builder(seed)
        for tau in plan.taus:
            run, ua_src, ua_tgt = _run_once(
                plan.train, seed, "hard", source, target, plan.n_labeled, tau=tau
            )
            result.histories[("tau_sweep", tau, seed)] = run.history
            result.report.rows.append(
                ReportRow(
                    kind="tau_sweep",
                    source_lang=source.language,
                    target_lang=target.language,
                    n_labeled=plan.n_labeled,
                    tau=tau,
                    mode="hard",
                    seed=seed,
                    ua_source=ua_src,
                    ua_target=ua_tgt,
                )
            )
    return result


def run_synthetic_benchmark(plan: ExperimentPlan) -> ExperimentResult:
    """Composite desk-scale benchmark: lower bound, upper bound, and the
    labeled-count sweep on the synthetic domain pair."""
    spec = plan.synthetic or SyntheticSpec(delta=4.0)
    builder = lambda seed: synthetic_domains(spec, seed)
    result = ExperimentResult(ExperimentReport())
    for part in (
        run_cross_lingual(plan, builder),
        run_multi_lingual(plan, builder),
        run_ssl_sweep(plan, builder),
    ):
        result.report.rows.extend(part.report.rows)
        result.histories.update(part.histories)
    return result


def run_experiment(plan: ExperimentPlan, builder=None) -> ExperimentResult:
    if plan.kind == "synthetic":
        return run_synthetic_benchmark(plan)
    if builder is None:
        if plan.synthetic is not None:
            spec = plan.synthetic
            builder = lambda seed: synthetic_domains(spec, seed)
        else:
            raise ConfigError("this experiment kind needs a data builder or synthetic spec")
    runner = {
        "cross_lingual": run_cross_lingual,
        "multi_lingual": run_multi_lingual,
        "ssl_sweep": run_ssl_sweep,
        "tau_sweep": run_tau_sweep,
    }[plan.kind]
    return runner(plan, builder)


# ---------------------------------------------------------------------------
# report emission


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def emit_report(report: ExperimentReport, out_dir: str | Path) -> list[Path]:
    """Write report.csv, summary.csv, and plotdata_*.csv; byte-stable for a
    given report."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create report directory {out_dir}: {exc}") from None
    written: list[Path] = []

    report_path = out_dir / "report.csv"
    with report_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["kind", "source_lang", "target_lang", "n_labeled", "tau", "mode", "seed",
             "ua_source", "ua_target"]
        )
        for row in report.rows:
            writer.writerow(
                [row.kind, row.source_lang, row.target_lang, _fmt(row.n_labeled),
                 _fmt(row.tau), row.mode, row.seed, _fmt(row.ua_source), _fmt(row.ua_target)]
            )
    written.append(report_path)

    summary_path = out_dir / "summary.csv"
    aggregates = report.aggregate()
    with summary_path.open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(
            ["kind", "source_lang", "target_lang", "n_labeled", "tau", "mode", "n_seeds",
             "ua_source_mean", "ua_source_std", "ua_target_mean", "ua_target_std",
             "reference_ua_target_published_not_verified"]
        )
        for agg in aggregates:
            writer.writerow(
                [agg["kind"], agg["source_lang"], agg["target_lang"], _fmt(agg["n_labeled"]),
                 _fmt(agg["tau"]), agg["mode"], agg["n_seeds"],
                 _fmt(agg["ua_source_mean"]), _fmt(agg["ua_source_std"]),
                 _fmt(agg["ua_target_mean"]), _fmt(agg["ua_target_std"]),
                 _fmt(agg["reference_ua_target"])]
            )
    written.append(summary_path)

    sweep_aggs = [a for a in aggregates if a["kind"] == "ssl_sweep"]
    if sweep_aggs:
        path = out_dir / "plotdata_ssl_sweep.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["n_labeled", "mode", "ua_target_mean", "ua_target_std",
                 "ua_source_mean", "ua_source_std"]
            )
            for agg in sweep_aggs:
                writer.writerow(
                    [agg["n_labeled"], agg["mode"], _fmt(agg["ua_target_mean"]),
                     _fmt(agg["ua_target_std"]), _fmt(agg["ua_source_mean"]),
                     _fmt(agg["ua_source_std"])]
                )
        written.append(path)

    tau_aggs = [a for a in aggregates if a["kind"] == "tau_sweep"]
    if tau_aggs:
        path = out_dir / "plotdata_tau_sweep.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["tau", "ua_target_mean", "ua_target_std", "ua_source_mean", "ua_source_std",
                 "reference_ua_target_published_not_verified"]
            )
            for agg in tau_aggs:
                writer.writerow(
                    [_fmt(agg["tau"]), _fmt(agg["ua_target_mean"]), _fmt(agg["ua_target_std"]),
                     _fmt(agg["ua_source_mean"]), _fmt(agg["ua_source_std"]),
                     _fmt(agg["reference_ua_target"])]
                )
        written.append(path)

    bound_aggs = [a for a in aggregates if a["kind"] in ("cross_lingual", "multi_lingual")]
    if bound_aggs:
        path = out_dir / "plotdata_bounds.csv"
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["kind", "target_lang", "ua_target_mean", "ua_target_std",
                 "reference_ua_target_published_not_verified"]
            )
            for agg in bound_aggs:
                writer.writerow(
                    [agg["kind"], agg["target_lang"], _fmt(agg["ua_target_mean"]),
                     _fmt(agg["ua_target_std"]), _fmt(agg["reference_ua_target"])]
                )
        written.append(path)

    return written
