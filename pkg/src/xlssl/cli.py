"""Command-line front end.

Subcommands: prepare, extract, train, evaluate, experiment.  Every option
can also come from a JSON config file (``--config``); explicit flags win
over the file, the file wins over built-in defaults, and unknown config
keys are rejected before any work starts.  The XLSSL_CACHE environment
variable supplies a default feature cache directory.

Exit codes: 0 success, 1 validation error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import multiprocessing
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import experiments as exp_mod
from . import features as feat_mod
from . import model as model_mod
from . import plots as plots_mod
from . import trainer as trainer_mod
from .errors import ConfigError, DataError, NumericError
from .evaluation import SyntheticSpec, evaluate_predictions, save_eval_result
from .semisup import LossConfig


def _opt(name: str, typ, default, help_text: str, **extra) -> dict:
    return {"name": name, "type": typ, "default": default, "help": help_text, **extra}


def _int_list(text: str) -> list[int]:
    return [int(x) for x in text.split(",") if x.strip()]


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


_TRAIN_OPTS = [
    _opt("mode", str, "supervised", "training objective: supervised, hard, or soft"),
    _opt("epochs", int, 100, "training epochs"),
    _opt("batch_size", int, 100, "utterances per batch"),
    _opt("learning_rate", float, 1e-3, "initial Adam learning rate"),
    _opt("lr_decay", float, 0.95, "learning-rate decay factor applied every 10 epochs"),
    _opt("beta1", float, 0.9, "Adam first-moment decay rate"),
    _opt("beta2", float, 0.999, "Adam second-moment decay rate"),
    _opt("adam_eps", float, 1e-8, "Adam denominator epsilon"),
    _opt("warmup_epochs", int, 10, "labeled-only epochs before pseudo-label terms activate"),
    _opt("seed", int, 0, "base random seed"),
    _opt("tau", float, 0.50, "confidence threshold for hard pseudo-labels"),
    _opt("balance_weight", float, 0.8, "anti-collapse regularizer weight (soft mode)"),
    _opt("entropy_weight", float, 0.4, "prediction-sharpening regularizer weight (soft mode)"),
    _opt("encoder", str, "bypass", "encoder kind: bypass, mlp, or cnn-small"),
    _opt("embedding_dim", int, 1024, "embedding width D"),
    _opt("hidden", _int_list, [128], "comma-separated MLP hidden sizes"),
]

_FEATURE_OPTS = [
    _opt("sample_rate", int, 16000, "working sample rate in Hz"),
    _opt("window", int, 1024, "STFT window length in samples"),
    _opt("hop", int, 160, "STFT hop in samples"),
    _opt("n_mels", int, 64, "mel filterbank size"),
    _opt("fmin", float, 60.0, "lowest mel filterbank frequency in Hz"),
    _opt("fmax", float, 7800.0, "highest mel filterbank frequency in Hz"),
    _opt("crop_seconds", float, 2.0, "training crop length in seconds"),
]

_DATA_OPTS = [
    _opt("source_manifest", str, None, "source-language manifest (JSONL)"),
    _opt("source_splits", str, None, "source-language split assignment (JSON)"),
    _opt("target_manifest", str, None, "target-language manifest (JSONL)"),
    _opt("target_splits", str, None, "target-language split assignment (JSON)"),
    _opt("n_labeled", int, 100, "labeled target utterances available to training"),
    _opt("cache_dir", str, None, "feature cache directory (default: $XLSSL_CACHE)"),
    _opt("embeddings_dir", str, None, "directory of precomputed .femb embeddings"),
]

_EXPERIMENT_OPTS = [
    _opt("kind", str, "synthetic",
         "experiment kind: cross_lingual, multi_lingual, ssl_sweep, tau_sweep, synthetic"),
    _opt("seeds", int, 3, "number of seeds (seed, seed+1, ...)"),
    _opt("labeled_counts", _int_list, [0, 25, 50, 75, 100],
         "comma-separated labeled-count grid for ssl_sweep"),
    _opt("taus", _float_list, [0.50, 0.65, 0.85],
         "comma-separated confidence thresholds for tau_sweep"),
    _opt("synthetic", bool, False, "use the synthetic benchmark instead of manifests",
         action="store_true"),
    _opt("syn_dim", int, 16, "synthetic embedding dimension"),
    _opt("syn_sigma", float, 1.0, "synthetic cluster standard deviation"),
    _opt("syn_delta", float, 4.0, "synthetic domain shift"),
    _opt("syn_samples_per_class", int, 333, "synthetic samples per class per domain"),
    _opt("syn_speakers", int, 10, "synthetic speakers per domain"),
    _opt("no_figures", bool, False, "skip figure rendering", action="store_true"),
]

_COMMAND_OPTS: dict[str, list[dict]] = {
    "prepare": [
        _opt("manifests", str, None, "raw manifest files to filter and merge", nargs="+"),
        _opt("taxonomy", str, None, "raw-label taxonomy JSON (label -> class or null)"),
        _opt("seed", int, 0, "split seed"),
        _opt("name", str, None, "name for the merged manifest"),
        _opt("ratios", _float_list, [0.6, 0.2, 0.2], "train,val,test utterance ratios"),
        _opt("out", str, None, "output directory"),
    ],
    "extract": [
        _opt("manifest", str, None, "manifest of utterances to extract"),
        _opt("cache_dir", str, None, "feature cache directory (default: $XLSSL_CACHE)"),
        _opt("jobs", int, 1, "worker processes for extraction"),
        *_FEATURE_OPTS,
    ],
    "train": [*_TRAIN_OPTS, *_FEATURE_OPTS, *_DATA_OPTS, _opt("out", str, None, "output directory")],
    "evaluate": [
        _opt("checkpoint", str, None, "model checkpoint to evaluate"),
        _opt("manifest", str, None, "manifest of the evaluation corpus"),
        _opt("splits", str, None, "split assignment for the manifest"),
        _opt("split", str, "test", "partition to score: train, val, or test"),
        _opt("cache_dir", str, None, "feature cache directory (default: $XLSSL_CACHE)"),
        _opt("embeddings_dir", str, None, "directory of precomputed .femb embeddings"),
        _opt("out", str, None, "output directory"),
        *_FEATURE_OPTS,
    ],
    "experiment": [
        *_EXPERIMENT_OPTS,
        *_TRAIN_OPTS,
        *_FEATURE_OPTS,
        *_DATA_OPTS,
        _opt("out", str, None, "output directory"),
    ],
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xlssl",
        description="Cross-lingual speech emotion recognition with pseudo-label "
        "based semi-supervised adaptation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for command, opts in _COMMAND_OPTS.items():
        p = sub.add_parser(command, help=f"{command} pipeline stage")
        p.add_argument("--config", type=str, default=None,
                       help="JSON config file; explicit flags override its values")
        seen = set()
        for opt in opts:
            if opt["name"] in seen:
                continue
            seen.add(opt["name"])
            flag = "--" + opt["name"].replace("_", "-")
            help_text = f"{opt['help']} (default: {opt['default']})"
            if opt.get("action") == "store_true":
                p.add_argument(flag, dest=opt["name"], action="store_const", const=True,
                               default=None, help=help_text)
            else:
                p.add_argument(flag, dest=opt["name"], type=opt["type"], default=None,
                               nargs=opt.get("nargs"), help=help_text)
    return parser


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults <- config file <- explicit flags, with unknown keys rejected."""
    opts = {o["name"]: o for o in _COMMAND_OPTS[command]}
    cfg = {name: opt["default"] for name, opt in opts.items()}
    if args.config is not None:
        path = Path(args.config)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            loaded = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON ({exc.msg})") from None
        if not isinstance(loaded, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = sorted(set(loaded) - set(opts))
        if unknown:
            raise ConfigError(f"{path}: unknown config keys {unknown}")
        cfg.update(loaded)
    for name in opts:
        value = getattr(args, name, None)
        if value is not None:
            cfg[name] = value
    if cfg.get("cache_dir") is None and os.environ.get("XLSSL_CACHE"):
        cfg["cache_dir"] = os.environ["XLSSL_CACHE"]
    return cfg


def _train_config(cfg: dict) -> trainer_mod.TrainConfig:
    return trainer_mod.TrainConfig(
        epochs=cfg["epochs"],
        batch_size=cfg["batch_size"],
        learning_rate=cfg["learning_rate"],
        lr_decay=cfg["lr_decay"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        adam_eps=cfg["adam_eps"],
        warmup_epochs=cfg["warmup_epochs"],
        seed=cfg["seed"],
        loss=LossConfig(
            mode=cfg["mode"] if cfg["mode"] in ("supervised", "hard", "soft") else "supervised",
            tau=cfg["tau"],
            balance_weight=cfg["balance_weight"],
            entropy_weight=cfg["entropy_weight"],
        ),
        arch=model_mod.ArchSpec(
            kind=cfg["encoder"],
            embedding_dim=cfg["embedding_dim"],
            hidden=tuple(cfg["hidden"]),
            n_mels=cfg["n_mels"],
        ),
    )


def _feature_params(cfg: dict) -> feat_mod.FeatureParams:
    return feat_mod.FeatureParams(
        sample_rate=cfg["sample_rate"],
        window=cfg["window"],
        hop=cfg["hop"],
        n_mels=cfg["n_mels"],
        fmin=cfg["fmin"],
        fmax=cfg["fmax"],
    )


def _feature_source(cfg: dict, manifests: list[corpus_mod.CorpusManifest]):
    if cfg.get("embeddings_dir"):
        return feat_mod.EmbeddingDirSource(cfg["embeddings_dir"])
    params = _feature_params(cfg)
    if cfg.get("cache_dir"):
        cache = feat_mod.FeatureCache(cfg["cache_dir"], params)
        return feat_mod.CachedFeatureSource(cache, crop_seconds=cfg["crop_seconds"])
    paths: dict[str, str] = {}
    for manifest in manifests:
        for rec in manifest.records:
            paths[rec.id] = rec.audio_path
    return feat_mod.AudioFeatureSource(paths, params, crop_seconds=cfg["crop_seconds"])


def _require(cfg: dict, *keys: str) -> None:
    missing = [k for k in keys if not cfg.get(k)]
    if missing:
        raise ConfigError(f"missing required option(s): {', '.join(missing)}")


def cmd_prepare(cfg: dict) -> int:
    _require(cfg, "manifests", "out")
    taxonomy = corpus_mod.load_taxonomy(cfg["taxonomy"]) if cfg.get("taxonomy") else {}
    known = set(taxonomy)
    manifests = [
        corpus_mod.load_manifest(p, known_labels=known) for p in cfg["manifests"]
    ]
    filtered = [corpus_mod.map_and_filter_emotions(m, taxonomy) for m in manifests]
    merged = corpus_mod.merge_corpora(filtered, name=cfg.get("name"))
    ratios = tuple(cfg["ratios"])
    split = corpus_mod.split_speaker_independent(merged, ratios, seed=cfg["seed"])
    out = Path(cfg["out"])
    corpus_mod.save_manifest(merged, out / "manifest.jsonl")
    corpus_mod.save_split(split, out / "splits.json")
    counts = merged.counts
    tally = ", ".join(f"{c.label}={n}" for c, n in counts.items())
    print(f"prepared {merged.name}: {len(merged)} utterances ({tally})")
    print(f"splits: train={len(split.train)} val={len(split.val)} test={len(split.test)}")
    return 0


def _extract_worker(job: tuple) -> tuple[str, str | None]:
    record_id, audio_path, cache_dir, params_tuple = job
    params = feat_mod.FeatureParams(*params_tuple)
    cache = feat_mod.FeatureCache(cache_dir, params)
    try:
        from .audio import decode_wav, resample

        w = resample(decode_wav(audio_path), params.sample_rate)
        cache.write(record_id, feat_mod.extract(w, params))
        return record_id, None
    except DataError as exc:
        return record_id, str(exc)


def cmd_extract(cfg: dict) -> int:
    _require(cfg, "manifest", "cache_dir")
    manifest = corpus_mod.load_manifest(cfg["manifest"])
    params = _feature_params(cfg)
    cache = feat_mod.FeatureCache(cfg["cache_dir"], params)
    params_tuple = (
        params.sample_rate, params.window, params.hop, params.n_mels, params.fmin, params.fmax,
    )
    jobs = [
        (rec.id, rec.audio_path, cfg["cache_dir"], params_tuple)
        for rec in manifest.records
        if not cache.has(rec.id)
    ]
    skipped = len(manifest) - len(jobs)
    failures: list[tuple[str, str]] = []
    if cfg["jobs"] > 1 and len(jobs) > 1:
        with multiprocessing.Pool(cfg["jobs"]) as pool:
            results = pool.map(_extract_worker, jobs)
    else:
        results = [_extract_worker(j) for j in jobs]
    for record_id, err in results:
        if err is not None:
            failures.append((record_id, err))
    print(f"extracted {len(jobs) - len(failures)} of {len(jobs)} ({skipped} up to date)")
    if failures:
        fail_path = Path(cfg["cache_dir"]) / "failures.csv"
        with fail_path.open("w", encoding="utf-8", newline="\n") as fh:
            fh.write("id,reason\n")
            for record_id, reason in failures:
                fh.write(f"{record_id},{json.dumps(reason)}\n")
        print(f"{len(failures)} failure(s) listed in {fail_path}", file=sys.stderr)
        return 2
    return 0


def _load_domain(cfg: dict, manifest_key: str, splits_key: str, features) -> exp_mod.DomainData:
    manifest = corpus_mod.load_manifest(cfg[manifest_key])
    split = corpus_mod.load_split(cfg[splits_key], manifest)
    return exp_mod.domain_from_manifest(manifest, split, features)


def cmd_train(cfg: dict) -> int:
    _require(cfg, "source_manifest", "source_splits", "out")
    train_cfg = _train_config(cfg)
    manifests = [corpus_mod.load_manifest(cfg["source_manifest"])]
    if cfg.get("target_manifest"):
        _require(cfg, "target_splits")
        manifests.append(corpus_mod.load_manifest(cfg["target_manifest"]))
    features = _feature_source(cfg, manifests)
    source = exp_mod.domain_from_manifest(
        manifests[0], corpus_mod.load_split(cfg["source_splits"], manifests[0]), features
    )
    target = None
    if cfg.get("target_manifest"):
        target = exp_mod.domain_from_manifest(
            manifests[1], corpus_mod.load_split(cfg["target_splits"], manifests[1]), features
        )
    n_labeled = cfg["n_labeled"] if target is not None else None
    data = exp_mod.assemble_train_data(source, target, n_labeled, train_cfg.seed)
    result = trainer_mod.train(train_cfg, data)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    model_mod.save_checkpoint(result.params, out / "checkpoint.serm")
    result.history.to_csv(out / "history.csv")
    best = result.history.mean_val_ua(result.best_epoch)
    print(f"best epoch {result.best_epoch}: mean validation UA {best:.4f}")
    print(f"checkpoint: {out / 'checkpoint.serm'}")
    return 0


def cmd_evaluate(cfg: dict) -> int:
    _require(cfg, "checkpoint", "manifest", "splits", "out")
    params = model_mod.load_checkpoint(cfg["checkpoint"])
    manifest = corpus_mod.load_manifest(cfg["manifest"])
    split = corpus_mod.load_split(cfg["splits"], manifest)
    features = _feature_source(cfg, [manifest])
    domain = exp_mod.domain_from_manifest(manifest, split, features)
    labels = domain.labels_for(cfg["split"])
    ids = list(labels)
    inputs = [np.asarray(features.eval_input(i), dtype=np.float64) for i in ids]
    preds = model_mod.predict(params, inputs)
    truth = np.array([labels[i] for i in ids], dtype=np.int64)
    result = evaluate_predictions(preds, truth, manifest.language)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    save_eval_result(
        result,
        out / f"eval_{manifest.language}.json",
        out / f"confusion_{manifest.language}.csv",
    )
    print(f"{manifest.language} {cfg['split']}: UA {result.ua:.4f} on {result.n_samples} samples")
    return 0


def cmd_experiment(cfg: dict) -> int:
    _require(cfg, "out")
    train_cfg = _train_config(cfg)
    seeds = tuple(range(train_cfg.seed, train_cfg.seed + cfg["seeds"]))
    mode = cfg["mode"] if cfg["mode"] in ("hard", "soft") else "hard"
    synthetic = None
    if cfg["synthetic"] or cfg["kind"] == "synthetic":
        synthetic = SyntheticSpec(
            dim=cfg["syn_dim"],
            sigma=cfg["syn_sigma"],
            delta=cfg["syn_delta"],
            samples_per_class=cfg["syn_samples_per_class"],
            n_speakers=cfg["syn_speakers"],
            seed=train_cfg.seed,
        )
        if cfg["encoder"] == "bypass" and cfg["embedding_dim"] != cfg["syn_dim"]:
            train_cfg = _train_config({**cfg, "embedding_dim": cfg["syn_dim"]})
    plan = exp_mod.ExperimentPlan(
        kind=cfg["kind"],
        mode=mode,
        labeled_counts=tuple(cfg["labeled_counts"]),
        taus=tuple(cfg["taus"]),
        n_labeled=cfg["n_labeled"],
        seeds=seeds,
        train=train_cfg,
        synthetic=synthetic,
    )
    builder = None
    if synthetic is None:
        _require(cfg, "source_manifest", "source_splits", "target_manifest", "target_splits")
        manifests = [
            corpus_mod.load_manifest(cfg["source_manifest"]),
            corpus_mod.load_manifest(cfg["target_manifest"]),
        ]
        features = _feature_source(cfg, manifests)
        source = exp_mod.domain_from_manifest(
            manifests[0], corpus_mod.load_split(cfg["source_splits"], manifests[0]), features
        )
        target = exp_mod.domain_from_manifest(
            manifests[1], corpus_mod.load_split(cfg["target_splits"], manifests[1]), features
        )
        builder = lambda seed: (source, target)
    result = exp_mod.run_experiment(plan, builder)
    out = Path(cfg["out"])
    written = exp_mod.emit_report(result.report, out)
    if not cfg["no_figures"]:
        written += plots_mod.render_report_figures(result.report, out)
    for path in written:
        print(f"wrote {path}")
    return 0


_COMMANDS = {
    "prepare": cmd_prepare,
    "extract": cmd_extract,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "experiment": cmd_experiment,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.command, args)
        return _COMMANDS[args.command](cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
