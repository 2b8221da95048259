"""Metrics and the synthetic domain-shift benchmark.

Unweighted accuracy is macro-average recall over the classes present in the
truth; on a class-balanced test set it coincides with plain accuracy.

The synthetic benchmark stands in for cross-lingual shift at desk scale:
Gaussian class clusters in embedding space, with the target domain's means
rotated and translated by an amount controlled by a single shift parameter,
so zero shift makes both domains identical in law.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import CorpusManifest, EmotionClass, UtteranceRecord
from .errors import ConfigError, DataError

N_CLASSES = 5


def unweighted_accuracy(preds: np.ndarray, truth: np.ndarray) -> float:
    """Mean per-class recall over classes with at least one truth sample."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape or preds.ndim != 1:
        raise DataError(f"prediction/truth shapes differ: {preds.shape} vs {truth.shape}")
    if preds.size == 0:
        raise DataError("cannot score an empty prediction set")
    recalls = []
    for c in np.unique(truth):
        in_class = truth == c
        recalls.append(float((preds[in_class] == c).mean()))
    return float(np.mean(recalls))


def confusion_matrix(preds: np.ndarray, truth: np.ndarray, n_classes: int = N_CLASSES) -> np.ndarray:
    """Counts matrix with entry (i, j) = truth i predicted as j."""
    preds = np.asarray(preds, dtype=np.int64)
    truth = np.asarray(truth, dtype=np.int64)
    if preds.shape != truth.shape:
        raise DataError(f"prediction/truth shapes differ: {preds.shape} vs {truth.shape}")
    if preds.size and (
        preds.min() < 0 or preds.max() >= n_classes or truth.min() < 0 or truth.max() >= n_classes
    ):
        raise DataError(f"class index out of range for {n_classes} classes")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (truth, preds), 1)
    return cm


def ua_from_confusion(cm: np.ndarray) -> float:
    """Unweighted accuracy recomputed from a confusion matrix."""
    cm = np.asarray(cm, dtype=np.float64)
    totals = cm.sum(axis=1)
    present = totals > 0
    if not present.any():
        raise DataError("confusion matrix has no samples")
    recalls = np.diag(cm)[present] / totals[present]
    return float(recalls.mean())


@dataclass(frozen=True)
class EvalResult:
    language: str
    n_samples: int
    ua: float
    per_class_recall: tuple[float | None, ...]
    confusion: np.ndarray

    def to_json_dict(self) -> dict:
        return {
            "language": self.language,
            "n_samples": self.n_samples,
            "ua": self.ua,
            "per_class_recall": [
                None if r is None else float(r) for r in self.per_class_recall
            ],
            "confusion": self.confusion.tolist(),
        }


def evaluate_predictions(
    preds: np.ndarray,
    truth: np.ndarray,
    language: str,
    n_classes: int = N_CLASSES,
) -> EvalResult:
    cm = confusion_matrix(preds, truth, n_classes)
    totals = cm.sum(axis=1)
    per_class = tuple(
        None if totals[c] == 0 else float(cm[c, c] / totals[c]) for c in range(n_classes)
    )
    return EvalResult(
        language=language,
        n_samples=int(totals.sum()),
        ua=ua_from_confusion(cm),
        per_class_recall=per_class,
        confusion=cm,
    )


def save_eval_result(result: EvalResult, json_path: str | Path, csv_path: str | Path | None = None) -> None:
    json_path = Path(json_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    json_path.write_text(json.dumps(result.to_json_dict(), indent=2) + "\n", encoding="utf-8")
    if csv_path is not None:
        csv_path = Path(csv_path)
        lines = ["truth\\pred," + ",".join(str(c) for c in range(result.confusion.shape[1]))]
        for c, row in enumerate(result.confusion):
            lines.append(f"{c}," + ",".join(str(int(v)) for v in row))
        csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# synthetic benchmark


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a pair of embedding-space domains with a controlled shift.

    The target domain's class means are the source means rotated by
    0.25 * delta / sigma radians (in dim//2 random orthogonal planes) and
    then translated by delta along a random fixed unit direction per class;
    delta = 0 leaves both domains identical in law.
    """

    n_classes: int = 5
    dim: int = 16
    sigma: float = 1.0
    delta: float = 0.0
    samples_per_class: int = 333
    n_speakers: int = 10
    seed: int = 0
    mean_scale: float = 2.5
    source_language: str = "synsrc"
    target_language: str = "syntgt"

    def __post_init__(self) -> None:
        if self.delta < 0:
            raise ConfigError("delta must be nonnegative")
        if self.n_classes != N_CLASSES:
            raise ConfigError(f"synthetic benchmark is fixed at {N_CLASSES} classes")
        if self.dim <= 1 or self.samples_per_class <= 0 or self.n_speakers < 3:
            raise ConfigError("need dim > 1, samples_per_class > 0, n_speakers >= 3")
        if self.sigma <= 0:
            raise ConfigError("sigma must be positive")


@dataclass
class SyntheticData:
    spec: SyntheticSpec
    source_manifest: CorpusManifest
    target_manifest: CorpusManifest
    embeddings: dict[str, np.ndarray] = field(repr=False)


def _rotation(dim: int, angle: float, rng: np.random.Generator) -> np.ndarray:
    """Rotation by ``angle`` in dim//2 random mutually orthogonal planes."""
    q, r = np.linalg.qr(rng.normal(size=(dim, dim)))
    q = q * np.sign(np.diag(r))  # stable column signs
    block = np.eye(dim)
    c, s = np.cos(angle), np.sin(angle)
    for k in range(dim // 2):
        block[2 * k : 2 * k + 2, 2 * k : 2 * k + 2] = [[c, -s], [s, c]]
    return q @ block @ q.T


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Deterministic pair of in-memory embedding manifests.

    Class means are pairwise distinct draws; samples carry round-robin
    synthetic speaker ids so the corpus split machinery applies unchanged.
    """
    rng = np.random.default_rng(spec.seed)
    means = rng.normal(size=(spec.n_classes, spec.dim)) * spec.mean_scale
    angle = 0.25 * spec.delta / spec.sigma
    rot = _rotation(spec.dim, angle, rng)
    shift_dirs = rng.normal(size=(spec.n_classes, spec.dim))
    shift_dirs /= np.linalg.norm(shift_dirs, axis=1, keepdims=True)
    target_means = means @ rot.T + spec.delta * shift_dirs

    embeddings: dict[str, np.ndarray] = {}

    def _domain(tag: str, language: str, centers: np.ndarray) -> CorpusManifest:
        records: list[UtteranceRecord] = []
        i = 0
        for c in range(spec.n_classes):
            noise = rng.normal(size=(spec.samples_per_class, spec.dim)) * spec.sigma
            for k in range(spec.samples_per_class):
                rid = f"{tag}-{i:05d}"
                embeddings[rid] = (centers[c] + noise[k]).astype(np.float32)
                records.append(
                    UtteranceRecord(
                        id=rid,
                        audio_path=f"synthetic://{rid}",
                        speaker_id=f"{tag}-spk-{i % spec.n_speakers:02d}",
                        language=language,
                        emotion=EmotionClass(c),
                        duration_s=2.0,
                        raw_label=EmotionClass(c).label,
                    )
                )
                i += 1
        return CorpusManifest(name=f"{tag}-synthetic", language=language, records=tuple(records))

    source = _domain("src", spec.source_language, means)
    target = _domain("tgt", spec.target_language, target_means)
    return SyntheticData(
        spec=spec, source_manifest=source, target_manifest=target, embeddings=embeddings
    )
