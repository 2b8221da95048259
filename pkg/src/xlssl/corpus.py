"""Data model for multilingual emotion corpora.

Manifests are JSON-lines files, one utterance per line with keys
``id, audio_path, speaker_id, language, emotion, duration_s``.  ``emotion``
is either a label string or ``null`` (explicitly unlabeled).  All corpus
operations are pure functions of their inputs plus a seed; manifests are
immutable after load.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

MANIFEST_KEYS = ("id", "audio_path", "speaker_id", "language", "emotion", "duration_s")


class EmotionClass(IntEnum):
    """The five canonical emotion classes with fixed indices."""

    ANGER = 0
    FEAR = 1
    HAPPINESS = 2
    NEUTRAL = 3
    SADNESS = 4

    @classmethod
    def from_name(cls, name: str) -> "EmotionClass":
        try:
            return cls[name.strip().upper()]
        except KeyError:
            raise ConfigError(f"unknown emotion class name: {name!r}") from None

    @property
    def label(self) -> str:
        return self.name.lower()


CANONICAL_LABELS = frozenset(e.label for e in EmotionClass)
N_CLASSES = len(EmotionClass)


@dataclass(frozen=True)
class UtteranceRecord:
    """One audio sample with speaker, language, and (optional) emotion.

    ``emotion`` is set when the label resolves to one of the canonical
    classes; ``raw_label`` preserves the original manifest string so that
    taxonomy mapping can run later.  Both are None for unlabeled records.
    """

    id: str
    audio_path: str
    speaker_id: str
    language: str
    emotion: EmotionClass | None
    duration_s: float
    raw_label: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise DataError("record id must be non-empty")
        if not self.speaker_id:
            raise DataError(f"record {self.id!r}: speaker_id must be non-empty")
        if not self.language:
            raise DataError(f"record {self.id!r}: language must be non-empty")
        if not (self.duration_s >= 0.0):
            raise DataError(f"record {self.id!r}: duration_s must be nonnegative")

    @property
    def is_labeled(self) -> bool:
        return self.emotion is not None or self.raw_label is not None

    def to_json_line(self) -> str:
        obj = {
            "id": self.id,
            "audio_path": self.audio_path,
            "speaker_id": self.speaker_id,
            "language": self.language,
            "emotion": self.emotion.label if self.emotion is not None else None,
            "duration_s": self.duration_s,
        }
        return json.dumps(obj, ensure_ascii=False, sort_keys=False)


@dataclass(frozen=True)
class CorpusManifest:
    """An immutable collection of utterance records sharing one language."""

    name: str
    language: str
    records: tuple[UtteranceRecord, ...]

    def __post_init__(self) -> None:
        seen: dict[str, int] = {}
        for i, rec in enumerate(self.records):
            if rec.id in seen:
                raise DataError(
                    f"manifest {self.name!r}: duplicate id {rec.id!r} "
                    f"(records {seen[rec.id]} and {i})"
                )
            seen[rec.id] = i
            if rec.language != self.language:
                raise DataError(
                    f"manifest {self.name!r}: record {rec.id!r} has language "
                    f"{rec.language!r}, expected {self.language!r}"
                )

    def __len__(self) -> int:
        return len(self.records)

    @property
    def counts(self) -> dict[EmotionClass, int]:
        """Per-class tally, recomputed from the records on every call."""
        tally = Counter(r.emotion for r in self.records if r.emotion is not None)
        return {c: tally.get(c, 0) for c in EmotionClass}

    @property
    def n_unlabeled(self) -> int:
        return sum(1 for r in self.records if r.emotion is None)

    def speakers(self) -> list[str]:
        out: list[str] = []
        seen = set()
        for r in self.records:
            if r.speaker_id not in seen:
                seen.add(r.speaker_id)
                out.append(r.speaker_id)
        return out

    def by_id(self) -> dict[str, UtteranceRecord]:
        return {r.id: r for r in self.records}


@dataclass(frozen=True)
class SplitAssignment:
    """Speaker-disjoint train/val/test partition of one manifest."""

    train: tuple[str, ...]
    val: tuple[str, ...]
    test: tuple[str, ...]
    speaker_map: dict[str, str]
    seed: int
    ratios: tuple[float, float, float]

    def partition_of(self, record_id: str, manifest: CorpusManifest) -> str:
        return self.speaker_map[manifest.by_id()[record_id].speaker_id]

    def ids(self, part: str) -> tuple[str, ...]:
        if part not in ("train", "val", "test"):
            raise ConfigError(f"unknown partition {part!r}")
        return getattr(self, part)


@dataclass(frozen=True)
class TargetPartition:
    """Labeled/unlabeled division of a target-language training set.

    ``hidden_labels`` seals the ground truth of the unlabeled side for
    evaluation oracles only; training code must never read it.
    """

    labeled_ids: tuple[str, ...]
    unlabeled_ids: tuple[str, ...]
    hidden_labels: dict[str, EmotionClass] = field(repr=False)

    def oracle_label(self, record_id: str) -> EmotionClass:
        """Ground-truth class of an unlabeled record. Evaluation use only."""
        return self.hidden_labels[record_id]


def load_manifest(
    path: str | Path,
    name: str | None = None,
    known_labels: set[str] | None = None,
) -> CorpusManifest:
    """Load a JSON-lines manifest.

    Emotion strings must name a canonical class unless listed in
    ``known_labels`` (raw corpus labels awaiting taxonomy mapping).  A JSON
    ``null`` marks a record as explicitly unlabeled.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest file not found: {path}")
    records: list[UtteranceRecord] = []
    first_line_of: dict[str, int] = {}
    language: str | None = None
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"{path}:{lineno}: expected a JSON object")
            missing = [k for k in MANIFEST_KEYS if k not in obj]
            if missing:
                raise DataError(f"{path}:{lineno}: missing keys {missing}")
            emotion, raw_label = _parse_emotion(obj["emotion"], known_labels, path, lineno)
            try:
                rec = UtteranceRecord(
                    id=str(obj["id"]),
                    audio_path=str(obj["audio_path"]),
                    speaker_id=str(obj["speaker_id"]),
                    language=str(obj["language"]),
                    emotion=emotion,
                    duration_s=float(obj["duration_s"]),
                    raw_label=raw_label,
                )
            except (TypeError, ValueError) as exc:
                raise DataError(f"{path}:{lineno}: {exc}") from None
            if rec.id in first_line_of:
                raise DataError(
                    f"{path}: duplicate id {rec.id!r} on lines "
                    f"{first_line_of[rec.id]} and {lineno}"
                )
            first_line_of[rec.id] = lineno
            if language is None:
                language = rec.language
            records.append(rec)
    if not records:
        raise DataError(f"{path}: empty manifest")
    assert language is not None
    return CorpusManifest(name=name or path.stem, language=language, records=tuple(records))


def _parse_emotion(
    value: object,
    known_labels: set[str] | None,
    path: Path,
    lineno: int,
) -> tuple[EmotionClass | None, str | None]:
    if value is None:
        return None, None
    if not isinstance(value, str) or not value.strip():
        raise DataError(f"{path}:{lineno}: emotion must be a non-empty string or null")
    label = value.strip().lower()
    if label in CANONICAL_LABELS:
        return EmotionClass.from_name(label), label
    if known_labels is not None and label in known_labels:
        return None, label
    raise DataError(
        f"{path}:{lineno}: unknown emotion {value!r} "
        f"(record is not marked unlabeled and the label is not canonical)"
    )


def save_manifest(manifest: CorpusManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in manifest.records:
            fh.write(rec.to_json_line() + "\n")


def load_taxonomy(path: str | Path) -> dict[str, EmotionClass | None]:
    """Read a raw-label taxonomy: JSON object mapping raw label to a
    canonical class name, or to null for labels to discard."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"taxonomy file not found: {path}")
    with path.open("r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DataError(f"{path}: taxonomy must be a JSON object")
    out: dict[str, EmotionClass | None] = {}
    for raw, target in obj.items():
        key = raw.strip().lower()
        if target is None:
            out[key] = None
        elif isinstance(target, str):
            out[key] = EmotionClass.from_name(target)
        else:
            raise DataError(f"{path}: taxonomy value for {raw!r} must be a string or null")
    return out


def map_and_filter_emotions(
    manifest: CorpusManifest,
    taxonomy: dict[str, EmotionClass | None],
) -> CorpusManifest:
    """Map raw labels onto the five canonical classes and drop discards.

    Every labeled record must either appear in the taxonomy or already carry
    a canonical class; anything else fails loudly.  Unlabeled records pass
    through unchanged.
    """
    kept: list[UtteranceRecord] = []
    for rec in manifest.records:
        if rec.raw_label is None:
            kept.append(rec)
            continue
        if rec.raw_label in taxonomy:
            target = taxonomy[rec.raw_label]
            if target is None:
                continue
            kept.append(replace(rec, emotion=target, raw_label=target.label))
        elif rec.emotion is not None:
            kept.append(rec)
        else:
            raise DataError(
                f"manifest {manifest.name!r}: raw label {rec.raw_label!r} "
                f"(record {rec.id!r}) has no taxonomy entry"
            )
    if not kept:
        raise DataError(f"manifest {manifest.name!r}: no records survive the taxonomy")
    return CorpusManifest(name=manifest.name, language=manifest.language, records=tuple(kept))


def merge_corpora(
    manifests: list[CorpusManifest],
    name: str | None = None,
) -> CorpusManifest:
    """Concatenate same-language manifests, prefixing record and speaker ids
    with the manifest name to avoid cross-corpus collisions."""
    if not manifests:
        raise ConfigError("merge_corpora requires at least one manifest")
    language = manifests[0].language
    for m in manifests[1:]:
        if m.language != language:
            raise DataError(
                f"language mismatch in merge: {manifests[0].name!r} is "
                f"{language!r} but {m.name!r} is {m.language!r}"
            )
    records: list[UtteranceRecord] = []
    for m in manifests:
        for rec in m.records:
            records.append(
                replace(rec, id=f"{m.name}/{rec.id}", speaker_id=f"{m.name}/{rec.speaker_id}")
            )
    merged_name = name or f"{language}-merged"
    return CorpusManifest(name=merged_name, language=language, records=tuple(records))


def split_speaker_independent(
    manifest: CorpusManifest,
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    seed: int = 0,
) -> SplitAssignment:
    """Partition speakers into train/val/test, targeting the utterance
    ratios.

    Speakers are assigned greedily, largest first, each to the partition
    giving the best one-step reduction of the L1 deviation from the target
    utterance counts; exact ties fall back to the larger remaining deficit
    and then to a seed-controlled random key.  This keeps every partition's
    final deviation below the largest single speaker's utterance share.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise ConfigError(f"ratios must be three positive numbers, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"ratios must sum to 1, got {ratios}")
    per_speaker = Counter(r.speaker_id for r in manifest.records)
    speakers = sorted(per_speaker)
    if len(speakers) < 3:
        raise DataError(
            f"manifest {manifest.name!r} has {len(speakers)} speaker(s); "
            f"a 3-way speaker-disjoint split needs at least 3 — merge corpora first"
        )
    rng = np.random.default_rng(seed)
    shuffle_keys = {s: rng.random() for s in speakers}
    order = sorted(speakers, key=lambda s: (-per_speaker[s], shuffle_keys[s]))

    total = len(manifest.records)
    targets = [r * total for r in ratios]
    assigned = [0.0, 0.0, 0.0]
    speaker_map: dict[str, str] = {}
    part_names = ("train", "val", "test")
    for spk in order:
        n = per_speaker[spk]
        tie_keys = rng.random(3)
        best: tuple[float, float, float] | None = None
        best_p = 0
        for p in range(3):
            deficit = targets[p] - assigned[p]
            gain = abs(deficit) - abs(deficit - n)
            key = (gain, deficit, tie_keys[p])
            if best is None or key > best:
                best = key
                best_p = p
        assigned[best_p] += n
        speaker_map[spk] = part_names[best_p]

    buckets: dict[str, list[str]] = {p: [] for p in part_names}
    for rec in manifest.records:
        buckets[speaker_map[rec.speaker_id]].append(rec.id)
    return SplitAssignment(
        train=tuple(buckets["train"]),
        val=tuple(buckets["val"]),
        test=tuple(buckets["test"]),
        speaker_map=speaker_map,
        seed=seed,
        ratios=tuple(ratios),
    )


def save_split(split: SplitAssignment, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    obj = {
        "seed": split.seed,
        "ratios": list(split.ratios),
        "train": list(split.train),
        "val": list(split.val),
        "test": list(split.test),
    }
    path.write_text(json.dumps(obj, indent=2) + "\n", encoding="utf-8")


def load_split(path: str | Path, manifest: CorpusManifest | None = None) -> SplitAssignment:
    path = Path(path)
    if not path.exists():
        raise DataError(f"split file not found: {path}")
    obj = json.loads(path.read_text(encoding="utf-8"))
    speaker_map: dict[str, str] = {}
    if manifest is not None:
        by_id = manifest.by_id()
        for part in ("train", "val", "test"):
            for rid in obj[part]:
                if rid not in by_id:
                    raise DataError(f"{path}: id {rid!r} not present in manifest")
                speaker_map[by_id[rid].speaker_id] = part
    return SplitAssignment(
        train=tuple(obj["train"]),
        val=tuple(obj["val"]),
        test=tuple(obj["test"]),
        speaker_map=speaker_map,
        seed=int(obj["seed"]),
        ratios=tuple(obj["ratios"]),
    )


def partition_target(
    train_records: list[UtteranceRecord],
    n_labeled: int,
    seed: int = 0,
) -> TargetPartition:
    """Choose ``n_labeled`` records to keep labeled, class-stratified.

    Selection is round-robin over classes in fixed index order with a
    seed-shuffled order inside each class, so class counts differ by at
    most one wherever supply allows.  The remainder becomes the unlabeled
    pool with its ground truth sealed away for evaluation oracles.
    """
    if n_labeled < 0 or n_labeled > len(train_records):
        raise ConfigError(
            f"n_labeled={n_labeled} outside [0, {len(train_records)}]"
        )
    for rec in train_records:
        if rec.emotion is None:
            raise DataError(f"record {rec.id!r} has no label; cannot partition")
    rng = np.random.default_rng(seed)
    by_class: dict[EmotionClass, list[str]] = {c: [] for c in EmotionClass}
    for rec in train_records:
        by_class[rec.emotion].append(rec.id)
    for c in EmotionClass:
        ids = by_class[c]
        perm = rng.permutation(len(ids))
        by_class[c] = [ids[i] for i in perm]

    labeled: list[str] = []
    cursor = {c: 0 for c in EmotionClass}
    while len(labeled) < n_labeled:
        progressed = False
        for c in EmotionClass:
            if len(labeled) >= n_labeled:
                break
            if cursor[c] < len(by_class[c]):
                labeled.append(by_class[c][cursor[c]])
                cursor[c] += 1
                progressed = True
        if not progressed:
            break
    labeled_set = set(labeled)
    unlabeled = [r.id for r in train_records if r.id not in labeled_set]
    hidden = {r.id: r.emotion for r in train_records if r.id not in labeled_set}
    return TargetPartition(
        labeled_ids=tuple(labeled),
        unlabeled_ids=tuple(unlabeled),
        hidden_labels=hidden,
    )
