"""Semi-supervised losses, pseudo-labels, mixup, and hybrid batches.

All probability inputs are rows on the C-simplex.  Every logarithm clamps
its argument at 1e-12, so analytic expectations in tests must account for
that floor.  Argmax ties break toward the lowest class index.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

N_CLASSES = 5
PROB_CLAMP = 1e-12

MODES = ("supervised", "hard", "soft")


@dataclass(frozen=True)
class LossConfig:
    """Training-loss selection: the objective mode, the confidence
    threshold for hard pseudo-labels, and the regularizer weights used in
    soft mode."""

    mode: str = "supervised"
    tau: float = 0.50
    balance_weight: float = 0.8
    entropy_weight: float = 0.4

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if not (0.0 < self.tau < 1.0):
            raise ConfigError(f"tau must lie in (0, 1), got {self.tau}")
        if self.balance_weight < 0 or self.entropy_weight < 0:
            raise ConfigError("regularizer weights must be nonnegative")

    @property
    def active_balance(self) -> float:
        return self.balance_weight if self.mode == "soft" else 0.0

    @property
    def active_entropy(self) -> float:
        return self.entropy_weight if self.mode == "soft" else 0.0


def _check_batch(probs: np.ndarray, targets: np.ndarray | None = None) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise DataError(f"probability batch must be 2-D, got shape {probs.shape}")
    if targets is not None and np.asarray(targets).shape != probs.shape:
        raise DataError(
            f"targets shape {np.asarray(targets).shape} does not match probs {probs.shape}"
        )
    return probs


def cross_entropy(probs: np.ndarray, targets: np.ndarray) -> float:
    """Categorical cross-entropy summed over the batch."""
    probs = _check_batch(probs, targets)
    targets = np.asarray(targets, dtype=np.float64)
    return float(-(targets * np.log(np.maximum(probs, PROB_CLAMP))).sum())


def hard_pseudo_labels(probs: np.ndarray, tau: float) -> tuple[np.ndarray, np.ndarray]:
    """One-hot argmax labels plus the confidence mask max(p) >= tau."""
    probs = _check_batch(probs)
    idx = probs.argmax(axis=1)
    labels = np.zeros_like(probs)
    labels[np.arange(probs.shape[0]), idx] = 1.0
    mask = probs.max(axis=1) >= tau
    return labels, mask


def class_balance_penalty(probs: np.ndarray) -> float:
    """KL(uniform prior || batch-mean prediction); zero iff the batch mean
    is uniform, positive otherwise.  Discourages collapse onto one class."""
    probs = _check_batch(probs)
    if probs.shape[0] == 0:
        raise DataError("empty batch")
    mean = probs.mean(axis=0)
    prior = 1.0 / probs.shape[1]
    return float((prior * (np.log(prior) - np.log(np.maximum(mean, PROB_CLAMP)))).sum())


def entropy_penalty(probs: np.ndarray) -> float:
    """Mean per-row entropy; pushing it down sharpens predictions."""
    probs = _check_batch(probs)
    if probs.shape[0] == 0:
        raise DataError("empty batch")
    h = -(probs * np.log(np.maximum(probs, PROB_CLAMP))).sum(axis=1)
    return float(h.mean())


def total_loss(ce: float, balance: float, entropy: float, cfg: LossConfig) -> float:
    """ce + balance_weight*balance + entropy_weight*entropy, with both
    weights forced to zero outside soft mode."""
    return ce + cfg.active_balance * balance + cfg.active_entropy * entropy


def objective(
    probs: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    cfg: LossConfig,
) -> tuple[float, np.ndarray]:
    """Per-batch objective and its gradient with respect to the logits.

    The cross-entropy term is the per-row-weighted sum divided by the batch
    size (masked rows contribute zero); the regularizers run over all rows.
    """
    probs = _check_batch(probs, targets)
    targets = np.asarray(targets, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64).reshape(-1)
    b, c = probs.shape
    if weights.shape[0] != b:
        raise DataError(f"weights length {weights.shape[0]} != batch size {b}")

    clamped = np.maximum(probs, PROB_CLAMP)
    unclamped = probs > PROB_CLAMP
    ce_rows = -(targets * np.log(clamped)).sum(axis=1)
    ce = float((weights * ce_rows).sum() / b)

    lam_bal = cfg.active_balance
    lam_ent = cfg.active_entropy
    balance = class_balance_penalty(probs) if lam_bal else 0.0
    entropy = entropy_penalty(probs) if lam_ent else 0.0
    loss = total_loss(ce, balance, entropy, cfg)

    # dL/dp, assembled term by term, then one softmax Jacobian
    dp = -(weights[:, None] * targets) / clamped * unclamped / b
    if lam_bal:
        mean = probs.mean(axis=0)
        dmean = -(1.0 / c) / np.maximum(mean, PROB_CLAMP) * (mean > PROB_CLAMP)
        dp = dp + lam_bal * dmean[None, :] / b
    if lam_ent:
        dp = dp + lam_ent * (-(np.log(clamped) + unclamped)) / b
    dlogits = probs * (dp - (dp * probs).sum(axis=1, keepdims=True))
    return loss, dlogits


@dataclass(frozen=True)
class PseudoLabelEntry:
    record_id: str
    kind: str                      # "hard" | "soft"
    label: int | None = None       # hard: class index
    confidence: float | None = None
    selected: bool | None = None
    vector: np.ndarray | None = None  # soft: C-dim distribution


@dataclass(frozen=True)
class PseudoLabelTable:
    """Per-unlabeled-utterance label estimates, stamped with the epoch that
    generated them.  Rebuilt whole and swapped; never mutated in place."""

    kind: str
    epoch: int
    entries: dict[str, PseudoLabelEntry]

    def __post_init__(self) -> None:
        for e in self.entries.values():
            if e.kind != self.kind:
                raise DataError(f"entry {e.record_id!r} kind {e.kind!r} != table {self.kind!r}")
            if self.kind == "soft":
                if e.vector is None or abs(float(e.vector.sum()) - 1.0) > 1e-6:
                    raise DataError(f"soft entry {e.record_id!r} is not a distribution")
            else:
                if e.confidence is None or not (1.0 / N_CLASSES - 1e-9 <= e.confidence <= 1.0 + 1e-9):
                    raise DataError(f"hard entry {e.record_id!r} has confidence {e.confidence}")

    def dump_jsonl(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for e in self.entries.values():
                obj: dict = {"id": e.record_id, "epoch": self.epoch, "kind": e.kind}
                if e.kind == "hard":
                    obj["label"] = e.label
                    obj["confidence"] = e.confidence
                    obj["selected"] = e.selected
                else:
                    obj["vector"] = [float(v) for v in e.vector]
                fh.write(json.dumps(obj) + "\n")


def soft_pseudo_labels(
    predict_probs,
    inputs: dict[str, np.ndarray],
    epoch: int,
) -> PseudoLabelTable:
    """Soft labels for a pool of full-length inputs.

    ``predict_probs`` maps one input array to a C-vector of probabilities
    (the trainer passes the current model's softmax on the uncropped
    spectrogram or the stored embedding).
    """
    entries: dict[str, PseudoLabelEntry] = {}
    for record_id, x in inputs.items():
        vec = np.asarray(predict_probs(x), dtype=np.float64).reshape(-1)
        entries[record_id] = PseudoLabelEntry(record_id=record_id, kind="soft", vector=vec)
    return PseudoLabelTable(kind="soft", epoch=epoch, entries=entries)


@dataclass(frozen=True)
class MixupSample:
    x: np.ndarray
    y: np.ndarray
    alpha: float


def mixup_pair(
    x_p: np.ndarray,
    x_q: np.ndarray,
    y_p: np.ndarray,
    y_q: np.ndarray,
    rng: np.random.Generator,
    alpha: float | None = None,
) -> MixupSample:
    """Convex combination of two samples and their label distributions;
    the mixing coefficient is uniform on (0, 1) unless forced."""
    x_p, x_q = np.asarray(x_p, dtype=np.float64), np.asarray(x_q, dtype=np.float64)
    if x_p.shape != x_q.shape:
        raise DataError(f"mixup inputs differ in shape: {x_p.shape} vs {x_q.shape}")
    y_p, y_q = np.asarray(y_p, dtype=np.float64), np.asarray(y_q, dtype=np.float64)
    if y_p.shape != y_q.shape:
        raise DataError(f"mixup labels differ in shape: {y_p.shape} vs {y_q.shape}")
    a = float(rng.uniform(0.0, 1.0)) if alpha is None else float(alpha)
    return MixupSample(x=a * x_p + (1.0 - a) * x_q, y=a * y_p + (1.0 - a) * y_q, alpha=a)


def mixup_batch(
    x: np.ndarray,
    y: np.ndarray,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Mix every batch element with a random partner from the same batch,
    one coefficient per element."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    b = x.shape[0]
    partners = rng.integers(0, b, size=b)
    alphas = rng.uniform(0.0, 1.0, size=b)
    ax = alphas.reshape((b,) + (1,) * (x.ndim - 1))
    ay = alphas.reshape((b,) + (1,) * (y.ndim - 1))
    return ax * x + (1.0 - ax) * x[partners], ay * y + (1.0 - ay) * y[partners]


def build_hybrid_batch(
    labeled_ids: list[str],
    pseudo_ids: list[str],
    batch_size: int,
    rng: np.random.Generator,
) -> list[tuple[str, bool]]:
    """Draw a batch uniformly (without replacement) from the union of the
    labeled and pseudo-labeled pools; each item is tagged (id, is_pseudo)
    so losses can route real and generated targets separately."""
    total = len(labeled_ids) + len(pseudo_ids)
    if total == 0:
        raise DataError("all sample pools are empty")
    n = min(batch_size, total)
    picks = rng.choice(total, size=n, replace=False)
    n_labeled = len(labeled_ids)
    return [
        (labeled_ids[i], False) if i < n_labeled else (pseudo_ids[i - n_labeled], True)
        for i in picks
    ]


def one_hot(indices: np.ndarray | list[int], n_classes: int = N_CLASSES) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    out = np.zeros((idx.shape[0], n_classes), dtype=np.float64)
    out[np.arange(idx.shape[0]), idx] = 1.0
    return out
