"""Adam training loop over hybrid labeled/pseudo-labeled batches.

Each epoch draws ceil(N/batch) batches from the union of the labeled pools
and (after warm-up) the unlabeled pool, using an epoch-derived RNG stream
(seed xor epoch) so runs are bitwise reproducible.  Gradient accumulation
and parameter updates keep a fixed summation order for the same reason.

History rows serialize to CSV as
``epoch, lr, train_loss, val_ua_<lang>..., n_pseudo_selected``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as model_mod
from . import semisup
from .errors import ConfigError, DataError, NumericError
from .evaluation import unweighted_accuracy
from .model import ArchSpec, Gradients, ModelParams
from .semisup import LossConfig

LR_DECAY_EVERY = 10


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 100
    learning_rate: float = 1e-3
    lr_decay: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    warmup_epochs: int = 10
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    arch: ArchSpec = field(default_factory=ArchSpec)

    def __post_init__(self) -> None:
        if self.epochs <= 0 or self.batch_size <= 0:
            raise ConfigError("epochs and batch_size must be positive")
        if self.learning_rate <= 0:
            raise ConfigError("learning_rate must be positive")
        if not (0.0 < self.lr_decay <= 1.0):
            raise ConfigError(f"lr_decay must lie in (0, 1], got {self.lr_decay}")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ConfigError("beta1/beta2 must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ConfigError("adam_eps must be positive")
        if self.warmup_epochs < 0:
            raise ConfigError("warmup_epochs must be nonnegative")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "AdamState":
        return cls(
            m={k: np.zeros(t.shape, dtype=np.float64) for k, t in params.tensors.items()},
            v={k: np.zeros(t.shape, dtype=np.float64) for k, t in params.tensors.items()},
            t=0,
        )


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    lr: float
    train_loss: float
    val_ua: dict[str, float]
    n_pseudo_selected: int


@dataclass
class TrainHistory:
    rows: list[EpochStats] = field(default_factory=list)

    @property
    def languages(self) -> list[str]:
        return list(self.rows[0].val_ua) if self.rows else []

    def mean_val_ua(self, epoch_index: int) -> float:
        ua = self.rows[epoch_index].val_ua
        return float(np.mean(list(ua.values()))) if ua else float("nan")

    def to_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        langs = self.languages
        with path.open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(
                ["epoch", "lr", "train_loss"]
                + [f"val_ua_{lang}" for lang in langs]
                + ["n_pseudo_selected"]
            )
            for row in self.rows:
                writer.writerow(
                    [row.epoch, f"{row.lr:.12g}", f"{row.train_loss:.12g}"]
                    + [f"{row.val_ua[lang]:.12g}" for lang in langs]
                    + [row.n_pseudo_selected]
                )


@dataclass
class TrainData:
    """Pools feeding one training run.

    ``labels`` covers every labeled id (source plus labeled target);
    ``unlabeled_ids`` lists the target pool whose labels stay hidden.
    ``validation`` maps language -> (id -> class) for per-epoch model
    selection.
    """

    features: object
    source_labeled: dict[str, int]
    target_labeled: dict[str, int]
    unlabeled_ids: tuple[str, ...]
    validation: dict[str, dict[str, int]]

    def labeled_ids(self) -> list[str]:
        return list(self.source_labeled) + list(self.target_labeled)

    def label_of(self, record_id: str) -> int:
        if record_id in self.source_labeled:
            return self.source_labeled[record_id]
        return self.target_labeled[record_id]


@dataclass
class TrainResult:
    params: ModelParams
    history: TrainHistory
    best_epoch: int


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Stepped exponential decay: lr0 * decay^(epoch // 10)."""
    if epoch < 0 or epoch >= cfg.epochs:
        raise ConfigError(f"epoch {epoch} outside [0, {cfg.epochs})")
    return cfg.learning_rate * cfg.lr_decay ** (epoch // LR_DECAY_EVERY)


def adam_step(
    params: ModelParams,
    grads: Gradients,
    state: AdamState,
    lr: float,
    cfg: TrainConfig,
) -> tuple[ModelParams, AdamState]:
    """One bias-corrected Adam update; moments stay float64, parameters are
    stored back as float32."""
    new_m: dict[str, np.ndarray] = {}
    new_v: dict[str, np.ndarray] = {}
    new_p: dict[str, np.ndarray] = {}
    t = state.t + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t
    for name, p in params.tensors.items():
        g = grads.tensors[name]
        if g.shape != p.shape:
            raise DataError(f"gradient {name!r} shape {g.shape} != parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in tensor {name!r}; aborting run")
        m = cfg.beta1 * state.m[name] + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * state.v[name] + (1.0 - cfg.beta2) * g * g
        update = lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
        new_m[name] = m
        new_v[name] = v
        new_p[name] = (p.astype(np.float64) - update).astype(np.float32)
    return ModelParams(params.arch, new_p), AdamState(m=new_m, v=new_v, t=t)


def _stack_inputs(arrays: list[np.ndarray]) -> np.ndarray:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DataError(f"batch inputs disagree in shape: {sorted(shapes)}")
    return np.stack(arrays)


def evaluate_ua(params: ModelParams, features, labels: dict[str, int]) -> float:
    """Unweighted accuracy of the model on full-length eval inputs."""
    ids = list(labels)
    inputs = [np.asarray(features.eval_input(i), dtype=np.float64) for i in ids]
    preds = model_mod.predict(params, inputs)
    truth = np.array([labels[i] for i in ids], dtype=np.int64)
    return unweighted_accuracy(preds, truth)


def train(cfg: TrainConfig, data: TrainData, mode: str | None = None) -> TrainResult:
    """Run the full optimization loop and keep the best-validation params.

    ``mode`` overrides cfg.loss.mode.  Warm-up epochs train on labeled data
    only with the plain supervised objective in every mode; afterwards hard
    mode masks per-batch argmax labels by confidence and soft mode refreshes
    a soft label table once per epoch, turning on the regularizers and
    mixup.
    """
    loss_cfg = cfg.loss if mode is None else LossConfig(
        mode=mode,
        tau=cfg.loss.tau,
        balance_weight=cfg.loss.balance_weight,
        entropy_weight=cfg.loss.entropy_weight,
    )
    labeled_ids = data.labeled_ids()
    if not labeled_ids:
        raise DataError("no labeled training data in any pool")
    supervised_cfg = LossConfig(
        mode="supervised",
        tau=loss_cfg.tau,
        balance_weight=loss_cfg.balance_weight,
        entropy_weight=loss_cfg.entropy_weight,
    )

    params = model_mod.init_params(cfg.arch, seed=cfg.seed)
    state = AdamState.zeros_like(params)
    history = TrainHistory()
    best_params = params.copy()
    best_ua = -np.inf
    best_epoch = -1

    for epoch in range(cfg.epochs):
        rng = np.random.default_rng(cfg.seed ^ epoch)
        lr = lr_at(epoch, cfg)
        in_warmup = epoch < cfg.warmup_epochs and loss_cfg.mode != "supervised"
        ssl_active = loss_cfg.mode != "supervised" and not in_warmup
        pseudo_pool = list(data.unlabeled_ids) if ssl_active else []
        epoch_cfg = loss_cfg if ssl_active else supervised_cfg

        soft_table: semisup.PseudoLabelTable | None = None
        if ssl_active and loss_cfg.mode == "soft" and pseudo_pool:
            full_inputs = {
                rid: np.asarray(data.features.eval_input(rid), dtype=np.float64)
                for rid in pseudo_pool
            }
            soft_table = semisup.soft_pseudo_labels(
                lambda x: model_mod.forward(params, x[None]).probs[0],
                full_inputs,
                epoch=epoch,
            )

        n_pool = len(labeled_ids) + len(pseudo_pool)
        n_batches = -(-n_pool // cfg.batch_size)
        epoch_loss = 0.0
        n_selected = 0
        for _ in range(n_batches):
            items = semisup.build_hybrid_batch(labeled_ids, pseudo_pool, cfg.batch_size, rng)
            inputs = _stack_inputs(
                [np.asarray(data.features.train_input(rid, rng), dtype=np.float64)
                 for rid, _ in items]
            )
            is_pseudo = np.array([flag for _, flag in items])
            targets = np.zeros((len(items), model_mod.N_CLASSES), dtype=np.float64)
            weights = np.ones(len(items), dtype=np.float64)
            for row, (rid, flag) in enumerate(items):
                if not flag:
                    targets[row, data.label_of(rid)] = 1.0
                elif soft_table is not None:
                    targets[row] = soft_table.entries[rid].vector

            if epoch_cfg.mode == "soft":
                inputs, targets = semisup.mixup_batch(inputs, targets, rng)

            out, cache = model_mod.forward_cached(params, inputs)
            if epoch_cfg.mode == "hard" and is_pseudo.any():
                labels, mask = semisup.hard_pseudo_labels(out.probs[is_pseudo], epoch_cfg.tau)
                targets[is_pseudo] = labels
                weights[is_pseudo] = mask.astype(np.float64)
                n_selected += int(mask.sum())
            elif epoch_cfg.mode == "soft":
                n_selected += int(is_pseudo.sum())

            loss, dlogits = semisup.objective(out.probs, targets, weights, epoch_cfg)
            grads = model_mod.backward(params, cache, dlogits)
            params, state = adam_step(params, grads, state, lr, cfg)
            epoch_loss += loss

        val_ua = {
            lang: evaluate_ua(params, data.features, labels)
            for lang, labels in data.validation.items()
        }
        history.rows.append(
            EpochStats(
                epoch=epoch,
                lr=lr,
                train_loss=epoch_loss / max(n_batches, 1),
                val_ua=val_ua,
                n_pseudo_selected=n_selected,
            )
        )
        mean_ua = history.mean_val_ua(-1)
        if np.isfinite(mean_ua) and mean_ua > best_ua:
            best_ua = mean_ua
            best_params = params.copy()
            best_epoch = epoch

    if best_epoch < 0:  # no validation sets: fall back to the final params
        best_params = params.copy()
        best_epoch = cfg.epochs - 1
    return TrainResult(params=best_params, history=history, best_epoch=best_epoch)
