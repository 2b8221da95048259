"""Central-finite-difference gradient oracle shared by the test suite.

The checker perturbs one parameter scalar at a time and compares the loss
slope against the analytic gradient.  ReLU kinks and max-pool argmax flips
make finite differences invalid at a crossing, so both perturbed forwards
also report their activation sign patterns / pool argmax patterns; the
frozen test seeds were chosen so that no parameter perturbation crosses a
pattern boundary, and the checker fails loudly if that ever stops holding.

Perturbations of a conv block's parameters cannot change anything upstream,
so evaluation restarts from the deepest unchanged stage to keep the full
sweep inside the acceptance time budget.
"""

from __future__ import annotations

import numpy as np

from xlssl import model, semisup
from xlssl.model import CNN_CHANNELS, ArchSpec, ModelParams


def _head_loss(p64, emb, targets, weights, cfg):
    logits = emb @ p64["head.w"].T + p64["head.b"]
    probs = model.softmax(logits)
    return semisup.objective(probs, targets, weights, cfg)[0]


class _BypassEval:
    def __init__(self, p64, x, targets, weights, cfg):
        self.p64, self.x = p64, x
        self.args = (targets, weights, cfg)

    def loss_and_patterns(self, changed: str):
        return _head_loss(self.p64, self.x, *self.args), ()


class _MlpEval:
    def __init__(self, p64, x, arch: ArchSpec, targets, weights, cfg):
        self.p64, self.arch = p64, arch
        self.args = (targets, weights, cfg)
        mu = x.mean(axis=2)
        sd = np.sqrt(x.var(axis=2) + 1e-12)
        self.h0 = np.concatenate([mu, sd], axis=1)

    def loss_and_patterns(self, changed: str):
        p = self.p64
        h = self.h0
        patterns = []
        for i in range(len(self.arch.hidden)):
            z = h @ p[f"enc.{i}.w"].T + p[f"enc.{i}.b"]
            patterns.append(z > 0.0)
            h = np.maximum(z, 0.0)
        emb = h @ p["enc.out.w"].T + p["enc.out.b"]
        return _head_loss(p, emb, *self.args), tuple(patterns)


class _CnnEval:
    def __init__(self, p64, x, arch: ArchSpec, targets, weights, cfg):
        self.p64, self.arch = p64, arch
        self.args = (targets, weights, cfg)
        # stage k holds the input to conv block k at the unperturbed params
        self.stages = [x[:, None, :, :]]
        h = self.stages[0]
        for i in range(len(CNN_CHANNELS)):
            h, _ = model._cnn_block(p64, i, h)
            self.stages.append(h)

    def _start_block(self, changed: str) -> int:
        if changed.startswith("conv."):
            return int(changed.split(".")[1])
        return len(CNN_CHANNELS)

    def loss_and_patterns(self, changed: str):
        start = self._start_block(changed)
        h = self.stages[start]
        patterns = []
        for i in range(start, len(CNN_CHANNELS)):
            h, blk = model._cnn_block(self.p64, i, h)
            patterns.append(blk["z"] > 0.0)
            patterns.append(blk["idx"])
        g = h.mean(axis=(2, 3))
        emb = g @ self.p64["enc.out.w"].T + self.p64["enc.out.b"]
        return _head_loss(self.p64, emb, *self.args), tuple(patterns)


def _same(a, b) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def fd_gradcheck(
    arch: ArchSpec,
    params: ModelParams,
    x: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    cfg: semisup.LossConfig,
    h: float = 1e-4,
) -> dict:
    """Check every parameter of the composed objective against central
    finite differences; returns worst-case statistics."""
    x = np.asarray(x, dtype=np.float64)
    loss, grads = model.loss_and_grad(params, x, targets, weights, cfg)
    p64 = {k: v.astype(np.float64) for k, v in params.tensors.items()}
    if arch.kind == "bypass":
        ev = _BypassEval(p64, x, targets, weights, cfg)
    elif arch.kind == "mlp":
        ev = _MlpEval(p64, x, arch, targets, weights, cfg)
    else:
        ev = _CnnEval(p64, x, arch, targets, weights, cfg)

    base, _ = ev.loss_and_patterns("head.w")
    assert abs(base - loss) < 1e-12, "staged evaluator disagrees with loss_and_grad"

    worst_rel = 0.0
    worst_abs = 0.0
    crossings = 0
    n = 0
    for name, tensor in p64.items():
        flat = tensor.reshape(-1)
        gflat = grads.tensors[name].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + h
            lp, pat_p = ev.loss_and_patterns(name)
            flat[j] = orig - h
            lm, pat_m = ev.loss_and_patterns(name)
            flat[j] = orig
            if not _same(pat_p, pat_m):
                crossings += 1
                continue
            fd = (lp - lm) / (2.0 * h)
            ga = float(gflat[j])
            n += 1
            if max(abs(ga), abs(fd)) > 1e-4:
                worst_rel = max(worst_rel, abs(ga - fd) / max(abs(ga), abs(fd)))
            else:
                worst_abs = max(worst_abs, abs(ga - fd))
    return {
        "worst_rel": worst_rel,
        "worst_abs": worst_abs,
        "n_checked": n,
        "crossings": crossings,
        "n_params": sum(t.size for t in p64.values()),
    }
