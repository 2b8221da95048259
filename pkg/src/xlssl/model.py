"""Encoder + linear emotion classifier with hand-derived gradients.

Three encoder kinds share a C=5 linear head on a D-dimensional embedding:

- ``bypass``     inputs are precomputed D-dim embeddings; no encoder params
- ``mlp``        spectrogram -> per-bin [mean; std] over time (2F dims) ->
                 dense+ReLU hidden stack -> linear projection to D
- ``cnn-small``  spectrogram -> 3 blocks of (3x3 same-pad conv, ReLU,
                 2x2 max-pool) with 16/32/64 channels -> global mean pool ->
                 linear projection to D

Parameters are stored float32 (the checkpoint format is float32, so
round-trips stay bit-exact); all arithmetic runs in float64.

Checkpoint format (little-endian): magic "SERM1", u32 JSON length, arch
descriptor JSON, u32 tensor count, then per tensor u32 name length, name
UTF-8, u32 rank, rank u32 dims, float32 data.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError, NumericError

N_CLASSES = 5
CNN_CHANNELS = (16, 32, 64)
_STD_EPS = 1e-12  # smooths the time-std at constant inputs
_CKPT_MAGIC = b"SERM1"

ENCODER_KINDS = ("bypass", "mlp", "cnn-small")


@dataclass(frozen=True)
class ArchSpec:
    """Architecture descriptor: encoder kind, embedding width, MLP hidden
    sizes, and the mel-bin count the spectrogram encoders expect."""

    kind: str = "bypass"
    embedding_dim: int = 1024
    hidden: tuple[int, ...] = (128,)
    n_mels: int = 64

    def __post_init__(self) -> None:
        if self.kind not in ENCODER_KINDS:
            raise ConfigError(f"unknown encoder kind {self.kind!r}; expected {ENCODER_KINDS}")
        if self.embedding_dim <= 0:
            raise ConfigError(f"embedding_dim must be positive, got {self.embedding_dim}")
        if any(h <= 0 for h in self.hidden):
            raise ConfigError(f"hidden sizes must be positive, got {self.hidden}")
        if self.n_mels <= 0:
            raise ConfigError(f"n_mels must be positive, got {self.n_mels}")

    def to_json(self) -> str:
        return json.dumps(
            {
                "kind": self.kind,
                "embedding_dim": self.embedding_dim,
                "hidden": list(self.hidden),
                "n_mels": self.n_mels,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "ArchSpec":
        obj = json.loads(text)
        return cls(
            kind=obj["kind"],
            embedding_dim=int(obj["embedding_dim"]),
            hidden=tuple(int(h) for h in obj["hidden"]),
            n_mels=int(obj["n_mels"]),
        )


@dataclass
class ModelParams:
    """Named parameter tensors plus the arch that shapes them."""

    arch: ArchSpec
    tensors: dict[str, np.ndarray]

    def copy(self) -> "ModelParams":
        return ModelParams(self.arch, {k: v.copy() for k, v in self.tensors.items()})


@dataclass
class Gradients:
    """Tensor-for-tensor mirror of ModelParams (float64)."""

    tensors: dict[str, np.ndarray]


@dataclass(frozen=True)
class BatchOutput:
    probs: np.ndarray
    logits: np.ndarray
    embeddings: np.ndarray


def expected_shapes(arch: ArchSpec) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    if arch.kind == "mlp":
        fan_in = 2 * arch.n_mels
        for i, h in enumerate(arch.hidden):
            shapes[f"enc.{i}.w"] = (h, fan_in)
            shapes[f"enc.{i}.b"] = (h,)
            fan_in = h
        shapes["enc.out.w"] = (arch.embedding_dim, fan_in)
        shapes["enc.out.b"] = (arch.embedding_dim,)
    elif arch.kind == "cnn-small":
        c_in = 1
        for i, c_out in enumerate(CNN_CHANNELS):
            shapes[f"conv.{i}.w"] = (c_out, c_in, 3, 3)
            shapes[f"conv.{i}.b"] = (c_out,)
            c_in = c_out
        shapes["enc.out.w"] = (arch.embedding_dim, CNN_CHANNELS[-1])
        shapes["enc.out.b"] = (arch.embedding_dim,)
    shapes["head.w"] = (N_CLASSES, arch.embedding_dim)
    shapes["head.b"] = (N_CLASSES,)
    return shapes


def init_params(arch: ArchSpec, seed: int = 0) -> ModelParams:
    """Glorot-uniform weights, zero biases, deterministic per seed."""
    rng = np.random.default_rng(seed)
    tensors: dict[str, np.ndarray] = {}
    for name, shape in expected_shapes(arch).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=np.float32)
            continue
        if len(shape) == 4:  # conv kernels
            fan_in = shape[1] * shape[2] * shape[3]
            fan_out = shape[0] * shape[2] * shape[3]
        else:
            fan_in, fan_out = shape[1], shape[0]
        a = np.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-a, a, size=shape).astype(np.float32)
    return ModelParams(arch=arch, tensors=tensors)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_batch(x: np.ndarray, arch: ArchSpec) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if arch.kind == "bypass":
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != arch.embedding_dim:
            raise DataError(
                f"bypass input must be (B, {arch.embedding_dim}), got {x.shape}"
            )
    else:
        if x.ndim == 2:
            x = x[None, :, :]
        if x.ndim != 3 or x.shape[1] != arch.n_mels:
            raise DataError(
                f"{arch.kind} input must be (B, {arch.n_mels}, T), got {x.shape}"
            )
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite values in model input")
    return x


def _p64(params: ModelParams) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=np.float64) for k, v in params.tensors.items()}


# ---------------------------------------------------------------------------
# forward passes with caches for the backward sweep


def _forward_mlp(p: dict[str, np.ndarray], x: np.ndarray, arch: ArchSpec):
    t_len = x.shape[2]
    mu = x.mean(axis=2)
    var = x.var(axis=2)
    sd = np.sqrt(var + _STD_EPS)
    h = np.concatenate([mu, sd], axis=1)
    cache: dict = {"x": x, "mu": mu, "sd": sd, "t_len": t_len, "acts": [h], "zs": []}
    for i in range(len(arch.hidden)):
        z = h @ p[f"enc.{i}.w"].T + p[f"enc.{i}.b"]
        h = np.maximum(z, 0.0)
        cache["zs"].append(z)
        cache["acts"].append(h)
    emb = h @ p["enc.out.w"].T + p["enc.out.b"]
    return emb, cache


def _backward_mlp(p, cache, demb, arch: ArchSpec, grads: dict) -> None:
    h_last = cache["acts"][-1]
    grads["enc.out.w"] = demb.T @ h_last
    grads["enc.out.b"] = demb.sum(axis=0)
    dh = demb @ p["enc.out.w"]
    for i in reversed(range(len(arch.hidden))):
        dz = dh * (cache["zs"][i] > 0.0)
        grads[f"enc.{i}.w"] = dz.T @ cache["acts"][i]
        grads[f"enc.{i}.b"] = dz.sum(axis=0)
        dh = dz @ p[f"enc.{i}.w"]
    # input gradients are never needed (spectrograms are constants)


def _im2col(x: np.ndarray) -> np.ndarray:
    """(B, C, F, T) -> (B, C*9, F*T) columns for 3x3 same-pad convolution."""
    b, c, f, t = x.shape
    padded = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.empty((b, c, 3, 3, f, t), dtype=x.dtype)
    for di in range(3):
        for dj in range(3):
            cols[:, :, di, dj] = padded[:, :, di : di + f, dj : dj + t]
    return cols.reshape(b, c * 9, f * t)


def _col2im(dcols: np.ndarray, shape: tuple[int, int, int, int]) -> np.ndarray:
    b, c, f, t = shape
    dcols = dcols.reshape(b, c, 3, 3, f, t)
    dpad = np.zeros((b, c, f + 2, t + 2), dtype=dcols.dtype)
    for di in range(3):
        for dj in range(3):
            dpad[:, :, di : di + f, dj : dj + t] += dcols[:, :, di, dj]
    return dpad[:, :, 1 : f + 1, 1 : t + 1]


def _maxpool(x: np.ndarray):
    """2x2 stride-2 max pool (trailing odd row/column dropped)."""
    b, c, f, t = x.shape
    f2, t2 = f // 2, t // 2
    if f2 == 0 or t2 == 0:
        raise DataError(f"feature map {f}x{t} too small for 2x2 pooling")
    xt = x[:, :, : 2 * f2, : 2 * t2].reshape(b, c, f2, 2, t2, 2)
    windows = xt.transpose(0, 1, 2, 4, 3, 5).reshape(b, c, f2, t2, 4)
    idx = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _maxpool_backward(dout: np.ndarray, idx: np.ndarray, shape) -> np.ndarray:
    b, c, f, t = shape
    f2, t2 = f // 2, t // 2
    dwin = np.zeros((b, c, f2, t2, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dx = np.zeros(shape, dtype=dout.dtype)
    dx[:, :, : 2 * f2, : 2 * t2] = (
        dwin.reshape(b, c, f2, t2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(b, c, 2 * f2, 2 * t2)
    )
    return dx


def _cnn_block(p: dict[str, np.ndarray], i: int, h: np.ndarray):
    """One conv/ReLU/pool block; returns (pooled output, block cache)."""
    b, c, f, t = h.shape
    c_out = CNN_CHANNELS[i]
    cols = _im2col(h)
    w = p[f"conv.{i}.w"].reshape(c_out, c * 9)
    z = np.matmul(w, cols) + p[f"conv.{i}.b"][None, :, None]
    z = z.reshape(b, c_out, f, t)
    a = np.maximum(z, 0.0)
    pooled, idx = _maxpool(a)
    return pooled, {"in_shape": h.shape, "cols": cols, "z": z, "a_shape": a.shape, "idx": idx}


def _forward_cnn(p: dict[str, np.ndarray], x: np.ndarray, arch: ArchSpec):
    h = x[:, None, :, :]
    cache: dict = {"blocks": []}
    for i in range(len(CNN_CHANNELS)):
        h, blk = _cnn_block(p, i, h)
        cache["blocks"].append(blk)
    b, c, f, t = h.shape
    g = h.mean(axis=(2, 3))
    cache["pool_shape"] = h.shape
    cache["g"] = g
    emb = g @ p["enc.out.w"].T + p["enc.out.b"]
    return emb, cache


def _backward_cnn(p, cache, demb, arch: ArchSpec, grads: dict) -> None:
    grads["enc.out.w"] = demb.T @ cache["g"]
    grads["enc.out.b"] = demb.sum(axis=0)
    dg = demb @ p["enc.out.w"]
    b, c, f, t = cache["pool_shape"]
    dh = np.broadcast_to(dg[:, :, None, None], (b, c, f, t)) / (f * t)
    dh = np.ascontiguousarray(dh)
    for i in reversed(range(len(CNN_CHANNELS))):
        blk = cache["blocks"][i]
        da = _maxpool_backward(dh, blk["idx"], blk["a_shape"])
        dz = da * (blk["z"] > 0.0)
        bb, c_out, ff, tt = dz.shape
        dzf = dz.reshape(bb, c_out, ff * tt)
        c_in = blk["in_shape"][1]
        w = p[f"conv.{i}.w"].reshape(c_out, c_in * 9)
        grads[f"conv.{i}.w"] = np.tensordot(dzf, blk["cols"], axes=([0, 2], [0, 2])).reshape(
            c_out, c_in, 3, 3
        )
        grads[f"conv.{i}.b"] = dz.sum(axis=(0, 2, 3))
        if i > 0:
            dcols = np.matmul(w.T, dzf)
            dh = _col2im(dcols, blk["in_shape"])


def forward_cached(params: ModelParams, x: np.ndarray):
    """Forward pass returning (BatchOutput, cache) for a later backward."""
    arch = params.arch
    x = _as_batch(x, arch)
    p = _p64(params)
    if arch.kind == "bypass":
        emb, cache = x, {}
    elif arch.kind == "mlp":
        emb, cache = _forward_mlp(p, x, arch)
    else:
        emb, cache = _forward_cnn(p, x, arch)
    logits = emb @ p["head.w"].T + p["head.b"]
    if not np.all(np.isfinite(logits)):
        raise NumericError("non-finite logits in forward pass")
    cache["emb"] = emb
    cache["p64"] = p
    return BatchOutput(probs=softmax(logits), logits=logits, embeddings=emb), cache


def forward(params: ModelParams, x: np.ndarray) -> BatchOutput:
    out, _ = forward_cached(params, x)
    return out


def backward(params: ModelParams, cache: dict, dlogits: np.ndarray) -> Gradients:
    """Map a logit gradient back onto every parameter tensor."""
    arch = params.arch
    p = cache["p64"]
    emb = cache["emb"]
    grads: dict[str, np.ndarray] = {
        "head.w": dlogits.T @ emb,
        "head.b": dlogits.sum(axis=0),
    }
    if arch.kind != "bypass":
        demb = dlogits @ p["head.w"]
        if arch.kind == "mlp":
            _backward_mlp(p, cache, demb, arch, grads)
        else:
            _backward_cnn(p, cache, demb, arch, grads)
    return Gradients(tensors=grads)


def loss_and_grad(
    params: ModelParams,
    x: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
    loss_cfg,
) -> tuple[float, Gradients]:
    """Composed objective value and its exact parameter gradients.

    ``targets`` are per-row label distributions, ``weights`` per-row
    cross-entropy weights (0 drops a row from the CE term), and
    ``loss_cfg`` a semisup.LossConfig choosing the active terms.
    """
    from . import semisup

    out, cache = forward_cached(params, x)
    loss, dlogits = semisup.objective(out.probs, targets, weights, loss_cfg)
    return loss, backward(params, cache, dlogits)


def predict(params: ModelParams, inputs: list[np.ndarray] | np.ndarray) -> np.ndarray:
    """Class predictions; batches uniform-shape inputs, loops otherwise."""
    if isinstance(inputs, np.ndarray) and inputs.ndim >= 2:
        return forward(params, inputs).probs.argmax(axis=1)
    arrays = list(inputs)
    if not arrays:
        return np.zeros(0, dtype=np.int64)
    shapes = {a.shape for a in arrays}
    if len(shapes) == 1:
        return forward(params, np.stack(arrays)).probs.argmax(axis=1)
    return np.array(
        [int(forward(params, a[None]).probs.argmax()) for a in arrays], dtype=np.int64
    )


# ---------------------------------------------------------------------------
# checkpoint I/O


def save_checkpoint(params: ModelParams, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arch_json = params.arch.to_json().encode("utf-8")
    with path.open("wb") as fh:
        fh.write(_CKPT_MAGIC)
        fh.write(struct.pack("<I", len(arch_json)))
        fh.write(arch_json)
        fh.write(struct.pack("<I", len(params.tensors)))
        for name, tensor in params.tensors.items():
            blob = name.encode("utf-8")
            arr = np.ascontiguousarray(tensor, dtype="<f4")
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise DataError(
                f"{self.path}: truncated checkpoint (needed {n} bytes at offset {self.pos}, "
                f"file has {len(self.raw)})"
            )
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path: str | Path, arch: ArchSpec | None = None) -> ModelParams:
    """Read a checkpoint; optionally require it to match a given arch."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    r = _Reader(path.read_bytes(), path)
    magic = r.take(5)
    if magic != _CKPT_MAGIC:
        raise DataError(
            f"{path}: bad checkpoint magic {magic!r} (format version mismatch; "
            f"expected {_CKPT_MAGIC!r})"
        )
    arch_json = r.take(r.u32()).decode("utf-8")
    file_arch = ArchSpec.from_json(arch_json)
    if arch is not None and file_arch != arch:
        raise DataError(
            f"{path}: checkpoint arch {file_arch} does not match requested {arch}"
        )
    tensors: dict[str, np.ndarray] = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(dims).copy()
        tensors[name] = data
    if r.pos != len(r.raw):
        raise DataError(f"{path}: {len(r.raw) - r.pos} trailing bytes after tensors")
    expected = expected_shapes(file_arch)
    if set(tensors) != set(expected):
        raise DataError(
            f"{path}: tensor names {sorted(tensors)} do not match arch "
            f"(expected {sorted(expected)})"
        )
    for name, shape in expected.items():
        if tensors[name].shape != shape:
            raise DataError(
                f"{path}: tensor {name!r} has shape {tensors[name].shape}, expected {shape}"
            )
    return ModelParams(arch=file_arch, tensors=tensors)
