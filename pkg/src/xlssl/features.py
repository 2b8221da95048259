"""Log-mel spectrogram extraction and feature storage.

Protocol: 16 kHz mono input, 1024-sample Hann windows hopped by 160 samples
(64 ms / 10 ms), 64 triangular mel filters spanning 60-7800 Hz, natural log
with a 1e-10 floor, then per-spectrogram standardization.  Frames lie fully
inside the signal (no reflection padding), so T = 1 + floor((L - 1024)/160).

On-disk formats (all little-endian):

- ``<id>.fmel``  magic "FMEL1", u32 param hash, u32 F, u32 T, F*T float32
  row-major (frequency-major).
- ``<id>.femb``  magic "FEMB1", u32 D, D float32 (precomputed embeddings).
"""

from __future__ import annotations

import json
import struct
import urllib.parse
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .audio import Waveform, crop_or_pad, decode_wav, resample
from .errors import ConfigError, DataError

LOG_FLOOR = 1e-10
STD_GUARD = 1e-8

_FMEL_MAGIC = b"FMEL1"
_FEMB_MAGIC = b"FEMB1"


@dataclass(frozen=True)
class FeatureParams:
    """Everything that affects extracted feature values."""

    sample_rate: int = 16000
    window: int = 1024
    hop: int = 160
    n_mels: int = 64
    fmin: float = 60.0
    fmax: float = 7800.0

    def param_hash(self) -> int:
        blob = json.dumps(
            {
                "sample_rate": self.sample_rate,
                "window": self.window,
                "hop": self.hop,
                "n_mels": self.n_mels,
                "fmin": self.fmin,
                "fmax": self.fmax,
                "log_floor": LOG_FLOOR,
                "std_guard": STD_GUARD,
            },
            sort_keys=True,
        ).encode("ascii")
        return zlib.crc32(blob) & 0xFFFFFFFF


@dataclass(frozen=True)
class MelFilterbank:
    """Triangular mel filters on the rfft bin grid, shape (n_mels, n_fft/2+1)."""

    weights: np.ndarray
    fmin: float
    fmax: float
    sample_rate: int


@dataclass(frozen=True)
class Spectrogram:
    """F x T log-mel matrix; float32 so cache round-trips are bit-exact."""

    values: np.ndarray
    frame_hop_s: float = 0.010
    normalized: bool = False

    def __post_init__(self) -> None:
        if self.values.ndim != 2:
            raise DataError("spectrogram must be a 2-D matrix")
        if not np.all(np.isfinite(self.values)):
            raise DataError("spectrogram contains non-finite values")


def hz_to_mel(f: np.ndarray | float) -> np.ndarray | float:
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m: np.ndarray | float) -> np.ndarray | float:
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def stft_power(w: Waveform, window: int = 1024, hop: int = 160) -> np.ndarray:
    """Power spectrogram of Hann-windowed frames, shape (window//2+1, T).

    Frames start at 0, hop, 2*hop, ... and must fit fully inside the signal.
    """
    x = w.samples
    if x.size < window:
        raise DataError(
            f"waveform of {x.size} samples is shorter than one {window}-sample window"
        )
    n_frames = 1 + (x.size - window) // hop
    frames = np.lib.stride_tricks.sliding_window_view(x, window)[:: hop][:n_frames]
    # periodic Hann: an exact-bin sine leaks into adjacent bins only
    hann = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(window) / window)
    spec = np.fft.rfft(frames * hann, axis=1)
    power = (spec.real**2 + spec.imag**2).T
    return np.ascontiguousarray(power)


def build_mel_filterbank(
    n_mels: int = 64,
    fmin: float = 60.0,
    fmax: float = 7800.0,
    sample_rate: int = 16000,
    n_fft: int = 1024,
) -> MelFilterbank:
    """Triangular filters with edges equally spaced on the mel scale.

    Uses mel(f) = 2595*log10(1 + f/700); filter m rises over
    [edge_{m-1}, edge_m] and falls over [edge_m, edge_{m+1}].  No area
    normalization is applied.
    """
    if not (0 <= fmin < fmax):
        raise ConfigError(f"need 0 <= fmin < fmax, got fmin={fmin}, fmax={fmax}")
    if fmax > sample_rate / 2:
        raise ConfigError(f"fmax={fmax} above the Nyquist frequency {sample_rate / 2}")
    edges_hz = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    bin_hz = np.arange(n_fft // 2 + 1, dtype=np.float64) * sample_rate / n_fft
    weights = np.zeros((n_mels, n_fft // 2 + 1), dtype=np.float64)
    for m in range(n_mels):
        lo, center, hi = edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]
        rising = (bin_hz - lo) / (center - lo)
        falling = (hi - bin_hz) / (hi - center)
        weights[m] = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(weights=weights, fmin=fmin, fmax=fmax, sample_rate=sample_rate)


def log_mel(power: np.ndarray, fb: MelFilterbank) -> Spectrogram:
    """Natural-log mel spectrogram with the output floored at ln(1e-10)."""
    if power.ndim != 2 or power.shape[0] != fb.weights.shape[1]:
        raise DataError(
            f"power matrix has {power.shape[0] if power.ndim == 2 else '?'} bins, "
            f"filterbank expects {fb.weights.shape[1]}"
        )
    mel = fb.weights @ power
    values = np.log(np.maximum(mel, LOG_FLOOR))
    return Spectrogram(values=values.astype(np.float32), normalized=False)


def normalize(s: Spectrogram) -> Spectrogram:
    """Standardize to zero mean / unit variance over all cells.

    A 1e-8 guard on the standard deviation maps constant spectrograms to
    all zeros instead of dividing by zero.
    """
    if s.normalized:
        raise ConfigError("spectrogram is already normalized")
    if s.values.size < 2:
        raise DataError("need at least 2 cells to normalize")
    v = s.values.astype(np.float64)
    out = (v - v.mean()) / (v.std() + STD_GUARD)
    return Spectrogram(values=out.astype(np.float32), frame_hop_s=s.frame_hop_s, normalized=True)


def extract(w: Waveform, params: FeatureParams = FeatureParams()) -> Spectrogram:
    """Full waveform-to-normalized-log-mel pipeline at one call."""
    if w.sample_rate != params.sample_rate:
        raise DataError(
            f"waveform at {w.sample_rate} Hz; extraction expects {params.sample_rate} Hz"
        )
    power = stft_power(w, window=params.window, hop=params.hop)
    fb = _filterbank_for(params)
    return normalize(log_mel(power, fb))


_FB_CACHE: dict[FeatureParams, MelFilterbank] = {}


def _filterbank_for(params: FeatureParams) -> MelFilterbank:
    fb = _FB_CACHE.get(params)
    if fb is None:
        fb = build_mel_filterbank(
            n_mels=params.n_mels,
            fmin=params.fmin,
            fmax=params.fmax,
            sample_rate=params.sample_rate,
            n_fft=params.window,
        )
        _FB_CACHE[params] = fb
    return fb


def _safe_name(record_id: str) -> str:
    return urllib.parse.quote(record_id, safe="")


class FeatureCache:
    """Directory of one ``.fmel`` file per utterance, tied to one parameter
    set via the stored hash."""

    def __init__(self, cache_dir: str | Path, params: FeatureParams = FeatureParams()):
        self.cache_dir = Path(cache_dir)
        self.params = params
        self._hash = params.param_hash()

    def path_for(self, record_id: str) -> Path:
        return self.cache_dir / f"{_safe_name(record_id)}.fmel"

    def has(self, record_id: str) -> bool:
        path = self.path_for(record_id)
        if not path.exists():
            return False
        with path.open("rb") as fh:
            head = fh.read(9)
        if len(head) < 9 or head[:5] != _FMEL_MAGIC:
            return False
        (stored_hash,) = struct.unpack("<I", head[5:9])
        return stored_hash == self._hash

    def write(self, record_id: str, spec: Spectrogram) -> Path:
        self.cache_dir.mkdir(parents=True, exist_ok=True)
        values = np.ascontiguousarray(spec.values, dtype="<f4")
        f, t = values.shape
        path = self.path_for(record_id)
        with path.open("wb") as fh:
            fh.write(_FMEL_MAGIC)
            fh.write(struct.pack("<III", self._hash, f, t))
            fh.write(values.tobytes())
        return path

    def load(self, record_id: str) -> Spectrogram:
        path = self.path_for(record_id)
        if not path.exists():
            raise DataError(f"no cached features for id {record_id!r} ({path})")
        raw = path.read_bytes()
        if len(raw) < 17 or raw[:5] != _FMEL_MAGIC:
            raise DataError(f"{path}: not a feature cache file")
        stored_hash, f, t = struct.unpack_from("<III", raw, 5)
        if stored_hash != self._hash:
            raise DataError(
                f"{path}: feature parameter hash mismatch "
                f"(file 0x{stored_hash:08x}, expected 0x{self._hash:08x}); "
                f"the cache was built with different feature parameters"
            )
        expected = 17 + 4 * f * t
        if len(raw) != expected:
            raise DataError(f"{path}: expected {expected} bytes, found {len(raw)}")
        values = np.frombuffer(raw, dtype="<f4", offset=17).reshape(f, t).copy()
        return Spectrogram(values=values, normalized=True)


def write_embedding(path: str | Path, vec: np.ndarray) -> None:
    vec = np.ascontiguousarray(np.asarray(vec).reshape(-1), dtype="<f4")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(_FEMB_MAGIC)
        fh.write(struct.pack("<I", vec.size))
        fh.write(vec.tobytes())


def read_embedding(path: str | Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise DataError(f"embedding file not found: {path}")
    raw = path.read_bytes()
    if len(raw) < 9 or raw[:5] != _FEMB_MAGIC:
        raise DataError(f"{path}: not an embedding file")
    (dim,) = struct.unpack_from("<I", raw, 5)
    if len(raw) != 9 + 4 * dim:
        raise DataError(f"{path}: expected {9 + 4 * dim} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=9).copy()


class ArrayFeatureSource:
    """In-memory id -> vector (or matrix) mapping; train and eval inputs
    coincide, and no rng is consumed."""

    def __init__(self, arrays: dict[str, np.ndarray]):
        self._arrays = dict(arrays)

    def has(self, record_id: str) -> bool:
        return record_id in self._arrays

    def train_input(self, record_id: str, rng: np.random.Generator) -> np.ndarray:
        return self._arrays[record_id]

    def eval_input(self, record_id: str) -> np.ndarray:
        return self._arrays[record_id]


class EmbeddingDirSource:
    """Reads ``<id>.femb`` files from a directory, memoizing each vector."""

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self._memo: dict[str, np.ndarray] = {}

    def has(self, record_id: str) -> bool:
        return record_id in self._memo or (
            self.directory / f"{_safe_name(record_id)}.femb"
        ).exists()

    def _get(self, record_id: str) -> np.ndarray:
        vec = self._memo.get(record_id)
        if vec is None:
            vec = read_embedding(self.directory / f"{_safe_name(record_id)}.femb")
            self._memo[record_id] = vec
        return vec

    def train_input(self, record_id: str, rng: np.random.Generator) -> np.ndarray:
        return self._get(record_id)

    def eval_input(self, record_id: str) -> np.ndarray:
        return self._get(record_id)


class AudioFeatureSource:
    """Decodes and resamples audio on demand, memoizing waveforms.

    Training inputs take a random crop of ``crop_seconds`` before feature
    extraction; eval inputs use the whole utterance.
    """

    def __init__(
        self,
        audio_paths: dict[str, str | Path],
        params: FeatureParams = FeatureParams(),
        crop_seconds: float = 2.0,
    ):
        self.audio_paths = dict(audio_paths)
        self.params = params
        self.crop_seconds = crop_seconds
        self._waves: dict[str, Waveform] = {}
        self._eval_memo: dict[str, np.ndarray] = {}

    def has(self, record_id: str) -> bool:
        return record_id in self.audio_paths

    def _waveform(self, record_id: str) -> Waveform:
        w = self._waves.get(record_id)
        if w is None:
            w = resample(decode_wav(self.audio_paths[record_id]), self.params.sample_rate)
            self._waves[record_id] = w
        return w

    def train_input(self, record_id: str, rng: np.random.Generator) -> np.ndarray:
        w = crop_or_pad(self._waveform(record_id), self.crop_seconds, mode="random", rng=rng)
        return extract(w, self.params).values

    def eval_input(self, record_id: str) -> np.ndarray:
        spec = self._eval_memo.get(record_id)
        if spec is None:
            spec = extract(self._waveform(record_id), self.params).values
            self._eval_memo[record_id] = spec
        return spec


class CachedFeatureSource:
    """Serves full-utterance spectrograms from a FeatureCache.

    Training inputs crop a contiguous block of frames matching
    ``crop_seconds``; shorter spectrograms are used whole.
    """

    def __init__(self, cache: FeatureCache, crop_seconds: float = 2.0):
        self.cache = cache
        self.crop_seconds = crop_seconds
        self._memo: dict[str, np.ndarray] = {}

    def has(self, record_id: str) -> bool:
        return self.cache.has(record_id)

    def _get(self, record_id: str) -> np.ndarray:
        spec = self._memo.get(record_id)
        if spec is None:
            spec = self.cache.load(record_id).values
            self._memo[record_id] = spec
        return spec

    def train_input(self, record_id: str, rng: np.random.Generator) -> np.ndarray:
        values = self._get(record_id)
        p = self.cache.params
        frames = 1 + (int(round(self.crop_seconds * p.sample_rate)) - p.window) // p.hop
        t = values.shape[1]
        if t <= frames:
            return values
        offset = int(rng.integers(0, t - frames + 1))
        return values[:, offset : offset + frames]

    def eval_input(self, record_id: str) -> np.ndarray:
        return self._get(record_id)


class CompositeFeatureSource:
    """Chains several sources; the first one claiming an id serves it."""

    def __init__(self, sources: list):
        self.sources = list(sources)

    def has(self, record_id: str) -> bool:
        return any(s.has(record_id) for s in self.sources)

    def _pick(self, record_id: str):
        for s in self.sources:
            if s.has(record_id):
                return s
        raise DataError(f"no feature source provides id {record_id!r}")

    def train_input(self, record_id: str, rng: np.random.Generator) -> np.ndarray:
        return self._pick(record_id).train_input(record_id, rng)

    def eval_input(self, record_id: str) -> np.ndarray:
        return self._pick(record_id).eval_input(record_id)


def cache_features(
    manifest,
    cache_dir: str | Path,
    params: FeatureParams = FeatureParams(),
    skip_fresh: bool = True,
) -> tuple[list[str], list[tuple[str, str]]]:
    """Extract and store features for every record in a manifest.

    Returns (written ids, failures as (id, reason)).  Records whose cache
    entry already matches the parameter hash are skipped when
    ``skip_fresh`` is set.
    """
    cache = FeatureCache(cache_dir, params)
    written: list[str] = []
    failures: list[tuple[str, str]] = []
    for rec in manifest.records:
        if skip_fresh and cache.has(rec.id):
            continue
        try:
            w = resample(decode_wav(rec.audio_path), params.sample_rate)
            cache.write(rec.id, extract(w, params))
            written.append(rec.id)
        except DataError as exc:
            failures.append((rec.id, str(exc)))
    return written, failures
