"""WAV decoding, resampling to 16 kHz, and fixed-length training crops.

Supported input: RIFF/WAVE containers holding 16-bit PCM or 32-bit IEEE
float samples, mono or stereo.  Everything here is a pure per-file function
with no shared mutable state, so callers may fan out across files freely.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError

TARGET_RATE = 16000
CROP_SECONDS = 2.0

# Resampler design: windowed-sinc polyphase interpolation, Kaiser window
# with beta=8.6 (about 80 dB stopband), 64 taps per phase.
KAISER_BETA = 8.6
TAPS_PER_PHASE = 64
MIN_INPUT_RATE = 8000  # below this the 7800 Hz mel ceiling would alias

_WAVE_FORMAT_PCM = 0x0001
_WAVE_FORMAT_IEEE_FLOAT = 0x0003
_WAVE_FORMAT_EXTENSIBLE = 0xFFFE


@dataclass(frozen=True)
class Waveform:
    """Mono audio samples in [-1, 1] at a known sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self) -> None:
        if self.samples.ndim != 1:
            raise DataError("waveform samples must be one-dimensional")
        if self.samples.size == 0:
            raise DataError("waveform has zero samples")
        if not np.all(np.isfinite(self.samples)):
            raise DataError("waveform contains non-finite amplitudes")
        if self.sample_rate <= 0:
            raise DataError(f"invalid sample rate {self.sample_rate}")

    @property
    def duration_s(self) -> float:
        return self.samples.size / self.sample_rate


def decode_wav(path: str | Path) -> Waveform:
    """Decode a RIFF/WAVE file to a mono waveform.

    16-bit PCM is scaled by 1/32768; float samples pass through unchanged.
    Stereo is averaged down to mono.
    """
    path = Path(path)
    if not path.exists():
        raise DataError(f"audio file not found: {path}")
    data = path.read_bytes()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise DataError(f"{path}: not a RIFF/WAVE file")

    fmt: tuple[int, int, int, int] | None = None  # (format, channels, rate, bits)
    payload: bytes | None = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos : pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        body_end = body_start + chunk_size
        if chunk_id == b"fmt ":
            if chunk_size < 16 or body_end > len(data):
                raise DataError(f"{path}: truncated fmt chunk")
            code, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", data, body_start)
            if code == _WAVE_FORMAT_EXTENSIBLE:
                if chunk_size < 40:
                    raise DataError(f"{path}: truncated extensible fmt chunk")
                (code,) = struct.unpack_from("<H", data, body_start + 24)
            fmt = (code, channels, rate, bits)
        elif chunk_id == b"data":
            if body_end > len(data):
                raise DataError(
                    f"{path}: truncated data chunk "
                    f"(declares {chunk_size} bytes, {len(data) - body_start} available)"
                )
            payload = data[body_start:body_end]
        pos = body_end + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None:
        raise DataError(f"{path}: missing fmt chunk")
    if payload is None:
        raise DataError(f"{path}: missing data chunk")
    code, channels, rate, bits = fmt
    if channels not in (1, 2):
        raise DataError(f"{path}: unsupported channel count {channels}")

    if code == _WAVE_FORMAT_PCM and bits == 16:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % 2], dtype="<i2")
        samples = raw.astype(np.float64) / 32768.0
    elif code == _WAVE_FORMAT_IEEE_FLOAT and bits == 32:
        raw = np.frombuffer(payload[: len(payload) - len(payload) % 4], dtype="<f4")
        samples = raw.astype(np.float64)
    else:
        raise DataError(
            f"{path}: unsupported encoding (format 0x{code:04x}, {bits}-bit); "
            f"expected 16-bit PCM or 32-bit IEEE float"
        )

    if channels == 2:
        samples = samples[: samples.size - samples.size % 2].reshape(-1, 2).mean(axis=1)
    if samples.size == 0:
        raise DataError(f"{path}: zero samples")
    return Waveform(samples=samples, sample_rate=rate)


@lru_cache(maxsize=32)
def _phase_bank(up: int, down: int) -> np.ndarray:
    """Phase filter bank, shape (up, TAPS_PER_PHASE).

    Row p holds the windowed-sinc taps for fractional offset p/up, evaluated
    at integer lags j in [-32, 31] so that tap argument u = p/up + j stays
    inside the 64-sample Kaiser window support.
    """
    half = TAPS_PER_PHASE // 2
    # cutoff in cycles per *input* sample: anti-alias at the output Nyquist
    # when decimating, image-reject at the input Nyquist when interpolating
    cutoff = 0.5 * min(1.0, up / down)
    j = np.arange(-half, half, dtype=np.float64)
    bank = np.empty((up, TAPS_PER_PHASE), dtype=np.float64)
    for p in range(up):
        u = p / up + j
        x = np.clip(u / half, -1.0, 1.0)
        window = np.i0(KAISER_BETA * np.sqrt(1.0 - x * x)) / np.i0(KAISER_BETA)
        bank[p] = 2.0 * cutoff * np.sinc(2.0 * cutoff * u) * window
    return bank


def resample(w: Waveform, target_rate: int = TARGET_RATE) -> Waveform:
    """Resample to ``target_rate`` with the polyphase windowed-sinc filter.

    Output length is round(len * target / in_rate); input already at the
    target rate is returned unchanged.
    """
    if target_rate <= 0:
        raise ConfigError(f"invalid target rate {target_rate}")
    in_rate = w.sample_rate
    if in_rate == target_rate:
        return w
    if in_rate < MIN_INPUT_RATE:
        raise DataError(
            f"sample rate {in_rate} Hz below the supported minimum "
            f"{MIN_INPUT_RATE} Hz (content would alias into the mel range)"
        )
    g = math.gcd(in_rate, target_rate)
    up, down = target_rate // g, in_rate // g
    n_in = w.samples.size
    # round-half-up in exact integer arithmetic
    n_out = (2 * n_in * target_rate + in_rate) // (2 * in_rate)
    if n_out == 0:
        raise DataError("input too short to resample")

    bank = _phase_bank(up, down)
    half = TAPS_PER_PHASE // 2
    x = np.pad(w.samples.astype(np.float64), (half, TAPS_PER_PHASE))
    n = np.arange(n_out, dtype=np.int64)
    step = n * down
    base = step // up           # integer part of the input-time position
    phase = step - base * up    # fractional part, in units of 1/up
    # y[n] = sum_j x[base - j] * bank[phase, j], gather indices shifted by
    # the left padding
    idx = base[:, None] - np.arange(-half, half)[None, :] + half
    taps = bank[phase]
    out = np.einsum("nk,nk->n", x[idx], taps)
    return Waveform(samples=out, sample_rate=target_rate)


def crop_or_pad(
    w: Waveform,
    length_s: float = CROP_SECONDS,
    mode: str = "random",
    rng: np.random.Generator | int | None = None,
) -> Waveform:
    """Fixed-length training crop or the untouched full waveform.

    mode="random" returns a contiguous window of length_s seconds at a
    uniform offset drawn from ``rng``; shorter inputs are zero-padded
    symmetrically.  mode="full" returns the input unchanged.
    """
    if mode == "full":
        return w
    if mode != "random":
        raise ConfigError(f"unknown crop mode {mode!r}")
    target = int(round(length_s * w.sample_rate))
    n = w.samples.size
    if n >= target:
        if isinstance(rng, (int, np.integer)):
            rng = np.random.default_rng(rng)
        if rng is None:
            raise ConfigError("mode='random' requires an rng or seed")
        offset = int(rng.integers(0, n - target + 1))
        return Waveform(samples=w.samples[offset : offset + target], sample_rate=w.sample_rate)
    pad = target - n
    left = pad // 2
    out = np.zeros(target, dtype=np.float64)
    out[left : left + n] = w.samples
    return Waveform(samples=out, sample_rate=w.sample_rate)
