"""Audio ingestion and the log-mel/augmentation frontend."""
from __future__ import annotations

import enum
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.signal import lfilter

SAMPLE_RATE = 16000
SEGMENT_SECONDS = 8.0
N_MELS = 64
WIN_LENGTH = 400
HOP_LENGTH = 160
N_FFT = 512
LOG_FLOOR = 1e-6


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform has non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


# --------------------------------------------------------------------- WAV I/O


class WavError(ValueError):
    pass


class WavHeaderError(WavError):
    pass


class UnsupportedCodecError(WavError):
    pass


class TruncatedDataError(WavError):
    pass


_PCM, _FLOAT = 1, 3


def load_wav(path) -> Waveform:
    """Read a PCM16 or float32 RIFF/WAVE file as a mono waveform in [-1, 1]."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavHeaderError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    data = None
    while pos + 8 <= len(raw):
        cid = raw[pos:pos + 4]
        size = struct.unpack("<I", raw[pos + 4:pos + 8])[0]
        body = raw[pos + 8:pos + 8 + size]
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavHeaderError(f"{path}: short fmt chunk")
            fmt = struct.unpack("<HHIIHH", body[:16])
            if fmt[0] == 0xFFFE and len(body) >= 26:  # WAVE_FORMAT_EXTENSIBLE: take the sub-format tag
                fmt = (struct.unpack("<H", body[24:26])[0],) + fmt[1:]
        elif cid == b"data":
            if len(body) < size:
                raise TruncatedDataError(f"{path}: data chunk declares {size} bytes, found {len(body)}")
            data = body
            break
        pos += 8 + size + (size & 1)
    if fmt is None:
        raise WavHeaderError(f"{path}: missing fmt chunk")
    if data is None:
        raise WavHeaderError(f"{path}: missing data chunk")
    tag, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate <= 0:
        raise WavHeaderError(f"{path}: invalid channel count or rate")
    if tag == _PCM and bits == 16:
        dtype, scale = "<i2", 1.0 / 32768.0
    elif tag == _FLOAT and bits == 32:
        dtype, scale = "<f4", 1.0
    else:
        raise UnsupportedCodecError(f"{path}: format tag {tag} with {bits} bits is not supported")
    frame = channels * bits // 8
    if len(data) % frame:
        raise TruncatedDataError(f"{path}: data length {len(data)} is not a whole number of frames")
    samples = np.frombuffer(data, dtype=dtype).astype(np.float64) * scale
    samples = samples.reshape(-1, channels).mean(axis=1)
    return Waveform(samples, rate)


def write_wav(path, w: Waveform, fmt: str = "float32") -> None:
    """Write a mono file; ``fmt`` is ``"pcm16"`` or ``"float32"``."""
    if fmt == "pcm16":
        payload = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
        tag, bits = _PCM, 16
    elif fmt == "float32":
        payload = w.samples.astype("<f4").tobytes()
        tag, bits = _FLOAT, 32
    else:
        raise ValueError(f"unknown wav format {fmt!r}")
    block = bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, tag, 1, w.sample_rate, w.sample_rate * block, block, bits)
    header += b"data" + struct.pack("<I", len(payload))
    Path(path).write_bytes(header + payload)


# ------------------------------------------------------------------ resampling

RESAMPLE_HALF_TAPS = 16
KAISER_BETA = 8.0


def resample(w: Waveform, target_hz: int) -> Waveform:
    """Kaiser-windowed sinc interpolation with 16 taps on each side.

    Weights are renormalized per output sample, which keeps DC exact at the
    edges where taps fall outside the signal.
    """
    if target_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    if target_hz == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    x = w.samples
    n_in = len(x)
    n_out = int(round(n_in * target_hz / w.sample_rate))
    ratio = w.sample_rate / target_hz
    cutoff = min(1.0, target_hz / w.sample_rate)
    offsets = np.arange(-RESAMPLE_HALF_TAPS + 1, RESAMPLE_HALF_TAPS + 1)
    out = np.empty(n_out)
    chunk = 1 << 15
    for start in range(0, n_out, chunk):
        t = np.arange(start, min(n_out, start + chunk)) * ratio
        base = np.floor(t).astype(np.int64)
        idx = base[:, None] + offsets[None, :]
        dist = t[:, None] - idx
        win = np.i0(KAISER_BETA * np.sqrt(np.clip(1.0 - (dist / RESAMPLE_HALF_TAPS) ** 2, 0.0, None)))
        weights = cutoff * np.sinc(cutoff * dist) * win
        valid = (idx >= 0) & (idx < n_in)
        weights = np.where(valid, weights, 0.0)
        weights /= weights.sum(axis=1, keepdims=True)
        out[start:start + len(t)] = np.sum(weights * x[np.clip(idx, 0, n_in - 1)], axis=1)
    return Waveform(out, target_hz)


def segment(w: Waveform, seconds: float = SEGMENT_SECONDS) -> list[Waveform]:
    """Non-overlapping windows; the last one is zero-padded on the right."""
    n = len(w.samples)
    if n == 0:
        raise ValueError("cannot segment an empty waveform")
    size = int(round(seconds * w.sample_rate))
    count = max(1, math.ceil(n / size))
    padded = np.zeros(count * size)
    padded[:n] = w.samples
    return [Waveform(padded[i * size:(i + 1) * size], w.sample_rate) for i in range(count)]


# ---------------------------------------------------------------------- logmel


@dataclass(frozen=True)
class MelConfig:
    sample_rate: int = SAMPLE_RATE
    n_mels: int = N_MELS
    win_length: int = WIN_LENGTH
    hop_length: int = HOP_LENGTH
    n_fft: int = N_FFT
    f_min: float = 0.0
    f_max: float = 8000.0
    log_floor: float = LOG_FLOOR


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: MelConfig = MelConfig()) -> np.ndarray:
    """(n_fft//2+1) x n_mels matrix of triangular HTK-mel filters."""
    freqs = np.arange(cfg.n_fft // 2 + 1) * cfg.sample_rate / cfg.n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lower, center, upper = edges[:-2], edges[1:-1], edges[2:]
    up = (freqs[:, None] - lower[None, :]) / (center - lower)[None, :]
    down = (upper[None, :] - freqs[:, None]) / (upper - center)[None, :]
    return np.maximum(0.0, np.minimum(up, down))


def frame_count(n_samples: int, cfg: MelConfig = MelConfig()) -> int:
    return (n_samples - cfg.win_length) // cfg.hop_length + 1


def logmel(w: Waveform, cfg: MelConfig = MelConfig()) -> np.ndarray:
    """T x n_mels natural-log mel power spectrogram (no centering pad)."""
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(f"expected {cfg.sample_rate} Hz input, got {w.sample_rate} Hz; resample first")
    n = len(w.samples)
    if n < cfg.win_length:
        raise ValueError(f"waveform of {n} samples is shorter than one {cfg.win_length}-sample window")
    t = frame_count(n, cfg)
    idx = np.arange(cfg.win_length)[None, :] + cfg.hop_length * np.arange(t)[:, None]
    window = np.hanning(cfg.win_length + 1)[:-1]  # periodic Hann
    frames = w.samples[idx] * window
    power = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    mel = power @ mel_filterbank(cfg)
    return np.log(np.maximum(mel, cfg.log_floor))


# ------------------------------------------------------------- augmentations


class AugmentKind(enum.Enum):
    GainPlus5dB = "gain_plus_5db"
    PeakNormalize = "peak_normalize"
    LowPass300Hz = "lowpass_300hz"
    HighPass3000Hz = "highpass_3000hz"


AUGMENT_KINDS = tuple(AugmentKind)
GAIN_5DB = 10.0 ** (5.0 / 20.0)


def butterworth_biquad(kind: str, cutoff: float, sample_rate: int) -> tuple[np.ndarray, np.ndarray]:
    """2nd-order Butterworth (Q = 1/sqrt 2) coefficients ``(b, a)`` with a[0] = 1."""
    w0 = 2.0 * math.pi * cutoff / sample_rate
    alpha = math.sin(w0) / (2.0 * (1.0 / math.sqrt(2.0)))
    cw = math.cos(w0)
    if kind == "lowpass":
        b = [(1 - cw) / 2, 1 - cw, (1 - cw) / 2]
    elif kind == "highpass":
        b = [(1 + cw) / 2, -(1 + cw), (1 + cw) / 2]
    else:
        raise ValueError(f"unknown filter kind {kind!r}")
    a0 = 1 + alpha
    return np.array(b) / a0, np.array([1.0, -2 * cw / a0, (1 - alpha) / a0])


def apply_augment(w: Waveform, kind: AugmentKind) -> Waveform:
    x = w.samples
    if kind is AugmentKind.GainPlus5dB:
        y = x * GAIN_5DB
    elif kind is AugmentKind.PeakNormalize:
        peak = np.max(np.abs(x)) if len(x) else 0.0
        y = x / peak if peak > 0 else x.copy()
    elif kind is AugmentKind.LowPass300Hz:
        y = lfilter(*butterworth_biquad("lowpass", 300.0, w.sample_rate), x)
    elif kind is AugmentKind.HighPass3000Hz:
        y = lfilter(*butterworth_biquad("highpass", 3000.0, w.sample_rate), x)
    else:
        raise ValueError(kind)
    return Waveform(y, w.sample_rate)


def augment(w: Waveform, rng: np.random.Generator) -> tuple[Waveform, AugmentKind]:
    """Apply one uniformly chosen augmentation."""
    kind = AUGMENT_KINDS[int(rng.integers(len(AUGMENT_KINDS)))]
    return apply_augment(w, kind), kind


# ------------------------------------------------------- spectrogram files

SPEC_MAGIC = b"ACSPEC1\0"


def write_spectrogram(path, spec: np.ndarray) -> None:
    """Flat binary: magic, u32 T, u32 F, then T*F float32 little-endian."""
    spec = np.asarray(spec)
    if spec.ndim != 2:
        raise ValueError(f"spectrogram must be 2-D, got shape {spec.shape}")
    t, f = spec.shape
    Path(path).write_bytes(SPEC_MAGIC + struct.pack("<II", t, f) + spec.astype("<f4").tobytes())


def read_spectrogram(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != SPEC_MAGIC or len(raw) < 16:
        raise ValueError(f"{path}: not an ACSPEC1 file")
    t, f = struct.unpack("<II", raw[8:16])
    if len(raw) != 16 + 4 * t * f:
        raise ValueError(f"{path}: expected {t}x{f} values, file size is {len(raw)}")
    return np.frombuffer(raw[16:], dtype="<f4").astype(np.float64).reshape(t, f)
