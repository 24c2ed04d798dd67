"""WAV parsing and frame-level feature extraction.

Pipeline: 25 ms frames at a 10 ms shift, periodic Hann window, real FFT,
power spectrum, 40 triangular mel filters over 125-3800 Hz, natural log
with a 1e-10 energy floor. All functions are pure and thread-safe.

Choices the pipeline fixes explicitly (common filterbank defaults): HTK
mel scale ``2595 * log10(1 + f/700)``, n_fft 512 at 16 kHz, no
pre-emphasis, no mean normalization.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError, FormatError

N_MELS = 40
FMIN_HZ = 125.0
FMAX_HZ = 3800.0
FRAME_LENGTH_MS = 25
FRAME_SHIFT_MS = 10
ENERGY_FLOOR = 1e-10
FBK_MAGIC = b"FBK1"


@dataclass
class PcmSignal:
    """Mono PCM audio normalized to [-1, 1]."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("PcmSignal expects a 1-d sample array")
        if self.sample_rate < 8000:
            raise DataError(f"sample_rate must be >= 8000 Hz, got {self.sample_rate}")
        peak = float(np.max(np.abs(self.samples))) if self.samples.size else 0.0
        if peak > 1.0 + 1e-9:
            raise DataError(f"samples exceed [-1, 1] (peak {peak:.6g}); normalize first")


@dataclass
class FeatureSequence:
    """T x n_mels matrix of log filterbank energies."""

    frames: np.ndarray
    frame_shift_ms: int = FRAME_SHIFT_MS
    frame_length_ms: int = FRAME_LENGTH_MS

    def __post_init__(self):
        self.frames = np.asarray(self.frames)
        if self.frames.ndim != 2:
            raise DataError("FeatureSequence expects a 2-d frame matrix")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class MelFilterbank:
    """Triangular filters, one row per mel channel over FFT bins."""

    weights: np.ndarray
    center_freqs_hz: np.ndarray
    fmin: float
    fmax: float
    sample_rate: int
    n_fft: int


# ---------------------------------------------------------------------------
# WAV I/O (RIFF little-endian, 16-bit PCM mono; other chunks skipped)

def parse_wav(data: bytes) -> PcmSignal:
    """Decode a 16-bit mono PCM WAV byte string.

    Raises FormatError naming the offending field for non-PCM codecs,
    multi-channel audio, or truncated chunks.
    """
    if len(data) < 12 or data[0:4] != b"RIFF":
        raise FormatError("missing RIFF chunk id")
    if data[8:12] != b"WAVE":
        raise FormatError("missing WAVE form type")

    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (chunk_size,) = struct.unpack_from("<I", data, pos + 4)
        body_start = pos + 8
        if body_start + chunk_size > len(data):
            raise FormatError(f"chunk {chunk_id!r}: declared size {chunk_size} exceeds file (truncated)")
        body = data[body_start:body_start + chunk_size]
        if chunk_id == b"fmt ":
            if chunk_size < 16:
                raise FormatError("fmt chunk: shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            payload = body
        # all other chunks skipped
        pos = body_start + chunk_size + (chunk_size & 1)  # chunks are word-aligned

    if fmt is None:
        raise FormatError("missing fmt chunk")
    if payload is None:
        raise FormatError("missing data chunk")
    audio_format, channels, sample_rate, _byte_rate, _block_align, bits = fmt
    if audio_format != 1:
        raise FormatError(f"audio_format: expected PCM (1), got {audio_format}")
    if channels != 1:
        raise FormatError(f"num_channels: expected mono (1), got {channels}")
    if bits != 16:
        raise FormatError(f"bits_per_sample: expected 16, got {bits}")
    if len(payload) % 2 != 0:
        raise FormatError("data chunk: odd byte count for 16-bit samples")

    raw = np.frombuffer(payload, dtype="<i2")
    return PcmSignal(raw.astype(np.float64) / 32768.0, sample_rate)


def write_wav(signal: PcmSignal) -> bytes:
    """Encode to 16-bit mono PCM WAV bytes (round, clip to int16 range)."""
    quantized = np.clip(np.round(signal.samples * 32768.0), -32768, 32767).astype("<i2")
    payload = quantized.tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, 1, 1, signal.sample_rate,
        signal.sample_rate * 2, 2, 16,
        b"data", len(payload),
    )
    return header + payload


# ---------------------------------------------------------------------------
# feature files: magic "FBK1", u32 T, u32 dim, then T*dim little-endian f32

def write_fbk(features: FeatureSequence) -> bytes:
    frames = np.ascontiguousarray(features.frames, dtype="<f4")
    t, dim = frames.shape
    return FBK_MAGIC + struct.pack("<II", t, dim) + frames.tobytes()


def parse_fbk(data: bytes) -> FeatureSequence:
    if len(data) < 12 or data[0:4] != FBK_MAGIC:
        raise FormatError("missing FBK1 magic")
    t, dim = struct.unpack_from("<II", data, 4)
    expected = 12 + 4 * t * dim
    if len(data) != expected:
        raise FormatError(f"feature payload: expected {expected} bytes for {t}x{dim}, got {len(data)}")
    frames = np.frombuffer(data, dtype="<f4", offset=12).reshape(t, dim)
    return FeatureSequence(frames.astype(np.float32))


# ---------------------------------------------------------------------------
# framing and spectra

def frame_lengths(sample_rate: int) -> tuple[int, int]:
    """(frame_len, hop) in samples for the 25 ms / 10 ms protocol."""
    return (round(FRAME_LENGTH_MS / 1000 * sample_rate),
            round(FRAME_SHIFT_MS / 1000 * sample_rate))


def frame_signal(signal: PcmSignal) -> np.ndarray:
    """Slice into overlapping frames; no padding, so num_frames =
    1 + floor((n - frame_len) / hop) when n >= frame_len, else 0."""
    frame_len, hop = frame_lengths(signal.sample_rate)
    n = signal.samples.size
    if n < frame_len:
        return np.zeros((0, frame_len))
    num_frames = 1 + (n - frame_len) // hop
    idx = hop * np.arange(num_frames)[:, None] + np.arange(frame_len)[None, :]
    return signal.samples[idx]


def rfft(frame: np.ndarray, n_fft: int) -> np.ndarray:
    """Real-input FFT of a frame zero-padded to ``n_fft`` (power of two);
    returns the n_fft/2 + 1 bin half-spectrum."""
    if n_fft < 2 or (n_fft & (n_fft - 1)) != 0:
        raise ConfigError(f"n_fft must be a power of two, got {n_fft}")
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size > n_fft:
        raise ConfigError(f"frame length {frame.size} exceeds n_fft {n_fft}")
    if frame.size < n_fft:
        frame = np.concatenate([frame, np.zeros(n_fft - frame.size)])
    return np.fft.rfft(frame)


def hz_to_mel(f):
    """HTK mel scale: 2595 * log10(1 + f/700)."""
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def build_mel_filterbank(sample_rate: int, n_fft: int, n_mels: int = N_MELS,
                         fmin: float = FMIN_HZ, fmax: float = FMAX_HZ) -> MelFilterbank:
    """Triangular filters with centers equally spaced on the mel scale."""
    nyquist = sample_rate / 2.0
    if fmax > nyquist:
        raise ConfigError(f"fmax {fmax} Hz exceeds Nyquist {nyquist} Hz")
    if fmin < 0 or fmin >= fmax:
        raise ConfigError(f"need 0 <= fmin < fmax, got fmin={fmin}, fmax={fmax}")
    n_bins = n_fft // 2 + 1
    mel_points = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_points = mel_to_hz(mel_points)
    bin_freqs = np.arange(n_bins) * (sample_rate / n_fft)

    weights = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        left, center, right = hz_points[m], hz_points[m + 1], hz_points[m + 2]
        rising = (bin_freqs - left) / (center - left)
        falling = (right - bin_freqs) / (right - center)
        weights[m] = np.maximum(0.0, np.minimum(rising, falling))
    return MelFilterbank(weights, hz_points[1:-1], fmin, fmax, sample_rate, n_fft)


def default_n_fft(sample_rate: int) -> int:
    """Next power of two covering one frame."""
    frame_len, _ = frame_lengths(sample_rate)
    n = 1
    while n < frame_len:
        n <<= 1
    return n


def log_fbank(signal: PcmSignal, n_mels: int = N_MELS,
              fmin: float = FMIN_HZ, fmax: float = FMAX_HZ) -> FeatureSequence:
    """Log mel filterbank energies, one row per frame."""
    frames = frame_signal(signal)
    n_fft = default_n_fft(signal.sample_rate)
    fbank = build_mel_filterbank(signal.sample_rate, n_fft, n_mels, fmin, fmax)
    frame_len = frames.shape[1]
    # periodic Hann
    window = 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(frame_len) / frame_len)
    if frames.shape[0] == 0:
        return FeatureSequence(np.zeros((0, n_mels)))
    padded = np.zeros((frames.shape[0], n_fft))
    padded[:, :frame_len] = frames * window
    spectrum = np.fft.rfft(padded, axis=1)
    power = spectrum.real ** 2 + spectrum.imag ** 2
    energies = power @ fbank.weights.T
    return FeatureSequence(np.log(np.maximum(energies, ENERGY_FLOOR)))
