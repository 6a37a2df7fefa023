"""WAV input, silence trimming and 80-band log-mel features."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
LOG_FLOOR = 1e-10

CACHE_MAGIC = b"DYMF"
CACHE_VERSION = 1
_CACHE_HEADER = struct.Struct("<4sHII")


class WavFormatError(ValueError):
    """The file is not RIFF/WAVE PCM-16 mono at 16 kHz."""


class FrontendError(ValueError):
    pass


@dataclass(frozen=True)
class FrontendConfig:
    window_ms: float = 25.0
    hop_ms: float = 10.0
    n_mels: int = 80
    fft_size: int = 512
    fmin: float = 0.0
    fmax: float = 8000.0
    trim_threshold_db: float = 40.0
    max_duration_s: float = 10.0
    normalize: bool = True
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if not 0 <= self.fmin < self.fmax <= self.sample_rate / 2:
            raise FrontendError(f"need 0 <= fmin < fmax <= {self.sample_rate / 2}")
        if self.fft_size < self.win_length:
            raise FrontendError("fft_size shorter than the analysis window")

    @property
    def win_length(self) -> int:
        return int(round(self.window_ms * self.sample_rate / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000))


@dataclass(frozen=True)
class WaveForm:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


# ---------------------------------------------------------------------------
# WAV I/O


def load_wav(path) -> WaveForm:
    try:
        with wave.open(str(path), "rb") as fh:
            channels = fh.getnchannels()
            width = fh.getsampwidth()
            rate = fh.getframerate()
            raw = fh.readframes(fh.getnframes())
    except (wave.Error, EOFError) as err:
        raise WavFormatError(f"{path}: malformed WAV header ({err})") from err
    if channels != 1:
        raise WavFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise WavFormatError(f"{path}: expected 16-bit PCM, got {8 * width}-bit")
    if rate != SAMPLE_RATE:
        raise WavFormatError(f"{path}: expected {SAMPLE_RATE} Hz, got {rate} Hz")
    pcm = np.frombuffer(raw, dtype="<i2")
    return WaveForm(pcm.astype(np.float64) / 32768.0, rate)


def write_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1) as PCM-16 mono."""
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# trimming


def _frame_rms_db(x: np.ndarray, win: int, hop: int) -> np.ndarray:
    n = len(x)
    n_frames = 1 if n <= win else 1 + int(np.ceil((n - win) / hop))
    padded = np.zeros((n_frames - 1) * hop + win)
    padded[:n] = x
    frames = np.lib.stride_tricks.sliding_window_view(padded, win)[::hop]
    rms = np.sqrt(np.mean(frames * frames, axis=1))
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(rms)


def _block_db(x: np.ndarray) -> float:
    rms = np.sqrt(np.mean(x * x)) if len(x) else 0.0
    return -np.inf if rms == 0 else 20.0 * np.log10(rms)


def trim_silence(wave_: WaveForm, config: FrontendConfig = FrontendConfig()) -> WaveForm:
    """Drop leading/trailing audio quieter than ``trim_threshold_db`` below the peak frame.

    Activity is decided on 25 ms RMS frames at a 10 ms hop; the cut points are
    then tightened to the 10 ms grid so the result is within one hop of the
    true signal edges.
    """
    x = wave_.samples
    if len(x) == 0:
        raise FrontendError("empty waveform")
    win, hop = config.win_length, config.hop_length
    db = _frame_rms_db(x, win, hop)
    peak = db.max()
    if not np.isfinite(peak):
        raise FrontendError("waveform is entirely silent")
    floor = peak - config.trim_threshold_db
    active = np.flatnonzero(db >= floor)
    first, last = active[0], active[-1]
    start = first * hop
    end = min(len(x), last * hop + win)
    if last == len(db) - 1:
        end = len(x)
    while start + hop < end and _block_db(x[start:start + hop]) < floor:
        start += hop
    while end - hop > start and _block_db(x[end - hop:end]) < floor:
        end -= hop
    return WaveForm(x[start:end].copy(), wave_.sample_rate)


# ---------------------------------------------------------------------------
# mel features


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank_matrix(config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """Triangular filters, ``n_mels x (fft_size // 2 + 1)``.

    Edge frequencies are ``n_mels + 2`` points evenly spaced in mel between
    fmin and fmax; filter m rises from edge m to edge m+1 and falls to edge m+2,
    with unit height at its center.
    """
    n_bins = config.fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * config.sample_rate / config.fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    lo, center, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lo) / (center - lo)
    falling = (hi - bin_hz) / (hi - center)
    fb = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(fb.max(axis=1) <= 0)
    if empty.size:
        raise FrontendError(f"n_mels={config.n_mels} too large for fft_size={config.fft_size}: "
                            f"filter {int(empty[0])} covers no FFT bin")
    return fb


def filter_center_hz(config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(config.fmin), hz_to_mel(config.fmax), config.n_mels + 2))
    return edges[1:-1]


def frame_count(n_samples: int, config: FrontendConfig = FrontendConfig()) -> int:
    return 1 + (n_samples - config.win_length) // config.hop_length


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def power_spectrogram(samples: np.ndarray, config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    win, hop = config.win_length, config.hop_length
    if len(samples) < win:
        raise FrontendError(f"waveform has {len(samples)} samples, shorter than one {win}-sample window")
    n = frame_count(len(samples), config)
    frames = np.lib.stride_tricks.sliding_window_view(samples, win)[::hop][:n]
    spec = np.fft.rfft(frames * hann(win), n=config.fft_size, axis=1)
    return spec.real ** 2 + spec.imag ** 2


_FB_CACHE: dict[FrontendConfig, np.ndarray] = {}


def extract_logmel(wave_: WaveForm, config: FrontendConfig = FrontendConfig()) -> np.ndarray:
    """``n_frames x n_mels`` log-mel energies (natural log, floored at 1e-10)."""
    if wave_.sample_rate != config.sample_rate:
        raise FrontendError(f"sample rate {wave_.sample_rate} != {config.sample_rate}")
    fb = _FB_CACHE.get(config)
    if fb is None:
        fb = _FB_CACHE[config] = mel_filterbank_matrix(config)
    power = power_spectrogram(wave_.samples, config)
    return np.log(np.maximum(power @ fb.T, LOG_FLOOR))


def normalize_utterance(mel: np.ndarray) -> np.ndarray:
    """Zero-mean, unit-variance over the whole utterance (a single scalar pair).

    Per-bin statistics would erase stationary spectral shape, so the
    statistics are pooled over time and frequency.
    """
    std = mel.std()
    return (mel - mel.mean()) / (std if std > 1e-8 else 1.0)


@dataclass
class FeatureResult:
    mel: np.ndarray | None
    duration_s: float
    excluded: bool


def wav_to_features(path, config: FrontendConfig = FrontendConfig()) -> FeatureResult:
    """load -> trim -> duration filter -> log-mel -> optional per-utterance normalization.

    Over-long utterances are flagged, not truncated.
    """
    trimmed = trim_silence(load_wav(path), config)
    if trimmed.duration > config.max_duration_s:
        return FeatureResult(None, trimmed.duration, True)
    if len(trimmed.samples) < config.win_length:
        raise FrontendError(f"{path}: fewer than {config.win_length} samples after trimming")
    mel = extract_logmel(trimmed, config)
    if config.normalize:
        mel = normalize_utterance(mel)
    return FeatureResult(mel, trimmed.duration, False)


# ---------------------------------------------------------------------------
# feature cache


def write_feature_cache(path, mel: np.ndarray) -> None:
    mel = np.asarray(mel)
    header = _CACHE_HEADER.pack(CACHE_MAGIC, CACHE_VERSION, mel.shape[0], mel.shape[1])
    Path(path).write_bytes(header + mel.astype("<f4").tobytes())


def read_feature_cache(path) -> np.ndarray:
    blob = Path(path).read_bytes()
    if len(blob) < _CACHE_HEADER.size:
        raise FrontendError(f"{path}: truncated feature cache")
    magic, version, n_frames, n_mels = _CACHE_HEADER.unpack_from(blob)
    if magic != CACHE_MAGIC or version != CACHE_VERSION:
        raise FrontendError(f"{path}: not a feature cache (magic={magic!r}, version={version})")
    body = blob[_CACHE_HEADER.size:]
    if len(body) != 4 * n_frames * n_mels:
        raise FrontendError(f"{path}: payload size does not match {n_frames}x{n_mels}")
    return np.frombuffer(body, dtype="<f4").reshape(n_frames, n_mels).astype(np.float64)
