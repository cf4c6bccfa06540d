"""Waveform I/O, resampling, mel analysis and Griffin-Lim synthesis.

All mel grids run at 100 frames/second regardless of sampling rate: every
supported rate uses a hop of exactly 10 ms, so clips of equal duration
produce equal frame counts at every rate.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

# log-mel floor: log(max(mel_power, MEL_POWER_FLOOR))
MEL_POWER_FLOOR = 1e-5
LOG_FLOOR = float(np.log(MEL_POWER_FLOOR))

MEL_MAGIC = b"SRCM"
MEL_VERSION = 1


@dataclass(frozen=True)
class RateConfig:
    """DSP parameters for one sampling rate."""

    rate_hz: int
    fft_size: int
    hop_size: int
    mel_dim: int
    rate_id: int

    def __post_init__(self):
        if self.rate_hz <= 0:
            raise ValueError(f"rate_hz must be positive, got {self.rate_hz}")
        if self.hop_size * 100 != self.rate_hz:
            raise ValueError(
                f"hop must be exactly 10 ms: hop {self.hop_size} at {self.rate_hz} Hz"
            )
        if self.fft_size < self.hop_size:
            raise ValueError("fft_size must be >= hop_size")
        if self.mel_dim < 1:
            raise ValueError("mel_dim must be >= 1")


# (fft, hop, mel) per rate; hop is 10 ms at every rate.
RATE_CONFIGS: dict[int, RateConfig] = {
    16000: RateConfig(16000, 1024, 160, 64, 0),
    24000: RateConfig(24000, 2048, 240, 64, 1),
    32000: RateConfig(32000, 2048, 320, 64, 2),
    48000: RateConfig(48000, 2048, 480, 64, 3),
}
RATE_SET: tuple[int, ...] = tuple(sorted(RATE_CONFIGS))


def config_for_rate(rate_hz: int) -> RateConfig:
    try:
        return RATE_CONFIGS[rate_hz]
    except KeyError:
        raise ValueError(
            f"unsupported rate {rate_hz} Hz; valid rates: {sorted(RATE_CONFIGS)}"
        ) from None


@dataclass
class Waveform:
    """Mono audio samples in [-1, 1] at a known sampling rate."""

    samples: np.ndarray
    rate_hz: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.rate_hz


@dataclass
class MelSpectrogram:
    """Log-mel energies on a (frames, mel_dim) grid."""

    values: np.ndarray
    config: RateConfig

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if self.values.ndim != 2 or self.values.shape[1] != self.config.mel_dim:
            raise ValueError(
                f"mel values must be (frames, {self.config.mel_dim}), got {self.values.shape}"
            )

    @property
    def frames(self) -> int:
        return self.values.shape[0]


# ---------------------------------------------------------------------------
# WAV I/O (mono 16-bit PCM)
# ---------------------------------------------------------------------------

def write_wav(path: str | Path, w: Waveform) -> None:
    samples = np.clip(w.samples, -1.0, 1.0)
    pcm = np.round(samples * 32767.0).astype("<i2")
    with wave.open(str(path), "wb") as f:
        f.setnchannels(1)
        f.setsampwidth(2)
        f.setframerate(w.rate_hz)
        f.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> Waveform:
    with wave.open(str(path), "rb") as f:
        if f.getnchannels() != 1 or f.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        rate = f.getframerate()
        data = f.readframes(f.getnframes())
    samples = np.frombuffer(data, dtype="<i2").astype(np.float64) / 32767.0
    return Waveform(samples, rate)


# ---------------------------------------------------------------------------
# Resampling: band-limited windowed-sinc interpolation
# ---------------------------------------------------------------------------

def resample(w: Waveform, target_hz: int, width: int = 32) -> Waveform:
    """Resample to target_hz with a Hann-windowed sinc interpolator.

    Output length is round(len * target / source). When downsampling, the
    sinc cutoff sits at the target Nyquist so aliasing content is removed.
    """
    if target_hz <= 0:
        raise ValueError(f"target rate must be positive, got {target_hz}")
    if len(w) == 0:
        raise ValueError("cannot resample an empty waveform")
    if target_hz == w.rate_hz:
        return Waveform(w.samples.copy(), w.rate_hz)

    ratio = target_hz / w.rate_hz
    out_len = int(round(len(w) * target_hz / w.rate_hz))
    cutoff = min(1.0, ratio)  # fraction of the source Nyquist
    half = int(np.ceil(width / cutoff))

    src = np.pad(w.samples, (half, half))
    # output sample positions in source-sample units
    pos = np.arange(out_len) / ratio
    base = np.floor(pos).astype(np.int64)
    offsets = np.arange(-half + 1, half + 1)

    out = np.empty(out_len)
    block = 4096
    for lo in range(0, out_len, block):
        hi = min(lo + block, out_len)
        idx = base[lo:hi, None] + offsets[None, :]
        u = pos[lo:hi, None] - idx
        taps = cutoff * np.sinc(cutoff * u)
        taps *= 0.5 + 0.5 * np.cos(np.pi * u / half)
        out[lo:hi] = np.einsum("ij,ij->i", src[idx + half], taps)
    return Waveform(out, target_hz)


# ---------------------------------------------------------------------------
# Mel filterbank (HTK mel scale)
# ---------------------------------------------------------------------------

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: RateConfig) -> np.ndarray:
    """Triangular mel filters, shape (mel_dim, fft_size // 2 + 1)."""
    n_freqs = cfg.fft_size // 2 + 1
    if cfg.mel_dim > n_freqs:
        raise ValueError(f"mel_dim {cfg.mel_dim} exceeds {n_freqs} FFT bins")
    freqs = np.linspace(0.0, cfg.rate_hz / 2.0, n_freqs)
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.rate_hz / 2.0), cfg.mel_dim + 2)
    hz_pts = mel_to_hz(mel_pts)

    fb = np.zeros((cfg.mel_dim, n_freqs))
    for m in range(cfg.mel_dim):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (freqs - lo) / (ctr - lo)
        down = (hi - freqs) / (hi - ctr)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


def filter_centers_hz(cfg: RateConfig) -> np.ndarray:
    mel_pts = np.linspace(hz_to_mel(0.0), hz_to_mel(cfg.rate_hz / 2.0), cfg.mel_dim + 2)
    return mel_to_hz(mel_pts[1:-1])


# ---------------------------------------------------------------------------
# STFT / mel extraction
# ---------------------------------------------------------------------------

def _hann(n: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def frame_count(num_samples: int, hop: int) -> int:
    return num_samples // hop + 1


def _frame_signal(padded: np.ndarray, fft_size: int, hop: int, frames: int) -> np.ndarray:
    idx = np.arange(frames)[:, None] * hop + np.arange(fft_size)[None, :]
    return padded[idx]


def stft_magnitude(w: Waveform, cfg: RateConfig) -> np.ndarray:
    """Center-padded magnitude STFT, shape (frames, fft_size // 2 + 1)."""
    n = len(w)
    frames = frame_count(n, cfg.hop_size)
    pad = cfg.fft_size // 2
    padded = np.pad(w.samples, (pad, pad), mode="reflect")
    segs = _frame_signal(padded, cfg.fft_size, cfg.hop_size, frames)
    spec = np.fft.rfft(segs * _hann(cfg.fft_size)[None, :], axis=1)
    return np.abs(spec)


def extract_mel(w: Waveform, cfg: RateConfig) -> MelSpectrogram:
    """Log-mel spectrogram: |STFT|^2 -> mel filterbank -> floored log."""
    if w.rate_hz != cfg.rate_hz:
        raise ValueError(f"waveform at {w.rate_hz} Hz but config expects {cfg.rate_hz} Hz")
    if not np.all(np.isfinite(w.samples)):
        raise ValueError("waveform contains non-finite samples")
    mag = stft_magnitude(w, cfg)
    mel_power = (mag ** 2) @ mel_filterbank(cfg).T
    log_mel = np.log(np.maximum(mel_power, MEL_POWER_FLOOR))
    return MelSpectrogram(log_mel.astype(np.float32), cfg)


def _overlap_add(spec: np.ndarray, cfg: RateConfig) -> np.ndarray:
    """Inverse STFT of (frames, n_freqs) complex frames, padded-domain output."""
    frames = spec.shape[0]
    win = _hann(cfg.fft_size)
    segs = np.fft.irfft(spec, n=cfg.fft_size, axis=1) * win[None, :]
    total = (frames - 1) * cfg.hop_size + cfg.fft_size
    out = np.zeros(total)
    norm = np.zeros(total)
    for i in range(frames):
        lo = i * cfg.hop_size
        out[lo : lo + cfg.fft_size] += segs[i]
        norm[lo : lo + cfg.fft_size] += win ** 2
    return out / np.maximum(norm, 1e-10)


def griffin_lim(m: MelSpectrogram, iters: int = 64) -> Waveform:
    """Invert a log-mel spectrogram to a waveform by iterative phase recovery.

    Starts from the pseudo-inverse magnitude estimate, then alternates an
    overlap-add consistency projection with a mel-band energy rescaling.
    Rescaling per band (instead of pinning per-bin magnitudes) lets tonal
    content settle on its true frequency rather than a filter center.
    Fully deterministic: zero-phase start, no random state.
    """
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not np.all(np.isfinite(m.values)):
        raise ValueError("mel spectrogram contains non-finite values")
    cfg = m.config
    mel_power = np.exp(m.values.astype(np.float64))
    fb = mel_filterbank(cfg)
    fb_sum = np.maximum(fb.sum(axis=0), 1e-12)
    mag = np.sqrt(np.clip(mel_power @ np.linalg.pinv(fb).T, 0.0, None))

    win = _hann(cfg.fft_size)
    spec = mag.astype(np.complex128)  # zero-phase start
    for _ in range(iters):
        x = _overlap_add(spec, cfg)
        segs = _frame_signal(x, cfg.fft_size, cfg.hop_size, m.frames) * win[None, :]
        rebuilt = np.fft.rfft(segs, axis=1)
        band = np.abs(rebuilt) ** 2 @ fb.T
        band_gain = np.sqrt(mel_power / np.maximum(band, 1e-12))
        spec = rebuilt * (band_gain @ fb) / fb_sum[None, :]

    x = _overlap_add(spec, cfg)
    pad = cfg.fft_size // 2
    out = x[pad : pad + (m.frames - 1) * cfg.hop_size]
    peak = np.max(np.abs(out)) if len(out) else 0.0
    if peak > 1.0:
        out = out / peak  # rescale, not clip: hard clipping adds broadband clicks
    return Waveform(np.clip(out, -1.0, 1.0), cfg.rate_hz)


# ---------------------------------------------------------------------------
# Mel container: magic, version, rate, fft, hop, mel, frames, then f32 rows
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<4s6I")


def save_mel(path: str | Path, m: MelSpectrogram) -> None:
    cfg = m.config
    header = _HEADER.pack(
        MEL_MAGIC, MEL_VERSION, cfg.rate_hz, cfg.fft_size, cfg.hop_size,
        cfg.mel_dim, m.frames,
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(m.values, dtype="<f4").tobytes())


def load_mel(path: str | Path) -> MelSpectrogram:
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
        magic, version, rate, fft, hop, mel, frames = _HEADER.unpack(raw)
        if magic != MEL_MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        if version != MEL_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        payload = f.read(4 * frames * mel)
    values = np.frombuffer(payload, dtype="<f4").reshape(frames, mel)
    rate_id = RATE_CONFIGS[rate].rate_id if rate in RATE_CONFIGS else -1
    cfg = RateConfig(rate, fft, hop, mel, rate_id)
    return MelSpectrogram(values.copy(), cfg)
