"""Audio I/O, resampling and log-mel features."""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

TARGET_RATE = 22050
N_FFT = 1024
WIN_LENGTH = 1024  # 46 ms at 22.05 kHz, rounded to the FFT size
HOP_LENGTH = 309  # 14 ms at 22.05 kHz
N_MELS = 80
F_MIN = 50.0
F_MAX = 11000.0
LOG_FLOOR = 1e-10

RESAMPLE_TAPS = 64
KAISER_BETA = 8.6
RESAMPLE_ROLLOFF = 0.95


class AudioFormatError(ValueError):
    """Malformed or unsupported WAV data; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    source_id: str = ""

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1 or self.samples.size == 0:
            raise ValueError("clip samples must be a non-empty 1-D array")
        if self.sample_rate <= 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass
class LogMelSpectrogram:
    values: np.ndarray  # 1 x n_mels x T, float32
    hop_seconds: float
    win_seconds: float
    source_id: str = ""

    @property
    def frame_count(self) -> int:
        return self.values.shape[-1]


# WAV ----------------------------------------------------------------------


def read_wav_bytes(blob: bytes, source_id: str = "") -> AudioClip:
    if len(blob) < 12:
        raise AudioFormatError("file shorter than a RIFF header", len(blob))
    if blob[:4] != b"RIFF":
        raise AudioFormatError("missing RIFF tag", 0)
    if blob[8:12] != b"WAVE":
        raise AudioFormatError("missing WAVE tag", 8)
    pos = 12
    fmt = None
    data = None
    data_offset = 0
    while pos + 8 <= len(blob):
        chunk_id = blob[pos:pos + 4]
        (size,) = struct.unpack_from("<I", blob, pos + 4)
        body = pos + 8
        if body + size > len(blob):
            raise AudioFormatError(f"chunk {chunk_id!r} runs past end of file", pos)
        if chunk_id == b"fmt ":
            if size < 16:
                raise AudioFormatError("fmt chunk too short", pos)
            fmt = struct.unpack_from("<HHIIHH", blob, body)
            fmt_offset = body
        elif chunk_id == b"data":
            data = blob[body:body + size]
            data_offset = body
        pos = body + size + (size & 1)
    if fmt is None:
        raise AudioFormatError("no fmt chunk", pos)
    audio_format, channels, rate, _, block_align, bits = fmt
    if audio_format not in (1, 0xFFFE) or bits != 16:
        raise AudioFormatError(f"unsupported codec (format {audio_format}, {bits} bit)", fmt_offset)
    if channels not in (1, 2):
        raise AudioFormatError(f"unsupported channel count {channels}", fmt_offset + 2)
    if data is None:
        raise AudioFormatError("no data chunk", pos)
    frames = len(data) // (2 * channels)
    if frames == 0:
        raise AudioFormatError("empty data chunk", data_offset)
    pcm = np.frombuffer(data[:frames * 2 * channels], dtype="<i2").reshape(frames, channels)
    samples = pcm.astype(np.float64).mean(axis=1) / 32768.0
    return AudioClip(samples, rate, source_id)


def load_wav(path: str | Path) -> AudioClip:
    """Read a 16-bit PCM mono/stereo WAV; stereo is averaged to mono."""
    path = Path(path)
    return read_wav_bytes(path.read_bytes(), source_id=path.stem)


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(sample_rate)
        fh.writeframes(pcm.tobytes())


# resampling ---------------------------------------------------------------


def _polyphase_filters(up: int, down: int) -> np.ndarray:
    """``up`` phases of a 64-tap Kaiser-windowed sinc low-pass, one row per phase."""
    cutoff = 0.5 * RESAMPLE_ROLLOFF * min(1.0, up / down)  # cycles per input sample
    half = RESAMPLE_TAPS // 2
    k = np.arange(-half + 1, half + 1)  # tap offsets relative to floor(t)
    phase = np.arange(up)[:, None] / up
    t = k[None, :] - phase  # distance from the output instant, in input samples
    window = np.i0(KAISER_BETA * np.sqrt(np.clip(1.0 - (t / half) ** 2, 0.0, None))) / np.i0(KAISER_BETA)
    return 2.0 * cutoff * np.sinc(2.0 * cutoff * t) * window


def resample(clip: AudioClip, target_rate: int = TARGET_RATE) -> AudioClip:
    """Polyphase windowed-sinc downsampling; output length ``round(n * target / source)``."""
    if clip.sample_rate == target_rate:
        return clip
    if target_rate > clip.sample_rate:
        raise NotImplementedError(f"upsampling {clip.sample_rate} -> {target_rate} Hz is not supported")
    ratio = Fraction(target_rate, clip.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    n_in = clip.samples.size
    n_out = int(round(n_in * target_rate / clip.sample_rate))
    filters = _polyphase_filters(up, down)
    half = RESAMPLE_TAPS // 2
    n = np.arange(n_out)
    base = (n * down) // up
    phase = (n * down) % up
    padded = np.pad(clip.samples, (half, half))
    # taps k = -half+1 .. half relative to base, shifted by the padding
    idx = base[:, None] + np.arange(1, RESAMPLE_TAPS + 1)[None, :]
    out = np.einsum("ij,ij->i", padded[idx], filters[phase])
    return AudioClip(out, target_rate, clip.source_id)


# mel features ---------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass
class MelFilterbank:
    weights: np.ndarray  # n_mels x (n_fft // 2 + 1)
    center_hz: np.ndarray
    n_mels: int = N_MELS
    f_min: float = F_MIN
    f_max: float = F_MAX

    @classmethod
    def create(
        cls,
        sample_rate: int = TARGET_RATE,
        n_fft: int = N_FFT,
        n_mels: int = N_MELS,
        f_min: float = F_MIN,
        f_max: float = F_MAX,
    ) -> "MelFilterbank":
        """HTK-scale triangles with unit peaks, evaluated at the FFT bin frequencies."""
        edges = mel_to_hz(np.linspace(hz_to_mel(f_min), hz_to_mel(f_max), n_mels + 2))
        bins = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
        lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
        rising = (bins[None, :] - lo) / (mid - lo)
        falling = (hi - bins[None, :]) / (hi - mid)
        weights = np.clip(np.minimum(rising, falling), 0.0, None)
        return cls(weights, edges[1:-1].copy(), n_mels, f_min, f_max)


_DEFAULT_FB: MelFilterbank | None = None


def default_filterbank() -> MelFilterbank:
    global _DEFAULT_FB
    if _DEFAULT_FB is None:
        _DEFAULT_FB = MelFilterbank.create()
    return _DEFAULT_FB


def frame_count(n_samples: int, win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> int:
    return (n_samples - win) // hop + 1


def mel_power(clip: AudioClip, fb: MelFilterbank | None = None,
              win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> np.ndarray:
    """Linear mel energies, ``n_mels x T``."""
    fb = fb or default_filterbank()
    x = clip.samples
    if x.size < win:
        raise ValueError(f"clip has {x.size} samples, fewer than one {win}-sample window")
    n_frames = frame_count(x.size, win, hop)
    frames = np.lib.stride_tricks.sliding_window_view(x, win)[::hop][:n_frames]
    window = np.hanning(win + 1)[:-1]  # periodic Hann
    spec = np.fft.rfft(frames * window, n=N_FFT, axis=1)
    power = spec.real**2 + spec.imag**2
    return fb.weights @ power.T


def log_mel(clip: AudioClip, fb: MelFilterbank | None = None,
            win: int = WIN_LENGTH, hop: int = HOP_LENGTH) -> LogMelSpectrogram:
    if clip.sample_rate != TARGET_RATE:
        raise ValueError(f"log_mel expects {TARGET_RATE} Hz audio, got {clip.sample_rate}")
    values = np.log(mel_power(clip, fb, win, hop) + LOG_FLOOR).astype(np.float32)
    return LogMelSpectrogram(values[None], hop / TARGET_RATE, win / TARGET_RATE, clip.source_id)


def featurize_file(path: str | Path) -> LogMelSpectrogram:
    """WAV file -> 22.05 kHz log-mel spectrogram."""
    return log_mel(resample(load_wav(path)))
