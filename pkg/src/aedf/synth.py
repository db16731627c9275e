"""Synthetic two-domain corpus: chirp events over domain-specific backgrounds.

Domain A is stationary (pink noise with mains hum). Domain B is eventful
(brown noise, a babble-like band of modulated noise and Poisson clicks).
Positive clips overlay 1-10 linear sine sweeps with Hann envelopes.

Every clip draws from its own RNG streams keyed on ``(seed, domain, index)``,
so background and events are independent and a clip can be re-rendered
without its events for paired checks.
"""

from __future__ import annotations

import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Entry, Manifest, write_manifest
from .dsp import TARGET_RATE, write_wav

BACKGROUND_RMS = 0.03
PEAK_LIMIT = 0.99

# stream tags for default_rng([seed, domain, index, tag])
_BACKGROUND, _EVENTS, _LABELS = 0, 1, 2


@dataclass(frozen=True)
class SynthConfig:
    domain: str = "A"
    noise_color: str = "pink"  # white | pink | brown
    hum_hz: tuple[float, ...] = (50.0, 100.0, 150.0)
    hum_level: float = 0.5  # hum RMS relative to the background RMS
    babble_level: float = 0.0
    babble_band: tuple[float, float] = (300.0, 3000.0)
    click_rate: float = 0.0  # clicks per second
    click_level: float = 8.0  # click peak relative to the background RMS
    chirp_count: tuple[int, int] = (1, 10)
    sweep_band: tuple[float, float] = (2000.0, 8000.0)
    chirp_seconds: tuple[float, float] = (0.05, 0.3)
    snr_db: tuple[float, float] = (0.0, 20.0)
    clip_seconds: float = 1.0
    sample_rate: int = TARGET_RATE
    positive_fraction: float = 0.5
    seed: int = 0

    def __post_init__(self):
        for name in ("babble_band", "chirp_count", "sweep_band", "chirp_seconds", "snr_db"):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name}: empty range ({lo}, {hi})")
        if self.chirp_count[0] < 1:
            raise ValueError("chirp_count must start at 1 or more")
        if not 0.0 < self.positive_fraction < 1.0:
            raise ValueError("positive_fraction must lie in (0, 1)")
        if self.noise_color not in ("white", "pink", "brown"):
            raise ValueError(f"unknown noise colour {self.noise_color!r}")
        if self.sweep_band[1] >= self.sample_rate / 2:
            raise ValueError("sweep band must stay below Nyquist")
        if self.chirp_seconds[1] > self.clip_seconds or self.clip_seconds <= 0:
            raise ValueError("chirps must fit inside the clip")

    @property
    def n_samples(self) -> int:
        return int(round(self.clip_seconds * self.sample_rate))

    def to_dict(self) -> dict:
        return asdict(self)


def domain_config(domain: str, **overrides) -> SynthConfig:
    """The two reference recipes; any field can be overridden."""
    recipes = {
        "A": dict(noise_color="pink", hum_hz=(50.0, 100.0, 150.0), hum_level=0.5),
        "B": dict(noise_color="brown", hum_hz=(), hum_level=0.0, babble_level=0.8, click_rate=40.0,
              click_level=15.0),
    }
    if domain not in recipes:
        raise ValueError(f"unknown domain {domain!r}; expected one of {sorted(recipes)}")
    return SynthConfig(domain=domain, **{**recipes[domain], **overrides})


def _stream(cfg: SynthConfig, index: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, zlib.crc32(cfg.domain.encode()), index, tag])


def _rms(x: np.ndarray) -> float:
    return float(np.sqrt(np.mean(np.square(x))))


def colored_noise(rng: np.random.Generator, n: int, color: str) -> np.ndarray:
    """Unit-RMS noise with a 1/f^k power spectrum (k = 0, 1, 2)."""
    exponent = {"white": 0.0, "pink": 0.5, "brown": 1.0}[color]
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.arange(spec.size, dtype=np.float64)
    f[0] = 1.0
    spec = spec / f**exponent
    spec[0] = 0.0
    x = np.fft.irfft(spec, n)
    return x / _rms(x)


def band_noise(rng: np.random.Generator, n: int, lo: float, hi: float, rate: int) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(f < lo) | (f > hi)] = 0.0
    x = np.fft.irfft(spec, n)
    return x / max(_rms(x), 1e-12)


def render_background(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    n, sr = cfg.n_samples, cfg.sample_rate
    t = np.arange(n) / sr
    x = colored_noise(rng, n, cfg.noise_color)
    if cfg.hum_hz and cfg.hum_level > 0:
        hum = sum(np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)) / (k + 1)
                  for k, f in enumerate(cfg.hum_hz))
        x = x + cfg.hum_level * hum / _rms(hum)
    if cfg.babble_level > 0:
        # syllable-rate (3-6 Hz) amplitude modulation of a speech-band noise
        rate = rng.uniform(3.0, 6.0)
        env = 0.5 * (1 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi))) ** 2
        babble = band_noise(rng, n, *cfg.babble_band, sr) * env
        x = x + cfg.babble_level * babble / max(_rms(babble), 1e-12)
    if cfg.click_rate > 0:
        n_clicks = rng.poisson(cfg.click_rate * cfg.clip_seconds)
        decay = np.exp(-np.arange(int(0.003 * sr)) / (0.0005 * sr))
        for pos in rng.integers(0, n, size=n_clicks):
            burst = decay * rng.standard_normal(decay.size)
            end = min(n, pos + decay.size)
            x[pos:end] += cfg.click_level * burst[:end - pos] / np.abs(burst).max()
    return BACKGROUND_RMS * x / _rms(x)


def chirp(rng: np.random.Generator, cfg: SynthConfig) -> np.ndarray:
    """One unit-RMS linear sweep inside the configured band, Hann-enveloped."""
    sr = cfg.sample_rate
    dur = rng.uniform(*cfg.chirp_seconds)
    m = max(int(round(dur * sr)), 2)
    f0, f1 = rng.uniform(*cfg.sweep_band, size=2)
    t = np.arange(m) / sr
    phase = 2 * np.pi * (f0 * t + 0.5 * (f1 - f0) / dur * t**2) + rng.uniform(0, 2 * np.pi)
    y = np.sin(phase) * np.hanning(m)
    return y / _rms(y)


def render_events(cfg: SynthConfig, rng: np.random.Generator, background: np.ndarray) -> np.ndarray:
    """Sum of chirps; each chirp's RMS over its own support sits ``snr`` dB above the background RMS."""
    out = np.zeros(cfg.n_samples)
    bg = _rms(background)
    for _ in range(int(rng.integers(cfg.chirp_count[0], cfg.chirp_count[1] + 1))):
        y = chirp(rng, cfg)
        snr = rng.uniform(*cfg.snr_db)
        start = int(rng.integers(0, cfg.n_samples - y.size + 1))
        out[start:start + y.size] += y * bg * 10 ** (snr / 20)
    return out


def render_clip(cfg: SynthConfig, index: int, positive: bool, with_events: bool = True) -> np.ndarray:
    """Deterministic audio for clip ``index``; ``with_events=False`` gives the same background alone."""
    background = render_background(cfg, _stream(cfg, index, _BACKGROUND))
    x = background
    if positive and with_events:
        x = background + render_events(cfg, _stream(cfg, index, _EVENTS), background)
    peak = np.abs(x).max()
    if peak > PEAK_LIMIT:
        x = x * (PEAK_LIMIT / peak)
    return x


def clip_labels(cfg: SynthConfig, n_clips: int) -> np.ndarray:
    """Exactly ``round(fraction * n)`` positives at seeded positions."""
    n_pos = int(round(cfg.positive_fraction * n_clips))
    labels = np.zeros(n_clips, dtype=np.int64)
    labels[_stream(cfg, 0, _LABELS).permutation(n_clips)[:n_pos]] = 1
    return labels


def item_id(cfg: SynthConfig, index: int) -> str:
    return f"{cfg.domain}{cfg.seed}_{index:05d}"


@dataclass
class SynthResult:
    manifest: Manifest
    manifest_path: Path
    config: SynthConfig
    extra: dict = field(default_factory=dict)


def synth_corpus(cfg: SynthConfig, n_clips: int, out_dir: str | Path, jobs: int = 1) -> SynthResult:
    """Write ``n_clips`` WAVs under ``out_dir/wav`` and a manifest ``out_dir/manifest.csv``."""
    if n_clips < 1:
        raise ValueError("n_clips must be >= 1")
    out_dir = Path(out_dir)
    if not out_dir.parent.exists():
        raise FileNotFoundError(f"parent of output directory does not exist: {out_dir.parent}")
    wav_dir = out_dir / "wav"
    wav_dir.mkdir(parents=True, exist_ok=True)
    labels = clip_labels(cfg, n_clips)

    def work(i: int) -> Entry:
        path = wav_dir / f"{item_id(cfg, i)}.wav"
        write_wav(path, render_clip(cfg, i, bool(labels[i])), cfg.sample_rate)
        return Entry(item_id(cfg, i), int(labels[i]), path)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            entries = list(pool.map(work, range(n_clips)))
    else:
        entries = [work(i) for i in range(n_clips)]
    manifest = Manifest(entries, f"synth_{cfg.domain}")
    path = out_dir / "manifest.csv"
    write_manifest(path, manifest)
    return SynthResult(manifest, path, cfg)


def with_seed(cfg: SynthConfig, seed: int) -> SynthConfig:
    return replace(cfg, seed=seed)
