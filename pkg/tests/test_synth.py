import hashlib

import numpy as np
import pytest

from aedf.dsp import AudioClip, default_filterbank, load_wav, mel_power
from aedf.evaluation import roc_auc
from aedf.synth import (
    BACKGROUND_RMS,
    SynthConfig,
    _stream,
    clip_labels,
    domain_config,
    render_background,
    render_clip,
    render_events,
    synth_corpus,
)


def _mel(x):
    return mel_power(AudioClip(np.asarray(x, dtype=np.float32), 22050, ""))


def test_config_validation():
    with pytest.raises(ValueError):
        SynthConfig(snr_db=(10.0, 0.0))
    with pytest.raises(ValueError):
        SynthConfig(positive_fraction=1.0)
    with pytest.raises(ValueError):
        SynthConfig(chirp_count=(0, 3))
    with pytest.raises(ValueError):
        SynthConfig(sweep_band=(2000.0, 12000.0))
    with pytest.raises(ValueError):
        domain_config("C")


def test_exact_positive_count():
    labels = clip_labels(domain_config("A", positive_fraction=0.5, seed=7), 2000)
    assert labels.sum() == 1000 and labels.size == 2000


def test_rendering_is_reproducible_and_seeded():
    cfg = domain_config("B", seed=3)
    a, b = render_clip(cfg, 5, True), render_clip(cfg, 5, True)
    assert a.tobytes() == b.tobytes()
    assert render_clip(domain_config("B", seed=4), 5, True).tobytes() != a.tobytes()
    assert render_clip(cfg, 6, True).tobytes() != a.tobytes()


def test_background_level_and_snr_definition():
    cfg = domain_config("A", seed=1, chirp_count=(1, 1), snr_db=(10.0, 10.0))
    bg = render_background(cfg, _stream(cfg, 0, 0))
    assert np.sqrt(np.mean(bg**2)) == pytest.approx(BACKGROUND_RMS)
    ev = render_events(cfg, _stream(cfg, 0, 1), bg)
    support = ev[np.abs(ev) > 0]
    # event RMS over its own support, relative to the background RMS
    assert 20 * np.log10(np.sqrt(np.mean(support**2)) / BACKGROUND_RMS) == pytest.approx(10.0, abs=0.3)


def test_chirps_stay_in_band():
    cfg = domain_config("A", seed=2)
    bg = render_background(cfg, _stream(cfg, 0, 0))
    ev = render_events(cfg, _stream(cfg, 0, 1), bg)
    spec = np.abs(np.fft.rfft(ev)) ** 2
    f = np.fft.rfftfreq(ev.size, 1 / 22050)
    in_band = spec[(f >= 1800) & (f <= 8200)].sum()
    assert in_band / spec.sum() > 0.98


@pytest.mark.parametrize("domain", ["A", "B"])
def test_positive_clip_has_more_chirp_band_energy(domain):
    cfg = domain_config(domain, seed=11)
    fb = default_filterbank()
    band = (fb.center_hz >= 2000) & (fb.center_hz <= 8000)
    for i in range(20):
        with_events = _mel(render_clip(cfg, i, True))[band].sum()
        alone = _mel(render_clip(cfg, i, True, with_events=False))[band].sum()
        assert with_events > alone


def _profiles(domain, seed, n=60):
    cfg = domain_config(domain, seed=seed)
    return np.array([np.log(_mel(render_clip(cfg, i, bool(y))) + 1e-10).mean(axis=1)
                     for i, y in enumerate(clip_labels(cfg, n))])


def test_domains_separable_by_energy_profile():
    """Nearest centroid on the mean log-mel profile, centroids fitted on another seed."""
    ca, cb = _profiles("A", 31).mean(axis=0), _profiles("B", 31).mean(axis=0)
    a, b = _profiles("A", 21), _profiles("B", 21)
    score = lambda p: ((p - ca) ** 2).sum(axis=1) - ((p - cb) ** 2).sum(axis=1)
    labels = np.r_[np.zeros(len(a)), np.ones(len(b))]
    assert roc_auc(np.r_[score(a), score(b)], labels) > 0.9


def test_corpus_on_disk(tmp_path):
    cfg = domain_config("A", seed=5, positive_fraction=0.4)
    res = synth_corpus(cfg, 10, tmp_path / "a", jobs=1)
    again = synth_corpus(cfg, 10, tmp_path / "b", jobs=3)
    digest = lambda p: hashlib.sha256(p.read_bytes()).hexdigest()
    assert digest(res.manifest_path) == digest(again.manifest_path)
    assert res.manifest.labels.sum() == 4
    for e1, e2 in zip(res.manifest.entries, again.manifest.entries):
        assert digest(e1.wav_path) == digest(e2.wav_path)
    clip = load_wav(res.manifest.entries[0].wav_path)
    assert clip.sample_rate == 22050 and clip.samples.size == 22050


def test_missing_parent_directory(tmp_path):
    with pytest.raises(FileNotFoundError):
        synth_corpus(domain_config("A"), 2, tmp_path / "nope" / "out")
