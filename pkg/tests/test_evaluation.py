import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aedf.data import Entry, FeatureSet, IntegrityError, Manifest
from aedf.dsp import write_wav
from aedf.evaluation import (
    EvalReport,
    UndefinedMetricError,
    auc_percent,
    cross_domain_matrix,
    evaluate,
    fingerprint,
    format_table,
    roc_auc,
)
from aedf.model import BlockConfig, DiscriminatorConfig, ModelKind, init_model

TOY = DiscriminatorConfig(blocks=(BlockConfig(2, 5, 2), BlockConfig(2, 2, 2)))


def brute_auc(scores, labels):
    """Pair counting: a positive above a negative scores 1, a tie 1/2."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


def _random_instance(rng):
    n = int(rng.integers(2, 501))
    labels = rng.integers(0, 2, size=n)
    labels[:2] = [0, 1]
    # a small value alphabet forces plenty of ties
    scores = rng.integers(0, rng.integers(2, 40), size=n) / 7.0
    return scores, labels


def test_auc_examples():
    assert roc_auc([0.1, 0.2, 0.8, 0.9], [0, 0, 1, 1]) == 1.0
    assert roc_auc([0.5] * 6, [0, 1, 0, 1, 1, 0]) == 0.5
    assert roc_auc([0.1, 0.4, 0.35, 0.8], [0, 0, 1, 1]) == 0.75


def test_auc_single_class_undefined():
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(UndefinedMetricError):
        roc_auc([0.1, 0.2], [0, 0])


def test_auc_input_validation():
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [0, 1, 1])
    with pytest.raises(ValueError):
        roc_auc([0.1, 0.2], [0, 2])


def test_auc_matches_pair_counting_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(200):
        scores, labels = _random_instance(rng)
        assert abs(roc_auc(scores, labels) - brute_auc(scores, labels)) <= 1e-12


def test_auc_antisymmetry_and_monotone_invariance():
    rng = np.random.default_rng(7)
    for _ in range(200):
        scores, labels = _random_instance(rng)
        a = roc_auc(scores, labels)
        assert a + roc_auc(-scores, labels) == 1.0
        assert a + roc_auc(1.0 - scores, labels) == 1.0
        assert roc_auc(np.exp(scores), labels) == a
        assert roc_auc(scores**3 + 2 * scores, labels) == a


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 5), st.integers(0, 1)), min_size=2, max_size=60))
def test_auc_property(pairs):
    scores = [s for s, _ in pairs]
    labels = [y for _, y in pairs]
    if len(set(labels)) < 2:
        with pytest.raises(UndefinedMetricError):
            roc_auc(scores, labels)
        return
    a = roc_auc(scores, labels)
    assert 0.0 <= a <= 1.0
    assert a == pytest.approx(brute_auc(scores, labels), abs=1e-12)


def test_auc_percent_two_decimals():
    assert auc_percent(0.625749) == 62.57
    assert auc_percent(1.0) == 100.0


# evaluate ------------------------------------------------------------------


def _fs(n, T=11, seed=0):
    rng = np.random.default_rng(seed)
    return FeatureSet([f"c{i}" for i in range(n)], rng.normal(size=(n, 1, 80, T)).astype(np.float32),
                      np.arange(n) % 2)


def test_evaluate_deterministic_and_read_only():
    params = init_model(ModelKind.FRAME_WISE, TOY, 11, seed=1)
    before = params.store.state_dict()
    data = {"x": _fs(20), "y": _fs(10, seed=1)}
    r1, r2 = evaluate(params, data), evaluate(params, data)
    assert r1.to_json() == r2.to_json()
    assert set(r1.auc) == {"x", "y"}
    assert all(0.0 <= v <= 100.0 for v in r1.auc.values())
    for name, arr in params.store.state_dict().items():
        assert arr.tobytes() == before[name].tobytes()
    assert not r1.incomplete


def test_evaluate_single_class_test_set():
    params = init_model(ModelKind.BASELINE, TOY, 11, seed=1)
    fs = _fs(6)
    fs.y[:] = 1
    with pytest.raises(UndefinedMetricError):
        evaluate(params, {"only_pos": fs})


def _wav_manifest(root, n, name, seconds=0.2, seed=0):
    rng = np.random.default_rng(seed)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i in range(n):
        path = root / f"{name}_{i:03d}.wav"
        write_wav(path, 0.05 * rng.standard_normal(int(22050 * seconds)), 22050)
        entries.append(Entry(f"{name}_{i:03d}", i % 2, path))
    return Manifest(entries, name)


def test_evaluate_missing_audio_itemized(tmp_path):
    m = _wav_manifest(tmp_path / "wav", 8, "t")
    m.entries[3].wav_path.unlink()
    params = init_model(ModelKind.FRAME_WISE, TOY, 11, seed=1)
    report = evaluate(params, {"t": m}, cache_dir=tmp_path / "cache")
    assert report.incomplete
    assert list(report.missing["t"]) == ["t_003"]
    assert report.n_scored["t"] == 7


def test_report_json_and_csv(tmp_path):
    params = init_model(ModelKind.FRAME_WISE, TOY, 11, seed=1)
    report = evaluate(params, {"x": _fs(6)})
    assert '"auc_percent"' in report.to_json()
    (path,) = report.write_csv(tmp_path)
    lines = path.read_text().splitlines()
    assert lines[0] == "itemid,score,label" and len(lines) == 7
    table = format_table(report, "train", "frame_wise")
    assert f"{report.auc['x']:.2f}" in table.splitlines()[1]


def test_fingerprint_tracks_weights():
    a = init_model(ModelKind.FRAME_WISE, TOY, 11, seed=1)
    b = init_model(ModelKind.FRAME_WISE, TOY, 11, seed=1)
    assert fingerprint(a) == fingerprint(b)
    b.store["classifier.attn.bias"].data[:] = 1.0
    assert fingerprint(a) != fingerprint(b)


# cross-domain matrix ------------------------------------------------------


def _stub_trainer(calls):
    def trainer(train_fs, val_fs, cfg, out_dir):
        calls.append((list(train_fs.itemids), list(val_fs.itemids)))
        return init_model(ModelKind.FRAME_WISE, TOY, train_fs.n_frames, seed=0)
    return trainer


def test_matrix_cardinality_and_disjointness(tmp_path):
    trains = {n: _wav_manifest(tmp_path / n, 10, n, seed=k) for k, n in enumerate(["p", "q"])}
    tests = {**trains, "r": _wav_manifest(tmp_path / "r", 10, "r", seed=5)}
    calls = []
    cells = cross_domain_matrix(trains, tests, cfg=None, cache_dir=tmp_path / "cache", trainer=_stub_trainer(calls))
    assert len(cells) == 6
    for (tr, te), report in cells.items():
        assert isinstance(report, EvalReport) and list(report.auc) == [te]
    # the in-domain cell scores only held-out clips
    train_ids, val_ids = calls[0]
    scored = {row[0] for row in cells[("p", "p")].scores["p"]}
    assert scored.isdisjoint(train_ids) and scored.isdisjoint(val_ids)
    assert len(scored) == 2


def test_matrix_rejects_shared_itemids(tmp_path):
    p = _wav_manifest(tmp_path / "p", 10, "p")
    clone = Manifest(list(p.entries), "clone")
    with pytest.raises(IntegrityError):
        cross_domain_matrix({"p": p}, {"clone": clone}, cfg=None, cache_dir=tmp_path / "cache",
                            trainer=_stub_trainer([]))
