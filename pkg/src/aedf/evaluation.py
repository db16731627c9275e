"""ROC-AUC, checkpoint scoring and the cross-domain train/test matrix."""

from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .data import FeatureSet, IntegrityError, Manifest, featurize_manifest, split_dataset, stack_features
from .model import ModelParams, predict


class UndefinedMetricError(ValueError):
    """AUC needs at least one positive and one negative."""


def _auc_counts(scores, labels) -> tuple[int, int]:
    """Twice the Mann-Whitney U (an integer) and the pair count ``n_pos * n_neg``."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"{scores.size} scores but {labels.size} labels")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("labels must be 0 or 1")
    if np.isnan(scores).any():
        raise ValueError("scores contain NaN")
    labels = labels.astype(np.int64)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(f"AUC undefined with {n_pos} positive and {n_neg} negative clips")
    _, group = np.unique(scores, return_inverse=True)
    pos_per = np.bincount(group, weights=labels).astype(np.int64)
    neg_per = np.bincount(group, weights=1 - labels).astype(np.int64)
    neg_below = np.cumsum(neg_per) - neg_per
    # a positive beats every negative below it and splits ties with equal ones
    twice_u = int(np.sum(pos_per * (2 * neg_below + neg_per)))
    return twice_u, n_pos * n_neg


def roc_auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Area under the ROC curve as the Mann-Whitney statistic, ties counted half."""
    twice_u, pairs = _auc_counts(scores, labels)
    return twice_u / (2 * pairs)


def auc_percent(auc: float) -> float:
    return round(100.0 * auc, 2)


@dataclass
class EvalReport:
    checkpoint: str
    fingerprint: str
    auc: dict[str, float | None] = field(default_factory=dict)  # percent, 2 decimals
    n_scored: dict[str, int] = field(default_factory=dict)
    missing: dict[str, dict[str, str]] = field(default_factory=dict)
    scores: dict[str, list[tuple[str, float, int]]] = field(default_factory=dict)

    @property
    def incomplete(self) -> bool:
        return any(self.missing.values())

    def to_dict(self, with_scores: bool = False) -> dict:
        d = {"checkpoint": self.checkpoint, "fingerprint": self.fingerprint, "auc_percent": self.auc,
             "n_scored": self.n_scored, "missing": self.missing, "incomplete": self.incomplete}
        if with_scores:
            d["scores"] = {k: [list(r) for r in v] for k, v in self.scores.items()}
        return d

    def to_json(self, with_scores: bool = False) -> str:
        return json.dumps(self.to_dict(with_scores), indent=2, sort_keys=True) + "\n"

    def write_csv(self, out_dir: str | Path) -> list[Path]:
        """One ``<test set>.scores.csv`` with ``itemid,score,label`` rows per test set."""
        paths = []
        for name, rows in self.scores.items():
            path = Path(out_dir) / f"{name}.scores.csv"
            with path.open("w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["itemid", "score", "label"])
                for itemid, score, label in rows:
                    w.writerow([itemid, repr(float(score)), label])
            paths.append(path)
        return paths


def fingerprint(params: ModelParams) -> str:
    """Hash of configuration and weights; two identical checkpoints share it."""
    h = hashlib.sha256()
    h.update(json.dumps({"kind": params.kind.value, "disc": params.disc.to_dict(), "n_frames": params.n_frames},
                        sort_keys=True).encode())
    for name, t in params.store.items():
        h.update(name.encode())
        h.update(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    return h.hexdigest()[:16]


def score_feature_set(params: ModelParams, data: FeatureSet) -> np.ndarray:
    return predict(data.X, params)


def _cache_of(cache_dir, name: str):
    """``cache_dir`` may be one directory for every dataset or a mapping from dataset name."""
    if isinstance(cache_dir, Mapping):
        return cache_dir.get(name)
    return cache_dir


def evaluate(params: ModelParams, test_sets: Mapping[str, Manifest | FeatureSet],
             cache_dir=None, checkpoint: str = "", jobs: int = 1) -> EvalReport:
    """Score every clip of every test set and compute its AUC.

    Clips whose audio or features cannot be loaded are listed under
    ``missing`` and skipped; the report is then flagged incomplete. A test set
    left with a single class raises :class:`UndefinedMetricError`.
    """
    report = EvalReport(checkpoint, fingerprint(params))
    for name, src in test_sets.items():
        if isinstance(src, Manifest):
            feats, _, _, failures = featurize_manifest(src, _cache_of(cache_dir, name), jobs)
            kept = src.subset([i for i in src.itemids if i in feats])
            data = stack_features(kept, feats) if len(kept) else None
        else:
            data, failures = src, {}
        report.missing[name] = dict(sorted(failures.items()))
        if data is None:
            raise UndefinedMetricError(f"test set {name!r}: no clip could be scored")
        scores = score_feature_set(params, data)
        report.auc[name] = auc_percent(roc_auc(scores, data.y))
        report.n_scored[name] = len(data)
        report.scores[name] = [(i, float(s), int(y)) for i, s, y in zip(data.itemids, scores, data.y)]
    return report


def format_table(report: EvalReport, train_name: str = "", model: str = "") -> str:
    """Rows ``train  test  model  AUC%`` as in the result tables."""
    lines = [f"{'train':<16}{'test':<16}{'model':<14}{'AUC%':>8}"]
    for name, auc in report.auc.items():
        lines.append(f"{train_name:<16}{name:<16}{model:<14}{auc:>8.2f}")
    return "\n".join(lines)


# cross-domain matrix -------------------------------------------------------


def check_no_overlap(train: Sequence[str], test: Sequence[str], what: str) -> None:
    shared = set(train) & set(test)
    if shared:
        raise IntegrityError(f"{what}: {len(shared)} itemid(s) shared with training data, e.g. {sorted(shared)[0]!r}")


def cross_domain_matrix(train_sets: Mapping[str, Manifest], test_sets: Mapping[str, Manifest], cfg,
                        cache_dir=None, out_dir: str | Path | None = None,
                        split_seed: int = 0, jobs: int = 1, trainer=None) -> dict[tuple[str, str], EvalReport]:
    """Fit on each train set's 60 %, select on its 20 % validation part, score every test set's 20 % test part.

    ``cache_dir`` is one feature cache directory or a mapping from dataset name.

    ``trainer(train_fs, val_fs, cfg, out_dir)`` returns the selected
    :class:`ModelParams`; it defaults to :func:`aedf.training.train`.
    """
    if trainer is None:
        from .training import fit_for_matrix as trainer
    splits = {name: split_dataset(m, split_seed) for name, m in {**train_sets, **test_sets}.items()}
    for s in splits.values():
        s.check_disjoint()
    cells: dict[tuple[str, str], EvalReport] = {}
    for tr_name, tr_manifest in train_sets.items():
        tr_split = splits[tr_name]
        seen = tr_split.train + tr_split.val
        tests = {}
        for te_name, te_manifest in test_sets.items():
            te_ids = splits[te_name].test
            check_no_overlap(seen, te_ids, f"test set {te_name}")
            if te_name != tr_name:  # another dataset must not reuse any training-dataset clip
                check_no_overlap(tr_manifest.itemids, te_manifest.itemids, f"test set {te_name}")
            tests[te_name] = te_manifest.subset(te_ids)
        feats, _, _, failures = featurize_manifest(tr_manifest, _cache_of(cache_dir, tr_name), jobs)
        if failures:
            from .data import FeatureError
            raise FeatureError(failures)
        train_fs = stack_features(tr_manifest.subset(tr_split.train), feats)
        val_fs = stack_features(tr_manifest.subset(tr_split.val), feats)
        run_dir = None if out_dir is None else Path(out_dir) / tr_name
        params = trainer(train_fs, val_fs, cfg, run_dir)
        report = evaluate(params, tests, cache_dir, checkpoint=str(run_dir or ""), jobs=jobs)
        for te_name in test_sets:
            cell = EvalReport(report.checkpoint, report.fingerprint,
                              {te_name: report.auc[te_name]}, {te_name: report.n_scored[te_name]},
                              {te_name: report.missing[te_name]}, {te_name: report.scores[te_name]})
            cells[(tr_name, te_name)] = cell
    return cells
