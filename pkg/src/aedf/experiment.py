"""Desk-scale cross-domain experiment on the synthetic corpus.

Domain A supplies the training clips (with a stratified 20 % held out for
model selection); separate domain A and domain B corpora are the in-domain
and cross-domain test sets.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import TextIO

import numpy as np

from .data import FeatureSet, load_feature_set, load_manifest, split_dataset
from .evaluation import roc_auc
from .model import predict
from .synth import domain_config, synth_corpus
from .training import Strategy, TrainConfig, TrainResult, train

DESK_EPOCHS = 40
DESK_LAMBDA = 0.1
DESK_SEEDS = (0, 1, 2)
HOLDOUT = (0.8, 0.2, 0.0)


@dataclass
class DeskCorpus:
    train: FeatureSet
    val: FeatureSet
    tests: dict[str, FeatureSet] = field(default_factory=dict)


def _corpus(root: Path, name: str, domain: str, seed: int, n: int, jobs: int) -> FeatureSet:
    out = root / name
    if (out / "manifest.csv").exists():
        manifest = load_manifest(out / "manifest.csv", audio_root=out / "wav", dataset_name=name)
    else:
        manifest = synth_corpus(domain_config(domain, seed=seed), n, out, jobs).manifest
    return load_feature_set(manifest, out / "cache", jobs)


def build_desk_corpus(root: str | Path, n_train: int = 2000, n_test: int = 600, seed: int = 7,
                      jobs: int = 1) -> DeskCorpus:
    """Generate (or reuse) the three corpora under ``root`` and load their features."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    pool = _corpus(root, "train_A", "A", seed, n_train, jobs)
    split = split_dataset(_manifest_of(pool), seed, HOLDOUT)
    return DeskCorpus(
        pool.subset(split.train),
        pool.subset(split.val),
        {"test_A": _corpus(root, "test_A", "A", seed + 1, n_test, jobs),
         "test_B": _corpus(root, "test_B", "B", seed + 2, n_test, jobs)},
    )


def _manifest_of(fs: FeatureSet):
    from .data import Entry, Manifest
    return Manifest([Entry(i, int(y), None) for i, y in zip(fs.itemids, fs.y)], fs.meta.get("dataset", ""))


@dataclass
class DeskRun:
    strategy: str
    seed: int
    auc: dict[str, float]
    result: TrainResult

    def to_dict(self) -> dict:
        return {"strategy": self.strategy, "seed": self.seed, "auc": self.auc,
                "report": self.result.report.to_dict(timing=False)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def run_desk_model(corpus: DeskCorpus, strategy: Strategy | str, seed: int, epochs: int = DESK_EPOCHS,
                   lam: float = DESK_LAMBDA, out_dir: str | Path | None = None,
                   log: TextIO | None = None) -> DeskRun:
    cfg = TrainConfig(strategy=strategy, lam=lam, epochs_per_stage=epochs, seed=seed)
    result = train(corpus.train, corpus.val, cfg, out_dir, log)
    auc = {name: roc_auc(predict(fs.X, result.best), fs.y) for name, fs in corpus.tests.items()}
    return DeskRun(cfg.strategy.value, seed, auc, result)


def mean_auc(runs: list[DeskRun], test: str) -> float:
    return float(np.mean([r.auc[test] for r in runs]))
