"""Manifests, deterministic splits, batching and the per-clip feature cache."""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .dsp import AudioFormatError, featurize_file
from .tensor_nn.checkpoint import CheckpointFormatError, load_tensors, save_tensors

FEATURE_KEY = "logmel"


class ManifestError(ValueError):
    pass


class IntegrityError(ValueError):
    pass


@dataclass(frozen=True)
class Entry:
    itemid: str
    hasbird: int
    wav_path: Path


@dataclass
class Manifest:
    entries: list[Entry]
    dataset_name: str = ""

    def __post_init__(self):
        seen = set()
        for e in self.entries:
            if e.itemid in seen:
                raise ManifestError(f"duplicate itemid {e.itemid!r}")
            if e.hasbird not in (0, 1):
                raise ManifestError(f"non-binary label {e.hasbird!r} for {e.itemid!r}")
            seen.add(e.itemid)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def itemids(self) -> list[str]:
        return [e.itemid for e in self.entries]

    @property
    def labels(self) -> np.ndarray:
        return np.array([e.hasbird for e in self.entries], dtype=np.int64)

    def by_id(self) -> dict[str, Entry]:
        return {e.itemid: e for e in self.entries}

    def subset(self, itemids: Sequence[str]) -> "Manifest":
        index = self.by_id()
        return Manifest([index[i] for i in itemids], self.dataset_name)


def default_audio_root(manifest_path: Path) -> Path:
    env = os.environ.get("AEDF_AUDIO_ROOT")
    return Path(env) if env else manifest_path.parent / "wav"


def load_manifest(path: str | Path, audio_root: str | Path | None = None,
                  dataset_name: str | None = None) -> Manifest:
    """Read a CSV with at least ``itemid`` and ``hasbird`` columns.

    Extra columns (the DCASE metadata carries ``datasetid``) are ignored.
    Audio resolves to ``<audio_root>/<itemid>.wav``.
    """
    path = Path(path)
    root = Path(audio_root) if audio_root is not None else default_audio_root(path)
    entries = []
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or "itemid" not in header or "hasbird" not in header:
            raise ManifestError(f"{path}:1: header must contain itemid,hasbird")
        col_id, col_label = header.index("itemid"), header.index("hasbird")
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            try:
                itemid, label = row[col_id].strip(), row[col_label].strip()
            except IndexError:
                raise ManifestError(f"{path}:{lineno}: too few columns") from None
            if label not in ("0", "1"):
                raise ManifestError(f"{path}:{lineno}: non-binary label {label!r}")
            if itemid in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate itemid {itemid!r}")
            seen.add(itemid)
            entries.append(Entry(itemid, int(label), root / f"{itemid}.wav"))
    return Manifest(entries, dataset_name or path.stem)


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["itemid", "hasbird"])
        for e in manifest.entries:
            w.writerow([e.itemid, e.hasbird])


# splits --------------------------------------------------------------------

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass
class DatasetSplit:
    train: list[str]
    val: list[str]
    test: list[str]
    seed: int

    def roles(self) -> dict[str, list[str]]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def check_disjoint(self) -> None:
        a, b, c = set(self.train), set(self.val), set(self.test)
        if a & b or a & c or b & c:
            raise IntegrityError("an itemid appears in more than one split role")

    def to_json(self) -> str:
        return json.dumps({"seed": self.seed, "train": self.train, "val": self.val, "test": self.test},
                          indent=1) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "DatasetSplit":
        d = json.loads(text)
        return cls(d["train"], d["val"], d["test"], d["seed"])


def _partition_sizes(n: int, fractions=SPLIT_FRACTIONS) -> tuple[int, int, int]:
    n_train = int(round(n * fractions[0]))
    n_val = min(int(round(n * fractions[1])), n - n_train)
    return n_train, n_val, n - n_train - n_val


def split_dataset(manifest: Manifest, seed: int, fractions=SPLIT_FRACTIONS) -> DatasetSplit:
    """Stratified train/val/test split (60/20/20 by default), deterministic in ``seed``.

    Role sizes are fixed from the whole manifest; positives are allotted to
    each role in proportion, so every role's positive rate tracks the manifest's.
    """
    if len(fractions) != 3 or min(fractions) < 0 or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    if len(manifest) < 5:
        raise ValueError(f"need at least 5 clips to split, got {len(manifest)}")
    rng = np.random.default_rng(seed)
    ids = np.array(manifest.itemids, dtype=object)
    labels = manifest.labels
    sizes = _partition_sizes(len(ids), fractions)
    pos = ids[labels == 1][rng.permutation(int((labels == 1).sum()))]
    neg = ids[labels == 0][rng.permutation(int((labels == 0).sum()))]
    pos_sizes = [int(round(s * len(pos) / len(ids))) for s in sizes[:2]]
    pos_sizes.append(len(pos) - sum(pos_sizes))
    out, p0, n0 = [], 0, 0
    for size, n_pos in zip(sizes, pos_sizes):
        n_pos = max(0, min(n_pos, size, len(pos) - p0))
        n_neg = size - n_pos
        part = list(pos[p0:p0 + n_pos]) + list(neg[n0:n0 + n_neg])
        p0, n0 = p0 + n_pos, n0 + n_neg
        out.append([str(i) for i in np.array(part, dtype=object)[rng.permutation(len(part))]])
    split = DatasetSplit(out[0], out[1], out[2], seed)
    split.check_disjoint()
    return split


# feature cache --------------------------------------------------------------


class FeatureError(RuntimeError):
    """One or more clips could not be featurised; ``failures`` maps itemid to reason."""

    def __init__(self, failures: dict[str, str]):
        super().__init__(f"{len(failures)} clip(s) failed: " + ", ".join(sorted(failures)[:5]))
        self.failures = failures


def cache_path(cache_dir: str | Path, itemid: str) -> Path:
    return Path(cache_dir) / f"{itemid}.feat"


def compute_features(entry: Entry) -> np.ndarray:
    return featurize_file(entry.wav_path).values


def load_or_compute(entry: Entry, cache_dir: str | Path | None) -> tuple[np.ndarray, bool]:
    """Features for one clip and whether they came from the cache."""
    if cache_dir is not None:
        path = cache_path(cache_dir, entry.itemid)
        if path.exists() and (not entry.wav_path.exists()
                              or path.stat().st_mtime >= entry.wav_path.stat().st_mtime):
            try:
                return load_tensors(path)[FEATURE_KEY], True
            except (CheckpointFormatError, KeyError):
                pass  # stale or corrupt cache entry: recompute
    feats = compute_features(entry)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_tensors(cache_path(cache_dir, entry.itemid), {FEATURE_KEY: feats})
    return feats, False


def featurize_manifest(manifest: Manifest, cache_dir: str | Path | None, jobs: int = 1):
    """Populate the cache; returns ``(features by itemid, n_computed, n_cached, failures)``."""
    from concurrent.futures import ThreadPoolExecutor

    def work(entry):
        try:
            feats, cached = load_or_compute(entry, cache_dir)
            return entry.itemid, feats, cached, None
        except (OSError, AudioFormatError, ValueError) as exc:
            return entry.itemid, None, False, str(exc)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            results = list(pool.map(work, manifest.entries))
    else:
        results = [work(e) for e in manifest.entries]
    feats, failures = {}, {}
    computed = cached = 0
    for itemid, x, was_cached, err in results:
        if err is not None:
            failures[itemid] = err
            continue
        feats[itemid] = x
        cached += was_cached
        computed += not was_cached
    return feats, computed, cached, failures


@dataclass
class FeatureSet:
    """Stacked features for a list of clips sharing one frame count."""

    itemids: list[str]
    X: np.ndarray  # N x 1 x F x T
    y: np.ndarray  # N
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.itemids)

    def subset(self, itemids: Sequence[str]) -> "FeatureSet":
        pos = {i: k for k, i in enumerate(self.itemids)}
        idx = np.array([pos[i] for i in itemids], dtype=np.intp)
        return FeatureSet(list(itemids), self.X[idx], self.y[idx], dict(self.meta))

    @property
    def n_frames(self) -> int:
        return self.X.shape[-1]


def stack_features(manifest: Manifest, feats: dict[str, np.ndarray]) -> FeatureSet:
    shapes = {feats[i].shape for i in manifest.itemids}
    if len(shapes) != 1:
        raise ValueError(f"clips in one dataset must share a frame count, got shapes {sorted(shapes)}")
    X = np.stack([feats[i] for i in manifest.itemids]).astype(np.float32)
    return FeatureSet(manifest.itemids, X, manifest.labels, {"dataset": manifest.dataset_name})


def load_feature_set(manifest: Manifest, cache_dir: str | Path | None, jobs: int = 1) -> FeatureSet:
    feats, _, _, failures = featurize_manifest(manifest, cache_dir, jobs)
    if failures:
        raise FeatureError(failures)
    return stack_features(manifest, feats)


# batching --------------------------------------------------------------------


def epoch_order(n: int, epoch: int, seed: int) -> np.ndarray:
    """Shuffled item order, a pure function of ``(seed, epoch)``."""
    return np.random.default_rng([int(seed), int(epoch)]).permutation(n)


def batch_iter(data: FeatureSet, batch_size: int, epoch: int, seed: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(X, y)`` batches in a reproducible shuffled order; the final short batch is kept."""
    if batch_size < 1:
        raise ValueError("batch size must be >= 1")
    order = epoch_order(len(data), epoch, seed)
    for start in range(0, len(order), batch_size):
        idx = order[start:start + batch_size]
        yield data.X[idx], data.y[idx]
