"""Command-line entry point: synth, featurize, train, eval, dump-repr, run-matrix.

Every option may also come from an INI-style file given with ``--config``;
keys live in a section named after the command (``[train]``) or in
``[DEFAULT]``, spelled like the long flag without dashes (``batch_size``).
Flags on the command line win over file values.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from .data import FeatureError, IntegrityError, ManifestError, load_feature_set, load_manifest, split_dataset
from .dsp import AudioFormatError
from .evaluation import UndefinedMetricError, cross_domain_matrix, evaluate, format_table
from .model import ConfigError, ModelKind, load_model, pair_forward
from .synth import domain_config, synth_corpus
from .tensor_nn import CheckpointFormatError, Tensor, no_grad
from .training import NumericAbort, Strategy, TrainConfig, train

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC, EXIT_METRIC = 0, 1, 2, 3, 4, 5

STRATEGIES = {
    "baseline": (Strategy.BASELINE, ModelKind.BASELINE),
    "one-stage-fc": (Strategy.ONE_STAGE, ModelKind.FLAT),
    "one-stage-fw": (Strategy.ONE_STAGE, ModelKind.FRAME_WISE),
    "ts-fla": (Strategy.TWO_STAGE_FLATTEN, ModelKind.FRAME_WISE),
    "ts-gap": (Strategy.TWO_STAGE_GAP, ModelKind.FRAME_WISE),
}
REPEATABLE = {"test", "train_set", "itemid"}


def _die(code: int, msg: str) -> int:
    print(f"error: {msg}", file=sys.stderr)
    return code


def _named_path(text: str) -> tuple[str, Path]:
    """``name=path`` or a bare path (named after the file's parent directory)."""
    if "=" in text:
        name, path = text.split("=", 1)
        return name, Path(path)
    p = Path(text)
    return (p.parent.name or p.stem), p


def _cache_for(manifest_path: Path, cache: str | None) -> Path:
    return Path(cache) if cache else manifest_path.parent / "cache"


def _load(manifest_path: Path, audio_root, name: str | None = None):
    if not manifest_path.exists():
        raise FileNotFoundError(f"manifest not found: {manifest_path}")
    return load_manifest(manifest_path, audio_root, name)


# commands ------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = domain_config(args.domain, seed=args.seed, clip_seconds=args.seconds,
                        positive_fraction=args.positive_fraction)
    result = synth_corpus(cfg, args.clips, args.out, args.jobs)
    digest = hashlib.sha256(result.manifest_path.read_bytes()).hexdigest()[:16]
    (Path(args.out) / "synth_config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    n_pos = int(result.manifest.labels.sum())
    print(f"wrote {len(result.manifest)} clips ({n_pos} positive) to {args.out}; manifest sha256 {digest}")
    return EXIT_OK


def cmd_featurize(args) -> int:
    from .data import featurize_manifest

    path = Path(args.manifest)
    manifest = _load(path, args.audio_root)
    _, computed, cached, failures = featurize_manifest(manifest, _cache_for(path, args.cache), args.jobs)
    print(f"{computed} computed, {cached} cached")
    for itemid, reason in sorted(failures.items()):
        print(f"failed {itemid}: {reason}")
    return EXIT_PARTIAL if failures else EXIT_OK


def _train_config(args) -> TrainConfig:
    if args.strategy not in STRATEGIES:
        raise ConfigError(f"unknown strategy {args.strategy!r}; choose from {', '.join(STRATEGIES)}")
    strategy, kind = STRATEGIES[args.strategy]
    return TrainConfig(strategy=strategy, kind=kind, lam=args.lam, epochs_per_stage=args.epochs,
                       batch_size=args.batch_size, seed=args.seed)


def _train_val(manifest_path: Path, args):
    manifest = _load(manifest_path, args.audio_root)
    split = split_dataset(manifest, args.split_seed)
    cache = _cache_for(manifest_path, args.cache)
    data = load_feature_set(manifest, cache, args.jobs)
    return data.subset(split.train), data.subset(split.val), split


def cmd_train(args) -> int:
    cfg = _train_config(args)
    out = Path(args.out)
    train_fs, val_fs, split = _train_val(Path(args.manifest), args)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(split.to_json())
    result = train(train_fs, val_fs, cfg, out, log=sys.stdout)
    print(f"best val_auc {result.report.best_val_auc:.6f} at epoch {result.report.best_epoch}; "
          f"checkpoint {result.report.best_checkpoint}")
    return EXIT_OK


def cmd_eval(args) -> int:
    params = load_model(args.checkpoint)
    tests = {}
    for spec in args.test:
        name, path = _named_path(spec)
        manifest = _load(path, args.audio_root, name)
        if args.role != "all":
            manifest = manifest.subset(getattr(split_dataset(manifest, args.split_seed), args.role))
        tests[name] = manifest
    caches = {name: _cache_for(_named_path(spec)[1], args.cache) for name, spec in zip(tests, args.test)}
    report = evaluate(params, tests, caches, checkpoint=str(args.checkpoint), jobs=args.jobs)
    print(format_table(report, params.meta.get("train_set", ""), params.kind.value))
    if args.out:
        Path(args.out).write_text(report.to_json())
    if args.csv_dir:
        Path(args.csv_dir).mkdir(parents=True, exist_ok=True)
        report.write_csv(args.csv_dir)
    for name, missing in report.missing.items():
        for itemid, reason in missing.items():
            print(f"missing {name}/{itemid}: {reason}")
    return EXIT_PARTIAL if report.incomplete else EXIT_OK


def representation_image(rep: np.ndarray) -> np.ndarray:
    """``C x F' x T'`` map -> ``T' x (C*F')`` uint8 image, min-max scaled; constant maps give 128."""
    c, f, t = rep.shape
    img = np.asarray(rep, dtype=np.float64).reshape(c * f, t).T
    lo, hi = img.min(), img.max()
    if hi - lo <= 0 or not np.isfinite(hi - lo):
        return np.full(img.shape, 128, dtype=np.uint8)
    return np.round(255.0 * (img - lo) / (hi - lo)).astype(np.uint8)


def write_pgm(path: str | Path, img: np.ndarray) -> None:
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + np.ascontiguousarray(img, dtype=np.uint8).tobytes())


def read_pgm(path: str | Path) -> np.ndarray:
    blob = Path(path).read_bytes()
    magic, w, h, maxval, rest = blob.split(maxsplit=4)
    if magic != b"P5" or int(maxval) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 image")
    return np.frombuffer(rest[: int(w) * int(h)], dtype=np.uint8).reshape(int(h), int(w))


def normalized_cross_correlation(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    a, b = a - a.mean(), b - b.mean()
    den = np.linalg.norm(a) * np.linalg.norm(b)
    return float(a @ b / den) if den > 0 else 0.0


def cmd_dump_repr(args) -> int:
    params = load_model(args.checkpoint)
    if params.kind is ModelKind.BASELINE:
        raise ConfigError("the baseline has a single encoder; there is no representation pair to dump")
    path = Path(args.manifest)
    manifest = _load(path, args.audio_root)
    known = set(manifest.itemids)
    unknown = [i for i in args.itemid if i not in known]
    if unknown:
        raise ConfigError(f"unknown itemid(s): {', '.join(unknown)}")
    data = load_feature_set(manifest.subset(args.itemid), _cache_for(path, args.cache), args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with no_grad():
        pair = pair_forward(Tensor(data.X), params)
    for k, itemid in enumerate(data.itemids):
        for side, rep in (("A", pair.A.data[k]), ("B", pair.B.data[k])):
            write_pgm(out / f"{itemid}_{side}.pgm", representation_image(rep))
        print(f"{itemid}: {pair.A.shape[-1]} x {pair.A.shape[1] * pair.A.shape[2]} images")
    return EXIT_OK


def cmd_run_matrix(args) -> int:
    cfg = _train_config(args)
    trains = dict(_named_path(s) for s in args.train_set)
    tests = dict(_named_path(s) for s in args.test)
    manifests = {n: _load(p, args.audio_root, n) for n, p in {**trains, **tests}.items()}
    caches = {n: _cache_for(p, args.cache) for n, p in {**trains, **tests}.items()}
    cells = cross_domain_matrix({n: manifests[n] for n in trains}, {n: manifests[n] for n in tests}, cfg,
                                cache_dir=caches, out_dir=args.out, split_seed=args.split_seed, jobs=args.jobs)
    rows = [f"{'train':<16}{'test':<16}{'model':<14}{'AUC%':>8}"]
    table = []
    for (tr, te), rep in cells.items():
        auc = rep.auc[te]
        rows.append(f"{tr:<16}{te:<16}{args.strategy:<14}{auc:>8.2f}")
        table.append({"train": tr, "test": te, "strategy": args.strategy, "auc_percent": auc,
                      "fingerprint": rep.fingerprint})
    print("\n".join(rows))
    Path(args.out).mkdir(parents=True, exist_ok=True)
    (Path(args.out) / "matrix.json").write_text(json.dumps(table, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


# parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file with per-command sections")
    common.add_argument("--jobs", type=int, default=os.cpu_count() or 1, help="worker threads")
    common.add_argument("--audio-root", default=None, help="directory holding <itemid>.wav (default $AEDF_AUDIO_ROOT)")
    common.add_argument("--cache", default=None, help="feature cache directory (default <manifest dir>/cache)")

    train_opts = argparse.ArgumentParser(add_help=False)
    train_opts.add_argument("--strategy", required=True, choices=sorted(STRATEGIES))
    train_opts.add_argument("--lambda", dest="lam", type=float, default=0.1)
    train_opts.add_argument("--epochs", type=int, default=200, help="epochs per stage")
    train_opts.add_argument("--batch-size", type=int, default=16)
    train_opts.add_argument("--seed", type=int, default=0)
    train_opts.add_argument("--split-seed", type=int, default=0)
    train_opts.add_argument("--out", required=True)

    p = argparse.ArgumentParser(prog="aedf", description="Cross-domain acoustic event detection toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--domain", choices=["A", "B"], required=True)
    s.add_argument("--clips", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--seconds", type=float, default=1.0)
    s.add_argument("--positive-fraction", type=float, default=0.5)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("featurize", parents=[common], help="fill the feature cache for a manifest")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_featurize)

    s = sub.add_parser("train", parents=[common, train_opts], help="train one model")
    s.add_argument("--manifest", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", parents=[common], help="score a checkpoint on test sets")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--test", action="append", required=True, help="[name=]manifest.csv, repeatable")
    s.add_argument("--role", choices=["test", "val", "train", "all"], default="test",
                   help="which split role of each test manifest to score")
    s.add_argument("--split-seed", type=int, default=0)
    s.add_argument("--out", help="JSON report path")
    s.add_argument("--csv-dir", help="write itemid,score,label CSVs here")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("dump-repr", parents=[common], help="write the representation pair as PGM images")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--manifest", required=True)
    s.add_argument("--itemid", action="append", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_dump_repr)

    s = sub.add_parser("run-matrix", parents=[common, train_opts], help="train/test cross-domain matrix")
    s.add_argument("--train-set", action="append", required=True, help="[name=]manifest.csv, repeatable")
    s.add_argument("--test", action="append", required=True, help="[name=]manifest.csv, repeatable")
    s.set_defaults(func=cmd_run_matrix)
    return p


def _file_defaults(path: str, command: str) -> dict:
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(f"config file not found: {path}")
    section = cp[command] if cp.has_section(command) else cp.defaults()
    out = {}
    for key, value in section.items():
        key = key.replace("-", "_")
        if key == "lambda":
            key = "lam"
        out[key] = [v.strip() for v in value.replace(",", "\n").split("\n") if v.strip()] if key in REPEATABLE else value
    return out


def parse_args(argv: list[str] | None = None) -> argparse.Namespace:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command:
        defaults = _file_defaults(known.config, known.command)
        sub = parser._subparsers._group_actions[0].choices.get(known.command)
        if sub is not None:
            valid = {a.dest for a in sub._actions}
            extra = set(defaults) - valid
            if extra:
                parser.error(f"unknown key(s) in [{known.command}] of {known.config}: {', '.join(sorted(extra))}")
            sub.set_defaults(**defaults)
            for action in sub._actions:  # file values satisfy required flags
                if action.dest in defaults:
                    action.required = False
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except FileNotFoundError as exc:
        return _die(EXIT_IO, str(exc))
    except SystemExit as exc:  # argparse usage errors
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigError, ManifestError, IntegrityError, KeyError) as exc:
        return _die(EXIT_CONFIG, str(exc))
    except NumericAbort as exc:
        return _die(EXIT_NUMERIC, str(exc))
    except UndefinedMetricError as exc:
        return _die(EXIT_METRIC, str(exc))
    except FeatureError as exc:
        for itemid, reason in sorted(exc.failures.items()):
            print(f"failed {itemid}: {reason}", file=sys.stderr)
        return _die(EXIT_IO, str(exc))
    except (OSError, AudioFormatError, CheckpointFormatError) as exc:
        return _die(EXIT_IO, str(exc))
    except ValueError as exc:
        return _die(EXIT_CONFIG, str(exc))


if __name__ == "__main__":
    sys.exit(main())
