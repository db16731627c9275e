"""One-stage and two-stage training loops with best-validation checkpointing."""

from __future__ import annotations

import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import TextIO

import numpy as np

from .data import FeatureSet, batch_iter
from .evaluation import roc_auc
from .model import (
    REFERENCE_BLOCKS,
    ConfigError,
    DiscriminatorConfig,
    ModelKind,
    ModelParams,
    bce_loss,
    discriminative_loss,
    forward,
    init_model,
    pair_forward,
    pair_similarity,
    predict,
    save_model,
)
from .tensor_nn import ContractError, Tensor, adam_step, backward, no_grad
from .tensor_nn import functional as F


class Strategy(str, Enum):
    ONE_STAGE = "one_stage"
    TWO_STAGE_GAP = "two_stage_gap"
    TWO_STAGE_FLATTEN = "two_stage_flatten"
    BASELINE = "baseline"


class NumericAbort(ArithmeticError):
    """A training loss became NaN or infinite."""


@dataclass(frozen=True)
class TrainConfig:
    strategy: Strategy = Strategy.ONE_STAGE
    lam: float = 0.1
    epochs_per_stage: int = 200
    batch_size: int = 16
    lr: float = 1e-4  # one-stage, stage 2 and baseline
    lr_stage1_start: float = 1e-3
    lr_stage1_end: float = 1e-5
    seed: int = 0
    kind: ModelKind = ModelKind.FRAME_WISE
    disc: DiscriminatorConfig = field(default_factory=lambda: DiscriminatorConfig(REFERENCE_BLOCKS))

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy(self.strategy))
        object.__setattr__(self, "kind", ModelKind(self.kind))
        if not 0.0 <= self.lam <= 1.0:
            raise ConfigError(f"lambda must lie in [0, 1], got {self.lam}")
        if self.epochs_per_stage < 1:
            raise ConfigError("epochs_per_stage must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.strategy is Strategy.BASELINE and self.kind is not ModelKind.BASELINE:
            object.__setattr__(self, "kind", ModelKind.BASELINE)
        if self.strategy is not Strategy.BASELINE and self.kind is ModelKind.BASELINE:
            raise ConfigError(f"strategy {self.strategy.value} needs a paired model, not the baseline")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["strategy"] = self.strategy.value
        d["kind"] = self.kind.value
        d["disc"] = self.disc.to_dict()
        return d


@dataclass
class EpochRecord:
    epoch: int
    stage: int
    lr: float
    l_dis: float | None
    l_bce: float | None
    val_auc: float | None = None
    val_l_pre: float | None = None
    val_l_bce: float | None = None


@dataclass
class TrainReport:
    config: dict
    history: list[EpochRecord] = field(default_factory=list)
    best_val_auc: float | None = None
    best_epoch: int | None = None
    best_checkpoint: str | None = None
    final_checkpoint: str | None = None
    wall_clock_seconds: float = 0.0

    def stage_history(self, stage: int) -> list[EpochRecord]:
        return [r for r in self.history if r.stage == stage]

    def to_dict(self, timing: bool = True) -> dict:
        d = {"config": self.config, "history": [asdict(r) for r in self.history],
             "best_val_auc": self.best_val_auc, "best_epoch": self.best_epoch,
             "best_checkpoint": self.best_checkpoint, "final_checkpoint": self.final_checkpoint}
        if timing:
            d["wall_clock_seconds"] = self.wall_clock_seconds
        return d

    def to_json(self, timing: bool = True) -> str:
        return json.dumps(self.to_dict(timing), indent=2, sort_keys=True) + "\n"


@dataclass
class TrainResult:
    report: TrainReport
    best: ModelParams
    final: ModelParams
    stage1: ModelParams | None = None


# schedule --------------------------------------------------------------------


def lr_schedule(stage: int, epoch: int, cfg: TrainConfig) -> float:
    """Stage 1 decays exponentially from the start to the end rate; otherwise constant.

    ``stage`` is 1 or 2 for the two-stage strategy and 0 for single-stage runs.
    """
    if not 0 <= epoch < cfg.epochs_per_stage:
        raise ContractError(f"epoch {epoch} outside [0, {cfg.epochs_per_stage})")
    if stage == 1:
        if cfg.epochs_per_stage == 1:
            return cfg.lr_stage1_start
        ratio = cfg.lr_stage1_end / cfg.lr_stage1_start
        return cfg.lr_stage1_start * ratio ** (epoch / (cfg.epochs_per_stage - 1))
    if stage in (0, 2):
        return cfg.lr
    raise ContractError(f"unknown stage {stage}")


# helpers -------------------------------------------------------------------


def _fmt(v) -> str:
    return "-" if v is None else f"{v:.6f}"


def progress_line(rec: EpochRecord) -> str:
    return f"epoch {rec.epoch} stage {rec.stage} L_dis {_fmt(rec.l_dis)} L_bce {_fmt(rec.l_bce)} val_auc {_fmt(rec.val_auc)}"


def _check_data(train: FeatureSet, val: FeatureSet | None, n_frames: int | None = None) -> None:
    if len(train) == 0:
        raise ValueError("training set is empty")
    if val is not None and len(val) and val.n_frames != train.n_frames:
        raise ValueError(f"train clips have {train.n_frames} frames but validation clips {val.n_frames}")


def _finite_or_abort(values: dict[str, float], where: str) -> None:
    bad = {k: v for k, v in values.items() if v is not None and not math.isfinite(v)}
    if bad:
        raise NumericAbort(f"non-finite loss at {where}: " + ", ".join(f"{k}={v}" for k, v in bad.items()))


def val_similarity(params: ModelParams, X: np.ndarray, pooling: str, batch_size: int = 64) -> np.ndarray:
    """Per-clip cosine similarity of the paired representations, inference only."""
    out = []
    with no_grad():
        for i in range(0, len(X), batch_size):
            out.append(pair_similarity(pair_forward(Tensor(X[i:i + batch_size]), params), pooling).data)
    return np.concatenate(out).astype(np.float64)


def _val_metrics(params: ModelParams, val: FeatureSet | None) -> tuple[float | None, float | None]:
    """Validation AUC and mean BCE."""
    if val is None or len(val) == 0:
        return None, None
    scores = predict(val.X, params)
    return roc_auc(scores, val.y), float(np.mean(bce_loss(scores, val.y).data))


def _save(params: ModelParams, path: Path | None) -> str | None:
    if path is None:
        return None
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(path, params)
    return str(path)


# loops ---------------------------------------------------------------------


def _combined_epoch(params: ModelParams, train: FeatureSet, cfg: TrainConfig, epoch: int, stage: int, lr: float):
    """One pass of L_total (or plain BCE for the baseline); returns mean L_dis and L_bce per clip."""
    sums = {"l_dis": 0.0, "l_bce": 0.0}
    paired = params.kind is not ModelKind.BASELINE
    for b, (Xb, yb) in enumerate(batch_iter(train, cfg.batch_size, epoch, cfg.seed)):
        params.store.zero_grad()
        out = forward(Tensor(Xb), params)
        l_bce = F.mean(bce_loss(out.score, yb))
        total = l_bce
        l_dis = None
        if paired:
            l_dis = F.mean(discriminative_loss(pair_similarity(out.pair, "flatten"), yb, cfg.lam))
            total = l_dis + l_bce
        vals = {"L_bce": l_bce.item(), "L_dis": None if l_dis is None else l_dis.item()}
        _finite_or_abort(vals, f"epoch {epoch} stage {stage} batch {b}")
        backward(total)
        adam_step(params.store, lr)
        sums["l_bce"] += vals["L_bce"] * len(yb)
        if paired:
            sums["l_dis"] += vals["L_dis"] * len(yb)
    n = len(train)
    return (sums["l_dis"] / n if paired else None), sums["l_bce"] / n


def _fit_combined(params: ModelParams, train: FeatureSet, val: FeatureSet | None, cfg: TrainConfig,
                  report: TrainReport, stage: int, out_dir: Path | None, log: TextIO | None) -> TrainResult:
    # validation AUC saturates on easy data; equal AUCs fall back to the lower validation BCE
    best, best_key = params.store.copy(), None
    for epoch in range(cfg.epochs_per_stage):
        lr = lr_schedule(stage, epoch, cfg)
        l_dis, l_bce = _combined_epoch(params, train, cfg, epoch, stage, lr)
        auc, val_bce = _val_metrics(params, val)
        rec = EpochRecord(epoch, stage, lr, l_dis, l_bce, auc, val_l_bce=val_bce)
        report.history.append(rec)
        if log is not None:
            print(progress_line(rec), file=log, flush=True)
        if auc is not None and (best_key is None or (auc, -val_bce) > best_key):
            best, best_key = params.store.copy(), (auc, -val_bce)
            report.best_val_auc, report.best_epoch = auc, epoch
    if best_key is None:  # no validation data: the final state is the selection
        best = params.store.copy()
        report.best_epoch = cfg.epochs_per_stage - 1
    best_params = replace(params, store=best, meta={**params.meta, "lambda": cfg.lam})
    final_params = replace(params, store=params.store.copy(), meta={**params.meta, "lambda": cfg.lam})
    report.best_checkpoint = _save(best_params, out_dir and out_dir / "best.aedf")
    report.final_checkpoint = _save(final_params, out_dir and out_dir / "final.aedf")
    return TrainResult(report, best_params, final_params)


def _new_report(cfg: TrainConfig) -> TrainReport:
    return TrainReport(cfg.to_dict())


def train_one_stage(train: FeatureSet, val: FeatureSet | None, cfg: TrainConfig, params: ModelParams | None = None,
                    out_dir: str | Path | None = None, log: TextIO | None = sys.stdout) -> TrainResult:
    """Minimise mean L_dis(flatten cosine) + BCE per batch with Adam at a constant rate."""
    _check_data(train, val)
    if params is None:
        params = init_model(cfg.kind, cfg.disc, train.n_frames, cfg.seed)
    if params.kind is ModelKind.BASELINE and cfg.strategy is not Strategy.BASELINE:
        raise ConfigError("one-stage training needs a frame-wise or flat classifier")
    t0 = time.perf_counter()
    result = _fit_combined(params, train, val, cfg, _new_report(cfg), 0, _out(out_dir), log)
    result.report.wall_clock_seconds = time.perf_counter() - t0
    return result


def train_baseline(train: FeatureSet, val: FeatureSet | None, cfg: TrainConfig,
                   out_dir: str | Path | None = None, log: TextIO | None = sys.stdout) -> TrainResult:
    """Single encoder with BCE only, constant rate."""
    cfg = replace(cfg, strategy=Strategy.BASELINE, kind=ModelKind.BASELINE)
    _check_data(train, val)
    params = init_model(ModelKind.BASELINE, cfg.disc, train.n_frames, cfg.seed)
    t0 = time.perf_counter()
    result = _fit_combined(params, train, val, cfg, _new_report(cfg), 0, _out(out_dir), log)
    result.report.wall_clock_seconds = time.perf_counter() - t0
    return result


def _out(out_dir) -> Path | None:
    return None if out_dir is None else Path(out_dir)


def pretrain_stage1(train: FeatureSet, val: FeatureSet | None, params: ModelParams, cfg: TrainConfig,
                    pooling: str = "gap", report: TrainReport | None = None,
                    log: TextIO | None = sys.stdout) -> ModelParams:
    """Train only the two discriminators on L_pre = L_dis(sim(q_u, q_d)).

    ``pooling`` is ``gap`` (per-channel global average) or ``flatten``.
    Returns a copy of ``params`` whose discriminators have the lowest
    validation L_pre seen; classifier parameters are never touched.
    """
    _check_data(train, val)
    names = params.discriminator_names()
    best, best_loss = None, None
    for epoch in range(cfg.epochs_per_stage):
        lr = lr_schedule(1, epoch, cfg)
        total = 0.0
        for b, (Xb, yb) in enumerate(batch_iter(train, cfg.batch_size, epoch, cfg.seed)):
            params.store.zero_grad()
            loss = F.mean(discriminative_loss(pair_similarity(pair_forward(Tensor(Xb), params), pooling), yb, cfg.lam))
            value = loss.item()
            _finite_or_abort({"L_pre": value}, f"epoch {epoch} stage 1 batch {b}")
            backward(loss)
            adam_step(params.store, lr, names=names)
            total += value * len(yb)
        val_loss = None
        if val is not None and len(val):
            s = val_similarity(params, val.X, pooling)
            val_loss = float(np.mean(discriminative_loss(s, val.y, cfg.lam).data))
            _finite_or_abort({"val L_pre": val_loss}, f"epoch {epoch} stage 1 validation")
        rec = EpochRecord(epoch, 1, lr, total / len(train), None, None, val_loss)
        if report is not None:
            report.history.append(rec)
        if log is not None:
            print(progress_line(rec) + f" val_L_pre {_fmt(val_loss)}", file=log, flush=True)
        if val_loss is None or best_loss is None or val_loss < best_loss:
            best, best_loss = params.store.copy(), val_loss
    return replace(params, store=best)


def train_two_stage(train: FeatureSet, val: FeatureSet | None, cfg: TrainConfig,
                    out_dir: str | Path | None = None, log: TextIO | None = sys.stdout) -> TrainResult:
    """Pre-train the discriminators, then train everything with L_total from that start.

    The classifier enters stage 2 with fresh seeded weights and Adam restarts.
    """
    if cfg.strategy not in (Strategy.TWO_STAGE_GAP, Strategy.TWO_STAGE_FLATTEN):
        raise ConfigError(f"strategy {cfg.strategy.value} is not two-stage")
    pooling = "gap" if cfg.strategy is Strategy.TWO_STAGE_GAP else "flatten"
    _check_data(train, val)
    t0 = time.perf_counter()
    report = _new_report(cfg)
    stage1 = pretrain_stage1(train, val, init_model(cfg.kind, cfg.disc, train.n_frames, cfg.seed), cfg,
                             pooling, report, log)
    out = _out(out_dir)
    _save(stage1, out and out / "stage1.aedf")
    params = stage2_init(stage1, cfg)
    result = _fit_combined(params, train, val, cfg, report, 2, out, log)
    result.stage1 = stage1
    report.wall_clock_seconds = time.perf_counter() - t0
    return result


def stage2_init(stage1: ModelParams, cfg: TrainConfig) -> ModelParams:
    """Fresh model whose discriminators are copied from stage 1; no optimiser state."""
    params = init_model(stage1.kind, stage1.disc, stage1.n_frames, cfg.seed)
    for name in stage1.discriminator_names():
        params.store[name].data = stage1.store[name].data.copy()
    return params


def train(train_fs: FeatureSet, val_fs: FeatureSet | None, cfg: TrainConfig,
          out_dir: str | Path | None = None, log: TextIO | None = sys.stdout) -> TrainResult:
    """Dispatch on ``cfg.strategy`` and write ``report.json`` next to the checkpoints."""
    if cfg.strategy is Strategy.BASELINE:
        result = train_baseline(train_fs, val_fs, cfg, out_dir, log)
    elif cfg.strategy is Strategy.ONE_STAGE:
        result = train_one_stage(train_fs, val_fs, cfg, out_dir=out_dir, log=log)
    else:
        result = train_two_stage(train_fs, val_fs, cfg, out_dir, log)
    if out_dir is not None:
        (Path(out_dir) / "report.json").write_text(result.report.to_json())
    return result


def fit_for_matrix(train_fs: FeatureSet, val_fs: FeatureSet, cfg: TrainConfig, out_dir) -> ModelParams:
    return train(train_fs, val_fs, cfg, out_dir, log=None).best
