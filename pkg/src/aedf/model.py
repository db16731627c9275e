"""Paired CNN discriminators, classifiers and losses.

Two structurally identical CNN encoders (``theta_u`` and ``theta_d``) map the
same log-mel input to representations A and B.  Their time-wise concatenation
M feeds either a frame-wise classifier with attention pooling or a flat dense
classifier.  The baseline is a single encoder with a dense head.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .tensor_nn import DimensionError, ParamStore, Tensor, float64_mode, functional as F, no_grad
from .tensor_nn.checkpoint import load_tensors, save_tensors
from .tensor_nn.params import name_seed, seeded_init, zeros

H_EPS = 1e-7
ATTN_CLAMP = 7.0
FRAME_HIDDEN = 32
FLAT_HIDDEN = (512, 256, 32)
BASELINE_HIDDEN = (256, 32)


class ConfigError(ValueError):
    pass


class ModelKind(str, Enum):
    FRAME_WISE = "frame_wise"
    FLAT = "flat"
    BASELINE = "baseline"


@dataclass(frozen=True)
class BlockConfig:
    out_channels: int
    pool_f: int
    pool_t: int


REFERENCE_BLOCKS = (BlockConfig(16, 5, 4), BlockConfig(16, 2, 4), BlockConfig(16, 2, 2))


@dataclass(frozen=True)
class DiscriminatorConfig:
    blocks: tuple[BlockConfig, ...] = REFERENCE_BLOCKS
    leaky_slope: float = F.LEAKY_SLOPE
    n_mels: int = 80

    def __post_init__(self):
        if not self.blocks:
            raise ConfigError("discriminator needs at least one block")
        object.__setattr__(self, "blocks", tuple(
            b if isinstance(b, BlockConfig) else BlockConfig(**b) for b in self.blocks))
        if self.output_freq() < 1:
            raise ConfigError(f"pooling reduces {self.n_mels} mel bands below 1")

    @property
    def channels(self) -> int:
        return self.blocks[-1].out_channels

    def output_freq(self) -> int:
        f = self.n_mels
        for b in self.blocks:
            f //= b.pool_f
        return f

    def output_frames(self, n_frames: int) -> int:
        t = n_frames
        for b in self.blocks:
            if b.pool_t > t:
                raise DimensionError(f"{n_frames} input frames too few for time pooling {self.time_pools()}")
            t //= b.pool_t
        return t

    def time_pools(self) -> list[int]:
        return [b.pool_t for b in self.blocks]

    def output_shape(self, n_frames: int) -> tuple[int, int, int]:
        return self.channels, self.output_freq(), self.output_frames(n_frames)

    def to_dict(self) -> dict:
        return {"blocks": [asdict(b) for b in self.blocks], "leaky_slope": self.leaky_slope,
                "n_mels": self.n_mels}

    @classmethod
    def from_dict(cls, d: dict) -> "DiscriminatorConfig":
        return cls(tuple(BlockConfig(**b) for b in d["blocks"]), d["leaky_slope"], d["n_mels"])


@dataclass
class ModelParams:
    kind: ModelKind
    disc: DiscriminatorConfig
    n_frames: int
    store: ParamStore
    meta: dict = field(default_factory=dict)

    def encoder_prefixes(self) -> list[str]:
        return ["encoder"] if self.kind is ModelKind.BASELINE else ["theta_u", "theta_d"]

    def discriminator_names(self) -> list[str]:
        return [n for p in self.encoder_prefixes() for n in self.store.names(p + ".")]

    def classifier_names(self) -> list[str]:
        return self.store.names("classifier.")


@dataclass
class PairedRepresentation:
    A: Tensor
    B: Tensor
    M: Tensor


# initialisation --------------------------------------------------------------


def _add_he(store: ParamStore, name: str, shape, fan_in: int, seed: int) -> None:
    store.add(name, seeded_init(shape, fan_in, name_seed(seed, name)))


def init_encoder(store: ParamStore, prefix: str, cfg: DiscriminatorConfig, seed: int) -> None:
    c_in = 1
    for i, block in enumerate(cfg.blocks):
        _add_he(store, f"{prefix}.block{i}.kernel", (block.out_channels, c_in, 3, 3), c_in * 9, seed)
        store.add(f"{prefix}.block{i}.bias", zeros((block.out_channels,)))
        c_in = block.out_channels


def init_dense_stack(store: ParamStore, prefix: str, sizes, seed: int) -> None:
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        _add_he(store, f"{prefix}.fc{i}.weight", (n_out, n_in), n_in, seed)
        store.add(f"{prefix}.fc{i}.bias", zeros((n_out,)))


def init_classifier(store: ParamStore, kind: ModelKind, cfg: DiscriminatorConfig, n_frames: int, seed: int) -> None:
    c, f, t = cfg.output_shape(n_frames)
    if kind is ModelKind.FRAME_WISE:
        init_dense_stack(store, "classifier.ffn", (c * f, FRAME_HIDDEN, 1), seed)
        _add_he(store, "classifier.attn.weight", (1, c * f), c * f, seed)
        store.add("classifier.attn.bias", zeros((1,)))
    elif kind is ModelKind.FLAT:
        init_dense_stack(store, "classifier", (c * f * 2 * t, *FLAT_HIDDEN, 1), seed)
    else:
        init_dense_stack(store, "classifier", (c * f * t, *BASELINE_HIDDEN, 1), seed)


def init_model(kind: ModelKind | str, cfg: DiscriminatorConfig, n_frames: int, seed: int) -> ModelParams:
    """Fresh parameters: He-uniform weights, zero biases, deterministic in ``seed``."""
    kind = ModelKind(kind)
    cfg.output_frames(n_frames)
    store = ParamStore()
    params = ModelParams(kind, cfg, n_frames, store)
    for prefix in params.encoder_prefixes():
        init_encoder(store, prefix, cfg, seed)
    init_classifier(store, kind, cfg, n_frames, seed)
    return params


# forward passes -----------------------------------------------------------


def _as_batch(X) -> Tensor:
    X = X if isinstance(X, Tensor) else Tensor(getattr(X, "values", X))
    if X.ndim == 3:
        X = F.reshape(X, (1, *X.shape))
    if X.ndim != 4 or X.shape[1] != 1:
        raise DimensionError(f"expected 1 x F x T input (optionally batched), got {X.shape}")
    return X


def discriminator_forward(X, store: ParamStore, prefix: str, cfg: DiscriminatorConfig) -> Tensor:
    """Stacked conv3x3 -> leaky ReLU -> max-pool blocks; ``B x 1 x F x T`` -> ``B x C x F' x T'``.

    Leaky ReLU is strictly increasing, so it commutes with max-pooling; it is
    applied after the pool, which gives identical values and gradients on
    far fewer elements.
    """
    h = _as_batch(X)
    if h.shape[2] != cfg.n_mels:
        raise DimensionError(f"expected {cfg.n_mels} mel bands, got {h.shape[2]}")
    cfg.output_frames(h.shape[3])
    for i, block in enumerate(cfg.blocks):
        h = F.conv2d_same(h, store[f"{prefix}.block{i}.kernel"], store[f"{prefix}.block{i}.bias"])
        h = F.maxpool2d(h, block.pool_f, block.pool_t)
        h = F.leaky_relu(h, cfg.leaky_slope)
    return h


def pair_forward(X, params: ModelParams) -> PairedRepresentation:
    A = discriminator_forward(X, params.store, "theta_u", params.disc)
    B = discriminator_forward(X, params.store, "theta_d", params.disc)
    return PairedRepresentation(A, B, F.concat_last_axis(A, B))


def attention_pool(p_frames: Tensor, weights: Tensor) -> Tensor:
    """Weighted mean of per-frame scores over the last axis."""
    return F.div(F.sum(p_frames * weights, axis=-1), F.sum(weights, axis=-1))


def frame_classifier_forward(M: Tensor, store: ParamStore, slope: float = F.LEAKY_SLOPE):
    """Score each column of the ``(C*F') x 2T'`` matrix with a shared FFN, then attention-pool.

    Returns ``(p, per_frame, weights)`` with shapes ``(B,)``, ``(B, 2T')``, ``(B, 2T')``.
    """
    if M.ndim == 3:
        M = F.reshape(M, (1, *M.shape))
    b, c, f, t2 = M.shape
    frames = F.transpose(F.reshape(M, (b, c * f, t2)), (0, 2, 1))  # B x 2T' x C*F'
    h = F.leaky_relu(F.dense(frames, store["classifier.ffn.fc0.weight"], store["classifier.ffn.fc0.bias"]), slope)
    logits = F.dense(h, store["classifier.ffn.fc1.weight"], store["classifier.ffn.fc1.bias"])
    p_frames = F.sigmoid(F.reshape(logits, (b, t2)))
    score = F.dense(frames, store["classifier.attn.weight"], store["classifier.attn.bias"])
    weights = F.exp(F.clamp(F.reshape(score, (b, t2)), -ATTN_CLAMP, ATTN_CLAMP))
    return attention_pool(p_frames, weights), p_frames, weights


def dense_stack(x: Tensor, store: ParamStore, prefix: str, slope: float = F.LEAKY_SLOPE) -> Tensor:
    """Dense layers with leaky ReLU between them and a sigmoid on the single output unit."""
    n = len(store.names(prefix + ".fc")) // 2
    for i in range(n):
        x = F.dense(x, store[f"{prefix}.fc{i}.weight"], store[f"{prefix}.fc{i}.bias"])
        if i < n - 1:
            x = F.leaky_relu(x, slope)
    return F.sigmoid(F.reshape(x, (x.shape[0],)))


def flat_classifier_forward(M: Tensor, store: ParamStore, slope: float = F.LEAKY_SLOPE) -> Tensor:
    if M.ndim == 3:
        M = F.reshape(M, (1, *M.shape))
    return dense_stack(F.flatten_batch(M), store, "classifier", slope)


def baseline_forward(X, params: ModelParams) -> Tensor:
    enc = discriminator_forward(X, params.store, "encoder", params.disc)
    return dense_stack(F.flatten_batch(enc), params.store, "classifier", params.disc.leaky_slope)


@dataclass
class ForwardOutput:
    score: Tensor  # (B,)
    pair: PairedRepresentation | None = None
    per_frame: Tensor | None = None
    weights: Tensor | None = None


def forward(X, params: ModelParams) -> ForwardOutput:
    """Full model for any kind; the pair is exposed for the discriminative loss."""
    if params.kind is ModelKind.BASELINE:
        return ForwardOutput(baseline_forward(X, params))
    pair = pair_forward(X, params)
    if params.kind is ModelKind.FRAME_WISE:
        p, per_frame, w = frame_classifier_forward(pair.M, params.store, params.disc.leaky_slope)
        return ForwardOutput(p, pair, per_frame, w)
    return ForwardOutput(flat_classifier_forward(pair.M, params.store, params.disc.leaky_slope), pair)


def predict(X, params: ModelParams, batch_size: int = 64) -> np.ndarray:
    """Inference-only scores in [0, 1]; nothing is recorded or mutated.

    Scoring runs in 64-bit arithmetic: a float32 sigmoid rounds to exactly
    1.0 for logits above about 17, and the ties that creates erase the
    ranking that AUC measures.
    """
    X = np.asarray(getattr(X, "values", X))
    if X.ndim == 3:
        X = X[None]
    out = []
    with no_grad(), float64_mode():
        wide = replace(params, store=params.store.astype(np.float64))
        for i in range(0, len(X), batch_size):
            out.append(forward(Tensor(X[i:i + batch_size], dtype=np.float64), wide).score.data)
    return np.concatenate(out)


# similarity and losses ----------------------------------------------------


def pair_similarity(pair: PairedRepresentation, pooling: str = "flatten") -> Tensor:
    """Cosine similarity of the two representations, per clip.

    ``flatten`` compares the flattened maps; ``gap`` compares their
    per-channel global averages.
    """
    if pooling == "flatten":
        return F.cosine_similarity(F.flatten_batch(pair.A), F.flatten_batch(pair.B))
    if pooling == "gap":
        return F.cosine_similarity(F.global_avg_pool(pair.A), F.global_avg_pool(pair.B))
    raise ConfigError(f"unknown pooling {pooling!r}")


def cosine_similarity(a, b):
    """Scalar cosine similarity of two 1-D vectors plus a degenerate-input flag."""
    a = a if isinstance(a, Tensor) else Tensor(a)
    b = b if isinstance(b, Tensor) else Tensor(b)
    if a.ndim != 1 or a.shape != b.shape:
        raise DimensionError(f"need two equal-length vectors, got {a.shape} and {b.shape}")
    s, flag = F.cosine_similarity(a, b, return_flag=True)
    return s, bool(flag)


def _check_lambda(lam: float) -> None:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")


def discriminative_loss_terms(s, y, lam: float) -> tuple[Tensor, Tensor]:
    """Positive and negative parts of the discriminative loss, per clip.

    The similarity goes through ReLU and is clamped into ``[1e-7, 1 - 1e-7]``
    so both logarithms stay finite.
    """
    _check_lambda(lam)
    s = s if isinstance(s, Tensor) else Tensor(s)
    y = np.asarray(y, dtype=s.dtype)
    h = F.clamp(F.relu(s), H_EPS, 1.0 - H_EPS)
    pos = F.neg(F.mul(F.log(F.sub(1.0, h)), y))
    neg = F.neg(F.mul(F.log(h), lam * (1.0 - y)))
    return pos, neg


def discriminative_loss(s, y, lam: float) -> Tensor:
    pos, neg = discriminative_loss_terms(s, y, lam)
    return pos + neg


def bce_loss(y_hat, y) -> Tensor:
    y_hat = y_hat if isinstance(y_hat, Tensor) else Tensor(y_hat)
    y = np.asarray(y, dtype=y_hat.dtype)
    p = F.clamp(y_hat, H_EPS, 1.0 - H_EPS)
    return F.neg(F.log(p) * y + F.log(F.sub(1.0, p)) * (1.0 - y))


# persistence ----------------------------------------------------------------


def sidecar_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def save_model(path: str | Path, params: ModelParams) -> None:
    """Tensors in the binary container; config, kind and lambda in a JSON sidecar."""
    path = Path(path)
    save_tensors(path, params.store.state_dict())
    meta = {"kind": params.kind.value, "discriminator": params.disc.to_dict(),
            "n_frames": params.n_frames, **params.meta}
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(path: str | Path) -> ModelParams:
    path = Path(path)
    meta = json.loads(sidecar_path(path).read_text())
    cfg = DiscriminatorConfig.from_dict(meta.pop("discriminator"))
    kind = ModelKind(meta.pop("kind"))
    n_frames = meta.pop("n_frames")
    params = init_model(kind, cfg, n_frames, seed=0)
    params.store.load_state_dict(load_tensors(path))
    params.meta = meta
    return params
