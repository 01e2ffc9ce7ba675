"""Shared model plumbing: configuration, padded episode batches, encoders,
decoders and the predictive-output container."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from ..diffcore import (
    MLP,
    SIGMA_FLOOR,
    DimensionError,
    Linear,
    Module,
    Tensor,
    concat,
    gather_last,
    gaussian_log_density,
    log_softmax,
    matmul,
    positive_scale,
)
from ..episodes import CLASSIFICATION, REGRESSION, Episode

CONDITIONING_VARIANTS = ("ours", "concat", "add")


@dataclass
class ModelConfig:
    model: str = "hnp"  # hnp | cnp | np
    mode: str = REGRESSION
    x_dim: int = 1
    n_tasks: int = 4
    n_way: int = 5  # classification only
    d: int = 64
    d_z: int = 32
    d_w: int = 64
    heads: int = 4
    mlp_depth: int = 1  # hidden layers in point encoders and baseline decoders
    n_z: int = 5
    n_w: int = 10
    use_z: bool = True
    use_w: bool = True
    conditioning: str = "ours"
    dtype: str = "float32"
    # Regression init: first layers that read raw x get slopes up to input_bandwidth
    # and kinks spread over [-input_span, input_span]; 0 span keeps the plain init.
    input_bandwidth: float = 7.0
    input_span: float = 4.0
    # Regression: bias of the last layer of every latent scale head (softplus(-4) ~ 0.018).
    latent_sigma_bias: float = -4.0

    def __post_init__(self):
        if self.model not in ("hnp", "cnp", "np"):
            raise ValueError(f"unknown model {self.model!r}")
        if self.mode not in (REGRESSION, CLASSIFICATION):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.conditioning not in CONDITIONING_VARIANTS:
            raise ValueError(f"conditioning must be one of {CONDITIONING_VARIANTS}")
        if self.d % self.heads:
            raise ValueError(f"d={self.d} is not divisible by heads={self.heads}")
        if min(self.n_z, self.n_w, self.d, self.d_z, self.d_w, self.n_tasks, self.mlp_depth) < 1:
            raise ValueError("model sizes and sample counts must be positive")
        if self.input_bandwidth <= 0 or self.input_span < 0:
            raise ValueError("input_bandwidth must be positive and input_span non-negative")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def n_slots(self) -> int:
        """Rows of the local decoder: one per category, or (mean, scale)."""
        return self.n_way if self.mode == CLASSIFICATION else 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in doc.items() if k in names})


@dataclass
class Batch:
    """An episode as padded arrays; masks flag real (non-padding) points."""

    mode: str
    cx: np.ndarray  # [M, Nc, dx]
    cy: np.ndarray  # [M, Nc]
    cmask: np.ndarray  # [M, Nc] bool
    tx: np.ndarray  # [M, Nt, dx]
    ty: np.ndarray | None  # [M, Nt] or None at prediction time
    tmask: np.ndarray  # [M, Nt]
    n_target: list  # real target count per task

    @property
    def n_tasks(self) -> int:
        return self.cx.shape[0]


def _pad(arrays, width, fill=0.0, dtype=np.float64, trailing=()):
    out = np.full((len(arrays), width) + trailing, fill, dtype=dtype)
    mask = np.zeros((len(arrays), width), dtype=bool)
    for i, a in enumerate(arrays):
        out[i, :len(a)] = a
        mask[i, :len(a)] = True
    return out, mask


def make_batch(context_sets, target_inputs, target_labels, mode: str, dtype) -> Batch:
    """``context_sets``: list of (x [Nc, dx], y [Nc]); ``target_inputs``: list of
    x [Nt, dx]; ``target_labels``: list of y [Nt] or None."""
    dx = context_sets[0][0].shape[1]
    ydt = np.int64 if mode == CLASSIFICATION else dtype
    nc = max(len(c[1]) for c in context_sets)
    nt = max(max((len(t) for t in target_inputs), default=0), 1)
    cx, cmask = _pad([c[0] for c in context_sets], nc, dtype=dtype, trailing=(dx,))
    cy, _ = _pad([c[1] for c in context_sets], nc, dtype=ydt)
    tx, tmask = _pad(list(target_inputs), nt, dtype=dtype, trailing=(dx,))
    ty = None if target_labels is None else _pad(list(target_labels), nt, dtype=ydt)[0]
    return Batch(mode, cx, cy, cmask, tx, ty, tmask, [len(t) for t in target_inputs])


def batch_from_episode(ep: Episode, dtype, with_labels: bool = True) -> Batch:
    return make_batch(
        [(t.context_x, t.context_y) for t in ep.tasks],
        [t.target_x for t in ep.tasks],
        [t.target_y for t in ep.tasks] if with_labels else None,
        ep.mode,
        dtype,
    )


def masked_mean(x: Tensor, mask: np.ndarray) -> Tensor:
    """Mean of ``x`` [..., N, d] over N, counting only rows where ``mask`` is set."""
    w = mask.astype(x.dtype)
    w = w / np.maximum(w.sum(axis=-1, keepdims=True), 1.0)
    return (x * w[..., None]).sum(axis=-2)


def class_means(x: Tensor, labels: np.ndarray, mask: np.ndarray, n_way: int) -> Tensor:
    """Per-category means: [M, N, d] -> [M, O, d]. Empty categories give zeros."""
    onehot = (labels[..., None] == np.arange(n_way)) & mask[..., None]  # [M, N, O]
    w = onehot.astype(x.dtype)
    w = w / np.maximum(w.sum(axis=-2, keepdims=True), 1.0)
    return matmul(Tensor(np.swapaxes(w, -1, -2)), x)


def spread_raw_inputs(layer, cols, cfg: ModelConfig, rng):
    """Re-initialise the raw-x columns ``cols`` of a regression first layer.

    With the plain init every unit bends at x = 0 and the initial features
    are nearly linear over the input range, which the decoder cannot escape
    from. Here each unit gets slope(s) from U(-bandwidth, bandwidth) and a
    bias that puts its kink at a point drawn uniformly from the span box.
    """
    if cfg.mode != REGRESSION or cfg.input_span == 0:
        return
    w = layer.weight.data
    slopes = rng.uniform(-cfg.input_bandwidth, cfg.input_bandwidth, size=(w.shape[0], len(cols)))
    kinks = rng.uniform(-cfg.input_span, cfg.input_span, size=slopes.shape)
    w[:, cols] = slopes
    layer.bias.data[...] = -(slopes * kinks).sum(axis=1)


def set_scale_bias(head, cfg: ModelConfig):
    """Start a regression latent scale head (an MLP) near softplus(latent_sigma_bias).

    Wide initial latents combined with the spread input layer give huge
    first-step losses; classification keeps the plain init.
    """
    if cfg.mode == REGRESSION:
        head.fc2.bias.data[...] = cfg.latent_sigma_bias


class InputEncoder(Module):
    """Lifts raw points to d-dim embeddings.

    Regression: an MLP over (x, y) pairs; target inputs use a zero y slot.
    Classification: a linear projection of the feature vector.
    """

    def __init__(self, cfg: ModelConfig, rng):
        self.mode = cfg.mode
        self.x_dim = cfg.x_dim
        dt = cfg.np_dtype
        if cfg.mode == REGRESSION:
            self.net = MLP(cfg.x_dim + 1, cfg.d, cfg.d, rng, dt, cfg.mlp_depth)
            spread_raw_inputs(self.net.fc1, list(range(cfg.x_dim)), cfg, rng)
        else:
            self.net = Linear(cfg.x_dim, cfg.d, rng, dt)

    def _check(self, x: np.ndarray):
        if x.shape[-1] != self.x_dim:
            raise DimensionError(f"input feature dim {x.shape[-1]} != configured x_dim {self.x_dim}")

    def context(self, x: np.ndarray, y: np.ndarray) -> Tensor:
        self._check(x)
        if self.mode == REGRESSION:
            return self.net(Tensor(np.concatenate([x, y[..., None].astype(x.dtype)], axis=-1)))
        return self.net(Tensor(x))

    def target(self, x: np.ndarray) -> Tensor:
        self._check(x)
        if self.mode == REGRESSION:
            return self.net(Tensor(np.concatenate([x, np.zeros(x.shape[:-1] + (1,), x.dtype)], axis=-1)))
        return self.net(Tensor(x))


def pair_features(x: np.ndarray, y: np.ndarray, mode: str, n_way: int) -> np.ndarray:
    """(x, y) for regression, (x, one-hot y) for classification."""
    if mode == REGRESSION:
        return np.concatenate([x, y[..., None].astype(x.dtype)], axis=-1)
    return np.concatenate([x, (y[..., None] == np.arange(n_way)).astype(x.dtype)], axis=-1)


def decode_classification(target_emb: Tensor, w: Tensor) -> Tensor:
    """logits[..., n, o] = <target_emb[n], w[o]>; target_emb [..., n, d_w], w [..., O, d_w]."""
    if target_emb.shape[-1] != w.shape[-1]:
        raise DimensionError(f"decoder dims differ: embeddings {target_emb.shape}, weights {w.shape}")
    return matmul(target_emb, w.swapaxes(-1, -2))


def decode_regression(target_emb: Tensor, w: Tensor, floor: float = SIGMA_FLOOR):
    """Mean and scale from two local-parameter rows (mean row, pre-scale row)."""
    if w.shape[-2] != 2:
        raise DimensionError(f"regression decoder needs exactly 2 rows, got {w.shape[-2]}")
    out = decode_classification(target_emb, w)  # [..., n, 2]
    return out[..., 0], positive_scale(out[..., 1], floor)


def head_log_lik(out: Tensor, batch: Batch, mode: str, floor: float = SIGMA_FLOOR) -> Tensor:
    """Per-point log-likelihood from raw head outputs.

    ``out`` has shape [M, ..., Nt, K] with K=2 (mean, pre-scale) or K=O logits;
    returns [M, ..., Nt]. Padding positions are zeroed.
    """
    extra = out.ndim - 3
    ty = batch.ty.reshape((batch.n_tasks,) + (1,) * extra + batch.ty.shape[1:])
    tm = batch.tmask.reshape(ty.shape)
    if mode == REGRESSION:
        ll = gaussian_log_density(ty.astype(out.dtype), out[..., 0], positive_scale(out[..., 1], floor))
    else:
        ll = gather_last(log_softmax(out, axis=-1), np.where(tm, ty, 0))
    return ll * tm.astype(out.dtype)


def concat_broadcast(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate on the last axis after broadcasting the leading axes."""
    lead = np.broadcast_shapes(a.shape[:-1], b.shape[:-1])
    return concat([a.broadcast_to(lead + a.shape[-1:]), b.broadcast_to(lead + b.shape[-1:])], axis=-1)


def _logmeanexp(a: np.ndarray, axis: int = 0) -> np.ndarray:
    m = a.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis) + np.log(np.exp(a - m).mean(axis=axis))


@dataclass
class TaskPrediction:
    """Predictive distribution for one task's targets as S equally weighted components.

    classification: ``log_probs`` [S, n, O]; regression: ``mean``/``scale`` [S, n].
    """

    mode: str
    log_probs: np.ndarray | None = None
    mean: np.ndarray | None = None
    scale: np.ndarray | None = None

    @property
    def n_components(self) -> int:
        return (self.log_probs if self.mode == CLASSIFICATION else self.mean).shape[0]

    @property
    def n_points(self) -> int:
        return (self.log_probs if self.mode == CLASSIFICATION else self.mean).shape[1]

    def component_log_density(self, y: np.ndarray) -> np.ndarray:
        """[S, n] log p(y_n | component s)."""
        y = np.asarray(y)
        if self.mode == CLASSIFICATION:
            return np.take_along_axis(self.log_probs, np.broadcast_to(y[None, :, None], self.log_probs.shape[:2] + (1,)).astype(np.int64), axis=-1)[..., 0]
        z = (y[None, :] - self.mean) / self.scale
        return -0.5 * z * z - np.log(self.scale) - 0.5 * np.log(2 * np.pi)

    def log_density(self, y: np.ndarray) -> np.ndarray:
        """Per-point log of the component-averaged predictive density."""
        return _logmeanexp(self.component_log_density(y).astype(np.float64), axis=0)

    def joint_log_density(self, y: np.ndarray) -> float:
        """log of the component average of the joint likelihood of all points."""
        comp = self.component_log_density(y).astype(np.float64).sum(axis=1)
        return float(_logmeanexp(comp, axis=0))

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs.astype(np.float64)).mean(axis=0)

    def predict_labels(self) -> np.ndarray:
        # argmax picks the lowest index on ties
        return np.argmax(self.probs(), axis=-1)

    def mixture_mean(self) -> np.ndarray:
        return self.mean.astype(np.float64).mean(axis=0)

    def mixture_std(self) -> np.ndarray:
        m = self.mean.astype(np.float64)
        s = self.scale.astype(np.float64)
        second = (s * s + m * m).mean(axis=0)
        return np.sqrt(np.maximum(second - m.mean(axis=0) ** 2, 0.0))


@dataclass
class PredictiveOutput:
    mode: str
    tasks: list  # TaskPrediction per task

    def log_density(self, targets) -> list:
        return [tp.log_density(y) for tp, y in zip(self.tasks, targets)]

    def joint_log_density(self, targets) -> float:
        return float(sum(tp.joint_log_density(y) for tp, y in zip(self.tasks, targets)))


def build_prediction(mode: str, comp: Tensor | np.ndarray, batch: Batch, floor: float = SIGMA_FLOOR, scale=None) -> PredictiveOutput:
    """Split component head outputs into per-task predictions.

    classification: ``comp`` are logits [M, S, Nt, O];
    regression: ``comp`` is the mean [M, S, Nt] and ``scale`` the matching scale.
    """
    data = comp.data if isinstance(comp, Tensor) else comp
    tasks = []
    for m, n in enumerate(batch.n_target):
        if mode == CLASSIFICATION:
            lg = data[m, :, :n, :].astype(np.float64)
            lg = lg - lg.max(axis=-1, keepdims=True)
            lp = lg - np.log(np.exp(lg).sum(axis=-1, keepdims=True))
            tasks.append(TaskPrediction(mode, log_probs=lp))
        else:
            sc = scale.data if isinstance(scale, Tensor) else scale
            tasks.append(TaskPrediction(mode, mean=data[m, :, :n], scale=sc[m, :, :n]))
    return PredictiveOutput(mode, tasks)
