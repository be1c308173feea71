"""Training and inference procedures around the stub and the F2F forecaster.

Features live in a cache keyed by (clip, frame). F2F models train in
normalized feature space; forecasts are mapped back before the head sees
them.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .datagen import TIME_ANCHOR, MiniClip, input_frames, sample_anchors
from .errors import ConfigError, DataError, MissingRecordError, ShapeError
from .functional import cross_entropy, l2_loss
from .optim import make_optimizer
from .stub import SingleFrameModel, to_batch
from .tensor import Tensor, backward, no_grad

log = logging.getLogger(__name__)

STAGES = ("single_frame", "f2f_l2", "f2f_finetune", "autoregressive_finetune")

_STAGE_DEFAULTS = {
    "single_frame": dict(optimizer="adam", lr=1e-3, epochs=12, batch_size=16),
    "f2f_l2": dict(optimizer="adam", lr=5e-4, epochs=160, batch_size=12),
    "f2f_finetune": dict(optimizer="sgd", lr=1e-4, epochs=5, batch_size=8),
    "autoregressive_finetune": dict(optimizer="sgd", lr=1e-4, epochs=5, batch_size=8, target_offset=9),
}


@dataclass
class TrainSpec:
    stage: str = "f2f_l2"
    optimizer: str = "adam"
    lr: float = 5e-4
    betas: tuple = (0.9, 0.999)
    eps: float = 1e-8
    epochs: int = 160
    batch_size: int = 12
    target_offset: int = 3
    frames: int = 4
    frame_stride: int = 3
    two_per_clip: bool = False
    schedule: str = "constant"  # or "cosine"
    frames_per_clip: int = 6  # single-frame stage only
    seed: int = 0

    @classmethod
    def for_stage(cls, stage: str, **overrides) -> "TrainSpec":
        if stage not in STAGES:
            raise ConfigError(f"unknown training stage {stage!r}; choose from {STAGES}")
        spec = cls(stage=stage, **{**_STAGE_DEFAULTS[stage], **overrides})
        spec.validate()
        return spec

    def validate(self):
        if self.stage not in STAGES:
            raise ConfigError(f"unknown training stage {self.stage!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.lr <= 0 or self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("lr must be positive, epochs >= 0 and batch_size >= 1")
        if self.target_offset < 1 or self.frames < 1 or self.frame_stride < 1:
            raise ConfigError("target_offset, frames and frame_stride must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown schedule {self.schedule!r}")

    def to_dict(self) -> dict:
        return asdict(self)


def _lr_at(spec: TrainSpec, step: int, total: int) -> float:
    if spec.schedule == "cosine" and total > 0:
        return spec.lr * 0.5 * (1 + np.cos(np.pi * step / total))
    return spec.lr


# -- feature normalization ------------------------------------------------

@dataclass
class FeatureNormalizer:
    mean: np.ndarray  # (D,)
    std: np.ndarray  # (D,)
    epsilon: float = 1e-5

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.std = np.asarray(self.std, dtype=np.float64)
        if self.mean.shape != self.std.shape or self.mean.ndim != 1:
            raise ShapeError("mean and std must be matching 1-d arrays")
        if np.any(self.std < 0):
            raise ValueError("std must be non-negative")

    def _shape(self, ndim: int, axis: int):
        shape = [1] * ndim
        shape[axis] = -1
        return shape

    def _axis(self, x) -> int:
        # (D, h, w) arrays or (N, D, h, w) batches
        return 0 if x.ndim == 3 else 1

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x)
        s = self._shape(x.ndim, self._axis(x))
        return ((x - self.mean.reshape(s)) / (self.std.reshape(s) + self.epsilon)).astype(x.dtype)

    def invert(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        s = self._shape(z.ndim, self._axis(z))
        return (z * (self.std.reshape(s) + self.epsilon) + self.mean.reshape(s)).astype(z.dtype)

    def apply_tensor(self, x: Tensor) -> Tensor:
        s = self._shape(x.ndim, self._axis(x))
        scale = (1.0 / (self.std + self.epsilon)).reshape(s).astype(x.dtype)
        return (x - self.mean.reshape(s).astype(x.dtype)) * scale

    def invert_tensor(self, z: Tensor) -> Tensor:
        s = self._shape(z.ndim, self._axis(z))
        return z * (self.std + self.epsilon).reshape(s).astype(z.dtype) + self.mean.reshape(s).astype(z.dtype)

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "epsilon": self.epsilon}


def fit_normalizer(cache, clip_ids: Sequence[int], epsilon: float = 1e-5) -> FeatureNormalizer:
    """Per-channel mean and std over every cached feature of the given clips."""
    wanted = {int(c) for c in clip_ids}
    keys = [k for k in cache.keys() if k[0] in wanted]
    if not keys:
        raise DataError("fit_normalizer: no cached features for the training clips")
    total = None
    sq = None
    count = 0
    for clip, frame in keys:
        f = np.asarray(cache.get(clip, frame), dtype=np.float64)
        flat = f.reshape(f.shape[0], -1)
        total = flat.sum(axis=1) if total is None else total + flat.sum(axis=1)
        count += flat.shape[1]
    mean = total / count
    for clip, frame in keys:
        f = np.asarray(cache.get(clip, frame), dtype=np.float64)
        d = f.reshape(f.shape[0], -1) - mean[:, None]
        sq = (d * d).sum(axis=1) if sq is None else sq + (d * d).sum(axis=1)
    return FeatureNormalizer(mean, np.sqrt(sq / count), epsilon)


# -- samples --------------------------------------------------------------

@dataclass(frozen=True)
class ForecastSample:
    clip: int
    inputs: tuple  # frame indices, oldest first
    target: int

    @property
    def anchor(self) -> int:
        return self.inputs[-1]


def forecast_samples(cache, clip_ids: Sequence[int], frames: int, offset: int, stride: int = 3,
                     n_frames: int = 20, two_per_clip: bool = False,
                     anchor: int = TIME_ANCHOR) -> list[ForecastSample]:
    """Input/target frame tuples per clip; every referenced key must be cached."""
    out = []
    for clip in clip_ids:
        for t in sample_anchors(n_frames, frames, offset, stride, two_per_clip, anchor):
            s = ForecastSample(int(clip), tuple(input_frames(t, frames, stride)), t + offset)
            for f in s.inputs + (s.target,):
                if (s.clip, f) not in cache:
                    raise MissingRecordError(f"cache is missing features for clip={s.clip} frame={f}")
            out.append(s)
    return out


def stack_samples(cache, samples: Sequence[ForecastSample], normalizer: FeatureNormalizer | None,
                  dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """(S, T, D, h, w) normalized inputs and (S, D, h, w) normalized targets."""
    def get(clip, frame):
        a = np.asarray(cache.get(clip, frame))
        return normalizer.apply(a) if normalizer is not None else a

    x = np.stack([np.stack([get(s.clip, f) for f in s.inputs]) for s in samples]).astype(dtype)
    y = np.stack([get(s.clip, s.target) for s in samples]).astype(dtype)
    return x, y


def _frames_of(x: np.ndarray) -> list[Tensor]:
    return [Tensor(np.ascontiguousarray(x[:, i])) for i in range(x.shape[1])]


# -- autoregression -------------------------------------------------------

def autoregress(f2f, inputs: Sequence[Tensor], steps: int) -> Tensor:
    """Apply ``f2f`` recurrently, feeding each forecast back as the newest frame."""
    if steps < 1:
        raise ValueError("autoregress needs steps >= 1")
    window = list(inputs)
    out = None
    for _ in range(steps):
        out = f2f(window)
        window = window[1:] + [out]
    return out


# -- F2F L2 training ------------------------------------------------------

@dataclass
class TrainResult:
    losses: list = field(default_factory=list)  # mean training loss per epoch
    val_losses: list = field(default_factory=list)
    alarms: list = field(default_factory=list)
    val_metric: list = field(default_factory=list)


def window_alarms(losses: Sequence[float], window: int = 10) -> list[str]:
    """Epochs where the loss rose over a ``window``-epoch span."""
    out = []
    for i in range(len(losses) - window + 1):
        if losses[i + window - 1] > losses[i]:
            out.append(f"loss rose from {losses[i]:.6g} at epoch {i} to "
                       f"{losses[i + window - 1]:.6g} at epoch {i + window - 1}")
    return out


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for b in range(0, n, batch_size):
        yield perm[b:b + batch_size]


def evaluate_l2(f2f, x: np.ndarray, y: np.ndarray, steps: int = 1, batch_size: int = 32) -> float:
    total = 0.0
    with no_grad():
        for b in range(0, len(x), batch_size):
            pred = autoregress(f2f, _frames_of(x[b:b + batch_size]), steps)
            total += float(((pred.data.astype(np.float64) - y[b:b + batch_size]) ** 2).mean()) * len(pred.data)
    return total / len(x)


def train_f2f_l2(f2f, cache, clip_ids: Sequence[int], spec: TrainSpec,
                 normalizer: FeatureNormalizer | None = None, val_clip_ids: Sequence[int] = (),
                 n_frames: int = 20, on_epoch: Callable | None = None) -> TrainResult:
    """Unsupervised training on the feature loss ||F2F(X_inputs) - X_{t+offset}||^2."""
    spec.validate()
    if spec.frames != f2f.cfg.frames:
        raise ConfigError(f"spec uses {spec.frames} frames but the model takes {f2f.cfg.frames}")
    samples = forecast_samples(cache, clip_ids, spec.frames, spec.target_offset, spec.frame_stride,
                               n_frames, spec.two_per_clip)
    x, y = stack_samples(cache, samples, normalizer, f2f.layers[0].weight.dtype)
    if val_clip_ids:
        vs = forecast_samples(cache, val_clip_ids, spec.frames, spec.target_offset, spec.frame_stride, n_frames)
        vx, vy = stack_samples(cache, vs, normalizer, x.dtype)
    params = f2f.parameters()
    opt = make_optimizer(spec.optimizer, params, spec.lr, spec.betas, spec.eps)
    rng = np.random.default_rng(spec.seed)
    result = TrainResult()
    total = spec.epochs * ((len(x) + spec.batch_size - 1) // spec.batch_size)
    step = 0
    for epoch in range(spec.epochs):
        running, seen = 0.0, 0
        for idx in _batches(len(x), spec.batch_size, rng):
            opt.lr = _lr_at(spec, step, total)
            step += 1
            loss = l2_loss(f2f(_frames_of(x[idx])), Tensor(y[idx]))
            opt.zero_grad()
            backward(loss)
            opt.step()
            running += loss.item() * len(idx)
            seen += len(idx)
        result.losses.append(running / seen)
        if val_clip_ids:
            result.val_losses.append(evaluate_l2(f2f, vx, vy))
        if on_epoch is not None:
            on_epoch(epoch, result)
    result.alarms = window_alarms(result.losses)
    for a in result.alarms:
        log.warning("train_f2f_l2: %s", a)
    return result


# -- fine-tuning with gradient averaging ----------------------------------

def _labels_for(labels, clip: int, frame: int) -> np.ndarray:
    if callable(labels):
        return np.asarray(labels(clip, frame))
    try:
        return np.asarray(labels[(clip, frame)])
    except KeyError:
        raise MissingRecordError(f"no label map for clip={clip} frame={frame}") from None


def _grads(params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    return {k: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for k, p in params.items()}


def average_gradients(g_l2: Mapping[str, np.ndarray], g_ce: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Equal-weight mean of the feature-loss and cross-entropy gradients."""
    return {k: (g_l2[k] + g_ce[k]) / 2 for k in g_l2}


def _finetune(f2f, head: SingleFrameModel, cache, labels, clip_ids, spec: TrainSpec,
              normalizer: FeatureNormalizer | None, horizon: int, steps: int, n_frames: int,
              grad_hook: Callable | None, detach_head: bool) -> TrainResult:
    spec.validate()
    if steps < 1:
        raise ValueError("steps must be >= 1")
    samples = forecast_samples(cache, clip_ids, spec.frames, horizon, spec.frame_stride,
                               n_frames, spec.two_per_clip)
    x, y = stack_samples(cache, samples, normalizer, f2f.layers[0].weight.dtype)
    gt = np.stack([_labels_for(labels, s.clip, s.target) for s in samples]).astype(np.int64)
    f2f_params = f2f.named_parameters()
    head_params = head.head_parameters()
    all_params = list(f2f_params.values()) + list(head_params.values())
    opt = make_optimizer(spec.optimizer, all_params, spec.lr, spec.betas, spec.eps)
    rng = np.random.default_rng(spec.seed)
    result = TrainResult()
    total = spec.epochs * ((len(x) + spec.batch_size - 1) // spec.batch_size)
    step = 0
    for epoch in range(spec.epochs):
        running, seen = 0.0, 0
        for idx in _batches(len(x), spec.batch_size, rng):
            opt.lr = _lr_at(spec, step, total)
            pred = autoregress(f2f, _frames_of(x[idx]), steps)
            l2 = l2_loss(pred, Tensor(y[idx]))
            feats = normalizer.invert_tensor(pred) if normalizer is not None else pred
            if detach_head:
                feats = feats.detach()
            ce = cross_entropy(head.logits(feats), gt[idx])

            opt.zero_grad()
            backward(l2)
            g_l2 = _grads(f2f_params)
            opt.zero_grad()
            backward(ce)
            g_ce = _grads(f2f_params)
            g_head = _grads(head_params)
            applied = average_gradients(g_l2, g_ce)
            for k, p in f2f_params.items():
                p.grad = applied[k].astype(p.dtype)
            for k, p in head_params.items():
                p.grad = g_head[k]
            if grad_hook is not None:
                grad_hook(step, {"l2": g_l2, "ce": g_ce, "applied": applied, "head": g_head})
            opt.step()
            step += 1
            running += (l2.item() + ce.item()) / 2 * len(idx)
            seen += len(idx)
        result.losses.append(running / seen)
    return result


def finetune_f2f(f2f, head: SingleFrameModel, cache, labels, clip_ids: Sequence[int], spec: TrainSpec,
                 normalizer: FeatureNormalizer | None = None, n_frames: int = 20,
                 grad_hook: Callable | None = None, detach_head: bool = False) -> TrainResult:
    """Joint fine-tuning: F2F gets (g_L2 + g_CE) / 2, the head gets pure g_CE.

    ``labels`` maps (clip, frame) to a label map, or is a callable of the same.
    ``grad_hook(step, grads)`` sees the captured gradients before each update;
    ``detach_head`` cuts the CE path into F2F (test hook).
    """
    return _finetune(f2f, head, cache, labels, clip_ids, spec, normalizer, spec.target_offset, 1,
                     n_frames, grad_hook, detach_head)


def autoregressive_finetune(f2f, head: SingleFrameModel, cache, labels, clip_ids: Sequence[int],
                            spec: TrainSpec, normalizer: FeatureNormalizer | None = None,
                            n_frames: int = 20, grad_hook: Callable | None = None) -> TrainResult:
    """Fine-tune a short-term model through its unrolled recurrence.

    The recurrence runs ``target_offset / frame_stride`` steps; the losses
    (averaged as in ``finetune_f2f``) apply at the final step only and their
    gradients flow back through every step.
    """
    if spec.target_offset % spec.frame_stride:
        raise ConfigError("autoregressive horizon must be a multiple of the frame stride")
    steps = spec.target_offset // spec.frame_stride
    return _finetune(f2f, head, cache, labels, clip_ids, spec, normalizer, spec.target_offset, steps,
                     n_frames, grad_hook, False)


# -- single-frame training ------------------------------------------------

def train_single_frame(model: SingleFrameModel, clips: Sequence[MiniClip], spec: TrainSpec,
                       on_epoch: Callable | None = None) -> TrainResult:
    """Cross-entropy training of extractor and head on randomly chosen frames."""
    spec.validate()
    if not clips:
        raise DataError("train_single_frame needs at least one clip")
    rng = np.random.default_rng(spec.seed)
    pick = [(i, int(f)) for i, c in enumerate(clips)
            for f in rng.choice(len(c.frames), min(spec.frames_per_clip, len(c.frames)), replace=False)]
    x = np.stack([clips[i].frames[f] for i, f in pick])
    y = np.stack([clips[i].labels[f] for i, f in pick]).astype(np.int64)
    dtype = model.fuse.weight.dtype
    opt = make_optimizer(spec.optimizer, model.parameters(), spec.lr, spec.betas, spec.eps)
    result = TrainResult()
    total = spec.epochs * ((len(x) + spec.batch_size - 1) // spec.batch_size)
    step = 0
    for epoch in range(spec.epochs):
        running, seen = 0.0, 0
        for idx in _batches(len(x), spec.batch_size, rng):
            opt.lr = _lr_at(spec, step, total)
            step += 1
            loss = cross_entropy(model(to_batch(x[idx], dtype)), y[idx])
            opt.zero_grad()
            backward(loss)
            opt.step()
            running += loss.item() * len(idx)
            seen += len(idx)
        result.losses.append(running / seen)
        if on_epoch is not None:
            on_epoch(epoch, result)
    return result


# -- ensembling -----------------------------------------------------------

def ensemble(p_current: np.ndarray, p_forecast: np.ndarray, lam: float) -> np.ndarray:
    """Convex blend lam * p_current + (1 - lam) * p_forecast."""
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"ensemble weight must lie in [0, 1], got {lam}")
    p_current = np.asarray(p_current)
    p_forecast = np.asarray(p_forecast)
    if p_current.shape != p_forecast.shape:
        raise ShapeError(f"probability maps differ in shape: {p_current.shape} vs {p_forecast.shape}")
    if lam == 1.0:
        return p_current.copy()
    if lam == 0.0:
        return p_forecast.copy()
    return lam * p_current + (1.0 - lam) * p_forecast
