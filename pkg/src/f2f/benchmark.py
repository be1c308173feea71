"""Synthetic benchmark plumbing: world generation, feature extraction,
forecast evaluation and the per-seed experiment suite."""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .datagen import MemoryFeatureCache, MiniClip, TIME_ANCHOR, WorldConfig, generate_clip, input_frames, split_clips
from .evaluation import ConfusionMatrix, miou, miou_mo
from .functional import softmax
from .models import F2FConfig, build_f2f
from .pipeline import (FeatureNormalizer, TrainSpec, autoregress, autoregressive_finetune, ensemble,
                       finetune_f2f, fit_normalizer, train_f2f_l2, train_single_frame)
from .stub import SingleFrameModel, StubConfig, argmax_labels, to_batch
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)


@dataclass
class World:
    train: list  # MiniClip
    val: list

    @property
    def train_ids(self) -> list[int]:
        return [c.clip_id for c in self.train]

    @property
    def val_ids(self) -> list[int]:
        return [c.clip_id for c in self.val]

    def labels(self) -> dict:
        out = {}
        for c in self.train + self.val:
            for f in range(len(c.labels)):
                out[(c.clip_id, f)] = c.labels[f]
        return out

    def n_frames(self, clip_ids) -> int:
        lengths = {len(c.frames) for c in self.train + self.val if c.clip_id in set(clip_ids)}
        return min(lengths)


def make_world(cfg: WorldConfig, n_train: int, n_val: int, val_frames: int | None = None,
               split_seed: int = 0) -> World:
    """Generate clips split by id; validation clips may be longer for far horizons."""
    train_ids, val_ids = split_clips(range(n_train + n_val), n_val / (n_train + n_val), split_seed)
    val_cfg = replace(cfg, n_frames=val_frames) if val_frames else cfg
    return World([generate_clip(cfg, i) for i in train_ids], [generate_clip(val_cfg, i) for i in val_ids])


def extract_all(stub: SingleFrameModel, clips: Sequence[MiniClip], cache=None, batch: int = 32):
    cache = MemoryFeatureCache() if cache is None else cache
    dtype = stub.fuse.weight.dtype
    with no_grad():
        for c in clips:
            for b in range(0, len(c.frames), batch):
                feats = stub.features(to_batch(c.frames[b:b + batch], dtype)).data
                for i, f in enumerate(feats):
                    cache.put(c.clip_id, b + i, np.ascontiguousarray(f))
    return cache


def _head_probs(stub: SingleFrameModel, feats: np.ndarray, batch: int = 16) -> np.ndarray:
    out = []
    with no_grad():
        for b in range(0, len(feats), batch):
            out.append(softmax(stub.logits(Tensor(feats[b:b + batch])), axis=1).data)
    return np.concatenate(out)


def _stack(cache, keys, dtype=np.float32) -> np.ndarray:
    return np.stack([np.asarray(cache.get(c, f)) for c, f in keys]).astype(dtype)


def forecast_features(f2f, cache, clip_ids, offset: int, normalizer: FeatureNormalizer | None,
                      steps: int = 1, stride: int = 3, anchor: int = TIME_ANCHOR,
                      batch: int = 32) -> np.ndarray:
    """De-normalized forecasts of X_{anchor + offset} for every clip.

    With ``steps > 1`` the model is applied recurrently and ``offset`` is
    its per-step horizon.
    """
    frames = f2f.cfg.frames
    keys = [[(c, f) for f in input_frames(anchor, frames, stride)] for c in clip_ids]
    x = np.stack([_stack(cache, k) for k in keys])
    if normalizer is not None:
        x = normalizer.apply(x.reshape(-1, *x.shape[2:])).reshape(x.shape)
    x = x.astype(f2f.layers[0].weight.dtype)
    out = []
    with no_grad():
        for b in range(0, len(x), batch):
            xs = [Tensor(np.ascontiguousarray(x[b:b + batch, i])) for i in range(frames)]
            out.append(autoregress(f2f, xs, steps).data)
    pred = np.concatenate(out)
    return normalizer.invert(pred) if normalizer is not None else pred


@dataclass
class Scores:
    cm: ConfusionMatrix
    moving_ids: tuple

    @property
    def miou(self) -> float:
        return miou(self.cm)

    @property
    def miou_mo(self) -> float:
        return miou_mo(self.cm, self.moving_ids)


def score_probs(probs: np.ndarray, labels: dict, clip_ids, frame: int, classes: int, moving_ids) -> Scores:
    cm = ConfusionMatrix(classes)
    pred = argmax_labels(probs, axis=1)
    for p, c in zip(pred, clip_ids):
        cm.update(p, labels[(c, frame)])
    return Scores(cm, tuple(moving_ids))


class Evaluator:
    """Oracle, copy-last, forecast and ensemble scoring on the validation clips."""

    def __init__(self, stub: SingleFrameModel, cache, labels: dict, clip_ids, anchor: int = TIME_ANCHOR):
        self.stub = stub
        self.cache = cache
        self.labels = labels
        self.clip_ids = list(clip_ids)
        self.anchor = anchor
        self.classes = stub.cfg.classes
        self.moving = tuple(stub.cfg.moving_class_ids)
        self._probs: dict[int, np.ndarray] = {}

    def single_frame_probs(self, frame: int) -> np.ndarray:
        if frame not in self._probs:
            self._probs[frame] = _head_probs(self.stub, _stack(self.cache, [(c, frame) for c in self.clip_ids]))
        return self._probs[frame]

    def score(self, probs: np.ndarray, frame: int) -> Scores:
        return score_probs(probs, self.labels, self.clip_ids, frame, self.classes, self.moving)

    def oracle(self, offset: int) -> Scores:
        t = self.anchor + offset
        return self.score(self.single_frame_probs(t), t)

    def copy_last(self, offset: int) -> Scores:
        return self.score(self.single_frame_probs(self.anchor), self.anchor + offset)

    def forecast_probs(self, f2f, offset: int, normalizer, steps: int = 1) -> np.ndarray:
        feats = forecast_features(f2f, self.cache, self.clip_ids, offset, normalizer, steps, anchor=self.anchor)
        return _head_probs(self.stub, feats.astype(self.stub.fuse.weight.dtype))

    def forecast(self, f2f, offset: int, normalizer, steps: int = 1) -> Scores:
        return self.score(self.forecast_probs(f2f, offset, normalizer, steps), self.anchor + offset * steps)

    def ensemble(self, f2f, offset: int, normalizer, lam: float, target_frame: int | None = None) -> Scores:
        """lam * P(current frame) + (1 - lam) * P(forecast of it) scored on that frame.

        The forecast is made from frames ending at ``target - offset``.
        """
        t = self.anchor if target_frame is None else target_frame
        cur = self.single_frame_probs(t)
        shifted = Evaluator(self.stub, self.cache, self.labels, self.clip_ids, anchor=t - offset)
        fore = shifted.forecast_probs(f2f, offset, normalizer)
        return self.score(ensemble(cur, fore, lam), t)


# -- experiment suite -----------------------------------------------------

@dataclass
class BenchmarkConfig:
    n_train: int = 480
    n_val: int = 100
    val_frames: int = 29
    hidden: int = 64
    layers: int = 5
    frames: int = 4
    l2_epochs: int = 16
    l2_lr: float = 5e-4
    l2_batch: int = 12
    ft_epochs: int = 5
    ft_lr: float = 1e-4
    ft_batch: int = 8
    ft_clips: int = 160  # fine-tuning stages see this many training clips
    two_per_clip: bool = False
    ar_optimizer: str = "adam"
    stub_epochs: int = 16
    stub_clips: int = 240
    stub_frames_per_clip: int = 4
    stub_seed: int = 0
    world: WorldConfig = field(default_factory=lambda: WorldConfig(speed=(2.0, 8.0)))
    stub: StubConfig = field(default_factory=StubConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    def l2_spec(self, seed: int, offset: int, frames: int | None = None) -> TrainSpec:
        return TrainSpec.for_stage("f2f_l2", lr=self.l2_lr, epochs=self.l2_epochs, batch_size=self.l2_batch,
                                   target_offset=offset, frames=frames or self.frames,
                                   two_per_clip=self.two_per_clip, seed=seed)

    def ft_spec(self, seed: int, offset: int, stage: str = "f2f_finetune") -> TrainSpec:
        opt = self.ar_optimizer if stage == "autoregressive_finetune" else "sgd"
        return TrainSpec.for_stage(stage, optimizer=opt, lr=self.ft_lr, epochs=self.ft_epochs, batch_size=self.ft_batch,
                                   target_offset=offset, frames=self.frames,
                                   two_per_clip=self.two_per_clip, seed=seed)

    def f2f_config(self, variant: str = "deformable", frames: int | None = None) -> F2FConfig:
        return F2FConfig(variant=variant, n_layers=self.layers, frames=frames or self.frames,
                         channels_per_frame=self.stub.feat_dim, hidden=self.hidden)


@dataclass
class Prepared:
    cfg: BenchmarkConfig
    world: World
    stub: SingleFrameModel
    cache: MemoryFeatureCache
    normalizer: FeatureNormalizer
    labels: dict
    stub_losses: list
    evaluator: Evaluator

    @property
    def n_train_frames(self) -> int:
        return self.world.n_frames(self.world.train_ids)


def prepare(cfg: BenchmarkConfig, progress: Callable[[str], None] = log.info,
            stub: SingleFrameModel | None = None) -> Prepared:
    """World, trained single-frame model, cached features and normalizer.

    A given ``stub`` is used as is instead of training a fresh one.
    """
    t0 = time.time()
    world = make_world(cfg.world, cfg.n_train, cfg.n_val, cfg.val_frames)
    losses: list = []
    if stub is None:
        stub = SingleFrameModel(cfg.stub, seed=cfg.stub_seed)
        spec = TrainSpec.for_stage("single_frame", epochs=cfg.stub_epochs, seed=cfg.stub_seed,
                                   frames_per_clip=cfg.stub_frames_per_clip)
        losses = train_single_frame(stub, world.train[:cfg.stub_clips], spec).losses
        progress(f"single-frame model trained in {time.time() - t0:.0f}s, final loss {losses[-1]:.4f}")
    cache = extract_all(stub, world.train + world.val)
    normalizer = fit_normalizer(cache, world.train_ids)
    labels = world.labels()
    ev = Evaluator(stub, cache, labels, world.val_ids)
    return Prepared(cfg, world, stub, cache, normalizer, labels, losses, ev)


def train_forecaster(prep: Prepared, seed: int, variant: str = "deformable", offset: int = 9,
                     frames: int | None = None):
    cfg = prep.cfg
    f2f = build_f2f(cfg.f2f_config(variant, frames), seed=seed)
    res = train_f2f_l2(f2f, prep.cache, prep.world.train_ids, cfg.l2_spec(seed, offset, frames),
                       prep.normalizer, n_frames=prep.n_train_frames)
    return f2f, res


def clone_f2f(f2f, seed: int = 0):
    twin = build_f2f(f2f.cfg, seed=seed)
    for (_, dst), src in zip(twin.named_parameters().items(), f2f.named_parameters().values()):
        dst.data = src.data.copy()
    return twin


def clone_stub(stub: SingleFrameModel) -> SingleFrameModel:
    twin = SingleFrameModel(stub.cfg, seed=0, dtype=stub.fuse.weight.dtype)
    for dst, src in zip(twin.parameters(), stub.parameters()):
        dst.data = src.data.copy()
    return twin


def run_seed(prep: Prepared, seed: int, progress: Callable[[str], None] = log.info,
             probe: Callable[[dict], dict] | None = None) -> dict:
    """Every forecasting experiment for one seed; returns a flat dict of scores.

    ``probe`` gets the trained ``{"mid": +9 model, "short": +3 model}`` before
    any fine-tuning and may return extra entries for the result.
    """
    ev = prep.evaluator
    out: dict = {"seed": seed}
    out["oracle_mid"] = ev.oracle(9).miou
    out["copy_mid"] = ev.copy_last(9).miou
    out["oracle_short"] = ev.oracle(3).miou
    out["copy_short"] = ev.copy_last(3).miou

    def timed(label, fn):
        t = time.time()
        r = fn()
        progress(f"seed {seed}: {label} in {time.time() - t:.0f}s")
        return r

    for variant in ("plain", "dilated", "deformable"):
        f2f, res = timed(f"{variant} +9", lambda: train_forecaster(prep, seed, variant, 9))
        out[f"{variant}_mid"] = ev.forecast(f2f, 9, prep.normalizer).miou
        out[f"{variant}_mid_alarms"] = len(res.alarms)
        if variant == "deformable":
            deform_mid = f2f
    out["forecast_mid"] = out["deformable_mid"]
    for t in (1, 2):
        f2f, _ = timed(f"deformable T={t} +9", lambda: train_forecaster(prep, seed, "deformable", 9, frames=t))
        out[f"frames{t}_mid"] = ev.forecast(f2f, 9, prep.normalizer).miou
    out["frames4_mid"] = out["deformable_mid"]

    short, _ = timed("deformable +3", lambda: train_forecaster(prep, seed, "deformable", 3))
    out["forecast_short"] = ev.forecast(short, 3, prep.normalizer).miou
    out["ar3_mid"] = ev.forecast(short, 3, prep.normalizer, steps=3).miou
    for k in (1, 2, 3, 4, 5, 6):
        out[f"ar{k}"] = ev.forecast(short, 3, prep.normalizer, steps=k).miou

    if probe is not None:
        out.update(probe({"mid": deform_mid, "short": short}))

    ft_ids = prep.world.train_ids[:prep.cfg.ft_clips]
    ar_model, ar_stub = clone_f2f(short), clone_stub(prep.stub)
    timed("autoregressive fine-tune", lambda: autoregressive_finetune(
        ar_model, ar_stub, prep.cache, prep.labels, ft_ids,
        prep.cfg.ft_spec(seed, 9, "autoregressive_finetune"), prep.normalizer, n_frames=prep.n_train_frames))
    ar_ev = Evaluator(ar_stub, prep.cache, prep.labels, prep.world.val_ids)
    out["ar3ft_mid"] = ar_ev.forecast(ar_model, 3, prep.normalizer, steps=3).miou

    ft_model, ft_stub = clone_f2f(deform_mid), clone_stub(prep.stub)
    timed("fine-tune +9", lambda: finetune_f2f(
        ft_model, ft_stub, prep.cache, prep.labels, ft_ids, prep.cfg.ft_spec(seed, 9),
        prep.normalizer, n_frames=prep.n_train_frames))
    ft_ev = Evaluator(ft_stub, prep.cache, prep.labels, prep.world.val_ids)
    out["ft_mid"] = ft_ev.forecast(ft_model, 9, prep.normalizer).miou

    single = ev.score(ev.single_frame_probs(ev.anchor + 3), ev.anchor + 3).miou
    out["single_now"] = single
    for lam in (0.7, 0.75, 0.8, 0.85, 0.9):
        out[f"ensemble_{lam}"] = ev.ensemble(short, 3, prep.normalizer, lam, target_frame=ev.anchor + 3).miou
    return out
