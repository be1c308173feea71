"""Command-line entry point: ``f2f <command> [flags]``.

Every command reads a key=value config (``--config``, see ``f2f.config``),
writes its outputs plus a ``.manifest`` next to them, prints a one-line
summary on stdout and logs to stderr. Exit codes: 1 usage or config,
2 data, 3 checkpoint.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import shlex
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .benchmark import Evaluator, forecast_features, score_probs
from .checkpoint import load_into, save_checkpoint
from .config import RunConfig, load_config, parse_entries, parse_overrides
from .datagen import (CLASS_NAMES, TIME_ANCHOR, MiniClip, generate_clip, input_frames, read_feature_cache, split_clips,
                      write_feature_cache)
from .errors import CheckpointError, ConfigError, DataError
from .evaluation import (ConfusionMatrix, erf_probe, miou, mse_error_map, write_erf, write_error_map,
                         write_report)
from .io import read_csv, read_manifest, read_pgm, write_csv, write_manifest, write_pgm
from .models import build_f2f, count_parameters
from .pipeline import (FeatureNormalizer, autoregressive_finetune, evaluate_l2, finetune_f2f, fit_normalizer,
                       forecast_samples, stack_samples, train_f2f_l2, train_single_frame)
from .stub import SingleFrameModel, argmax_labels, to_batch
from .tensor import no_grad

log = logging.getLogger("f2f")

EXIT_USAGE, EXIT_DATA, EXIT_CHECKPOINT = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: usage error: {message}\n")


# -- shared plumbing ------------------------------------------------------

def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _manifest(path, cfg: RunConfig, args, inputs: dict, extra: dict | None = None):
    entries = dict(cfg.to_entries())
    entries["run.command"] = args.command
    entries["run.argv"] = shlex.join(args.argv)
    entries["run.version"] = __version__
    for name, p in inputs.items():
        entries[f"run.input.{name}"] = f"{p}:{_sha256(p)}"
    for k, v in (extra or {}).items():
        entries[f"run.{k}"] = v
    write_manifest(path, entries)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    over = parse_overrides(args.set)
    if args.seed is not None:
        over["seed"] = str(args.seed)
    if args.precision is not None:
        over["precision"] = args.precision
    return parse_entries(over, cfg) if over else cfg


def _need(args, *names):
    for n in names:
        if getattr(args, n, None) is None:
            raise UsageError(f"{args.command} needs --{n.replace('_', '-')}")


def _path_in(p) -> Path:
    p = Path(p)
    if not p.exists():
        raise DataError(f"input {p} not found")
    return p


# clips on disk: <dir>/clips.csv + <dir>/clip_XXXXX/{img,lab}_FF.pgm + meta.json

def _write_clips(out: Path, clips, split: dict):
    rows = []
    meta = {}
    for clip in clips:
        d = out / f"clip_{clip.clip_id:05d}"
        d.mkdir(parents=True, exist_ok=True)
        for f in range(len(clip.frames)):
            img, lab = d / f"img_{f:02d}.pgm", d / f"lab_{f:02d}.pgm"
            write_pgm(img, clip.frames[f])
            write_pgm(lab, clip.labels[f].astype(np.uint8))
            rows.append([clip.clip_id, split[clip.clip_id], f, str(img.relative_to(out)), str(lab.relative_to(out))])
        meta[clip.clip_id] = {"objects": [dataclasses.asdict(o) for o in clip.objects],
                              "layout": dataclasses.asdict(clip.layout)}
    write_csv(out / "clips.csv", ["clip", "split", "frame", "image", "label"], rows)
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


class ClipSet:
    """Clips read back from a data directory (frames quantised to 8 bits)."""

    def __init__(self, root):
        root = _path_in(root)
        index = root / "clips.csv"
        if not index.exists():
            raise DataError(f"{root} has no clips.csv; run `f2f generate` first")
        header, rows = read_csv(index)
        if header != ["clip", "split", "frame", "image", "label"]:
            raise DataError(f"{index}: unexpected header {header}")
        by_clip: dict[int, list] = {}
        self.split: dict[int, str] = {}
        for clip, split, frame, img, lab in rows:
            by_clip.setdefault(int(clip), []).append((int(frame), root / img, root / lab))
            self.split[int(clip)] = split
        self.clips: dict[int, MiniClip] = {}
        for cid, frames in sorted(by_clip.items()):
            frames.sort()
            if [f for f, _, _ in frames] != list(range(len(frames))):
                raise DataError(f"clip {cid} has missing frames")
            try:
                imgs = np.stack([read_pgm(i) for _, i, _ in frames]).astype(np.float32) / 255
                labs = np.stack([read_pgm(lab) for _, _, lab in frames])
            except OSError as exc:
                raise DataError(f"cannot read clip {cid}: {exc}") from None
            self.clips[cid] = MiniClip(cid, imgs, labs, [], None)
        self.root = root

    def ids(self, split: str) -> list[int]:
        return [c for c in self.clips if self.split[c] == split]

    def labels(self) -> dict:
        return {(c, f): clip.labels[f] for c, clip in self.clips.items() for f in range(len(clip.labels))}

    def n_frames(self, ids) -> int:
        return min(len(self.clips[c]) for c in ids)


def _save_model(path, model, cfg: RunConfig, args, inputs, extra=None, normalizer=None):
    out = Path(path)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(out, model.named_parameters())
    if normalizer is not None:
        write_csv(f"{out}.norm.csv", ["channel", "mean", "std", "epsilon"],
                  [[i, m, s, normalizer.epsilon] for i, (m, s) in enumerate(zip(normalizer.mean, normalizer.std))])
    _manifest(f"{out}.manifest", cfg, args, inputs, extra)


def _model_manifest(path) -> dict:
    side = Path(f"{path}.manifest")
    if not Path(path).exists():
        raise CheckpointError(f"checkpoint {path} not found")
    if not side.exists():
        raise CheckpointError(f"checkpoint {path} has no manifest {side}")
    return read_manifest(side)


def _load_stub(path, dtype) -> SingleFrameModel:
    entries = _model_manifest(path)
    try:
        cfg = parse_entries(entries)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    stub = SingleFrameModel(cfg.stub, dtype=dtype)
    return load_into(stub, path)


def _load_f2f(path, dtype):
    """F2F model, its normalizer and its per-step horizon."""
    entries = _model_manifest(path)
    if entries.get("run.kind") != "f2f":
        raise CheckpointError(f"{path} is not an F2F checkpoint")
    try:
        cfg = parse_entries(entries)
    except ConfigError as exc:
        raise CheckpointError(f"{path}: unreadable manifest ({exc})") from None
    f2f = load_into(build_f2f(cfg.f2f, dtype=dtype), path)
    norm_path = Path(f"{path}.norm.csv")
    if not norm_path.exists():
        raise CheckpointError(f"{path}: missing normalizer {norm_path}")
    _, rows = read_csv(norm_path)
    normalizer = FeatureNormalizer([float(r[1]) for r in rows], [float(r[2]) for r in rows], float(rows[0][3]))
    return f2f, normalizer, int(entries["run.offset"])


def _check_stub_f2f(stub, f2f):
    if stub.cfg.feat_dim != f2f.cfg.channels_per_frame:
        raise CheckpointError(f"stub emits {stub.cfg.feat_dim} channels, F2F expects {f2f.cfg.channels_per_frame}")


def _open_cache(path):
    try:
        return read_feature_cache(_path_in(path))
    except OSError as exc:
        raise DataError(f"cannot open cache {path}: {exc}") from None


def _int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(s) for s in str(text).split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--{flag} expects comma-separated integers, got {text!r}") from None


# -- commands -------------------------------------------------------------

def cmd_generate(args, cfg: RunConfig):
    _need(args, "out")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ids = list(range(cfg.clips))
    train, val = split_clips(ids, cfg.val_fraction, cfg.split_seed)
    split = {**{c: "train" for c in train}, **{c: "val" for c in val}}
    jobs = max(1, args.jobs or 1)
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            clips = list(pool.map(generate_clip, [cfg.world] * len(ids), ids, chunksize=8))
    else:
        clips = [generate_clip(cfg.world, i) for i in ids]
    _write_clips(out, clips, split)
    _manifest(out / "manifest.txt", cfg, args, {})
    return f"generate: {len(train)} train + {len(val)} val clips of {cfg.world.n_frames} frames -> {out}"


def cmd_train_single(args, cfg):
    _need(args, "data", "out")
    data = ClipSet(args.data)
    train, val = data.ids("train"), data.ids("val")
    if not train:
        raise DataError("no training clips")
    stub = SingleFrameModel(cfg.stub, seed=cfg.seed, dtype=cfg.dtype)
    spec = cfg.spec("single_frame")
    res = train_single_frame(stub, [data.clips[c] for c in train], spec,
                             on_epoch=lambda e, r: log.info("epoch %d loss %.5f", e, r.losses[-1]))
    scores = _single_frame_scores(stub, data, val)
    _save_model(args.out, stub, cfg, args, {"clips": data.root / "clips.csv"}, {"kind": "stub"})
    write_csv(f"{args.out}.losses.csv", ["epoch", "loss"], [[i, v] for i, v in enumerate(res.losses)])
    return f"train-single: loss {res.losses[-1]:.4f}, val mIoU {scores:.4f} -> {args.out}"


def _single_frame_scores(stub, data, ids, frame=TIME_ANCHOR) -> float:
    if not ids:
        return float("nan")
    cm = ConfusionMatrix(stub.cfg.classes)
    with no_grad():
        for c in ids:
            logits = stub(to_batch(data.clips[c].frames[frame][None], stub.fuse.weight.dtype)).data[0]
            cm.update(argmax_labels(logits), data.clips[c].labels[frame])
    return miou(cm)


def cmd_extract(args, cfg):
    _need(args, "data", "stub", "out")
    data = ClipSet(args.data)
    stub = _load_stub(args.stub, cfg.dtype)
    recs = []
    with no_grad():
        for cid, clip in data.clips.items():
            for b in range(0, len(clip.frames), 10):
                feats = stub.features(to_batch(clip.frames[b:b + 10], cfg.dtype)).data
                recs.extend((cid, b + i, f) for i, f in enumerate(feats))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_feature_cache(args.out, recs)
    _manifest(f"{args.out}.manifest", cfg, args, {"clips": data.root / "clips.csv", "stub": args.stub})
    return f"extract: {len(recs)} feature maps of shape {recs[0][2].shape} -> {args.out}"


def _f2f_cfg(args, cfg: RunConfig):
    over = {}
    if args.variant:
        over["variant"] = args.variant
    if args.layers:
        over["n_layers"] = args.layers
    if args.frames:
        frames = _int_list(args.frames, "frames")
        if len(frames) != 1:
            raise UsageError("--frames takes a single value here")
        over["frames"] = frames[0]
    f2f_cfg = dataclasses.replace(cfg.f2f, channels_per_frame=cfg.stub.feat_dim, **over)
    f2f_cfg.validate()
    return f2f_cfg


def cmd_train_f2f(args, cfg):
    _need(args, "data", "cache", "out")
    data = ClipSet(args.data)
    cache = _open_cache(args.cache)
    f2f_cfg = _f2f_cfg(args, cfg)
    offset = args.offset or 3
    train, val = data.ids("train"), data.ids("val")
    normalizer = fit_normalizer(cache, train)
    f2f = build_f2f(f2f_cfg, seed=cfg.seed, dtype=cfg.dtype)
    spec = cfg.spec("f2f_l2", target_offset=offset, frames=f2f_cfg.frames)
    res = train_f2f_l2(f2f, cache, train, spec, normalizer, val_clip_ids=val, n_frames=data.n_frames(train),
                       on_epoch=lambda e, r: log.info("epoch %d loss %.5f", e, r.losses[-1]))
    run_cfg = dataclasses.replace(cfg, f2f=f2f_cfg)
    _save_model(args.out, f2f, run_cfg, args, {"cache": args.cache, "clips": data.root / "clips.csv"},
                {"kind": "f2f", "offset": offset}, normalizer)
    rows = [[i, v, res.val_losses[i] if res.val_losses else ""] for i, v in enumerate(res.losses)]
    write_csv(f"{args.out}.losses.csv", ["epoch", "train_l2", "val_l2"], rows)
    for alarm in res.alarms:
        log.warning("alarm: %s", alarm)
    val_l2 = res.val_losses[-1] if res.val_losses else float("nan")
    return (f"train-f2f: {f2f_cfg.name} T={f2f_cfg.frames} +{offset}, train L2 {res.losses[-1]:.4f}, "
            f"val L2 {val_l2:.4f}, {len(res.alarms)} alarms -> {args.out}")


def _finetune_common(args, cfg, stage):
    _need(args, "data", "cache", "stub", "f2f", "out")
    data = ClipSet(args.data)
    cache = _open_cache(args.cache)
    stub = _load_stub(args.stub, cfg.dtype)
    f2f, normalizer, offset = _load_f2f(args.f2f, cfg.dtype)
    _check_stub_f2f(stub, f2f)
    train = data.ids("train")
    labels = data.labels()
    if stage == "f2f_finetune":
        spec = cfg.spec(stage, target_offset=offset, frames=f2f.cfg.frames)
        res = finetune_f2f(f2f, stub, cache, labels, train, spec, normalizer, n_frames=data.n_frames(train))
    else:
        spec = cfg.spec(stage, target_offset=args.offset or 9, frames=f2f.cfg.frames)
        _check_recurrent(offset, spec.frame_stride, spec.target_offset // spec.frame_stride)
        res = autoregressive_finetune(f2f, stub, cache, labels, train, spec, normalizer,
                                      n_frames=data.n_frames(train))
    run_cfg = dataclasses.replace(cfg, f2f=f2f.cfg)
    inputs = {"cache": args.cache, "stub": args.stub, "f2f": args.f2f, "clips": data.root / "clips.csv"}
    _save_model(args.out, f2f, run_cfg, args, inputs, {"kind": "f2f", "offset": offset}, normalizer)
    _save_model(f"{args.out}.stub", stub, run_cfg, args, inputs, {"kind": "stub"})
    write_csv(f"{args.out}.losses.csv", ["epoch", "loss"], [[i, v] for i, v in enumerate(res.losses)])
    return res, spec


def cmd_finetune(args, cfg):
    res, spec = _finetune_common(args, cfg, "f2f_finetune")
    return f"finetune: +{spec.target_offset}, final loss {res.losses[-1]:.4f} -> {args.out} (+ {args.out}.stub)"


def cmd_finetune_ar(args, cfg):
    res, spec = _finetune_common(args, cfg, "autoregressive_finetune")
    steps = spec.target_offset // spec.frame_stride
    return (f"finetune-ar: {steps} steps to +{spec.target_offset}, final loss {res.losses[-1]:.4f} "
            f"-> {args.out} (+ {args.out}.stub)")


def _eval_setup(args):
    _need(args, "data", "cache", "stub")
    data = ClipSet(args.data)
    cache = _open_cache(args.cache)
    return data, cache


def _check_recurrent(offset: int, stride: int, steps: int):
    # feeding a forecast back as the newest frame only makes sense at the input stride
    if steps > 1 and offset != stride:
        raise UsageError(f"recurrent use needs a +{stride} model, this one forecasts +{offset}")


def _anchor_ok(data, ids, horizon):
    n = data.n_frames(ids)
    if TIME_ANCHOR + horizon >= n:
        raise DataError(f"horizon +{horizon} from frame {TIME_ANCHOR} needs clips longer than {n} frames")


def cmd_forecast(args, cfg):
    _need(args, "f2f", "out")
    data, cache = _eval_setup(args)
    stub = _load_stub(args.stub, cfg.dtype)
    f2f, normalizer, offset = _load_f2f(args.f2f, cfg.dtype)
    _check_stub_f2f(stub, f2f)
    steps = args.steps or 1
    _check_recurrent(offset, 3, steps)
    val = data.ids("val")
    _anchor_ok(data, val, offset * steps)
    ev = Evaluator(stub, cache, data.labels(), val)
    probs = ev.forecast_probs(f2f, offset, normalizer, steps)
    target = TIME_ANCHOR + offset * steps
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    pred = argmax_labels(probs, axis=1)
    rows = []
    for i, (c, p) in enumerate(zip(val, pred)):
        write_pgm(out / f"clip_{c:05d}_t{target:02d}.pgm", p.astype(np.uint8))
        s = score_probs(probs[i:i + 1], ev.labels, [c], target, ev.classes, ev.moving)
        rows.append([c, target, s.miou])
    write_csv(out / "forecast.csv", ["clip", "frame", "miou"], rows)
    scores = ev.score(probs, target)
    _manifest(out / "manifest.txt", cfg, args, {"cache": args.cache, "stub": args.stub, "f2f": args.f2f})
    return f"forecast: {len(val)} clips at t+{offset * steps} ({steps} x +{offset}), mIoU {scores.miou:.4f} -> {out}"


def cmd_evaluate(args, cfg):
    _need(args, "f2f", "out")
    data, cache = _eval_setup(args)
    stub = _load_stub(args.stub, cfg.dtype)
    f2f, normalizer, offset = _load_f2f(args.f2f, cfg.dtype)
    _check_stub_f2f(stub, f2f)
    steps = args.steps or 1
    _check_recurrent(offset, 3, steps)
    horizon = offset * steps
    val = data.ids("val")
    _anchor_ok(data, val, horizon)
    ev = Evaluator(stub, cache, data.labels(), val)
    rows = []
    for name, s in [("oracle", ev.oracle(horizon)), ("forecast", ev.forecast(f2f, offset, normalizer, steps)),
                    ("copy-last", ev.copy_last(horizon))]:
        rows.append([name, horizon, s.miou, s.miou_mo])
    if args.lam is not None:
        if steps != 1:
            raise UsageError("--lambda combines single-step forecasts; drop --steps")
        # current frame t+offset, its forecast made from frames ending at t
        target = TIME_ANCHOR + offset
        single = ev.score(ev.single_frame_probs(target), target)
        ens = ev.ensemble(f2f, offset, normalizer, args.lam, target_frame=target)
        rows.append(["single-frame", 0, single.miou, single.miou_mo])
        rows.append([f"ensemble-{args.lam:g}", 0, ens.miou, ens.miou_mo])
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, ["method", "horizon", "miou", "miou_mo"], rows)
    _manifest(f"{args.out}.manifest", cfg, args, {"cache": args.cache, "stub": args.stub, "f2f": args.f2f})
    body = ", ".join(f"{r[0]} {r[2]:.4f}" for r in rows)
    return f"evaluate: +{horizon}: {body} -> {args.out}"


def cmd_ablate(args, cfg):
    _need(args, "out")
    data, cache = _eval_setup(args)
    stub = _load_stub(args.stub, cfg.dtype)
    variants = (args.variants or cfg.f2f.variant).split(",")
    layers = args.layers or cfg.f2f.n_layers
    frames = _int_list(args.frames, "frames") if args.frames else [cfg.f2f.frames]
    offset = args.offset or 9
    train, val = data.ids("train"), data.ids("val")
    _anchor_ok(data, val, offset)
    normalizer = fit_normalizer(cache, train)
    ev = Evaluator(stub, cache, data.labels(), val)
    rows = []
    for variant in variants:
        for t in frames:
            f2f_cfg = dataclasses.replace(cfg.f2f, variant=variant.strip(), n_layers=layers, frames=t,
                                          channels_per_frame=cfg.stub.feat_dim)
            f2f_cfg.validate()
            f2f = build_f2f(f2f_cfg, seed=cfg.seed, dtype=cfg.dtype)
            spec = cfg.spec("f2f_l2", target_offset=offset, frames=t)
            train_f2f_l2(f2f, cache, train, spec, normalizer, n_frames=data.n_frames(train))
            vx, vy = stack_samples(cache, forecast_samples(cache, val, t, offset, n_frames=data.n_frames(val)),
                                   normalizer, f2f.layers[0].weight.dtype)
            s = ev.forecast(f2f, offset, normalizer)
            rows.append([f2f_cfg.name, f2f_cfg.variant, layers, t, count_parameters(f2f), evaluate_l2(f2f, vx, vy),
                         s.miou, s.miou_mo])
            log.info("%s T=%d: mIoU %.4f", f2f_cfg.name, t, s.miou)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_csv(args.out, ["model", "variant", "layers", "frames", "params", "val_l2", "miou", "miou_mo"], rows)
    _manifest(f"{args.out}.manifest", cfg, args, {"cache": args.cache, "stub": args.stub})
    body = ", ".join(f"{r[0]}/T{r[3]} {r[6]:.4f}" for r in rows)
    return f"ablate: +{offset}: {body} -> {args.out}"


def motion_probe(labels_last: np.ndarray, labels_target: np.ndarray, moving_ids) -> tuple[int, int]:
    """Heuristic probe pixel: the newly covered moving-object pixel nearest their centroid.

    Falls back to any moving pixel in the target frame, then to the image centre.
    """
    moving = np.isin(labels_target, list(moving_ids))
    cand = moving & (labels_target != labels_last)
    if not cand.any():
        cand = moving
    if not cand.any():
        h, w = labels_target.shape
        return h // 2, w // 2
    ys, xs = np.nonzero(cand)
    i = int(np.argmin((ys - ys.mean()) ** 2 + (xs - xs.mean()) ** 2))
    return int(ys[i]), int(xs[i])


def cmd_probe_erf(args, cfg):
    _need(args, "data", "stub", "f2f", "out")
    data = ClipSet(args.data)
    stub = _load_stub(args.stub, cfg.dtype)
    f2f, normalizer, offset = _load_f2f(args.f2f, cfg.dtype)
    _check_stub_f2f(stub, f2f)
    val = data.ids("val")
    clip_id = args.clip if args.clip is not None else (val[0] if val else min(data.clips))
    if clip_id not in data.clips:
        raise DataError(f"clip {clip_id} not in {data.root}")
    clip = data.clips[clip_id]
    frames = input_frames(TIME_ANCHOR, f2f.cfg.frames)
    target = TIME_ANCHOR + offset
    if args.probe:
        r, c = _int_list(args.probe, "probe")
    else:
        r, c = motion_probe(clip.labels[TIME_ANCHOR], clip.labels[min(target, len(clip) - 1)],
                            stub.cfg.moving_class_ids)
    rep = erf_probe(stub, f2f, [clip.frames[f] for f in frames], (r, c), args.k, normalizer)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_erf(args.out, rep)
    _manifest(f"{args.out}.manifest", cfg, args, {"stub": args.stub, "f2f": args.f2f})
    cents = ", ".join("-" if ct is None else f"{ct[1]:.1f}" for ct in rep.centroids())
    flag = " (zero gradient, masks empty)" if rep.flagged else ""
    return f"probe-erf: clip {clip_id} pixel ({r},{c}) k={rep.k}, mask centroid x per frame [{cents}]{flag} -> {args.out}"


def cmd_error_map(args, cfg):
    _need(args, "data", "cache", "f2f", "out")
    data = ClipSet(args.data)
    cache = _open_cache(args.cache)
    f2f, normalizer, offset = _load_f2f(args.f2f, cfg.dtype)
    steps = args.steps or 1
    val = data.ids("val")
    if not val:
        raise DataError("error-map needs validation clips")
    _anchor_ok(data, val, offset * steps)
    pred = forecast_features(f2f, cache, val, offset, normalizer, steps)
    target = [cache.get(c, TIME_ANCHOR + offset * steps) for c in val]
    emap = mse_error_map(list(pred), target)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_error_map(args.out, emap)
    _manifest(f"{args.out}.manifest", cfg, args, {"cache": args.cache, "f2f": args.f2f})
    r, c = np.unravel_index(int(np.argmax(emap)), emap.shape)
    return f"error-map: +{offset * steps}, mean {emap.mean():.5f}, max at feature pixel ({r},{c}) -> {args.out}"


def cmd_report(args, cfg):
    _need(args, "f2f", "out")
    data, cache = _eval_setup(args)
    stub = _load_stub(args.stub, cfg.dtype)
    f2f, normalizer, offset = _load_f2f(args.f2f, cfg.dtype)
    _check_stub_f2f(stub, f2f)
    max_steps = args.steps or 3
    _check_recurrent(offset, 3, max_steps)
    val = data.ids("val")
    _anchor_ok(data, val, offset * max_steps)
    ev = Evaluator(stub, cache, data.labels(), val)
    rows = {f"AR-{offset * k}": ev.forecast(f2f, offset, normalizer, k).cm for k in range(1, max_steps + 1)}
    names = CLASS_NAMES if stub.cfg.classes == len(CLASS_NAMES) else [f"class{i}" for i in range(stub.cfg.classes)]
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    write_report(args.out, rows, names)
    _manifest(f"{args.out}.manifest", cfg, args, {"cache": args.cache, "stub": args.stub, "f2f": args.f2f})
    body = ", ".join(f"{k} {miou(cm):.4f}" for k, cm in rows.items())
    return f"report: {body} -> {args.out}"


COMMANDS = {
    "generate": (cmd_generate, "render synthetic clips and the train/val split"),
    "train-single": (cmd_train_single, "train the single-frame segmentation model"),
    "extract": (cmd_extract, "cache extractor features for every frame"),
    "train-f2f": (cmd_train_f2f, "train an F2F forecaster with the feature L2 loss"),
    "finetune": (cmd_finetune, "fine-tune F2F and head with averaged L2 and cross-entropy gradients"),
    "finetune-ar": (cmd_finetune_ar, "fine-tune a short-term F2F through its unrolled recurrence"),
    "forecast": (cmd_forecast, "write forecast label maps for the validation clips"),
    "evaluate": (cmd_evaluate, "score oracle, forecast and copy-last (and optionally the ensemble)"),
    "ablate": (cmd_ablate, "train and score a sweep of variants and frame counts"),
    "probe-erf": (cmd_probe_erf, "effective receptive field of one forecast pixel"),
    "error-map": (cmd_error_map, "spatial map of the mean squared feature forecast error"),
    "report": (cmd_report, "per-class IoU table for autoregressive horizons"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("common")
    g.add_argument("--config", help="key=value run config or a manifest from an earlier run")
    g.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key (repeatable)")
    g.add_argument("--seed", type=int, help="seed for model init and data order (overrides config)")
    g.add_argument("--precision", choices=["single", "double"], help="float32 or float64 compute")
    g.add_argument("--out", help="output path (file, prefix or directory depending on the command)")
    g.add_argument("--jobs", type=int, help="maximum worker processes (used by generate)")
    g.add_argument("--verbose", action="store_true", help="log progress to stderr")
    io = common.add_argument_group("inputs")
    io.add_argument("--data", help="clip directory written by generate")
    io.add_argument("--cache", help="feature cache written by extract")
    io.add_argument("--stub", help="single-frame model checkpoint")
    io.add_argument("--f2f", help="F2F checkpoint")
    m = common.add_argument_group("model and horizon")
    m.add_argument("--variant", choices=["plain", "dilated", "deformable"], help="F2F variant")
    m.add_argument("--variants", help="comma-separated variants for ablate")
    m.add_argument("--layers", type=int, help="number of F2F layers N")
    m.add_argument("--frames", help="input frames T (ablate accepts a comma-separated list)")
    m.add_argument("--offset", type=int, choices=[3, 9], help="target offset in frames")
    m.add_argument("--steps", type=int, help="autoregressive steps (forecast, evaluate, error-map, report)")
    m.add_argument("--lambda", dest="lam", type=float, help="ensemble weight of the current-frame prediction")
    m.add_argument("--k", type=int, help="ERF mask size (default 0.15%% of the image)")
    m.add_argument("--clip", type=int, help="clip id for probe-erf (default: first validation clip)")
    m.add_argument("--probe", help="probe pixel as row,col (default: motion heuristic)")

    parser = _Parser(prog="f2f", description="Feature-to-feature semantic segmentation forecasting on "
                                             "synthetic moving-shapes clips.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    sub.required = True
    for name, (_, help_text) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_text, description=help_text)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        summary = COMMANDS[args.command][0](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"f2f {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CheckpointError as exc:
        print(f"f2f {args.command}: checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except DataError as exc:
        print(f"f2f {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    print(summary)
    return 0


if __name__ == "__main__":
    sys.exit(main())
