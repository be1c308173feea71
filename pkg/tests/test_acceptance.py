"""Acceptance suite: one test and one PASS/FAIL line per criterion.

The benchmark criteria share a single five-seed run (about 45 minutes on
one core), built lazily by the ``bench`` fixture.
"""

import hashlib
import math
import os
import time
from dataclasses import replace
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest

from f2f.benchmark import BenchmarkConfig, forecast_features, prepare, run_seed
from f2f.cli import main as cli_main
from f2f.datagen import TIME_ANCHOR, generate_clip, input_frames
from f2f.deform import DeformConvLayer, OffsetField, deform_conv2d, deform_conv2d_raw
from f2f.evaluation import ConfusionMatrix, default_k, erf_probe, miou, miou_mo, mse_error_map
from f2f.functional import (adaptive_avg_pool2d, avg_pool2d, conv2d, cross_entropy, dilated_conv2d, l2_loss,
                            log_max_softmax, log_softmax, sample_points, softmax, upsample_bilinear,
                            upsample_nearest)
from f2f.gradcheck import check_gradients
from f2f.models import F2FConfig, build_f2f, count_parameters, param_count_closed_form
from f2f.pipeline import TrainSpec, ensemble, finetune_f2f
from f2f.stub import SingleFrameModel, StubConfig
from f2f.tensor import (Tensor, concat, exp, log, max_, mean, relu, reshape, sigmoid, square, stack, sum_,
                        transpose)
from oracles import naive_conv2d

LINES: list[str] = []
SEEDS = (0, 1, 2, 3, 4)
BUDGET_S = 3600.0


def report(name: str, ok: bool, detail: str):
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail}"
    LINES.append(line)
    print(line)
    assert ok, line


def count_ok(flags) -> int:
    return int(sum(bool(f) for f in flags))


# -- 1. parameter counts --------------------------------------------------

def test_c01_parameter_counts():
    t = time.perf_counter()
    expected = [("plain", 5, 512, 1_295_360), ("dilated", 5, 512, 1_295_360), ("deformable", 5, 512, 1_419_884),
                ("deformable", 8, 512, 1_956_029), ("deformable", 8, 1024, 2_808_509)]
    got = []
    for variant, n, d, want in expected:
        cfg = F2FConfig(variant=variant, n_layers=n, frames=4, channels_per_frame=d, hidden=128)
        got.append((count_parameters(build_f2f(cfg)), param_count_closed_form(cfg), want))
    elapsed = time.perf_counter() - t
    ok = all(a == b == w for a, b, w in got) and elapsed < 1.0
    report("1 parameter counts", ok, f"{[a for a, _, _ in got]} in {elapsed:.2f}s")


# -- 2. gradient suite ----------------------------------------------------

def _p(rng, *shape, lo=None):
    data = rng.standard_normal(shape) if lo is None else rng.uniform(lo, lo + 1.5, size=shape)
    return Tensor(data, requires_grad=True)


def _proj(out, seed):
    """Scalar <out, R> with a fixed random R, identical on every call."""
    return (out * Tensor(np.random.default_rng(seed).standard_normal(out.shape))).sum()


def _away_from_kinks(rng, *shape):
    """Values at least 0.05 from zero, so relu/max are differentiable at +-1e-5."""
    v = rng.standard_normal(shape)
    return Tensor(np.sign(v) * (np.abs(v) + 0.05), requires_grad=True)


def _non_integer(rng, shape, lo, hi):
    v = rng.uniform(lo, hi, size=shape)
    frac = v - np.floor(v)
    return np.floor(v) + np.clip(frac, 0.05, 0.95)


def gradient_cases(seed):
    rng = np.random.default_rng(seed)
    n, c, h, w = 1 + seed % 2, 2 + seed % 2, 4, 4 + 2 * (seed % 2)
    q = 10_000 + seed
    a, b = _p(rng, n, c, h, w), _p(rng, n, c, h, w)
    pos = _p(rng, n, c, h, w, lo=0.5)
    kink = _away_from_kinks(rng, n, c, h, w)
    wt, bias = _p(rng, 3, c, 3, 3), _p(rng, 3)
    stride, dil = 1 + seed % 2, 1 + (seed // 2) % 2
    labels = rng.integers(0, c, size=(n, h, w))
    labels[0, 0, 0] = 255
    ys = Tensor(_non_integer(rng, (2, 5), -0.8, h - 0.2), requires_grad=True)
    xs = Tensor(_non_integer(rng, (2, 5), -0.8, w - 0.2), requires_grad=True)
    off = Tensor(_non_integer(rng, (n, 18, h, w), -2.0, 2.0), requires_grad=True)
    mod = _p(rng, n, 9, h, w)
    layer = DeformConvLayer(c, 2, rng=rng, dtype=np.float64)
    layer.bias.data = rng.standard_normal(2)
    layer.offset_weight.data = rng.standard_normal(layer.offset_weight.shape) * 0.01
    layer.offset_bias.data = _non_integer(rng, layer.offset_bias.shape, -1.5, 1.5)
    f2f = build_f2f(F2FConfig(variant=("plain", "dilated", "deformable")[seed % 3], n_layers=3, frames=2,
                              channels_per_frame=c, hidden=3), seed=seed, dtype=np.float64)
    for p in f2f.parameters():
        p.data = rng.standard_normal(p.shape) * 0.3
    if f2f.cfg.variant == "deformable":
        for lay in f2f.layers:
            if isinstance(lay, DeformConvLayer):
                lay.offset_bias.data = _non_integer(rng, lay.offset_bias.shape, -1.5, 1.5)
                lay.offset_weight.data *= 0.01
    stub = SingleFrameModel(StubConfig(feat_dim=4, head_width=4, spp_width=2, classes=3, moving_class_ids=[2],
                                       spp_grids=[1, 2]), seed=seed, dtype=np.float64)
    img = _p(rng, 1, 1, 16, 16)
    img_labels = rng.integers(0, 3, size=(1, 16, 16))
    return {
        "add/sub": (lambda: _proj(a + b - a * 0.5, q), [a, b]),
        "mul/div": (lambda: _proj(a * b / pos, q), [a, b, pos]),
        "relu": (lambda: _proj(relu(kink), q), [kink]),
        "sigmoid": (lambda: _proj(sigmoid(a), q), [a]),
        "exp/log": (lambda: _proj(exp(a * 0.3) + log(pos), q), [a, pos]),
        "square": (lambda: _proj(square(a), q), [a]),
        "sum/mean": (lambda: sum_(a * b, axis=1).sum() + mean(square(a)), [a, b]),
        "max": (lambda: _proj(max_(a, axis=1), q), [a]),
        "reshape/transpose": (lambda: _proj(transpose(reshape(a, (n, c, h * w)), (0, 2, 1)), q), [a]),
        "getitem": (lambda: _proj(a[:, :, 1:3, ::2], q), [a]),
        "concat/stack": (lambda: _proj(concat([a, b], axis=1), q) + _proj(stack([a, b], axis=0), q), [a, b]),
        "conv2d": (lambda: _proj(conv2d(a, wt, bias, stride=stride, dilation=dil, padding=dil), q), [a, wt, bias]),
        "dilated_conv2d": (lambda: _proj(dilated_conv2d(a, wt, bias, dilation=2), q), [a, wt, bias]),
        "avg_pool2d": (lambda: _proj(avg_pool2d(a, (2, 2)), q), [a]),
        "adaptive_avg_pool2d": (lambda: _proj(adaptive_avg_pool2d(a, 2), q), [a]),
        "upsample_nearest": (lambda: _proj(upsample_nearest(a, 2), q), [a]),
        "upsample_bilinear": (lambda: _proj(upsample_bilinear(a, 2), q), [a]),
        "sample_points": (lambda: _proj(sample_points(a[0], ys, xs), q), [a, ys, xs]),
        "softmax": (lambda: _proj(softmax(a, axis=1), q), [a]),
        "log_softmax": (lambda: _proj(log_softmax(a, axis=1), q), [a]),
        "log_max_softmax": (lambda: _proj(log_max_softmax(a), q), [a]),
        "l2_loss": (lambda: l2_loss(a, b), [a, b]),
        "cross_entropy": (lambda: cross_entropy(a, labels), [a]),
        "deform_conv2d (x, offsets, modulation, weight, bias)":
            (lambda: _proj(deform_conv2d_raw(a, off, mod, wt, bias), q), [a, off, mod, wt, bias]),
        "deformable layer": (lambda: _proj(layer(a), q),
                             [a, layer.weight, layer.bias, layer.offset_weight, layer.offset_bias]),
        f"F2F model ({f2f.cfg.variant})": (lambda: _proj(f2f([a, b]), q), [a, b] + f2f.parameters()),
        "stub end to end": (lambda: cross_entropy(stub(img), img_labels), [img] + stub.parameters()[:3]),
    }


def test_c02_gradient_suite():
    t = time.perf_counter()
    worst, worst_name, checks = 0.0, "", 0
    for seed in range(20):
        for name, (fn, params) in gradient_cases(seed).items():
            err = max(check_gradients(fn, params, eps=1e-5))
            checks += 1
            if err > worst:
                worst, worst_name = err, f"{name} (config {seed})"
    elapsed = time.perf_counter() - t
    ok = worst <= 1e-4 and elapsed < 120
    report("2 gradient suite", ok, f"{checks} checks over 20 configs, worst rel err {worst:.2e} "
                                   f"[{worst_name}], {elapsed:.0f}s")


# -- 3. operator equivalences ---------------------------------------------

def test_c03_operator_equivalences():
    rng = np.random.default_rng(0)
    errs = {"deform=conv": 0.0, "deform=dilated": 0.0, "conv=naive": 0.0}
    for trial in range(5):
        n, cin, cout, h, w = 2, 3, 4, 6, 7
        layer = DeformConvLayer(cin, cout, rng=rng, dtype=np.float64)
        layer.bias.data = rng.standard_normal(cout)
        x = Tensor(rng.standard_normal((n, cin, h, w)))
        zero = OffsetField(Tensor(np.zeros((n, 18, h, w))), Tensor(rng.standard_normal((n, 9, h, w))))
        out = deform_conv2d(layer, x, zero, unit_modulation=True).data
        errs["deform=conv"] = max(errs["deform=conv"],
                                  np.abs(out - conv2d(x, layer.weight, layer.bias, padding=1).data).max())
        d = 2 + trial % 2
        off = np.zeros((n, 18, h, w))
        for i in range(3):
            for j in range(3):
                off[:, 2 * (3 * i + j)] = (d - 1) * (i - 1)
                off[:, 2 * (3 * i + j) + 1] = (d - 1) * (j - 1)
        field = OffsetField(Tensor(off), Tensor(np.zeros((n, 9, h, w))))
        out = deform_conv2d(layer, x, field, unit_modulation=True).data
        errs["deform=dilated"] = max(errs["deform=dilated"], np.abs(
            out - dilated_conv2d(x, layer.weight, layer.bias, dilation=d).data).max())
        for stride, dil, pad in [(1, 1, 1), (2, 1, 0), (1, 2, 2), (2, 2, 1)]:
            wt, b = rng.standard_normal((cout, cin, 3, 3)), rng.standard_normal(cout)
            fast = conv2d(x, Tensor(wt), Tensor(b), stride=stride, dilation=dil, padding=pad).data
            slow = naive_conv2d(x.data, wt, b, stride=stride, dilation=dil, padding=pad)
            errs["conv=naive"] = max(errs["conv=naive"], np.abs(fast - slow).max())
    ok = errs["deform=conv"] <= 1e-12 and errs["deform=dilated"] <= 1e-9 and errs["conv=naive"] <= 1e-12
    report("3 operator equivalences", ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


# -- shared benchmark run -------------------------------------------------

def _band_rows(cfg: BenchmarkConfig) -> tuple[int, int]:
    s = cfg.stub.downsample
    lo, hi = cfg.world.band
    return lo // s, -(-hi // s) - 1


def _probe_models(prep, seed):
    def probe(models):
        ev, stub, cfg = prep.evaluator, prep.stub, prep.cfg
        out = {}
        # ERF on a single left-to-right trajectory at the world's slowest speed, so the
        # whole path from t-9 to t+9 stays within reach of the forecaster
        world = replace(cfg.world, n_frames=TIME_ANCHOR + 10, objects=(1, 1), buildings=(0, 0),
                        speed=(cfg.world.speed[0], cfg.world.speed[0]))
        clip = generate_clip(world, 10_000 + seed)
        obj = clip.objects[0]
        cx, cy = obj.centre(TIME_ANCHOR + 9)
        r, c = min(max(int(cy), 0), world.height - 1), min(max(int(cx), 0), world.width - 1)
        k = default_k(world.height, world.width)
        frames = input_frames(TIME_ANCHOR, cfg.frames)
        rep = erf_probe(stub, models["mid"], [clip.frames[f] for f in frames], (r, c), k, prep.normalizer)
        mags = rep.magnitudes[-1]
        out["erf_k_ok"] = bool((mags > rep.threshold).sum() < k <= rep.masks[-1].sum()) and not rep.flagged
        out["erf_x"] = [None if ct is None else ct[1] for ct in rep.centroids()]
        out["erf_true_x"] = [obj.centre(f)[0] for f in frames]
        # error maps in raw feature space
        for name, model, offset in (("short", models["short"], 3), ("mid", models["mid"], 9)):
            pred = forecast_features(model, prep.cache, ev.clip_ids, offset, prep.normalizer)
            true = [prep.cache.get(cid, TIME_ANCHOR + offset) for cid in ev.clip_ids]
            emap = mse_error_map(list(pred), true)
            out[f"emap_{name}_mean"] = float(emap.mean())
            out[f"emap_{name}_argmax"] = tuple(int(i) for i in np.unravel_index(int(np.argmax(emap)), emap.shape))
        return out
    return probe


@pytest.fixture(scope="module")
def bench():
    cfg = BenchmarkConfig()
    t = time.time()
    prep = prepare(cfg)
    results = [run_seed(prep, s, probe=_probe_models(prep, s)) for s in SEEDS]
    return {"cfg": cfg, "prep": prep, "results": results, "elapsed": time.time() - t}


PP = 0.01  # one percentage point of mIoU


def _orderings(r):
    return {
        "a": (r["oracle_mid"] - r["forecast_mid"] >= 2 * PP and r["forecast_mid"] - r["copy_mid"] >= 2 * PP),
        "b": (r["deformable_mid"] - r["plain_mid"] >= 2 * PP and r["deformable_mid"] - r["dilated_mid"] >= 2 * PP),
        "c": (r["frames2_mid"] - r["frames1_mid"] >= 3 * PP and r["frames4_mid"] >= r["frames2_mid"] - 0.5 * PP),
        "d": (r["forecast_mid"] >= r["ar3_mid"] and r["ar3ft_mid"] >= r["ar3_mid"]),
    }


def _fmt(results, *keys):
    return "; ".join("s{}: {}".format(r["seed"], " ".join(f"{r[k]:.3f}" for k in keys)) for r in results)


@pytest.mark.parametrize("part", ["a", "b", "c", "d"])
def test_c04_benchmark_orderings(bench, part):
    res = bench["results"]
    holds = count_ok(_orderings(r)[part] for r in res)
    keys = {"a": ("oracle_mid", "forecast_mid", "copy_mid"),
            "b": ("deformable_mid", "plain_mid", "dilated_mid"),
            "c": ("frames1_mid", "frames2_mid", "frames4_mid"),
            "d": ("forecast_mid", "ar3_mid", "ar3ft_mid")}[part]
    within = bench["elapsed"] < BUDGET_S
    report(f"4{part} benchmark ordering", holds >= 4 and within,
           f"holds in {holds}/{len(res)} seeds, run {bench['elapsed'] / 60:.0f} min [{', '.join(keys)}] {_fmt(res, *keys)}")


def test_c05_finetune(bench):
    res = bench["results"]
    deltas = [r["ft_mid"] - r["forecast_mid"] for r in res]
    prep = bench["prep"]
    # exact averaging on captured gradients of the benchmark data, one SGD step
    f2f = build_f2f(bench["cfg"].f2f_config(), seed=0)
    head = SingleFrameModel(prep.stub.cfg, seed=0)
    for dst, src in zip(head.parameters(), prep.stub.parameters()):
        dst.data = src.data.copy()
    before = {k: p.data.copy() for k, p in f2f.named_parameters().items()}
    captured = []
    spec = TrainSpec.for_stage("f2f_finetune", epochs=1, batch_size=8, target_offset=9)
    finetune_f2f(f2f, head, prep.cache, prep.labels, prep.world.train_ids[:8], spec, prep.normalizer,
                 n_frames=prep.n_train_frames, grad_hook=lambda s, g: captured.append(g))
    g = captured[0]
    exact = all(np.array_equal(g["applied"][k], (g["l2"][k] + g["ce"][k]) / 2) for k in g["l2"])
    lr = np.float32(spec.lr)
    stepped = all(np.array_equal(f2f.named_parameters()[k].data, before[k] - lr * g["applied"][k].astype(np.float32))
                  for k in g["l2"])
    ok = all(d >= -0.2 * PP for d in deltas) and exact and stepped and len(captured) == 1
    report("5 fine-tuning", ok, f"delta mIoU pp {[round(100 * d, 2) for d in deltas]}, "
                                f"applied == (g_L2 + g_CE)/2 exactly: {exact}, SGD used it: {stepped}")


def test_c06_ensemble(bench):
    res = bench["results"]
    best = [max(r[f"ensemble_{lam}"] for lam in (0.7, 0.75, 0.8, 0.85, 0.9)) - r["single_now"] for r in res]
    rng = np.random.default_rng(0)
    pc, pf = rng.dirichlet(np.ones(6), size=(2, 4, 5)).transpose(0, 3, 1, 2), rng.uniform(size=(2, 6, 4, 5))
    exact = (np.array_equal(ensemble(pc, pf, 1.0), pc) and np.array_equal(ensemble(pc, pf, 0.0), pf)
             and np.array_equal(ensemble(pc, pf, 0.8), 0.8 * pc + (1.0 - 0.8) * pf))
    ok = all(b >= -0.1 * PP for b in best) and exact
    report("6 ensemble", ok, f"best ensemble - single pp {[round(100 * b, 2) for b in best]}, "
                             f"arithmetic exact at 0/1/0.8: {exact}")


def test_c07_erf(bench):
    res = bench["results"]
    k_ok = all(r["erf_k_ok"] for r in res)
    mono = count_ok(all(x is not None for x in r["erf_x"]) and all(np.diff(r["erf_x"]) >= 0) for r in res)
    desc = "; ".join(f"s{r['seed']}: [{', '.join('-' if x is None else f'{x:.1f}' for x in r['erf_x'])}]"
                     for r in res)
    report("7 ERF probe", k_ok and mono >= 4, f"k pixels: {k_ok}, centroid x non-decreasing t-9..t in {mono}/{len(res)} seeds ({desc})")


def test_c08_error_map(bench):
    res = bench["results"]
    lo, hi = _band_rows(bench["cfg"])
    larger = all(r["emap_mid_mean"] >= r["emap_short_mean"] for r in res)
    in_band = all(lo <= r[f"emap_{h}_argmax"][0] <= hi for r in res for h in ("short", "mid"))
    means = "; ".join("{:.4f}/{:.4f}".format(r["emap_short_mean"], r["emap_mid_mean"]) for r in res)
    report("8 error map", larger and in_band,
           f"mid >= short mean in all seeds: {larger}, max row in band rows {lo}..{hi}: {in_band} "
           f"(short/mid means {means})")


def test_c09_metrics(bench):
    gt = np.array([[0, 0, 1], [1, 2, 2]])
    pred = np.array([[0, 1, 1], [1, 2, 0]])
    # class 0: tp 1, fp 1, fn 1 -> 1/3; class 1: tp 2, fp 1 -> 2/3; class 2: tp 1, fn 1 -> 1/2
    cm = ConfusionMatrix(3).update(pred, gt)
    hand = (Fraction(1, 3) + Fraction(2, 3) + Fraction(1, 2)) / 3
    hand_mo = (Fraction(2, 3) + Fraction(1, 2)) / 2
    exact = (cm.counts.tolist() == [[1, 1, 0], [0, 2, 0], [1, 0, 1]]
             and math.isclose(miou(cm), float(hand), rel_tol=2 ** -52) and Fraction(miou(cm)).limit_denominator(100) == hand
             and math.isclose(miou_mo(cm, [1, 2]), float(hand_mo), rel_tol=2 ** -52))
    res = bench["results"]
    curve = [float(np.mean([r[f"ar{k}"] for r in res])) for k in range(1, 7)]
    mono = all(b <= a for a, b in zip(curve, curve[1:]))
    report("9 metrics", exact and mono, f"hand-counted mIoU exact: {exact}; AR-3k mean mIoU k=1..6 "
                                        f"{[round(v, 4) for v in curve]} non-increasing: {mono}")


# -- 10. CLI determinism --------------------------------------------------

TINY = """\
precision=double
clips=8
world.n_frames=29
stub.feat_dim=8
stub.head_width=8
stub.spp_width=4
f2f.hidden=6
f2f.n_layers=3
f2f.channels_per_frame=8
train.epochs=1
train.single_frame.frames_per_clip=2
"""


def _chain():
    """Every CLI command, without its config flag."""
    return [
        ["generate", "--out", "data"],
        ["train-single", "--data", "data", "--out", "stub.f2fw"],
        ["extract", "--data", "data", "--stub", "stub.f2fw", "--out", "feats.f2fc"],
        ["train-f2f", "--data", "data", "--cache", "feats.f2fc", "--offset", "3", "--out", "short.f2fw"],
        ["train-f2f", "--data", "data", "--cache", "feats.f2fc", "--offset", "9", "--out", "mid.f2fw"],
        ["finetune", "--data", "data", "--cache", "feats.f2fc", "--stub", "stub.f2fw", "--f2f", "mid.f2fw",
         "--out", "ft.f2fw"],
        ["finetune-ar", "--data", "data", "--cache", "feats.f2fc", "--stub", "stub.f2fw", "--f2f", "short.f2fw",
         "--out", "ar.f2fw"],
        ["forecast", "--data", "data", "--cache", "feats.f2fc", "--stub", "stub.f2fw", "--f2f", "short.f2fw",
         "--steps", "3", "--out", "fc"],
        ["evaluate", "--data", "data", "--cache", "feats.f2fc", "--stub", "stub.f2fw", "--f2f", "short.f2fw",
         "--lambda", "0.8", "--out", "ev.csv"],
        ["ablate", "--data", "data", "--cache", "feats.f2fc", "--stub", "stub.f2fw", "--variants", "plain,deformable",
         "--layers", "3", "--frames", "1,2", "--out", "ab.csv"],
        ["probe-erf", "--data", "data", "--stub", "stub.f2fw", "--f2f", "mid.f2fw", "--k", "5", "--out", "erf"],
        ["error-map", "--data", "data", "--cache", "feats.f2fc", "--f2f", "mid.f2fw", "--out", "em"],
        ["report", "--data", "data", "--cache", "feats.f2fc", "--stub", "stub.f2fw", "--f2f", "short.f2fw",
         "--steps", "3", "--out", "rep.csv"],
    ]


def _digest(root: Path, with_manifests: bool) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name != "tiny.cfg" and (with_manifests or not p.name.endswith(("manifest", "manifest.txt"))):
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


def _run_chain(root: Path, from_manifests: Path | None):
    root.mkdir()
    (root / "tiny.cfg").write_text(TINY)
    cwd = os.getcwd()
    os.chdir(root)
    try:
        for cmd in _chain():
            out = cmd[cmd.index("--out") + 1]
            if from_manifests is None:
                cfg = "tiny.cfg"
            else:
                src = from_manifests / out
                cfg = str(src / "manifest.txt" if src.is_dir() else Path(f"{src}.manifest"))
            assert cli_main([cmd[0], "--config", cfg, *cmd[1:]]) == 0, cmd
    finally:
        os.chdir(cwd)


def test_c10_cli_determinism(tmp_path):
    _run_chain(tmp_path / "a", None)
    _run_chain(tmp_path / "b", None)
    _run_chain(tmp_path / "c", tmp_path / "a")
    a_full, b_full = _digest(tmp_path / "a", True), _digest(tmp_path / "b", True)
    a_out, c_out = _digest(tmp_path / "a", False), _digest(tmp_path / "c", False)
    same_run = a_full == b_full
    same_manifest = a_out == c_out
    report("10 CLI determinism", same_run and same_manifest and len(a_out) > 20,
           f"{len(a_full)} files; identical rerun: {same_run}; rerun from recorded manifests: {same_manifest}")
