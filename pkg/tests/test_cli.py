import re

import numpy as np
import pytest

from f2f.cli import build_parser, main, motion_probe
from f2f.config import RunConfig, load_config, parse_entries
from f2f.errors import ConfigError
from f2f.io import read_csv, read_manifest, write_manifest

TINY = """\
clips=8
val_fraction=0.25
world.n_frames=23
stub.feat_dim=8
stub.head_width=8
stub.spp_width=4
f2f.hidden=6
f2f.n_layers=3
f2f.channels_per_frame=8
train.epochs=1
train.single_frame.frames_per_clip=2
"""


@pytest.fixture
def workdir(tmp_path, monkeypatch):
    monkeypatch.chdir(tmp_path)
    (tmp_path / "tiny.cfg").write_text(TINY)
    return tmp_path


def run(*argv):
    return main(list(argv))


def pipeline(prefix="", extra=()):
    c = ["--config", "tiny.cfg", *extra]
    assert run("generate", *c, "--out", f"{prefix}data") == 0
    assert run("train-single", *c, "--data", f"{prefix}data", "--out", f"{prefix}stub.f2fw") == 0
    assert run("extract", *c, "--data", f"{prefix}data", "--stub", f"{prefix}stub.f2fw",
               "--out", f"{prefix}feats.f2fc") == 0
    assert run("train-f2f", *c, "--data", f"{prefix}data", "--cache", f"{prefix}feats.f2fc", "--offset", "3",
               "--out", f"{prefix}short.f2fw") == 0


class TestConfig:
    def test_defaults_round_trip_through_manifest(self, tmp_path):
        cfg = RunConfig()
        write_manifest(tmp_path / "m", cfg.to_entries())
        assert load_config(tmp_path / "m") == cfg

    def test_sections_and_types(self):
        cfg = parse_entries({"world.speed": "2.0,8.0", "stub.spp_grids": "1,2", "f2f.variant": "plain",
                             "train.epochs": "3", "train.f2f_l2.lr": "0.01", "seed": "4", "world.accelerate": "true"})
        assert cfg.world.speed == (2.0, 8.0) and cfg.stub.spp_grids == [1, 2] and cfg.world.accelerate is True
        spec = cfg.spec("f2f_l2")
        assert (spec.epochs, spec.lr, spec.seed, spec.optimizer) == (3, 0.01, 4, "adam")
        assert cfg.spec("f2f_finetune").lr == 1e-4

    def test_overrides_win(self):
        cfg = parse_entries({"train.f2f_l2.epochs": "3"})
        assert cfg.spec("f2f_l2", epochs=7).epochs == 7

    @pytest.mark.parametrize("key", ["world.nope", "bogus", "train.stage", "train.warmup.epochs", "a.b.c.d"])
    def test_unknown_keys_rejected(self, key):
        with pytest.raises(ConfigError):
            parse_entries({key: "1"})

    def test_bad_values_rejected(self):
        with pytest.raises(ConfigError):
            parse_entries({"clips": "many"})
        with pytest.raises(ConfigError):
            parse_entries({"precision": "half"})
        with pytest.raises(ConfigError):
            parse_entries({"f2f.channels_per_frame": "32"})

    def test_run_keys_are_provenance(self):
        assert parse_entries({"run.command": "generate"}) == RunConfig()


class TestHelp:
    def test_every_flag_is_documented(self, capsys):
        parser = build_parser()
        sub = parser._subparsers._group_actions[0]
        for name, p in sub.choices.items():
            for action in p._actions:
                assert action.help, f"{name}: {action.option_strings} lacks help"
        with pytest.raises(SystemExit) as exc:
            main(["evaluate", "--help"])
        assert exc.value.code == 0
        text = capsys.readouterr().out
        for flag in ["--seed", "--config", "--out", "--variant", "--layers", "--frames", "--offset", "--lambda",
                     "--steps", "--k", "--jobs", "--precision"]:
            assert re.search(re.escape(flag) + r"\b", text), flag

    def test_all_commands_exist(self):
        sub = build_parser()._subparsers._group_actions[0]
        assert list(sub.choices) == ["generate", "train-single", "extract", "train-f2f", "finetune", "finetune-ar",
                                     "forecast", "evaluate", "ablate", "probe-erf", "error-map", "report"]


class TestExitCodes:
    def test_usage(self, workdir):
        with pytest.raises(SystemExit) as exc:
            main(["evaluate", "--offset", "5"])
        assert exc.value.code == 1
        assert run("generate") == 1  # missing --out
        (workdir / "bad.cfg").write_text("world.speed=fast\n")
        assert run("generate", "--config", "bad.cfg", "--out", "d") == 1

    def test_data(self, workdir):
        assert run("train-single", "--config", "tiny.cfg", "--data", "absent", "--out", "s") == 2

    def test_checkpoint(self, workdir):
        pipeline()
        assert run("evaluate", "--config", "tiny.cfg", "--data", "data", "--cache", "feats.f2fc",
                   "--stub", "feats.f2fc", "--f2f", "short.f2fw", "--out", "e.csv") == 3
        assert run("forecast", "--config", "tiny.cfg", "--data", "data", "--cache", "feats.f2fc",
                   "--stub", "stub.f2fw", "--f2f", "stub.f2fw", "--out", "f") == 3


class TestCommands:
    def test_full_chain(self, workdir, capsys):
        pipeline()
        c = ["--config", "tiny.cfg", "--data", "data", "--cache", "feats.f2fc", "--stub", "stub.f2fw"]
        assert run("train-f2f", "--config", "tiny.cfg", "--data", "data", "--cache", "feats.f2fc", "--offset", "9",
                   "--variant", "plain", "--out", "mid.f2fw") == 0
        assert run("forecast", *c, "--f2f", "short.f2fw", "--steps", "3", "--out", "fc") == 0
        assert run("evaluate", *c, "--f2f", "short.f2fw", "--lambda", "0.8", "--out", "ev.csv") == 0
        header, rows = read_csv(workdir / "ev.csv")
        assert header == ["method", "horizon", "miou", "miou_mo"]
        assert [r[0] for r in rows] == ["oracle", "forecast", "copy-last", "single-frame", "ensemble-0.8"]
        assert run("finetune", *c, "--f2f", "mid.f2fw", "--out", "ft.f2fw") == 0
        assert run("finetune-ar", *c, "--f2f", "short.f2fw", "--out", "ar.f2fw") == 0
        assert run("report", *c, "--f2f", "short.f2fw", "--steps", "4", "--out", "rep.csv") == 0
        assert [r[0] for r in read_csv(workdir / "rep.csv")[1]] == ["AR-3", "AR-6", "AR-9", "AR-12"]
        assert run("error-map", *c, "--f2f", "mid.f2fw", "--out", "em") == 0
        assert run("probe-erf", *c, "--f2f", "mid.f2fw", "--k", "5", "--out", "erf") == 0
        assert run("ablate", *c, "--variants", "plain,dilated,deformable", "--layers", "3", "--out", "ab.csv") == 0
        header, rows = read_csv(workdir / "ab.csv")
        assert [r[0] for r in rows] == ["ConvF2F-3", "DilatedF2F-3", "DeformF2F-3"] and "params" in header
        out = capsys.readouterr().out.strip().splitlines()
        assert len(out) == 13  # one summary line per command

    def test_manifest_records_run(self, workdir):
        pipeline()
        m = read_manifest(workdir / "short.f2fw.manifest")
        assert m["run.command"] == "train-f2f" and m["run.offset"] == "3" and m["run.kind"] == "f2f"
        assert m["run.input.cache"].startswith("feats.f2fc:")
        assert m["f2f.channels_per_frame"] == "8"

    def test_recurrent_use_needs_short_model(self, workdir):
        pipeline()
        assert run("train-f2f", "--config", "tiny.cfg", "--data", "data", "--cache", "feats.f2fc", "--offset", "9",
                   "--out", "mid.f2fw") == 0
        assert run("forecast", "--config", "tiny.cfg", "--data", "data", "--cache", "feats.f2fc", "--stub",
                   "stub.f2fw", "--f2f", "mid.f2fw", "--steps", "2", "--out", "f") == 1

    def test_double_precision_reruns_are_bit_identical(self, workdir):
        pipeline("a_", ["--precision", "double"])
        pipeline("b_", ["--precision", "double"])
        for name in ["stub.f2fw", "feats.f2fc", "short.f2fw", "short.f2fw.norm.csv", "short.f2fw.losses.csv"]:
            assert (workdir / f"a_{name}").read_bytes() == (workdir / f"b_{name}").read_bytes(), name


def test_motion_probe_prefers_newly_covered_pixels():
    last = np.zeros((8, 8), int)
    target = np.zeros((8, 8), int)
    last[2:4, 1:3] = 3
    target[2:4, 3:5] = 3
    r, c = motion_probe(last, target, [3])
    assert target[r, c] == 3 and last[r, c] != 3
    assert motion_probe(np.zeros((4, 6), int), np.zeros((4, 6), int), [3]) == (2, 3)
