import json
import struct
import zlib

import numpy as np
import pytest

from fedseg import cli
from fedseg.errors import CheckpointError, ConfigError, CRCError, DigestError, StageError, StateError, VersionError
from fedseg.experiment import (
    ExperimentConfig,
    cmd_compare,
    cmd_detect,
    cmd_eval,
    cmd_run,
    decode_checkpoint,
    dump_config,
    encode_checkpoint,
    load_checkpoint,
    parse_config,
    read_manifest,
    save_checkpoint,
)
from fedseg.experiment.pipeline import INCOMPLETE, LOCK
from fedseg.model import UNetConfig, build_model

TINY = """\
seed = 7
data.n = 60
data.height = 16
data.width = 32
model.levels = 2
model.base_channels = 8
train.epochs = 2
train.rounds = 2
train.batch_size = 4
"""


def tiny_config(**kw):
    return parse_config(TINY).with_overrides(**kw)


@pytest.fixture(scope="module")
def tiny_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    manifest = cmd_run(tiny_config(), out)
    return out, manifest


class TestConfig:
    def test_defaults_round_trip(self):
        cfg = ExperimentConfig()
        assert parse_config(dump_config(cfg)) == cfg

    def test_custom_round_trip(self):
        cfg = tiny_config()
        assert cfg.n == 60 and cfg.model.levels == 2 and cfg.corruption.seed == 7
        assert parse_config(dump_config(cfg)) == cfg

    def test_comments_and_lists(self):
        cfg = parse_config("# hello\nexperiment.paradigms = FL, LL  # trailing\n")
        assert cfg.paradigms == ("FL", "LL")

    @pytest.mark.parametrize("text", [
        "nope = 1\n",
        "seed = 1\nseed = 2\n",
        "seed = x\n",
        "seed\n",
        "experiment.configurations = baseline, bogus\n",
        "experiment.faulty_client = 9\n",
        "data.height = 30\n",
        "train.epochs = 7\ntrain.rounds = 2\n",
    ])
    def test_rejected(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)


class TestCheckpoint:
    @pytest.fixture
    def model(self):
        return build_model(UNetConfig(levels=2, base_channels=8), seed=3)

    def test_round_trip_float32(self, model):
        back = decode_checkpoint(encode_checkpoint(model))
        assert back.config == model.config
        for name, arr in model.state_dict().items():
            np.testing.assert_array_equal(back.state_dict()[name], arr.astype(np.float32).astype(np.float64))

    def test_encoding_deterministic(self, model):
        assert encode_checkpoint(model) == encode_checkpoint(model)

    def test_save_load(self, model, tmp_path):
        path = save_checkpoint(model, tmp_path / "m.fseg")
        assert not (tmp_path / "m.fseg.tmp").exists()
        assert load_checkpoint(path, model.config).config == model.config

    def test_bad_magic(self, model):
        with pytest.raises(CheckpointError) as e:
            decode_checkpoint(b"XXXX" + encode_checkpoint(model)[4:])
        assert type(e.value) is CheckpointError

    def test_flipped_byte(self, model):
        data = bytearray(encode_checkpoint(model))
        data[len(data) // 2] ^= 0xFF
        with pytest.raises(CRCError):
            decode_checkpoint(bytes(data))

    @pytest.mark.parametrize("cut", [1, 10, 100])
    def test_truncated(self, model, cut):
        with pytest.raises(CRCError):
            decode_checkpoint(encode_checkpoint(model)[:-cut])

    def test_version(self, model):
        body = bytearray(encode_checkpoint(model)[:-4])
        body[4:6] = struct.pack("<H", 99)
        with pytest.raises(VersionError):
            decode_checkpoint(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))

    def test_digest_mismatch(self, model):
        with pytest.raises(DigestError):
            decode_checkpoint(encode_checkpoint(model), UNetConfig())

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "absent.fseg")


class TestPipeline:
    def test_manifest_models(self, tiny_run):
        out, manifest = tiny_run
        counts = {c: len(v["models"]) for c, v in manifest["configurations"].items()}
        assert counts == {"baseline": 7, "label_manip": 7, "image_manip": 7, "exclusion": 6}
        assert "LL0" not in manifest["configurations"]["exclusion"]["models"]
        assert manifest["significance"]["n_comparisons"] == 18
        assert manifest["significance"]["alpha_corrected"] == pytest.approx(0.05 / 18)
        assert not (out / INCOMPLETE).exists() and not (out / LOCK).exists()
        assert read_manifest(out) == manifest

    def test_untouched_local_models_reused(self, tiny_run):
        _, manifest = tiny_run
        label = manifest["configurations"]["label_manip"]["models"]
        base = manifest["configurations"]["baseline"]["models"]
        assert label["LL1"]["checkpoint"] == base["LL1"]["checkpoint"] and label["LL1"]["reused"]
        assert label["LL0"]["checkpoint"] != base["LL0"]["checkpoint"]

    def test_trainlog_labels(self, tiny_run):
        out, manifest = tiny_run
        rows = [json.loads(l) for l in (out / manifest["configurations"]["exclusion"]["trainlog"]).open()]
        fl = [r for r in rows if r["paradigm"] == "FL"]
        assert {r["client"] for r in fl} == {1, 2, 3, 4}
        assert {r["round"] for r in fl} == {0, 1}
        assert all(r["config"] == "exclusion" for r in rows)

    def test_deterministic(self, tiny_run, tmp_path):
        out, manifest = tiny_run
        cfg = tiny_config(configurations=("baseline",))
        a = cmd_run(cfg, tmp_path / "a")
        b = cmd_run(cfg, tmp_path / "b")
        assert a == b
        for name, m in a["configurations"]["baseline"]["models"].items():
            assert (tmp_path / "a" / m["checkpoint"]).read_bytes() == (tmp_path / "b" / m["checkpoint"]).read_bytes()
            assert (tmp_path / "a" / m["metrics"]).read_text() == (out / m["metrics"]).read_text()

    def test_lock_refuses_concurrent_run(self, tmp_path):
        (tmp_path / LOCK).write_text("123\n")
        with pytest.raises(StateError):
            cmd_run(tiny_config(), tmp_path)

    def test_failure_leaves_marker(self, tmp_path, monkeypatch):
        import fedseg.experiment.pipeline as pl

        def boom(*a, **k):
            raise ValueError("synthetic failure")

        monkeypatch.setattr(pl, "generate_dataset", boom)
        with pytest.raises(StageError) as e:
            cmd_run(tiny_config(), tmp_path)
        assert e.value.stage == "data"
        assert "data" in (tmp_path / INCOMPLETE).read_text()
        assert not (tmp_path / LOCK).exists() and not (tmp_path / "manifest.json").exists()

    def test_detect_writes_reports(self, tiny_run):
        out, _ = tiny_run
        reports = cmd_detect(out, warmup_epochs=0, k_consecutive=1)
        assert set(reports) == {"baseline", "label_manip", "image_manip", "exclusion"}
        data = json.loads((out / "label_manip" / "anomaly.json").read_text())
        assert data["params"]["k_consecutive"] == 1 and set(data["evidence"]) == {"0", "1", "2", "3", "4"}

    def test_compare_against_itself(self, tiny_run, tmp_path):
        out, _ = tiny_run
        comps, _ = cmd_compare([out], tmp_path / "one")
        assert len(comps) == 18
        assert (tmp_path / "one" / "significance_within_paradigm.csv").exists()
        comps, _ = cmd_compare([out, out], tmp_path / "two")
        assert comps and all(r.p_value == 1.0 for c in comps for r in c.results.values())

    def test_eval_reproduces_run_metrics(self, tiny_run, tmp_path):
        out, manifest = tiny_run
        m = manifest["configurations"]["baseline"]["models"]["FL"]
        cmd_eval(out / m["checkpoint"], out / "dataset", tmp_path / "fl.csv", split="test")
        assert (tmp_path / "fl.csv").read_text() == (out / m["metrics"]).read_text()

    def test_eval_bad_split(self, tiny_run):
        out, manifest = tiny_run
        m = manifest["configurations"]["baseline"]["models"]["FL"]
        with pytest.raises(ConfigError):
            cmd_eval(out / m["checkpoint"], out / "dataset", split="client9.val")


class TestCli:
    def test_print_defaults(self, capsys):
        assert cli.main(["run", "--print-defaults"]) == 0
        assert parse_config(capsys.readouterr().out) == ExperimentConfig()

    def test_run_detect_compare_eval(self, tmp_path, capsys):
        cfg = tmp_path / "c.txt"
        cfg.write_text(TINY + "experiment.configurations = baseline\n")
        out = tmp_path / "run"
        assert cli.main(["run", "--config", str(cfg), "--seed", "3", "--out", str(out)]) == 0
        assert "baseline: 7 models" in capsys.readouterr().out
        assert read_manifest(out)["config"]["seed"] == "3"
        assert cli.main(["detect", "--run", str(out)]) == 0
        assert "baseline: flagged" in capsys.readouterr().out
        assert cli.main(["compare", "--runs", str(out)]) == 0
        assert "3 comparisons" in capsys.readouterr().out
        ckpt = read_manifest(out)["configurations"]["baseline"]["models"]["CL"]["checkpoint"]
        assert cli.main(["eval", "--checkpoint", str(out / ckpt), "--data", str(out / "dataset"), "--split", "test"]) == 0
        assert "dice  median" in capsys.readouterr().out

    def test_error_exit_codes(self, tmp_path, capsys):
        bad = tmp_path / "bad.fseg"
        bad.write_bytes(b"FSEG" + b"\0" * 10)
        assert cli.main(["eval", "--checkpoint", str(bad), "--data", str(tmp_path)]) == 12
        assert cli.main(["detect", "--run", str(tmp_path)]) == 2
        cfg = tmp_path / "c.txt"
        cfg.write_text("nope = 1\n")
        assert cli.main(["run", "--config", str(cfg)]) == 2
        assert "unknown key" in capsys.readouterr().err
