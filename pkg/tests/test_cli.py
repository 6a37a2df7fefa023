"""End-to-end command-line behaviour on small corpora."""

import csv
import json
import re

import numpy as np
import pytest

from dysfusion import audio
from dysfusion.cli import main
from dysfusion.harness.manifest import UtteranceRecord, ua_speech_layout, write_manifest
from dysfusion.harness.splits import SplitPlan

SR = audio.SAMPLE_RATE

TINY_CONFIG = """
frontend.n_mels = 16
model.n_mels = 16
model.conv_channels = 4,4
model.freq_bands = 2
model.gru_hidden = 6
model.text_embed_dim = 4
model.d_model = 8
model.head_dims = 8,4
train.max_epochs = 2
train.batch_size = 16
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    """Tiny synthetic corpus, cached features and a SID-1 plan (3 speakers -> 3 folds)."""
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", "--out", str(root / "corpus"), "--words", "2", "--speakers", "3"]) == 0
    (root / "tiny.cfg").write_text(TINY_CONFIG)
    assert main(["features", "--manifest", str(root / "corpus" / "manifest.csv"), "--out-dir",
                 str(root / "feats"), "--config", str(root / "tiny.cfg")]) == 0
    assert main(["splits", "--manifest", str(root / "corpus" / "manifest.csv"), "--plan", "SID-1",
                 "--out", str(root / "plan.json")]) == 0
    return root


def train_args(root, out, modality="speech-text", *extra):
    return ["train", "--plan-file", root / "plan.json", "--features", root / "feats", "--config",
            root / "tiny.cfg", "--modality", modality, "--out", out, *extra]


class TestFeatures:
    def test_exclusion_and_determinism(self, tmp_path, capsys):
        rng = np.random.default_rng(0)
        records = []
        for i in range(100):
            seconds = 12.0 if i == 37 else 0.3
            t = np.arange(int(seconds * SR)) / SR
            audio.write_wav(tmp_path / f"u{i:03d}.wav", 0.3 * np.sin(2 * np.pi * rng.uniform(200, 3000) * t))
            records.append(UtteranceRecord("S1", "healthy", "none", f"W{i:03d}", "word", "common", 1,
                                           f"u{i:03d}.wav"))
        write_manifest(tmp_path / "m.csv", records)
        code, out, _ = run(capsys, "features", "--manifest", tmp_path / "m.csv", "--out-dir", tmp_path / "a")
        assert code == 0
        assert "excluded S1_B1_W037" in out
        assert out.strip().splitlines()[-1] == "99 cached, 1 excluded, 0 errors"
        assert len(list((tmp_path / "a").glob("*.mel"))) == 99
        assert not (tmp_path / "a" / "S1_B1_W037.mel").exists()
        run(capsys, "features", "--manifest", tmp_path / "m.csv", "--out-dir", tmp_path / "b", "--jobs", "2")
        for f in (tmp_path / "a").iterdir():
            assert f.read_bytes() == (tmp_path / "b" / f.name).read_bytes(), f.name

    def test_unreadable_audio_counts_as_error(self, tmp_path, capsys):
        (tmp_path / "bad.wav").write_bytes(b"junk")
        write_manifest(tmp_path / "m.csv", [UtteranceRecord("S1", "healthy", "none", "W1", "word", "common", 1,
                                                            "bad.wav")])
        code, out, err = run(capsys, "features", "--manifest", tmp_path / "m.csv", "--out-dir", tmp_path / "o")
        assert code == 1 and "error S1_B1_W1" in err


@pytest.fixture(scope="module")
def ua_csv(tmp_path_factory):
    path = tmp_path_factory.mktemp("ua") / "manifest.csv"
    write_manifest(path, ua_speech_layout().records)
    return path


class TestSplits:
    def test_sid1_folds(self, ua_csv, tmp_path, capsys):
        code, out, _ = run(capsys, "splits", "--manifest", ua_csv, "--plan", "SID-1", "--out", tmp_path / "p.json")
        assert code == 0 and "26 folds" in out
        assert len(SplitPlan.load(tmp_path / "p.json").folds) == 26

    def test_severity_and_reproducible(self, ua_csv, tmp_path, capsys):
        for name in ("a.json", "b.json"):
            assert run(capsys, "splits", "--manifest", ua_csv, "--plan", "SEVERITY", "--seed", "4",
                       "--out", tmp_path / name)[0] == 0
        plan = SplitPlan.load(tmp_path / "a.json")
        assert (len(plan.meta["train_speakers"]), len(plan.meta["test_speakers"])) == (8, 7)
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_bad_manifest(self, tmp_path, capsys):
        (tmp_path / "m.csv").write_text("nope\n")
        code, _, err = run(capsys, "splits", "--manifest", tmp_path / "m.csv", "--plan", "SD",
                           "--out", tmp_path / "p.json")
        assert code == 1 and "header" in err


class TestTrainEval:
    @pytest.mark.parametrize("modality", ["speech-text", "speech"])
    def test_train_then_eval(self, corpus, tmp_path, capsys, modality):
        code, out, _ = run(capsys, *train_args(corpus, tmp_path / "run", modality))
        assert code == 0 and "trained 3 fold(s)" in out
        for spk in ("S00", "S01", "S02"):
            assert (tmp_path / "run" / f"fold_{spk}.ckpt").exists()
            assert (tmp_path / "run" / f"fold_{spk}.csv").read_text().startswith("epoch,")
        run_info = json.loads((tmp_path / "run" / "run.json").read_text())
        assert run_info["modality"] == modality and len(run_info["folds"]) == 3

        code, out, _ = run(capsys, "eval", "--plan-file", corpus / "plan.json", "--checkpoints", tmp_path / "run",
                           "--out", tmp_path / "rep")
        assert code == 0
        rows = list(csv.reader((tmp_path / "rep" / "report.csv").open()))
        assert len(rows) == 13
        for row in rows[1:]:
            assert row[1] == "" or re.fullmatch(r"\d+\.\d\d", row[1])
        assert rows[-1][0] == "All words" and rows[-1][3] == str(3 * 2 * 6)
        report = json.loads((tmp_path / "rep" / "report.json").read_text())
        assert report["meta"]["modality"] == modality
        assert "All words" in out

    def test_rerun_is_byte_identical(self, corpus, tmp_path, capsys):
        for name in ("a", "b"):
            assert run(capsys, *train_args(corpus, tmp_path / name, "speech", "--folds", "S01"))[0] == 0
        assert (tmp_path / "a" / "fold_S01.ckpt").read_bytes() == (tmp_path / "b" / "fold_S01.ckpt").read_bytes()

    def test_invalid_config_key(self, corpus, tmp_path, capsys):
        (tmp_path / "bad.cfg").write_text(TINY_CONFIG + "model.flavour = spicy\n")
        code, _, err = run(capsys, "train", "--plan-file", corpus / "plan.json", "--features", corpus / "feats",
                           "--config", tmp_path / "bad.cfg", "--out", tmp_path / "run")
        assert code == 2
        assert "unknown config key: model.flavour" in err
        assert not (tmp_path / "run").exists()

    def test_missing_checkpoint(self, corpus, tmp_path, capsys):
        assert run(capsys, *train_args(corpus, tmp_path / "run", "speech", "--folds", "S00", "S01"))[0] == 0
        code, _, err = run(capsys, "eval", "--plan-file", corpus / "plan.json", "--checkpoints", tmp_path / "run",
                           "--out", tmp_path / "rep")
        assert code == 1 and "missing checkpoint for fold S02" in err
        assert not (tmp_path / "rep").exists()

    def test_mixed_digests_refused(self, corpus, tmp_path, capsys):
        assert run(capsys, *train_args(corpus, tmp_path / "run", "speech", "--folds", "S00", "S01"))[0] == 0
        assert run(capsys, *train_args(corpus, tmp_path / "other", "speech", "--folds", "S02",
                                       "--seed", "5"))[0] == 0
        (tmp_path / "run" / "fold_S02.ckpt").write_bytes((tmp_path / "other" / "fold_S02.ckpt").read_bytes())
        code, _, err = run(capsys, "eval", "--plan-file", corpus / "plan.json", "--checkpoints", tmp_path / "run",
                           "--out", tmp_path / "rep")
        assert code == 1 and "different runs" in err


class TestVerify:
    def test_bayes(self, capsys):
        code, out, _ = run(capsys, "verify", "--suite", "bayes")
        assert code == 0 and "1000/1000 tables agree" in out

    def test_unknown_suite(self, capsys):
        with pytest.raises(SystemExit) as info:
            main(["verify", "--suite", "astrology"])
        assert info.value.code == 2
        assert "invalid choice" in capsys.readouterr().err
