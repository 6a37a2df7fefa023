"""Acceptance criteria, each checked at its stated tolerance.

Tests are tagged ``@pytest.mark.criterion(n)``; ``conftest.py`` prints one
pass/fail line per criterion at the end of the run.  Criterion 6 trains
twelve full-size models and dominates the runtime (tens of minutes).
"""

import json
import tempfile
import time

import numpy as np
import pytest

from dysfusion import audio
from dysfusion.autodiff import Tensor
from dysfusion.cli import main
from dysfusion.harness.gate import MAX_EPOCHS, THRESHOLDS, corpus_examples, run_gate
from dysfusion.harness.synthetic import DETECTION_XOR, SEVERITY_MOD4
from dysfusion.model import (DETECTION, SEVERITY, SPEECH_ONLY, SPEECH_TEXT, Batch, build_model, cross_attention,
                             reference_config)
from dysfusion.text import pad_tokens, tokenize
from dysfusion.training import (Example, PlateauState, TrainConfig, TrainingControl, early_stop_check,
                                reduce_on_plateau, train_model)
from dysfusion.verify import (naive_power_spectrum, run_bayes_suite, run_dsp_suite, run_grad_suite,
                              run_splits_suite, triangle_filterbank)

GATE_SEEDS = (0, 1, 2)
RUN_LIMIT_S = 600.0


def criterion(n):
    return pytest.mark.criterion(n)


# ---------------------------------------------------------------------------
# 1. gradient correctness


@criterion(1)
def test_grad_suite_100_seeds():
    result = run_grad_suite(n_seeds=100)
    print("\n".join(result.details))
    print(result.summary())
    assert result.passed, result.details
    assert result.metrics["max_rel_error"] < 1e-4
    assert result.seconds < 120.0


# ---------------------------------------------------------------------------
# 2. DSP oracles


@criterion(2)
def test_dsp_suite():
    result = run_dsp_suite(n_lengths=1000)
    print("\n".join(result.details))
    assert result.passed, result.details


@criterion(2)
def test_stft_random_frames_against_naive_dft():
    rng = np.random.default_rng(123)
    cfg = audio.FrontendConfig()
    x = rng.uniform(-1, 1, size=cfg.win_length + 20 * cfg.hop_length)
    fast = np.sqrt(audio.power_spectrogram(x, cfg))
    for i in range(fast.shape[0]):
        frame = x[i * cfg.hop_length:i * cfg.hop_length + cfg.win_length] * audio.hann(cfg.win_length)
        np.testing.assert_allclose(fast[i], np.sqrt(naive_power_spectrum(frame, cfg.fft_size)), atol=1e-8, rtol=0)


@criterion(2)
def test_filterbank_exact_and_mel_1000():
    cfg = audio.FrontendConfig()
    assert np.array_equal(audio.mel_filterbank_matrix(cfg),
                          triangle_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate, cfg.fmin, cfg.fmax))
    assert abs(float(audio.hz_to_mel(1000.0)) - 999.99) <= 0.01


# ---------------------------------------------------------------------------
# 3. Bayes decision-rule equivalence


@criterion(3)
def test_bayes_1000_tables():
    result = run_bayes_suite(n_tables=1000)
    print("\n".join(result.details))
    assert result.details[0] == "1000/1000 tables agree"
    assert result.passed
    assert result.seconds < 5.0
    again = run_bayes_suite(n_tables=1000)
    assert again.ok == result.ok


# ---------------------------------------------------------------------------
# 4. attention invariants


@criterion(4)
def test_attention_rows_and_masks():
    rng = np.random.default_rng(0)
    d = 128
    wq, wk, wv = (Tensor(rng.normal(scale=d ** -0.5, size=(d, d))) for _ in range(3))
    mask = rng.random((4, 30)) > 0.3
    mask[:, 0] = True
    out = cross_attention(rng.normal(size=(4, 9, d)), rng.normal(size=(4, 30, d)), mask, wq, wk, wv)
    w = out.attention_weights.data
    assert np.abs(w.sum(-1) - 1.0).max() <= 1e-6
    assert (w[np.broadcast_to(~mask[:, None, :], w.shape)] == 0.0).all()


@criterion(4)
def test_attention_brute_force():
    rng = np.random.default_rng(1)
    d = 8
    text, speech = rng.normal(size=(1, 4, d)), rng.normal(size=(1, 7, d))
    wq, wk, wv = (rng.normal(size=(d, d)) for _ in range(3))
    out = cross_attention(text, speech, np.ones((1, 7), bool), Tensor(wq), Tensor(wk), Tensor(wv))
    q, k, v = text[0] @ wq, speech[0] @ wk, speech[0] @ wv
    ref = np.zeros((4, d))
    for i in range(4):
        logits = [float(q[i] @ k[j]) / np.sqrt(d) for j in range(7)]
        e = np.exp(np.array(logits) - max(logits))
        ref[i] = (e / e.sum()) @ v
    assert np.abs(out.context.data[0] - ref).max() <= 1e-10


@criterion(4)
@pytest.mark.parametrize("task", [DETECTION, SEVERITY])
def test_padding_invariance_full_model(task):
    model = build_model(reference_config(task), SPEECH_TEXT, 0)
    rng = np.random.default_rng(2)
    mel = rng.normal(size=(1, 61, 80))
    tokens, mask = pad_tokens([tokenize("seven")])
    plain = model.scores(Batch(mel, np.array([61]), tokens, mask))
    padded_mel = np.concatenate([mel, rng.normal(size=(1, 23, 80))], axis=1)
    padded = model.scores(Batch(padded_mel, np.array([61]), tokens, mask))
    assert np.abs(plain - padded).max() < 1e-6


# ---------------------------------------------------------------------------
# 5. split-protocol invariants


@criterion(5)
def test_splits_suite_via_cli(capsys):
    assert main(["verify", "--suite", "splits"]) == 0
    out = capsys.readouterr().out
    assert "SID-1: 26 folds, speaker-disjoint=True, 0 invariant violations" in out
    assert "SID-2: 26 folds, speaker-disjoint=True, 0 invariant violations" in out
    assert "SD: uncommon words 200/100, overlap 0" in out
    assert "SEVERITY: 8/7 speakers, train per class [2, 2, 2, 2]" in out
    assert run_splits_suite().passed


# ---------------------------------------------------------------------------
# 6. synthetic fusion gate


@criterion(6)
@pytest.mark.slow
@pytest.mark.parametrize("task", [DETECTION_XOR, SEVERITY_MOD4])
@pytest.mark.parametrize("seed", GATE_SEEDS)
def test_fusion_gate(task, seed, tmp_path):
    t0 = time.perf_counter()
    examples = corpus_examples(task, seed, tmp_path)
    corpus_seconds = time.perf_counter() - t0
    assert len(examples) == 16 * 20 * 6
    results = {m: run_gate(task, m, seed, examples) for m in (SPEECH_ONLY, SPEECH_TEXT)}
    for r in results.values():
        print(f"{r.summary()} (+{corpus_seconds:.0f}s corpus)")
    speech_max, fused_min = THRESHOLDS[task]
    assert results[SPEECH_ONLY].accuracy <= speech_max
    assert results[SPEECH_TEXT].accuracy >= fused_min
    for r in results.values():
        assert r.epochs <= MAX_EPOCHS
        # each run charged with the full corpus generation + feature extraction time
        assert r.seconds + corpus_seconds < RUN_LIMIT_S


# ---------------------------------------------------------------------------
# 7. training control


@criterion(7)
def test_flat_loss_reduces_at_6_and_stops_at_9():
    state = PlateauState(lr=1e-4)
    assert [e for e in range(1, 10) if reduce_on_plateau(0.7, state)] == [6]
    control = TrainingControl(TrainConfig())
    lrs, stop_epoch = [], None
    for epoch in range(1, 40):
        stop = control.update(epoch, 0.7)
        lrs.append(control.lr)
        if stop:
            stop_epoch = epoch
            break
    assert stop_epoch == 9
    assert lrs[4] == 1e-4 and lrs[5] == 5e-5


@criterion(7)
def test_scripted_sequence_restore_index():
    stop, best = early_stop_check([1.0, 0.9, 0.91, 0.92, 0.93])
    assert stop and best == 1


@criterion(7)
def test_restored_weights_are_best_epoch():
    from dysfusion.model import ModelConfig

    rng = np.random.default_rng(0)
    examples = [Example(f"u{i}", (i % 2 - 0.5) + 0.8 * rng.normal(size=(10, 8)), tokenize("one"), i % 2, f"S{i % 3}")
                for i in range(24)]
    cfg = ModelConfig(n_mels=8, conv_channels=(4, 4), freq_bands=2, gru_hidden=6, text_embed_dim=4, d_model=8,
                      head_dims=(8, 4))
    model = build_model(cfg, SPEECH_TEXT, 0)
    snapshots = {}

    def snapshot(record):
        snapshots[record.epoch] = (record.val_loss, model.state_dict())

    res = train_model(model, examples[:18], examples[18:],
                      TrainConfig(lr=5e-2, max_epochs=30, batch_size=6, plateau_patience=2, early_stop_patience=2),
                      progress=snapshot)
    best_epoch = min(snapshots, key=lambda e: snapshots[e][0])
    assert res.log.best_epoch == best_epoch
    assert best_epoch != len(res.log.epochs)  # the restore actually moved the weights back
    for name, value in snapshots[best_epoch][1].items():
        assert np.array_equal(model.state_dict()[name], value), name


# ---------------------------------------------------------------------------
# 8. determinism


TINY = """
frontend.n_mels = 16
model.n_mels = 16
model.conv_channels = 4,4
model.freq_bands = 2
model.gru_hidden = 6
model.text_embed_dim = 4
model.d_model = 8
model.head_dims = 8,4
train.max_epochs = 3
train.batch_size = 16
"""


def _pipeline(root, corpus, seed):
    root.mkdir()
    (root / "c.cfg").write_text(TINY)
    assert main(["features", "--manifest", str(corpus / "manifest.csv"), "--out-dir", str(root / "f"),
                 "--config", str(root / "c.cfg")]) == 0
    assert main(["splits", "--manifest", str(corpus / "manifest.csv"), "--plan", "SID-1", "--seed", str(seed),
                 "--out", str(root / "plan.json")]) == 0
    assert main(["train", "--plan-file", str(root / "plan.json"), "--features", str(root / "f"), "--config",
                 str(root / "c.cfg"), "--out", str(root / "run"), "--seed", str(seed)]) == 0
    assert main(["eval", "--plan-file", str(root / "plan.json"), "--checkpoints", str(root / "run"),
                 "--out", str(root / "rep")]) == 0


@criterion(8)
def test_bitwise_reproducible_pipeline(tmp_path):
    for name in ("c1", "c2"):
        assert main(["synth", "--out", str(tmp_path / name), "--words", "4", "--speakers", "3", "--seed", "11"]) == 0
    corpus_files = sorted(p.relative_to(tmp_path / "c1") for p in (tmp_path / "c1").rglob("*") if p.is_file())
    for rel in corpus_files:
        assert (tmp_path / "c1" / rel).read_bytes() == (tmp_path / "c2" / rel).read_bytes()
    _pipeline(tmp_path / "a", tmp_path / "c1", 11)
    _pipeline(tmp_path / "b", tmp_path / "c1", 11)
    compared = 0
    for sub, pattern in (("f", "*.mel"), ("run", "*.ckpt"), ("rep", "report.*")):
        files = sorted((tmp_path / "a" / sub).glob(pattern))
        assert files
        for f in files:
            assert f.read_bytes() == (tmp_path / "b" / sub / f.name).read_bytes(), f
            compared += 1
    assert compared == 4 * 6 * 3 + 3 + 2
    report = json.loads((tmp_path / "a" / "rep" / "report.json").read_text())
    assert report["seed"] == 11 and len(report["meta"]["config_digest"]) == 64


@criterion(8)
def test_gate_run_is_deterministic():
    with tempfile.TemporaryDirectory() as tmp:
        from dysfusion.harness.synthetic import SyntheticConfig

        synth = SyntheticConfig(n_words=4, n_speakers=6)
        examples = corpus_examples(DETECTION_XOR, 3, tmp, synth=synth)
    short = TrainConfig(max_epochs=1)
    a = run_gate(DETECTION_XOR, SPEECH_ONLY, 3, examples, short)
    b = run_gate(DETECTION_XOR, SPEECH_ONLY, 3, examples, short)
    assert (a.accuracy, a.epochs, a.test_speakers) == (b.accuracy, b.epochs, b.test_speakers)
