"""Self-check suites behind ``dysfusion verify``.

Each suite returns a :class:`SuiteResult` with a pass/fail flag, counts and
human-readable detail lines.  The same functions back the acceptance tests.
"""

from __future__ import annotations

import tempfile
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import audio
from . import autodiff as ad
from .harness import bayes, splits
from .harness.manifest import SEVERITIES, ua_speech_layout
from .harness.synthetic import (DETECTION_XOR, SEVERITY_MOD4, SyntheticConfig, generate_synthetic_corpus,
                                parse_item)
from .model import DETECTION, SEVERITY, SPEECH_TEXT, Batch, ModelConfig, build_model

GRAD_TOLERANCE = 1e-4
_EVAL_MEAN = np.array([0.1, -0.2, 0.3])
_EVAL_VAR = np.array([0.5, 1.5, 2.0])


@dataclass
class SuiteResult:
    name: str
    passed: bool
    ok: int
    total: int
    details: list[str] = field(default_factory=list)
    seconds: float = 0.0
    metrics: dict[str, float] = field(default_factory=dict)

    def summary(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return f"[{status}] {self.name}: {self.ok}/{self.total} checks passed ({self.seconds:.1f}s)"


# ---------------------------------------------------------------------------
# gradient suite


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.normal(size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def primitive_cases(rng: np.random.Generator):
    """(name, fn, inputs) triples covering every differentiable primitive.

    Each scalar objective is a random weighted sum of the op's output, so
    every output element contributes to the checked gradient.
    """
    w = np.random.default_rng(rng.integers(2 ** 32))
    T = ad.Tensor
    cases = []

    def case(name, op, *arrays):
        probe = np.random.default_rng(w.integers(2 ** 32))
        weights = None

        def fn(xs):
            nonlocal weights
            out = op(*xs)
            if weights is None:
                weights = probe.normal(size=out.shape)
            return ad.sum_(out * weights)

        cases.append((name, fn, [T(a) for a in arrays]))

    case("add", ad.add, rng.normal(size=(3, 4)), rng.normal(size=(4,)))
    case("sub", ad.sub, rng.normal(size=(2, 3)), rng.normal(size=(2, 1)))
    case("mul", ad.mul, rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    case("div", ad.div, rng.normal(size=(3, 4)), rng.uniform(0.5, 2.0, size=(3, 4)) * rng.choice([-1, 1], (3, 4)))
    case("neg", ad.neg, rng.normal(size=(5,)))
    case("sigmoid", ad.sigmoid, rng.normal(scale=2, size=(3, 4)))
    case("tanh", ad.tanh, rng.normal(scale=2, size=(3, 4)))
    case("relu", ad.relu, _away_from_zero(rng, (3, 4)))
    case("exp", ad.exp, rng.normal(size=(3, 4)))
    case("log", ad.log, rng.uniform(0.2, 3.0, size=(3, 4)))
    clip_in = rng.normal(size=(4, 4))
    clip_in[np.abs(np.abs(clip_in) - 0.5) < 0.05] *= 1.3   # keep clear of the clip corners
    case("clip", lambda a: ad.clip(a, -0.5, 0.5), clip_in)
    case("matmul", ad.matmul, rng.normal(size=(3, 4)), rng.normal(size=(4, 2)))
    case("matmul_batched", ad.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5)))
    case("matmul_bcast_weight", ad.matmul, rng.normal(size=(2, 3, 4)), rng.normal(size=(4, 5)))
    case("reshape", lambda a: ad.reshape(a, (6, 2)), rng.normal(size=(3, 4)))
    case("transpose", lambda a: ad.transpose(a, (2, 0, 1)), rng.normal(size=(2, 3, 4)))
    case("getitem", lambda a: ad.getitem(a, (slice(None), slice(1, 3))), rng.normal(size=(3, 4)))
    case("concat", lambda a, b: ad.concat([a, b], axis=1), rng.normal(size=(2, 3)), rng.normal(size=(2, 2)))
    case("stack", lambda a, b: ad.stack([a, b], axis=1), rng.normal(size=(2, 3)), rng.normal(size=(2, 3)))
    case("sum", lambda a: ad.sum_(a, axis=1), rng.normal(size=(3, 4)))
    case("mean", lambda a: ad.mean(a, axis=0, keepdims=True), rng.normal(size=(3, 4)))
    ids = rng.integers(0, 5, size=(2, 3))
    case("embedding", lambda t: ad.embedding(t, ids), rng.normal(size=(5, 3)))
    case("conv2d", lambda x, k: ad.conv2d(x, k, (2, 2), (1, 1)),
         rng.normal(size=(2, 5, 6, 2)), rng.normal(size=(3, 3, 2, 3)))
    mask = np.ones((2, 4), dtype=bool)
    mask[1, 3] = False

    def bn(x, g, b):
        return ad.batchnorm(x, g, b, np.zeros(3), np.ones(3), True, mask=mask)

    case("batchnorm", bn, rng.normal(size=(2, 4, 3)), rng.uniform(0.5, 1.5, 3), rng.normal(size=3))
    case("batchnorm_eval", lambda x, g, b: ad.batchnorm(x, g, b, _EVAL_MEAN, _EVAL_VAR, False),
         rng.normal(size=(2, 4, 3)), rng.uniform(0.5, 1.5, 3), rng.normal(size=3))
    drop_seed = int(rng.integers(2 ** 32))
    case("dropout", lambda x: ad.dropout(x, 0.3, True, np.random.default_rng(drop_seed)), rng.normal(size=(4, 5)))
    sm_mask = rng.random((3, 5)) > 0.3
    sm_mask[:, 0] = True
    case("masked_softmax", lambda z: ad.masked_softmax(z, sm_mask), rng.normal(size=(3, 5)))
    return cases


def reduced_model_config(task: str = DETECTION) -> ModelConfig:
    """A tiny network with every layer type of the full one, for finite differences.

    d = 8, gru_hidden = 8, 10 mel bins, dropout disabled.
    """
    return ModelConfig(task=task, n_mels=10, conv_channels=(2, 3), freq_bands=2, gru_hidden=8,
                       text_embed_dim=4, d_model=8, head_dims=(6, 4), dropout_rate=0.0)


def reduced_batch(rng: np.random.Generator, task: str) -> Batch:
    """Three utterances of at most 6 x 10 mel frames and 3 characters, with padding."""
    lengths = np.array([6, 4, 5])
    mel = rng.normal(size=(3, 6, 10))
    for i, n in enumerate(lengths):
        mel[i, n:] = 0.0
    token_lengths = np.array([3, 1, 2])
    tokens = np.full((3, 3), 26)
    mask = np.zeros((3, 3), dtype=bool)
    for i, n in enumerate(token_lengths):
        tokens[i, :n] = rng.integers(0, 26, size=n)
        mask[i, :n] = True
    labels = rng.integers(0, 2 if task == DETECTION else 4, size=3)
    return Batch(mel, lengths, tokens, mask, labels)


def network_case(seed: int, task: str = DETECTION, modality: str = SPEECH_TEXT):
    """(fn, inputs) for a full forward + loss of the reduced network in training mode."""
    from .training import task_loss

    rng = np.random.default_rng(seed)
    model = build_model(reduced_model_config(task), modality, rng)
    batch = reduced_batch(rng, task)
    params = model.parameters()
    # zero-initialized biases can put a unit exactly on the relu kink (all inputs dead);
    # jitter every parameter so the check runs at a generic, differentiable point
    for p in params:
        p.data += 0.05 * rng.normal(size=p.shape)
    buffers = {k: v.copy() for k, v in model.buffers.items()}

    def fn(_inputs):
        for k, v in buffers.items():   # undo the running-statistics update of the previous call
            model.buffers[k][...] = v
        return task_loss(model, batch, True, np.random.default_rng(0))

    return fn, params


def run_grad_suite(n_seeds: int = 100, network_seeds: int | None = None,
                   per_param: int = 1) -> SuiteResult:
    t0 = time.perf_counter()
    worst: dict[str, float] = {}
    ok = total = 0
    for seed in range(n_seeds):
        rng = np.random.default_rng(seed)
        for name, fn, inputs in primitive_cases(rng):
            rep = ad.grad_check(fn, inputs, tolerance=GRAD_TOLERANCE)
            worst[name] = max(worst.get(name, 0.0), rep.max_rel_error)
            ok += rep.passed
            total += 1
    for seed in range(n_seeds if network_seeds is None else network_seeds):
        for task in (DETECTION, SEVERITY):
            fn, params = network_case(seed, task)
            rep = ad.grad_check(fn, params, tolerance=GRAD_TOLERANCE, max_per_input=per_param,
                                rng=np.random.default_rng(seed))
            key = f"network[{task}]"
            worst[key] = max(worst.get(key, 0.0), rep.max_rel_error)
            ok += rep.passed
            total += 1
    overall = max(worst.values())
    details = [f"{k}: max relative error {v:.2e}" for k, v in sorted(worst.items())]
    details.append(f"max relative error {overall:.2e} (threshold {GRAD_TOLERANCE:g})")
    return SuiteResult("grad", ok == total, ok, total, details, time.perf_counter() - t0,
                       {"max_rel_error": overall})


# ---------------------------------------------------------------------------
# DSP suite


def naive_power_spectrum(frame: np.ndarray, n_fft: int) -> np.ndarray:
    """|DFT|^2 of a zero-padded frame by the O(n^2) definition."""
    x = np.zeros(n_fft)
    x[:len(frame)] = frame
    k = np.arange(n_fft // 2 + 1)[:, None]
    n = np.arange(n_fft)[None, :]
    basis = np.exp(-2j * np.pi * k * n / n_fft)
    spec = basis @ x
    return np.abs(spec) ** 2


def triangle_filterbank(n_mels: int, n_fft: int, sample_rate: int, fmin: float, fmax: float) -> np.ndarray:
    """Independent loop-based triangular filterbank.

    Edge frequencies come from the shared mel conversion (checked on its own
    against scalar math); the triangles are built bin by bin, piecewise.
    """
    mels = np.linspace(audio.hz_to_mel(fmin), audio.hz_to_mel(fmax), n_mels + 2)
    pts = [float(v) for v in audio.mel_to_hz(mels)]
    fb = np.zeros((n_mels, n_fft // 2 + 1))
    for m in range(n_mels):
        left, center, right = pts[m], pts[m + 1], pts[m + 2]
        for b in range(n_fft // 2 + 1):
            f = b * sample_rate / n_fft
            if left < f <= center:
                fb[m, b] = (f - left) / (center - left)
            elif center < f < right:
                fb[m, b] = (right - f) / (right - center)
    return fb


def run_dsp_suite(seed: int = 0, n_lengths: int = 1000) -> SuiteResult:
    t0 = time.perf_counter()
    cfg = audio.FrontendConfig()
    rng = np.random.default_rng(seed)
    checks: list[tuple[str, bool]] = []

    x = rng.normal(size=cfg.win_length + 7 * cfg.hop_length)
    fast = audio.power_spectrogram(x, cfg)
    win = audio.hann(cfg.win_length)
    err = 0.0
    for i in range(fast.shape[0]):
        frame = x[i * cfg.hop_length:i * cfg.hop_length + cfg.win_length] * win
        ref = np.sqrt(naive_power_spectrum(frame, cfg.fft_size))
        err = max(err, float(np.abs(np.sqrt(fast[i]) - ref).max()))
    checks.append((f"STFT magnitude vs naive DFT: max abs error {err:.2e} (< 1e-8)", err < 1e-8))

    fb = audio.mel_filterbank_matrix(cfg)
    ref_fb = triangle_filterbank(cfg.n_mels, cfg.fft_size, cfg.sample_rate, cfg.fmin, cfg.fmax)
    diff = float(np.abs(fb - ref_fb).max())
    checks.append((f"mel filterbank vs loop constructor: max abs difference {diff:.1e}", diff == 0.0))

    lengths = rng.integers(cfg.win_length, 20 * cfg.sample_rate, size=n_lengths)
    bad = 0
    for n in lengths:
        brute = sum(1 for start in range(0, int(n) - cfg.win_length + 1, cfg.hop_length))
        bad += brute != audio.frame_count(int(n), cfg)
    checks.append((f"frame count formula on {n_lengths} random lengths: {n_lengths - bad} agree", bad == 0))

    import math
    probe = rng.uniform(0.0, 8000.0, size=200)
    conv_err = max(max(abs(float(audio.hz_to_mel(f)) - 2595.0 * math.log10(1.0 + f / 700.0)),
                       abs(float(audio.mel_to_hz(audio.hz_to_mel(f))) - f)) for f in probe)
    checks.append((f"mel conversion vs scalar formula and round trip: max error {conv_err:.1e}", conv_err < 1e-9))

    m1000 = float(audio.hz_to_mel(1000.0))
    checks.append((f"mel(1000 Hz) = {m1000:.4f} (999.99 +/- 0.01)", abs(m1000 - 999.99) <= 0.01))

    ok = sum(c for _, c in checks)
    return SuiteResult("dsp", ok == len(checks), ok, len(checks), [d for d, _ in checks],
                       time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# Bayes suite


def run_bayes_suite(n_tables: int = 1000, seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    agree, n = bayes.run_bayes_suite(n_tables, seed)
    details = [f"{agree}/{n} tables agree"]
    uniform = bayes.bayes_oracle_check(np.full((4, 4, 4), 1 / 64))
    uniform_ok = uniform.agree and bool((uniform.decisions == 0).all())
    details.append(f"uniform table -> class 0 everywhere: {uniform_ok}")
    table = bayes.random_joint(np.random.default_rng(seed), (4, 4, 4))
    table[:, :, 2] = 0.0
    table /= table.sum()
    zero = bayes.bayes_oracle_check(table)
    zero_ok = zero.agree and not (zero.decisions == 2).any()
    details.append(f"zero-probability class never chosen: {zero_ok}")
    ok = agree + uniform_ok + zero_ok
    return SuiteResult("bayes", ok == n + 2, ok, n + 2, details, time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# split protocol suite


def run_splits_suite(seed: int = 0) -> SuiteResult:
    t0 = time.perf_counter()
    manifest = ua_speech_layout()
    checks: list[tuple[str, bool]] = []
    checks.append((f"layout: {len(manifest.speakers)} speakers, {len(manifest.words())} distinct words",
                   len(manifest.speakers) == 26 and len(manifest.words()) == 455))
    for name in (splits.SID1, splits.SID2):
        plan = splits.build_sid_loso(manifest, name, seed)
        problems = splits.check_plan(plan, manifest)
        disjoint = all(
            not ({manifest.records[manifest.by_id[i]].speaker_id for i in f.train}
                 & {manifest.records[manifest.by_id[i]].speaker_id for i in f.test})
            for f in plan.folds)
        checks.append((f"{name}: {len(plan.folds)} folds, speaker-disjoint={disjoint}, "
                       f"{len(problems)} invariant violations",
                       len(plan.folds) == 26 and disjoint and not problems))
    for plan in (splits.build_sd_split(manifest, seed), splits.build_sid_loso(manifest, splits.SID2, seed)):
        tr = set(plan.meta["train_uncommon"])
        te = set(plan.meta["test_uncommon"])
        problems = splits.check_plan(plan, manifest)
        checks.append((f"{plan.name}: uncommon words {len(tr)}/{len(te)}, overlap {len(tr & te)}",
                       len(tr) == 200 and len(te) == 100 and not tr & te and not problems))
    sev = splits.build_severity_split(manifest, seed=seed)
    problems = splits.check_plan(sev, manifest)
    tr_spk, te_spk = sev.meta["train_speakers"], sev.meta["test_speakers"]
    per_class = [sum(manifest.speaker_severity(s) == c for s in tr_spk) for c in SEVERITIES]
    checks.append((f"SEVERITY: {len(tr_spk)}/{len(te_spk)} speakers, train per class {per_class}",
                   len(tr_spk) == 8 and len(te_spk) == 7 and per_class == [2, 2, 2, 2] and not problems))
    ok = sum(c for _, c in checks)
    return SuiteResult("splits", ok == len(checks), ok, len(checks), [d for d, _ in checks],
                       time.perf_counter() - t0)


# ---------------------------------------------------------------------------
# synthetic corpus suite


def _corpus_bytes(root: Path) -> dict[str, bytes]:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def run_synth_suite(seed: int = 0, workdir=None) -> SuiteResult:
    t0 = time.perf_counter()
    checks: list[tuple[str, bool]] = []
    with tempfile.TemporaryDirectory(dir=workdir) as tmp:
        tmp = Path(tmp)
        for task in (DETECTION_XOR, SEVERITY_MOD4):
            cfg = SyntheticConfig(task=task)
            man = generate_synthetic_corpus(cfg, seed, tmp / task / "a")
            label_task = DETECTION if task == DETECTION_XOR else SEVERITY
            per_pattern: dict[int, Counter] = {}
            pairs = Counter()
            for r in man:
                i, k = parse_item(r.word_id)
                per_pattern.setdefault(k, Counter())[r.label(label_task)] += 1
                pairs[(r.speaker_id, i, k)] += 1
            n_classes = 2 if task == DETECTION_XOR else 4
            balanced = all(len(c) == n_classes and len(set(c.values())) == 1 for c in per_pattern.values())
            checks.append((f"{task}: label distribution uniform given every audio pattern", balanced))
            complete = len(pairs) == cfg.n_speakers * cfg.n_words * cfg.n_patterns
            checks.append((f"{task}: {len(man)} utterances, every (speaker, word, pattern) present", complete))
            if task == DETECTION_XOR:
                generate_synthetic_corpus(cfg, seed, tmp / task / "b")
                same = _corpus_bytes(tmp / task / "a") == _corpus_bytes(tmp / task / "b")
                checks.append((f"{task}: same seed -> byte-identical corpus", same))
    ok = sum(c for _, c in checks)
    return SuiteResult("synth", ok == len(checks), ok, len(checks), [d for d, _ in checks],
                       time.perf_counter() - t0)


SUITES = {
    "grad": run_grad_suite,
    "dsp": run_dsp_suite,
    "bayes": run_bayes_suite,
    "splits": run_splits_suite,
    "synth": run_synth_suite,
}
