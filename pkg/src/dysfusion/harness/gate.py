"""End-to-end fusion gate on the synthetic corpus.

A corpus is generated for one seed, a seeded subset of speakers is held out
for testing, and a speech-only or speech-text model is trained on the rest.
Because the label depends jointly on the tone pattern and the word, a
speech-only model should stay near chance while the fused model should
solve the task.
"""

from __future__ import annotations

import tempfile
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from ..audio import FrontendConfig, wav_to_features
from ..model import DETECTION, SEVERITY, SPEECH_ONLY, SPEECH_TEXT, ModelConfig, build_model
from ..text import normalize_word, tokenize
from ..training import Example, TrainConfig, derive_seed, evaluate, train_model
from .synthetic import DETECTION_XOR, SEVERITY_MOD4, SyntheticConfig, generate_synthetic_corpus

# (speech-only maximum accuracy, speech-text minimum accuracy)
THRESHOLDS = {
    DETECTION_XOR: (0.60, 0.95),
    SEVERITY_MOD4: (0.40, 0.90),
}
MAX_EPOCHS = 50
TEST_SPEAKERS = 4


@dataclass
class GateResult:
    task: str
    modality: str
    seed: int
    accuracy: float
    epochs: int
    seconds: float
    test_speakers: list[str]

    @property
    def threshold(self) -> float:
        low, high = THRESHOLDS[self.task]
        return low if self.modality == SPEECH_ONLY else high

    @property
    def passed(self) -> bool:
        if self.modality == SPEECH_ONLY:
            return self.accuracy <= self.threshold
        return self.accuracy >= self.threshold

    def summary(self) -> str:
        op = "<=" if self.modality == SPEECH_ONLY else ">="
        return (f"{self.task} {self.modality:<11} seed={self.seed}: test accuracy {self.accuracy:.4f} "
                f"({op} {self.threshold:.2f} required) in {self.epochs} epochs, {self.seconds:.0f}s "
                f"-> {'PASS' if self.passed else 'FAIL'}")


def model_task(synthetic_task: str) -> str:
    return DETECTION if synthetic_task == DETECTION_XOR else SEVERITY


def corpus_examples(task: str, seed: int, root, frontend: FrontendConfig = FrontendConfig(),
                    synth: SyntheticConfig | None = None) -> list[Example]:
    """Generate the corpus under ``root`` and return one Example per utterance."""
    synth = synth or SyntheticConfig(task=task)
    manifest = generate_synthetic_corpus(synth, seed, root)
    label_task = model_task(task)
    examples = []
    for r in manifest:
        feats = wav_to_features(Path(root) / r.audio_path, frontend)
        examples.append(Example(r.record_id, feats.mel, tokenize(normalize_word(r.word_text)),
                                r.label(label_task), r.speaker_id))
    return examples


def holdout_speakers(speakers, seed: int, n: int = TEST_SPEAKERS) -> list[str]:
    rng = np.random.default_rng(derive_seed(seed, "gate-holdout"))
    speakers = sorted(speakers)
    return sorted(speakers[i] for i in rng.permutation(len(speakers))[:n])


def run_gate(task: str, modality: str, seed: int, examples: list[Example] | None = None,
             train_config: TrainConfig | None = None, workdir=None, progress=None) -> GateResult:
    """Train and test one (task, modality, seed) gate run; ``examples`` may be shared across modalities."""
    if task not in THRESHOLDS:
        raise ValueError(f"unknown gate task {task!r}")
    if modality not in (SPEECH_ONLY, SPEECH_TEXT):
        raise ValueError(f"unknown modality {modality!r}")
    t0 = time.perf_counter()
    if examples is None:
        with tempfile.TemporaryDirectory(dir=workdir) as tmp:
            examples = corpus_examples(task, seed, tmp)
    test_spk = set(holdout_speakers({e.speaker for e in examples}, seed))
    train = [e for e in examples if e.speaker not in test_spk]
    test = [e for e in examples if e.speaker in test_spk]
    cfg = train_config or TrainConfig(max_epochs=MAX_EPOCHS)
    cfg = replace(cfg, seed=derive_seed(seed, "gate-train", task, modality))
    model = build_model(ModelConfig(task=model_task(task)), modality,
                        np.random.default_rng(derive_seed(seed, "gate-init", task, modality)))
    result = train_model(model, train, None, cfg, progress)
    _, acc, _ = evaluate(model, test)
    return GateResult(task, modality, seed, acc, len(result.log.epochs), time.perf_counter() - t0,
                      sorted(test_spk))
