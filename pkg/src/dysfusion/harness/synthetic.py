"""Synthetic speech+text corpus where only the (audio, word) pair determines the label.

Each utterance pairs a word index i with one of K tone patterns k.  Labels:

  detection-xor:   label = (k == 0) XOR (i is even)
  severity-mod4:   label = (k + i) mod 4

With words balanced over parity / residue, the audio pattern alone carries
no information about the label, while audio plus word text fixes it.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..audio import SAMPLE_RATE, write_wav
from .manifest import SEVERITIES, Manifest, UtteranceRecord, write_manifest

DETECTION_XOR = "detection-xor"
SEVERITY_MOD4 = "severity-mod4"

NUMBER_WORDS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten",
                "eleven", "twelve", "thirteen", "fourteen", "fifteen", "sixteen", "seventeen", "eighteen",
                "nineteen")


class SyntheticConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SyntheticConfig:
    task: str = DETECTION_XOR
    n_words: int = 20
    n_speakers: int = 16
    utterances_per_pair: int = 1
    # one tone per coarse mel band so patterns stay separable after frequency pooling
    tones_hz: tuple[float, ...] = (320.0, 615.0, 1475.0, 2100.0, 3935.0, 5260.0)
    duration_s: float = 0.5
    edge_silence_s: float = 0.05
    amplitude: float = 0.5
    noise_std: float = 0.001
    pitch_spread: float = 0.03

    def __post_init__(self):
        if self.task not in (DETECTION_XOR, SEVERITY_MOD4):
            raise SyntheticConfigError(f"unknown task {self.task!r}")
        if not 2 <= self.n_words <= len(NUMBER_WORDS):
            raise SyntheticConfigError(f"n_words must be in [2, {len(NUMBER_WORDS)}]")
        if self.task == DETECTION_XOR and self.n_words % 2:
            raise SyntheticConfigError("detection-xor needs an even word count for parity balance")
        if self.task == SEVERITY_MOD4 and self.n_words % 4:
            raise SyntheticConfigError("severity-mod4 needs a word count divisible by 4")
        if len(self.tones_hz) < 2:
            raise SyntheticConfigError("need at least two tone patterns")
        if not 1 <= self.utterances_per_pair <= 3:
            raise SyntheticConfigError("utterances_per_pair must be 1..3 (one per block)")
        if self.n_speakers < 2:
            raise SyntheticConfigError("need at least two speakers")
        if self.duration_s <= 2 * self.edge_silence_s:
            raise SyntheticConfigError("duration too short for the edge silences")

    @property
    def n_patterns(self) -> int:
        return len(self.tones_hz)


def synthetic_label(task: str, word_index: int, pattern: int) -> int:
    if task == DETECTION_XOR:
        return int((pattern == 0) != (word_index % 2 == 0))
    return (pattern + word_index) % 4


def parse_item(word_id: str) -> tuple[int, int]:
    """word_id "W07K3" -> (word index 7, pattern 3)."""
    w, k = word_id[1:].split("K")
    return int(w), int(k)


def _record_for(config: SyntheticConfig, speaker: str, i: int, k: int, block: int, audio: str) -> UtteranceRecord:
    label = synthetic_label(config.task, i, k)
    if config.task == DETECTION_XOR:
        cohort, severity = ("dysarthric", "low") if label else ("healthy", "none")
    else:
        cohort, severity = "dysarthric", SEVERITIES[label]
    group = "digit" if i < 10 else "common"
    return UtteranceRecord(speaker, cohort, severity, f"W{i:02d}K{k}", NUMBER_WORDS[i], group, block, audio)


def synthesize(config: SyntheticConfig, pattern: int, pitch: float, rng: np.random.Generator) -> np.ndarray:
    n = int(round(config.duration_s * SAMPLE_RATE))
    edge = int(round(config.edge_silence_s * SAMPLE_RATE))
    body = n - 2 * edge
    t = np.arange(body) / SAMPLE_RATE
    freq = config.tones_hz[pattern] * pitch
    tone = np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
    ramp = min(160, body // 2)
    env = np.ones(body)
    env[:ramp] = 0.5 - 0.5 * np.cos(np.pi * np.arange(ramp) / ramp)
    env[-ramp:] = env[:ramp][::-1]
    x = np.zeros(n)
    x[edge:edge + body] = config.amplitude * rng.uniform(0.6, 1.0) * env * tone
    x += rng.normal(0.0, config.noise_std, size=n)
    return np.clip(x, -1.0, 32767 / 32768)


def generate_synthetic_corpus(config: SyntheticConfig, seed: int, out_dir) -> Manifest:
    """Write WAVs under ``out_dir/audio`` and ``out_dir/manifest.csv``; byte-identical per seed."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    root = np.random.SeedSequence(seed)
    speaker_seq, utt_seq = root.spawn(2)
    pitch = 1.0 + np.random.default_rng(speaker_seq).uniform(-config.pitch_spread, config.pitch_spread,
                                                             size=config.n_speakers)
    utt_rngs = iter(utt_seq.spawn(config.n_speakers * config.n_words * config.n_patterns
                                  * config.utterances_per_pair))
    records = []
    for s in range(config.n_speakers):
        speaker = f"S{s:02d}"
        for i in range(config.n_words):
            for k in range(config.n_patterns):
                for rep in range(config.utterances_per_pair):
                    block = rep + 1
                    rel = f"audio/{speaker}_B{block}_W{i:02d}K{k}.wav"
                    samples = synthesize(config, k, pitch[s], np.random.default_rng(next(utt_rngs)))
                    write_wav(out_dir / rel, samples)
                    records.append(_record_for(config, speaker, i, k, block, rel))
    write_manifest(out_dir / "manifest.csv", records)
    return Manifest(records, str(out_dir / "manifest.csv"))
