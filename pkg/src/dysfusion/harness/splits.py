"""Train/test partitions: SD, SID-1/SID-2 leave-one-speaker-out, and the 8/7 severity split."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .manifest import REPEATED_GROUPS, SEVERITIES, Manifest

SD, SID1, SID2, SEVERITY_PLAN = "SD", "SID-1", "SID-2", "SEVERITY"
PLANS = (SD, SID1, SID2, SEVERITY_PLAN)

TRAIN_UNCOMMON = 200
TEST_UNCOMMON = 100
SEVERITY_TRAIN_PER_CLASS = 2


class SplitError(ValueError):
    pass


@dataclass
class Fold:
    fold_id: str
    train: list[str]
    test: list[str]


@dataclass
class SplitPlan:
    name: str
    task: str
    seed: int
    folds: list[Fold]
    meta: dict = field(default_factory=dict)

    def to_json(self) -> str:
        doc = {"name": self.name, "task": self.task, "seed": self.seed, "meta": self.meta,
               "folds": [{"fold_id": f.fold_id, "train": f.train, "test": f.test} for f in self.folds]}
        return json.dumps(doc, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        doc = json.loads(text)
        folds = [Fold(f["fold_id"], list(f["train"]), list(f["test"])) for f in doc["folds"]]
        return cls(doc["name"], doc["task"], int(doc["seed"]), folds, doc.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "SplitPlan":
        return cls.from_json(Path(path).read_text())


def partition_uncommon(manifest: Manifest, seed: int, mode: str = "random") -> tuple[set[str], set[str]]:
    """(train uncommon word ids, test uncommon word ids): 200 / 100.

    ``random`` samples the 200 without replacement with ``seed``; ``block``
    takes blocks 1-2 for training and block 3 for testing.
    """
    words = manifest.words("uncommon")
    if len(words) < TRAIN_UNCOMMON + TEST_UNCOMMON:
        raise SplitError(f"need {TRAIN_UNCOMMON + TEST_UNCOMMON} uncommon words, manifest has {len(words)}")
    if mode == "random":
        rng = np.random.default_rng(seed)
        picked = rng.choice(len(words), size=TRAIN_UNCOMMON, replace=False)
        train = {words[i] for i in picked}
        test = set(words) - train
        if len(test) > TEST_UNCOMMON:
            test = set(sorted(test)[:TEST_UNCOMMON])
    elif mode == "block":
        block_of = {w: manifest.records[manifest.by_word[w][0]].block for w in words}
        train = {w for w in words if block_of[w] in (1, 2)}
        test = {w for w in words if block_of[w] == 3}
        if len(train) != TRAIN_UNCOMMON or len(test) != TEST_UNCOMMON:
            raise SplitError("block mode needs 100 uncommon words in each block")
    else:
        raise SplitError(f"unknown word mode {mode!r}")
    return train, test


def _ids(manifest: Manifest, pred) -> list[str]:
    return [r.record_id for r in manifest if pred(r)]


def _word_sides(manifest: Manifest, seed: int, mode: str):
    train_uw, test_uw = partition_uncommon(manifest, seed, mode)

    def train_word(r):
        return r.group in REPEATED_GROUPS or r.word_id in train_uw

    def test_word(r):
        return r.word_id in test_uw

    return train_word, test_word, sorted(train_uw), sorted(test_uw)


def build_sd_split(manifest: Manifest, seed: int, task: str = "detection", word_mode: str = "random") -> SplitPlan:
    """Speaker-dependent, unseen words: every speaker on both sides, uncommon words split 200/100."""
    train_word, test_word, tr, te = _word_sides(manifest, seed, word_mode)
    fold = Fold("SD", _ids(manifest, train_word), _ids(manifest, test_word))
    return SplitPlan(SD, task, seed, [fold], {"train_uncommon": tr, "test_uncommon": te, "word_mode": word_mode})


def build_sid_loso(manifest: Manifest, variant: str, seed: int, task: str = "detection",
                   word_mode: str = "random") -> SplitPlan:
    """One fold per held-out speaker.  SID-1: all words both sides; SID-2: 200/100 uncommon partition."""
    if variant not in (SID1, SID2):
        raise SplitError(f"LOSO variant must be SID-1 or SID-2, got {variant!r}")
    if task != "detection":
        raise SplitError("LOSO plans are defined for the detection task")
    meta: dict = {"word_mode": word_mode}
    if variant == SID2:
        train_word, test_word, tr, te = _word_sides(manifest, seed, word_mode)
        meta.update(train_uncommon=tr, test_uncommon=te)
    else:
        def train_word(r):
            return True

        test_word = train_word
    folds = []
    for spk in manifest.speakers:
        folds.append(Fold(spk,
                          _ids(manifest, lambda r: r.speaker_id != spk and train_word(r)),
                          _ids(manifest, lambda r: r.speaker_id == spk and test_word(r))))
    return SplitPlan(variant, task, seed, folds, meta)


def severity_train_speakers(manifest: Manifest) -> list[str]:
    """Two speakers per severity class, lowest speaker ids first."""
    chosen = []
    for sev in SEVERITIES:
        spk = sorted(s for s in manifest.speakers
                     if manifest.speaker_cohort(s) == "dysarthric" and manifest.speaker_severity(s) == sev)
        if len(spk) < SEVERITY_TRAIN_PER_CLASS:
            raise SplitError(f"severity class {sev!r} has {len(spk)} speakers, need {SEVERITY_TRAIN_PER_CLASS}")
        chosen += spk[:SEVERITY_TRAIN_PER_CLASS]
    return chosen


def build_severity_split(manifest: Manifest, variant: str = SID1, seed: int = 0,
                         word_mode: str = "random") -> SplitPlan:
    """8 training speakers (2 per class) / remaining 7 for testing, dysarthric speakers only.

    ``variant`` selects the word handling: SID-1 keeps all words on both
    sides, SID-2 applies the 200/100 uncommon partition.  The speaker-dependent
    severity setting is ``build_sd_split`` on the dysarthric subset.
    """
    dys = manifest.subset(lambda r: r.cohort == "dysarthric")
    train_spk = set(severity_train_speakers(dys))
    meta: dict = {"variant": variant, "train_speakers": sorted(train_spk),
                  "test_speakers": sorted(set(dys.speakers) - train_spk)}
    if variant == SID1:
        def train_word(r):
            return True

        test_word = train_word
    elif variant == SID2:
        train_word, test_word, tr, te = _word_sides(dys, seed, word_mode)
        meta.update(train_uncommon=tr, test_uncommon=te, word_mode=word_mode)
    else:
        raise SplitError(f"severity variant must be SID-1 or SID-2, got {variant!r}")
    fold = Fold("SEVERITY",
                _ids(dys, lambda r: r.speaker_id in train_spk and train_word(r)),
                _ids(dys, lambda r: r.speaker_id not in train_spk and test_word(r)))
    return SplitPlan(SEVERITY_PLAN, "severity", seed, [fold], meta)


def build_speaker_holdout(manifest: Manifest, test_speakers, task: str, seed: int = 0) -> SplitPlan:
    """Single speaker-disjoint fold, all words on both sides."""
    test_speakers = set(test_speakers)
    unknown = test_speakers - set(manifest.speakers)
    if unknown:
        raise SplitError(f"unknown speakers {sorted(unknown)}")
    fold = Fold("holdout",
                _ids(manifest, lambda r: r.speaker_id not in test_speakers),
                _ids(manifest, lambda r: r.speaker_id in test_speakers))
    return SplitPlan("HOLDOUT", task, seed, [fold], {"test_speakers": sorted(test_speakers)})


def build_plan(manifest: Manifest, plan: str, seed: int, task: str | None = None,
               word_mode: str = "random") -> SplitPlan:
    if plan == SD:
        if task == "severity":
            # speaker-dependent severity: only dysarthric speakers carry a class
            manifest = manifest.subset(lambda r: r.cohort == "dysarthric")
        return build_sd_split(manifest, seed, task or "detection", word_mode)
    if plan in (SID1, SID2):
        return build_sid_loso(manifest, plan, seed, task or "detection", word_mode)
    if plan == SEVERITY_PLAN:
        return build_severity_split(manifest, SID1, seed, word_mode)
    raise SplitError(f"unknown plan {plan!r}; choose from {PLANS}")


def check_plan(plan: SplitPlan, manifest: Manifest) -> list[str]:
    """Programmatic invariant audit; returns a list of violations (empty = OK)."""
    problems = []
    recs = manifest.by_id
    for fold in plan.folds:
        missing = [i for i in fold.train + fold.test if i not in recs]
        if missing:
            problems.append(f"{fold.fold_id}: unknown record ids {missing[:3]}")
            continue
        if set(fold.train) & set(fold.test):
            problems.append(f"{fold.fold_id}: record on both sides")
        train = [manifest.records[recs[i]] for i in fold.train]
        test = [manifest.records[recs[i]] for i in fold.test]
        if not train or not test:
            problems.append(f"{fold.fold_id}: empty side")
            continue
        tr_spk = {r.speaker_id for r in train}
        te_spk = {r.speaker_id for r in test}
        tr_uw = {r.word_id for r in train if r.group == "uncommon"}
        te_uw = {r.word_id for r in test if r.group == "uncommon"}
        if plan.name in (SID1, SID2):
            if len(te_spk) != 1:
                problems.append(f"{fold.fold_id}: {len(te_spk)} test speakers")
            if tr_spk & te_spk:
                problems.append(f"{fold.fold_id}: test speaker also in training")
        if plan.name in (SD, SID2) or plan.meta.get("variant") == SID2:
            if tr_uw & te_uw:
                problems.append(f"{fold.fold_id}: uncommon words overlap")
            if len(tr_uw) != TRAIN_UNCOMMON or len(te_uw) != TEST_UNCOMMON:
                problems.append(f"{fold.fold_id}: uncommon split {len(tr_uw)}/{len(te_uw)}")
            if any(r.group != "uncommon" for r in test):
                problems.append(f"{fold.fold_id}: non-uncommon word in test")
        if plan.name == SD and tr_spk != te_spk:
            problems.append(f"{fold.fold_id}: SD speakers differ between sides")
        if plan.name == SEVERITY_PLAN:
            if tr_spk & te_spk:
                problems.append("severity: speaker on both sides")
            if len(tr_spk) != 8 or len(te_spk) != 7:
                problems.append(f"severity: {len(tr_spk)}/{len(te_spk)} speakers")
            per_class = [sum(manifest.speaker_severity(s) == sev for s in tr_spk) for sev in SEVERITIES]
            if per_class != [SEVERITY_TRAIN_PER_CLASS] * 4:
                problems.append(f"severity: train speakers per class {per_class}")
            if {r.severity for r in test} != set(SEVERITIES):
                problems.append("severity: not every class present in test")
        if plan.name == "HOLDOUT" and tr_spk & te_spk:
            problems.append("holdout: speaker on both sides")
    if plan.name in (SID1, SID2) and len(plan.folds) != len(manifest.speakers):
        problems.append(f"{len(plan.folds)} folds for {len(manifest.speakers)} speakers")
    return problems
