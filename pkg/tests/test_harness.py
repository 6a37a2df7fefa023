"""Manifest, split plans, Bayes enumeration, synthetic corpus and report aggregation."""

from collections import Counter
from dataclasses import replace
from itertools import product

import numpy as np
import pytest

from dysfusion.audio import load_wav
from dysfusion.harness import bayes
from dysfusion.harness.evaluate import COLUMNS, EvalError, Prediction, build_report, column_members
from dysfusion.harness.manifest import (FIELDS, SEVERITIES, Manifest, ManifestError, UtteranceRecord,
                                        load_manifest, ua_speech_layout, validate_records, validate_ua_speech,
                                        write_manifest)
from dysfusion.harness.splits import (SD, SEVERITY_PLAN, SID1, SID2, SplitError, SplitPlan, build_plan,
                                      build_severity_split, build_sid_loso, build_speaker_holdout, check_plan,
                                      partition_uncommon)
from dysfusion.harness.synthetic import (DETECTION_XOR, NUMBER_WORDS, SEVERITY_MOD4, SyntheticConfig,
                                         SyntheticConfigError, generate_synthetic_corpus, parse_item,
                                         synthetic_label)


@pytest.fixture(scope="module")
def ua():
    return ua_speech_layout()


def rec(speaker="S1", cohort="dysarthric", severity="low", word_id="D1", text="one", group="digit", block=1):
    return UtteranceRecord(speaker, cohort, severity, word_id, text, group, block, f"a/{speaker}_{word_id}.wav")


class TestManifest:
    def test_layout_shape(self, ua):
        validate_ua_speech(ua)
        assert len(ua.speakers) == 26
        assert len(ua.words()) == 455
        assert len(ua) == 26 * 3 * (155 + 100)

    def test_healthy_with_severity_rejected(self):
        with pytest.raises(ManifestError, match="healthy"):
            validate_records([rec(cohort="healthy", severity="low")])

    def test_dysarthric_needs_severity(self):
        with pytest.raises(ManifestError):
            validate_records([rec(severity="none")])

    def test_duplicate_rejected(self):
        with pytest.raises(ManifestError, match="duplicate"):
            validate_records([rec(), rec()])

    def test_bad_block_and_group(self):
        with pytest.raises(ManifestError):
            validate_records([rec(block=4)])
        with pytest.raises(ManifestError):
            validate_records([rec(group="numbers")])

    def test_untokenizable_word(self):
        with pytest.raises(ManifestError):
            validate_records([rec(text="42")])

    def test_labels(self):
        assert rec().label("detection") == 1
        assert rec(cohort="healthy", severity="none").label("detection") == 0
        assert rec(severity="high").label("severity") == 3
        with pytest.raises(ManifestError):
            rec(cohort="healthy", severity="none").label("severity")

    def test_csv_round_trip(self, tmp_path):
        records = [rec(), rec(word_id="D2", text="two"), rec("S2", "healthy", "none")]
        write_manifest(tmp_path / "m.csv", records)
        m = load_manifest(tmp_path / "m.csv")
        assert m.records == records
        assert (tmp_path / "m.csv").read_text().splitlines()[0] == ",".join(FIELDS)

    def test_bad_header(self, tmp_path):
        (tmp_path / "m.csv").write_text("speaker,cohort\nS1,healthy\n")
        with pytest.raises(ManifestError, match="header"):
            load_manifest(tmp_path / "m.csv")

    def test_strict_ua_rejects_small(self, tmp_path):
        write_manifest(tmp_path / "m.csv", [rec()])
        with pytest.raises(ManifestError):
            load_manifest(tmp_path / "m.csv", strict_ua_speech=True)

    def test_digest_changes_with_content(self):
        a = Manifest([rec()])
        b = Manifest([rec(block=2)])
        assert a.digest() != b.digest()
        assert a.digest() == Manifest([rec()]).digest()


class TestSplits:
    def test_uncommon_partition(self, ua):
        train, test = partition_uncommon(ua, seed=0)
        assert len(train) == 200 and len(test) == 100 and not train & test
        assert partition_uncommon(ua, seed=0) == (train, test)
        assert partition_uncommon(ua, seed=1) != (train, test)

    def test_block_partition(self, ua):
        train, test = partition_uncommon(ua, 0, mode="block")
        blocks = {ua.records[ua.by_word[w][0]].block for w in test}
        assert blocks == {3} and len(train) == 200

    def test_sd(self, ua):
        plan = build_plan(ua, SD, seed=0)
        assert check_plan(plan, ua) == []
        (fold,) = plan.folds
        test = [ua.records[ua.by_id[i]] for i in fold.test]
        assert {r.group for r in test} == {"uncommon"}
        assert len(fold.test) == 26 * 100

    @pytest.mark.parametrize("variant", [SID1, SID2])
    def test_loso(self, ua, variant):
        plan = build_sid_loso(ua, variant, seed=0)
        assert len(plan.folds) == 26
        assert check_plan(plan, ua) == []
        for fold in plan.folds:
            test_spk = {ua.records[ua.by_id[i]].speaker_id for i in fold.test}
            assert test_spk == {fold.fold_id}
            assert all(not i.startswith(fold.fold_id + "_") for i in fold.train)

    def test_loso_rejects_severity_task(self, ua):
        with pytest.raises(SplitError):
            build_sid_loso(ua, SID1, 0, task="severity")

    def test_severity(self, ua):
        plan = build_plan(ua, SEVERITY_PLAN, seed=0)
        assert check_plan(plan, ua) == []
        assert len(plan.meta["train_speakers"]) == 8 and len(plan.meta["test_speakers"]) == 7
        per_class = Counter(ua.speaker_severity(s) for s in plan.meta["train_speakers"])
        assert per_class == {s: 2 for s in SEVERITIES}
        sid2 = build_severity_split(ua, SID2, seed=0)
        assert check_plan(sid2, ua) == []

    def test_check_plan_catches_violations(self, ua):
        plan = build_plan(ua, SD, seed=0)
        fold = plan.folds[0]
        fold.train.append(fold.test[0])
        assert any("both sides" in p for p in check_plan(plan, ua))
        loso = build_sid_loso(ua, SID1, 0)
        loso.folds[0].train.append(loso.folds[0].test[0])
        assert check_plan(loso, ua)

    def test_json_round_trip(self, ua, tmp_path):
        plan = build_plan(ua, SID2, seed=3)
        plan.save(tmp_path / "p.json")
        again = SplitPlan.load(tmp_path / "p.json")
        assert again.to_json() == plan.to_json()
        assert build_plan(ua, SID2, seed=3).to_json() == plan.to_json()

    def test_holdout(self, ua):
        plan = build_speaker_holdout(ua, ["C01", "D05"], "detection")
        assert check_plan(plan, ua) == []
        with pytest.raises(SplitError):
            build_speaker_holdout(ua, ["nobody"], "detection")

    def test_unknown_plan(self, ua):
        with pytest.raises(SplitError):
            build_plan(ua, "LOSO-3", 0)


class TestBayes:
    def test_random_tables_agree(self):
        assert bayes.run_bayes_suite(200, seed=1) == (200, 200)

    def test_uniform_table_ties_to_lowest(self):
        d = bayes.decision_paths(np.full((3, 3, 4), 1 / 36))
        assert (d == 0).all()

    def test_hand_table(self):
        joint = np.zeros((2, 1, 2))
        joint[0, 0] = [0.3, 0.1]
        joint[1, 0] = [0.2, 0.4]
        d = bayes.decision_paths(joint)
        np.testing.assert_array_equal(d[:, 0, 0], [0, 1])
        assert bayes.bayes_oracle_check(joint).agree

    def test_zero_class(self):
        rng = np.random.default_rng(0)
        joint = rng.random((3, 3, 4))
        joint[:, :, 2] = 0
        joint /= joint.sum()
        report = bayes.bayes_oracle_check(joint)
        assert report.agree and (report.decisions != 2).all()

    def test_degenerate_rejected(self):
        with pytest.raises(bayes.DegenerateTableError):
            bayes.decision_paths(np.ones((2, 2, 2)))
        joint = np.zeros((2, 2, 2))
        joint[0, 0, 0] = 1.0
        with pytest.raises(bayes.DegenerateTableError):
            bayes.decision_paths(joint)


class TestSynthetic:
    def test_label_rules(self):
        assert synthetic_label(DETECTION_XOR, 0, 0) == 0
        assert synthetic_label(DETECTION_XOR, 1, 0) == 1
        assert synthetic_label(DETECTION_XOR, 0, 3) == 1
        assert synthetic_label(DETECTION_XOR, 1, 3) == 0
        assert synthetic_label(SEVERITY_MOD4, 3, 2) == 1

    @pytest.mark.parametrize("task,n_classes", [(DETECTION_XOR, 2), (SEVERITY_MOD4, 4)])
    def test_audio_alone_carries_no_label(self, task, n_classes):
        cfg = SyntheticConfig(task=task)
        for k in range(cfg.n_patterns):
            counts = Counter(synthetic_label(task, i, k) for i in range(cfg.n_words))
            assert len(set(counts.values())) == 1 and len(counts) == n_classes
        for i in range(cfg.n_words):
            # the word alone does not fix the label either
            assert len({synthetic_label(task, i, k) for k in range(cfg.n_patterns)}) > 1

    def test_config_validation(self):
        with pytest.raises(SyntheticConfigError):
            SyntheticConfig(task="nope")
        with pytest.raises(SyntheticConfigError):
            SyntheticConfig(task=SEVERITY_MOD4, n_words=6)
        with pytest.raises(SyntheticConfigError):
            SyntheticConfig(n_words=21)

    def test_parse_item(self):
        assert parse_item("W07K3") == (7, 3)

    def test_corpus(self, tmp_path):
        cfg = SyntheticConfig(task=SEVERITY_MOD4, n_words=4, n_speakers=3, utterances_per_pair=2)
        m = generate_synthetic_corpus(cfg, 5, tmp_path / "a")
        assert len(m) == 3 * 4 * 6 * 2
        assert load_manifest(tmp_path / "a" / "manifest.csv").records == m.records
        for r in m:
            i, k = parse_item(r.word_id)
            assert r.word_text == NUMBER_WORDS[i]
            assert r.label("severity") == synthetic_label(SEVERITY_MOD4, i, k)
        w = load_wav(tmp_path / "a" / m.records[0].audio_path)
        assert len(w.samples) == 8000

    def test_xor_labels_through_manifest(self, tmp_path):
        cfg = SyntheticConfig(n_words=2, n_speakers=2)
        m = generate_synthetic_corpus(cfg, 0, tmp_path)
        for r in m:
            i, k = parse_item(r.word_id)
            assert r.label("detection") == synthetic_label(DETECTION_XOR, i, k)

    def test_byte_identical(self, tmp_path):
        cfg = SyntheticConfig(n_words=2, n_speakers=2)
        a = generate_synthetic_corpus(cfg, 9, tmp_path / "a")
        generate_synthetic_corpus(cfg, 9, tmp_path / "b")
        generate_synthetic_corpus(cfg, 10, tmp_path / "c")
        for r in a:
            assert (tmp_path / "a" / r.audio_path).read_bytes() == (tmp_path / "b" / r.audio_path).read_bytes()
        assert any((tmp_path / "a" / r.audio_path).read_bytes() != (tmp_path / "c" / r.audio_path).read_bytes()
                   for r in a)


class TestReport:
    @pytest.fixture
    def small(self):
        records = []
        for spk, block, (wid, text, group) in product(
                ["A", "B"], [1, 2, 3], [("D1", "one", "digit"), ("L1", "alpha", "alphabet")]):
            records.append(rec(spk, word_id=wid, text=text, group=group, block=block))
        for spk, block in product(["A", "B"], [1, 2, 3]):
            records.append(rec(spk, word_id=f"UW{block}", text="zebra", group="uncommon", block=block))
        m = Manifest(records)
        plan = build_speaker_holdout(m, ["B"], "detection")
        return m, plan

    def test_all_correct(self, small):
        m, plan = small
        preds = [Prediction(i, "holdout", 1, 1) for i in plan.folds[0].test]
        report = build_report(preds, plan, m)
        for col in COLUMNS:
            acc = report.accuracy(col)
            assert acc is None or acc == 100.0
        assert report.accuracy("Digits") == 100.0
        assert report.accuracy("Commands") is None

    def test_counting_oracle(self, small):
        m, plan = small
        rng = np.random.default_rng(0)
        preds = [Prediction(i, "holdout", 1, int(rng.integers(0, 2))) for i in plan.folds[0].test]
        report = build_report(preds, plan, m)
        for col in COLUMNS:
            members = [p for p in preds if col in column_members(m.records[m.by_id[p.record_id]])]
            assert report.column_counts[col] == (sum(p.correct for p in members), len(members))
        pooled = report.column_counts["All words"]
        blocks = [report.column_counts[f"B{b}_all"] for b in (1, 2, 3)]
        assert pooled == (sum(c for c, _ in blocks), sum(t for _, t in blocks))

    def test_pooled_is_record_weighted(self):
        records = [rec("A", word_id=f"D{i}", text="one") for i in range(1, 4)] + [rec("B")]
        m = Manifest(records)
        plan = build_sid_loso(m, SID1, 0)
        preds = [Prediction(r.record_id, r.speaker_id, 1, 1 if r.speaker_id == "A" else 0) for r in records]
        report = build_report(preds, plan, m)
        assert report.accuracy() == 75.0  # not the 50% fold mean
        assert report.fold_accuracy("A") == 100.0 and report.fold_accuracy("B") == 0.0

    def test_order_invariance(self, small):
        m, plan = small
        preds = [Prediction(i, "holdout", 1, j % 2) for j, i in enumerate(plan.folds[0].test)]
        a = build_report(preds, plan, m)
        b = build_report(list(reversed(preds)), plan, m)
        assert a.to_csv() == b.to_csv() and a.to_json() == b.to_json()

    def test_csv_format(self, small):
        m, plan = small
        preds = [Prediction(i, "holdout", 1, int(j % 3 == 0)) for j, i in enumerate(plan.folds[0].test)]
        lines = build_report(preds, plan, m).to_csv().splitlines()
        assert lines[0] == "column,accuracy_pct,correct,total"
        assert [l.split(",")[0] for l in lines[1:]] == list(COLUMNS)
        all_words = lines[-1].split(",")
        assert all_words[1] == f"{100 * int(all_words[2]) / int(all_words[3]):.2f}"

    def test_unknown_ids_rejected(self, small):
        m, plan = small
        with pytest.raises(EvalError):
            build_report([Prediction("nope", "holdout", 0, 0)], plan, m)
        with pytest.raises(EvalError):
            build_report([Prediction(plan.folds[0].test[0], "other", 0, 0)], plan, m)

    def test_block_all_includes_uncommon(self):
        r = rec(word_id="UW1", text="zebra", group="uncommon", block=2)
        assert column_members(r) == ["Uncommon", "B2 uncommon", "B2_all", "All words"]
        assert replace(r, group="digit").group == "digit"
        assert column_members(replace(r, group="digit")) == ["Digits", "B2_all", "All words"]


def test_severity_sd_uses_dysarthric_speakers_only(ua):
    plan = build_plan(ua, SD, seed=0, task="severity")
    assert check_plan(plan, ua) == []
    speakers = {ua.records[ua.by_id[i]].speaker_id for f in plan.folds for i in f.train + f.test}
    assert speakers == {s for s in ua.speakers if ua.speaker_cohort(s) == "dysarthric"}
    assert all(ua.records[ua.by_id[i]].label("severity") in range(4) for i in plan.folds[0].test)
