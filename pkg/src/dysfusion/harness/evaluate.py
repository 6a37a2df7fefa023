"""Per-fold prediction and word-group accuracy reports.

Accuracy columns follow the usual word-group breakdown for UA-Speech
results: each group on its own, uncommon words per recording block, every
word of a block (``B1_all`` = all groups restricted to block 1), and the
pooled "All words" figure.  Accuracies are reported in percent.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .manifest import Manifest, UtteranceRecord
from .splits import SplitPlan

COLUMNS = ("Digits", "Commands", "Alphabets", "Common", "Uncommon",
           "B1 uncommon", "B2 uncommon", "B3 uncommon", "B1_all", "B2_all", "B3_all", "All words")

_GROUP_COLUMNS = {"Digits": "digit", "Commands": "command", "Alphabets": "alphabet",
                  "Common": "common", "Uncommon": "uncommon"}


class EvalError(RuntimeError):
    pass


def column_members(record: UtteranceRecord) -> list[str]:
    """Every report column a test utterance counts towards."""
    cols = []
    for col, group in _GROUP_COLUMNS.items():
        if record.group == group:
            cols.append(col)
    if record.group == "uncommon":
        cols.append(f"B{record.block} uncommon")
    cols.append(f"B{record.block}_all")
    cols.append("All words")
    return cols


@dataclass
class Prediction:
    record_id: str
    fold_id: str
    label: int
    predicted: int

    @property
    def correct(self) -> bool:
        return self.label == self.predicted


@dataclass
class EvalReport:
    plan: str
    task: str
    seed: int
    predictions: list[Prediction]
    column_counts: dict[str, tuple[int, int]]
    fold_counts: dict[str, tuple[int, int]]
    meta: dict = field(default_factory=dict)

    @staticmethod
    def _pct(counts: tuple[int, int]) -> float | None:
        correct, total = counts
        return None if total == 0 else 100.0 * correct / total

    def accuracy(self, column: str = "All words") -> float | None:
        """Accuracy in percent, or None when no test utterance falls in the column."""
        return self._pct(self.column_counts[column])

    def fold_accuracy(self, fold_id: str) -> float | None:
        return self._pct(self.fold_counts[fold_id])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["column", "accuracy_pct", "correct", "total"])
        for col in COLUMNS:
            correct, total = self.column_counts[col]
            acc = self.accuracy(col)
            w.writerow([col, "" if acc is None else f"{acc:.2f}", correct, total])
        return buf.getvalue()

    def to_json(self) -> str:
        def fmt(v):
            return None if v is None else round(v, 2)

        doc = {
            "plan": self.plan, "task": self.task, "seed": self.seed, "meta": self.meta,
            "columns": {c: {"accuracy_pct": fmt(self.accuracy(c)), "correct": self.column_counts[c][0],
                            "total": self.column_counts[c][1]} for c in COLUMNS},
            "folds": {f: {"accuracy_pct": fmt(self.fold_accuracy(f)), "correct": c, "total": t}
                      for f, (c, t) in sorted(self.fold_counts.items())},
            "predictions": [{"record_id": p.record_id, "fold": p.fold_id, "label": p.label,
                             "predicted": p.predicted} for p in sorted(self.predictions,
                                                                       key=lambda p: (p.fold_id, p.record_id))],
        }
        return json.dumps(doc, indent=1, sort_keys=True)


def build_report(predictions: list[Prediction], plan: SplitPlan, manifest: Manifest,
                 meta: dict | None = None) -> EvalReport:
    """Aggregate raw per-utterance predictions into fold and word-group counts."""
    columns = {c: [0, 0] for c in COLUMNS}
    folds = {f.fold_id: [0, 0] for f in plan.folds}
    for p in predictions:
        if p.record_id not in manifest.by_id:
            raise EvalError(f"prediction for unknown record {p.record_id}")
        if p.fold_id not in folds:
            raise EvalError(f"prediction for unknown fold {p.fold_id}")
        record = manifest.records[manifest.by_id[p.record_id]]
        for col in column_members(record):
            columns[col][0] += p.correct
            columns[col][1] += 1
        folds[p.fold_id][0] += p.correct
        folds[p.fold_id][1] += 1
    return EvalReport(plan.name, plan.task, plan.seed, list(predictions),
                      {c: tuple(v) for c, v in columns.items()},
                      {f: tuple(v) for f, v in folds.items()}, dict(meta or {}))


def evaluate_plan(models: Mapping[str, object], plan: SplitPlan, manifest: Manifest,
                  load_examples: Callable[[list[str]], list], batch_size: int = 64,
                  meta: dict | None = None) -> EvalReport:
    """Run each fold's model on its test records.

    ``models`` maps fold id -> trained model; ``load_examples`` turns a list of
    record ids into ``training.Example`` objects in the same order.
    """
    from ..training import batches
    from ..model import decide

    missing = [f.fold_id for f in plan.folds if f.fold_id not in models]
    if missing:
        raise EvalError(f"no trained model for fold(s): {', '.join(missing)}")
    predictions = []
    for fold in plan.folds:
        model = models[fold.fold_id]
        examples = load_examples(fold.test)
        decided = []
        for batch in batches(examples, batch_size):
            decided.append(decide(model.scores(batch), model.config.task))
        decided = np.concatenate(decided) if decided else np.zeros(0, dtype=np.int64)
        for e, d in zip(examples, decided):
            predictions.append(Prediction(e.key, fold.fold_id, int(e.label), int(d)))
    return build_report(predictions, plan, manifest, meta)
