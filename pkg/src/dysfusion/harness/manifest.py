"""Dataset manifest: CSV schema, validation and indices."""

from __future__ import annotations

import csv
import hashlib
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path

from ..text import TokenizeError, normalize_word

FIELDS = ("speaker_id", "cohort", "severity", "word_id", "word_text", "group", "block", "audio_path")
COHORTS = ("healthy", "dysarthric")
SEVERITIES = ("very_low", "low", "medium", "high")
GROUPS = ("digit", "alphabet", "command", "common", "uncommon")
REPEATED_GROUPS = ("digit", "alphabet", "command", "common")

# UA-Speech layout
UA_GROUP_SIZES = {"digit": 10, "alphabet": 26, "command": 19, "common": 100, "uncommon": 300}
UA_HEALTHY_SPEAKERS = 11
UA_DYSARTHRIC_SPEAKERS = 15


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class UtteranceRecord:
    speaker_id: str
    cohort: str
    severity: str
    word_id: str
    word_text: str
    group: str
    block: int
    audio_path: str

    @property
    def record_id(self) -> str:
        return f"{self.speaker_id}_B{self.block}_{self.word_id}"

    def label(self, task: str) -> int:
        """1 = dysarthric for detection; severity index (very_low=0 ... high=3) otherwise."""
        if task == "detection":
            return int(self.cohort == "dysarthric")
        if self.severity not in SEVERITIES:
            raise ManifestError(f"{self.record_id}: no severity label for severity task")
        return SEVERITIES.index(self.severity)


@dataclass
class Manifest:
    records: list[UtteranceRecord]
    source: str = ""
    by_speaker: dict[str, list[int]] = field(init=False)
    by_word: dict[str, list[int]] = field(init=False)
    by_group: dict[str, list[int]] = field(init=False)
    by_block: dict[int, list[int]] = field(init=False)
    by_id: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.by_speaker, self.by_word = defaultdict(list), defaultdict(list)
        self.by_group, self.by_block = defaultdict(list), defaultdict(list)
        self.by_id = {}
        for i, r in enumerate(self.records):
            self.by_speaker[r.speaker_id].append(i)
            self.by_word[r.word_id].append(i)
            self.by_group[r.group].append(i)
            self.by_block[r.block].append(i)
            self.by_id[r.record_id] = i
        for index in (self.by_speaker, self.by_word, self.by_group, self.by_block):
            index.default_factory = None

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def speakers(self) -> list[str]:
        return sorted(self.by_speaker)

    def speaker_cohort(self, speaker: str) -> str:
        return self.records[self.by_speaker[speaker][0]].cohort

    def speaker_severity(self, speaker: str) -> str:
        return self.records[self.by_speaker[speaker][0]].severity

    def words(self, group: str | None = None) -> list[str]:
        ids = {r.word_id for r in self.records if group is None or r.group == group}
        return sorted(ids)

    def subset(self, predicate) -> "Manifest":
        return Manifest([r for r in self.records if predicate(r)], self.source)

    def digest(self) -> str:
        h = hashlib.sha256()
        for r in self.records:
            h.update("|".join(str(getattr(r, f)) for f in FIELDS).encode() + b"\n")
        return h.hexdigest()


def validate_records(records: list[UtteranceRecord]) -> None:
    seen: set[tuple[str, str, int]] = set()
    for r in records:
        where = r.record_id
        if r.cohort not in COHORTS:
            raise ManifestError(f"{where}: cohort {r.cohort!r} not in {COHORTS}")
        if r.cohort == "healthy" and r.severity != "none":
            raise ManifestError(f"{where}: healthy speaker carries severity {r.severity!r}")
        if r.cohort == "dysarthric" and r.severity not in SEVERITIES:
            raise ManifestError(f"{where}: dysarthric speaker needs a severity in {SEVERITIES}")
        if r.group not in GROUPS:
            raise ManifestError(f"{where}: group {r.group!r} not in {GROUPS}")
        if r.block not in (1, 2, 3):
            raise ManifestError(f"{where}: block must be 1, 2 or 3")
        try:
            normalize_word(r.word_text)
        except TokenizeError as err:
            raise ManifestError(f"{where}: {err}") from err
        key = (r.speaker_id, r.word_id, r.block)
        if key in seen:
            raise ManifestError(f"duplicate row for speaker {r.speaker_id}, word {r.word_id}, block {r.block}")
        seen.add(key)


def validate_ua_speech(manifest: Manifest) -> None:
    """Counts and structure of the full UA-Speech detection manifest."""
    cohorts = Counter(manifest.speaker_cohort(s) for s in manifest.speakers)
    if cohorts["healthy"] != UA_HEALTHY_SPEAKERS or cohorts["dysarthric"] != UA_DYSARTHRIC_SPEAKERS:
        raise ManifestError(f"expected 11 healthy + 15 dysarthric speakers, got {dict(cohorts)}")
    for group, size in UA_GROUP_SIZES.items():
        n = len(manifest.words(group))
        if n != size:
            raise ManifestError(f"expected {size} distinct {group} words, got {n}")
    uncommon_blocks: dict[str, set[int]] = defaultdict(set)
    for r in manifest:
        if r.group == "uncommon":
            uncommon_blocks[r.word_id].add(r.block)
    if any(len(b) != 1 for b in uncommon_blocks.values()):
        raise ManifestError("an uncommon word appears in more than one block")
    per_block = Counter(next(iter(b)) for b in uncommon_blocks.values())
    if sorted(per_block.values()) != [100, 100, 100]:
        raise ManifestError(f"expected 100 uncommon words per block, got {dict(per_block)}")


def load_manifest(path, strict_ua_speech: bool = False) -> Manifest:
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or tuple(reader.fieldnames) != FIELDS:
            raise ManifestError(f"{path}: header must be {','.join(FIELDS)}")
        records = []
        for lineno, row in enumerate(reader, start=2):
            try:
                block = int(row["block"])
            except ValueError as err:
                raise ManifestError(f"{path}:{lineno}: block {row['block']!r} is not an integer") from err
            records.append(UtteranceRecord(
                row["speaker_id"], row["cohort"], row["severity"], row["word_id"],
                row["word_text"], row["group"], block, row["audio_path"]))
    validate_records(records)
    manifest = Manifest(records, str(path))
    if strict_ua_speech:
        validate_ua_speech(manifest)
    return manifest


def write_manifest(path, records) -> None:
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(FIELDS)
        for r in records:
            w.writerow([getattr(r, f) for f in FIELDS])


def ua_speech_layout(audio_root: str = "audio") -> Manifest:
    """A manifest with UA-Speech's shape: 26 speakers, 455 words, 3 blocks.

    Speaker ids and word texts are placeholders; the point is the structure
    (group sizes, per-block uncommon words, severity spread 5/3/3/4) that the
    split builders and their invariants depend on.  No audio is implied.
    """
    speakers = [(f"C{i:02d}", "healthy", "none") for i in range(1, UA_HEALTHY_SPEAKERS + 1)]
    spread = ["very_low"] * 5 + ["low"] * 3 + ["medium"] * 3 + ["high"] * 4
    speakers += [(f"D{i:02d}", "dysarthric", sev) for i, sev in enumerate(spread, start=1)]
    digits = ["zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine"]
    alphabet = ["alpha", "bravo", "charlie", "delta", "echo", "foxtrot", "golf", "hotel", "india",
                "juliet", "kilo", "lima", "mike", "november", "oscar", "papa", "quebec", "romeo",
                "sierra", "tango", "uniform", "victor", "whiskey", "xray", "yankee", "zulu"]
    items = [(f"D{i + 1}", w, "digit") for i, w in enumerate(digits)]
    items += [(f"L{i + 1}", w, "alphabet") for i, w in enumerate(alphabet)]
    items += [(f"C{i + 1}", _placeholder_word("cmd", i), "command") for i in range(19)]
    items += [(f"CW{i + 1}", _placeholder_word("cw", i), "common") for i in range(100)]
    records = []
    for spk, cohort, sev in speakers:
        for block in (1, 2, 3):
            for wid, text, group in items:
                records.append(UtteranceRecord(spk, cohort, sev, wid, text, group, block,
                                               f"{audio_root}/{spk}_B{block}_{wid}.wav"))
            for i in range(100):
                wid = f"UW{(block - 1) * 100 + i + 1}"
                records.append(UtteranceRecord(spk, cohort, sev, wid, _placeholder_word("uw", (block - 1) * 100 + i),
                                               "uncommon", block, f"{audio_root}/{spk}_B{block}_{wid}.wav"))
    return Manifest(records, "ua-speech-layout")


def _placeholder_word(prefix: str, i: int) -> str:
    digits = []
    n = i
    for _ in range(3):
        digits.append(chr(ord("a") + n % 26))
        n //= 26
    return prefix + "".join(reversed(digits))
