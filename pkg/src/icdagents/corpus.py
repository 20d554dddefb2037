"""Clinical note corpora, evaluation subsets and sentence segmentation."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

from .errors import CorpusError
from .icd import GrammarError, canonicalize_code

SPLITS = ("train", "dev", "test")


@dataclass(frozen=True)
class NoteRecord:
    note_id: str
    text: str
    gold_codes: frozenset[str]
    split: str = "test"

    def __post_init__(self):
        if not self.note_id:
            raise CorpusError("note_id must be non-empty")
        if not self.text or not self.text.strip():
            raise CorpusError(f"note {self.note_id}: text must be non-empty")
        if self.split not in SPLITS:
            raise CorpusError(f"note {self.note_id}: unknown split {self.split!r}")
        object.__setattr__(
            self, "gold_codes", frozenset(canonicalize_code(c) for c in self.gold_codes)
        )

    def to_dict(self) -> dict:
        return {
            "note_id": self.note_id,
            "text": self.text,
            "gold_codes": sorted(self.gold_codes),
            "split": self.split,
        }


@dataclass(frozen=True)
class Corpus:
    notes: tuple[NoteRecord, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "notes", tuple(self.notes))
        seen: set[str] = set()
        for note in self.notes:
            if note.note_id in seen:
                raise CorpusError(f"duplicate note_id {note.note_id}")
            seen.add(note.note_id)

    def __iter__(self) -> Iterator[NoteRecord]:
        return iter(self.notes)

    def __len__(self) -> int:
        return len(self.notes)

    def __getitem__(self, i):
        return self.notes[i]

    def by_id(self) -> dict[str, NoteRecord]:
        return {n.note_id: n for n in self.notes}

    def split(self, name: str) -> "Corpus":
        return Corpus(tuple(n for n in self.notes if n.split == name))

    def code_counts(self, split: str | None = "train") -> Counter:
        counts: Counter = Counter()
        for note in self.notes:
            if split is None or note.split == split:
                counts.update(note.gold_codes)
        return counts


def _record_to_note(record: Mapping, where: str) -> NoteRecord:
    if not isinstance(record, Mapping):
        raise CorpusError(f"{where}: record is not an object")
    missing = [k for k in ("note_id", "text", "gold_codes", "split") if k not in record]
    if missing:
        raise CorpusError(f"{where}: record missing field(s) {', '.join(missing)}")
    codes = record["gold_codes"]
    if isinstance(codes, str):
        codes = [c for c in re.split(r"[;,]", codes) if c.strip()]
    try:
        return NoteRecord(
            note_id=str(record["note_id"]),
            text=record["text"],
            gold_codes=frozenset(codes),
            split=record["split"],
        )
    except (GrammarError, CorpusError) as exc:
        raise CorpusError(f"{where}: {exc}") from exc


def load_corpus(source: str | Path) -> Corpus:
    """Read a line-delimited JSON corpus (one note per line)."""
    path = Path(source)
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise CorpusError(f"cannot read corpus {path}: {exc}") from exc
    notes = []
    seen: set[str] = set()
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorpusError(f"{path}:{lineno}: malformed record ({exc.msg})") from exc
        label = f"{path}:{lineno}"
        if isinstance(record, Mapping) and "note_id" in record:
            label += f" (note {record['note_id']})"
        note = _record_to_note(record, label)
        if note.note_id in seen:
            raise CorpusError(f"{path}:{lineno}: duplicate note_id {note.note_id}")
        seen.add(note.note_id)
        notes.append(note)
    return Corpus(tuple(notes))


def write_corpus(corpus: Iterable[NoteRecord], dest: str | Path) -> None:
    with open(dest, "w", encoding="utf-8") as fh:
        for note in corpus:
            fh.write(json.dumps(note.to_dict(), ensure_ascii=False) + "\n")


def _project(corpus: Corpus, label_space: Sequence[str]) -> Corpus:
    space = set(label_space)
    kept = []
    for note in corpus:
        projected = note.gold_codes & space
        if projected:
            kept.append(NoteRecord(note.note_id, note.text, frozenset(projected), note.split))
    return Corpus(tuple(kept))


def build_top_k_subset(corpus: Corpus, k: int) -> tuple[tuple[str, ...], Corpus]:
    """Keep notes touching the ``k`` most frequent train codes.

    Frequency ties at the cut-off are broken by code order so the label
    space is deterministic.
    """
    if k < 1:
        raise CorpusError("k must be at least 1")
    counts = corpus.code_counts("train")
    if not counts:
        raise CorpusError("corpus has no train split to rank code frequency on")
    if len(counts) < k:
        raise CorpusError(f"only {len(counts)} distinct train codes, need {k}")
    ranked = sorted(counts.items(), key=lambda item: (-item[1], item[0]))
    space = tuple(code for code, _ in ranked[:k])
    return space, _project(corpus, space)


def build_rare_subset(
    corpus: Corpus, max_train_occurrences: int = 5
) -> tuple[tuple[str, ...], Corpus]:
    """Keep notes touching codes seen at most ``max_train_occurrences`` times in train.

    Codes that occur only outside the train split count as zero occurrences.
    """
    if max_train_occurrences < 1:
        raise CorpusError("rare-code threshold must be at least 1")
    counts = corpus.code_counts("train")
    every_code = corpus.code_counts(None)
    space = tuple(sorted(c for c in every_code if counts.get(c, 0) <= max_train_occurrences))
    if not space:
        raise CorpusError(f"no codes occur {max_train_occurrences} or fewer times in train")
    return space, _project(corpus, space)


def write_subset_manifest(
    dest: str | Path, label_space: Sequence[str], corpus: Corpus, **params
) -> None:
    manifest = {
        "params": params,
        "label_space": list(label_space),
        "note_ids": [n.note_id for n in corpus],
        "counts": {s: len(corpus.split(s)) for s in SPLITS},
    }
    Path(dest).write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")


@dataclass(frozen=True)
class Sentence:
    text: str
    start: int
    end: int


_ABBREVIATIONS = frozenset({"dr.", "mr.", "mrs.", "vs.", "e.g.", "i.e."})
_TERMINATORS = ".!?"


def _is_abbreviation(text: str, period: int) -> bool:
    start = period
    while start > 0 and not text[start - 1].isspace():
        start -= 1
    token = text[start : period + 1].lstrip("([{\"'").lower()
    return token in _ABBREVIATIONS


def _opens_sentence(text: str, pos: int) -> bool:
    """True when ``pos`` is at end of text or starts whitespace followed by
    an uppercase letter or digit (or by end of text)."""
    n = len(text)
    if pos >= n:
        return True
    if not text[pos].isspace():
        return False
    while pos < n and text[pos].isspace():
        pos += 1
    return pos == n or text[pos].isupper() or text[pos].isdigit()


def segment_sentences(text: str) -> list[Sentence]:
    """Split ``text`` into ordered, non-overlapping sentences.

    A boundary falls after ``.``, ``!`` or ``?`` and at the start of a run of
    newlines, provided what follows is whitespace and then an uppercase
    letter, a digit, or the end of the text. A period closing one of a few
    common abbreviations (Dr., Mr., Mrs., vs., e.g., i.e.) never splits.
    Sentence offsets exclude surrounding whitespace.
    """
    cuts = set()
    n = len(text)
    for i, ch in enumerate(text):
        if ch in _TERMINATORS:
            if _opens_sentence(text, i + 1) and not (ch == "." and _is_abbreviation(text, i)):
                cuts.add(i + 1)
        elif ch == "\n" and (i == 0 or text[i - 1] != "\n"):
            if _opens_sentence(text, i):
                cuts.add(i)
    cuts.add(n)

    sentences = []
    prev = 0
    for cut in sorted(cuts):
        piece = text[prev:cut]
        stripped = piece.strip()
        if stripped:
            start = prev + (len(piece) - len(piece.lstrip()))
            end = start + len(stripped)
            sentences.append(Sentence(stripped, start, end))
        prev = cut
    return sentences


def sentence_at(sentences: Sequence[Sentence], offset: int) -> Sentence | None:
    """The sentence containing ``offset``, or the next one if it is whitespace."""
    for sent in sentences:
        if offset < sent.end:
            return sent
    return None


@dataclass(frozen=True)
class EvidenceAnnotation:
    note_id: str
    code: str
    start: int
    end: int

    def __post_init__(self):
        object.__setattr__(self, "code", canonicalize_code(self.code))
        if not 0 <= self.start < self.end:
            raise CorpusError(f"bad evidence span [{self.start}, {self.end})")


@dataclass(frozen=True)
class EvidencePair:
    """A (sentence, code) pair; the sentence is identified by note and offsets."""

    note_id: str
    start: int
    end: int
    code: str
    text: str = field(default="", compare=False)

    def overlaps(self, other: "EvidencePair") -> bool:
        return (
            self.note_id == other.note_id
            and self.code == other.code
            and self.start < other.end
            and other.start < self.end
        )

    def to_dict(self) -> dict:
        return {
            "note_id": self.note_id,
            "code": self.code,
            "start": self.start,
            "end": self.end,
            "text": self.text,
        }


def load_evidence(source: str | Path) -> list[EvidenceAnnotation]:
    anns = []
    path = Path(source)
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            anns.append(
                EvidenceAnnotation(
                    str(rec["note_id"]), rec["code"], int(rec["span_start"]), int(rec["span_end"])
                )
            )
        except (json.JSONDecodeError, KeyError, TypeError, ValueError, GrammarError) as exc:
            raise CorpusError(f"{path}:{lineno}: malformed evidence record ({exc})") from exc
    return anns


def evidence_pairs(
    note: NoteRecord, anns: Iterable[EvidenceAnnotation]
) -> list[EvidencePair]:
    """Pair each annotation's code with the sentence holding its span start."""
    sentences = segment_sentences(note.text)
    pairs: list[EvidencePair] = []
    seen: set[EvidencePair] = set()
    for ann in anns:
        if ann.note_id != note.note_id:
            raise CorpusError(f"annotation for {ann.note_id} given with note {note.note_id}")
        if ann.end > len(note.text):
            raise CorpusError(
                f"span [{ann.start}, {ann.end}) outside note {note.note_id} "
                f"of length {len(note.text)}"
            )
        sent = sentence_at(sentences, ann.start)
        if sent is None:
            raise CorpusError(f"span start {ann.start} falls after the last sentence")
        pair = EvidencePair(note.note_id, sent.start, sent.end, ann.code, sent.text)
        if pair not in seen:
            seen.add(pair)
            pairs.append(pair)
    return pairs


@dataclass(frozen=True)
class SoapNote:
    note_id: str
    subjective: str = ""
    objective: str = ""
    assessment: str = ""
    plan: str = ""
    warnings: tuple[str, ...] = ()

    @property
    def degenerate(self) -> bool:
        return not all(s.strip() for s in (self.subjective, self.objective, self.assessment, self.plan))

    @property
    def missing_history(self) -> bool:
        """Subjective and Objective both empty: unusable for assessment generation."""
        return not self.subjective.strip() and not self.objective.strip()

    def to_dict(self) -> dict:
        return {
            "note_id": self.note_id,
            "subjective": self.subjective,
            "objective": self.objective,
            "assessment": self.assessment,
            "plan": self.plan,
            "degenerate": self.degenerate,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, rec: Mapping) -> "SoapNote":
        return cls(
            note_id=str(rec["note_id"]),
            subjective=rec.get("subjective", ""),
            objective=rec.get("objective", ""),
            assessment=rec.get("assessment", ""),
            plan=rec.get("plan", ""),
            warnings=tuple(rec.get("warnings", ())),
        )


def load_soap_sidecar(source: str | Path) -> dict[str, SoapNote]:
    forms = {}
    for line in Path(source).read_text(encoding="utf-8").splitlines():
        if line.strip():
            soap = SoapNote.from_dict(json.loads(line))
            forms[soap.note_id] = soap
    return forms
