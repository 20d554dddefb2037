"""Converters from raw note exports to the canonical corpus format."""

from __future__ import annotations

import csv
import re
from pathlib import Path

from .corpus import SPLITS, Corpus, NoteRecord, load_corpus
from .errors import CorpusError, IcdAgentsError

csv.field_size_limit(2**31 - 1)

FORMATS = ("jsonl", "csv", "mullenbach")


def _split_codes(field: str) -> list[str]:
    return [c for c in re.split(r"[;,|]", field or "") if c.strip()]


def _read_csv(path: Path, columns: dict[str, str], split: str | None = None) -> list[NoteRecord]:
    """Rows to notes; ``columns`` maps our field names to the file's headers."""
    notes = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if not reader.fieldnames:
            return []
        header = {h.strip().upper(): h for h in reader.fieldnames or ()}
        missing = [v for k, v in columns.items() if v.upper() not in header and not (k == "split" and split)]
        if missing:
            raise CorpusError(f"{path}: missing column(s) {missing}")
        col = {k: header.get(v.upper()) for k, v in columns.items()}
        for row in reader:
            try:
                notes.append(
                    NoteRecord(
                        note_id=str(row[col["note_id"]]).strip(),
                        text=row[col["text"]],
                        gold_codes=frozenset(_split_codes(row[col["gold_codes"]])),
                        split=split or row[col["split"]].strip().lower(),
                    )
                )
            except (IcdAgentsError, TypeError, AttributeError) as exc:
                raise CorpusError(f"{path}:{reader.line_num}: malformed row ({exc})") from exc
    return notes


def _mullenbach(path: Path) -> list[NoteRecord]:
    """Processed MIMIC-III files as released with the CAML code
    (``train_50.csv``, ``dev_50.csv``, ``test_50.csv`` or the ``_full``
    variants): columns SUBJECT_ID, HADM_ID, TEXT, LABELS; split from the
    file name; HADM_ID becomes the note id."""
    files = sorted(path.glob("*.csv")) if path.is_dir() else [path]
    columns = {"note_id": "HADM_ID", "text": "TEXT", "gold_codes": "LABELS"}
    notes = []
    for f in files:
        split = f.name.split("_", 1)[0].lower()
        if split not in SPLITS:
            continue
        notes += _read_csv(f, columns, split=split)
    return notes


def ingest(source: str | Path, fmt: str) -> Corpus:
    path = Path(source)
    if fmt not in FORMATS:
        raise CorpusError(f"unknown format {fmt!r}; choose from {', '.join(FORMATS)}")
    if not path.exists():
        raise CorpusError(f"no such export: {path}")
    if fmt == "jsonl":
        corpus = load_corpus(path)
    elif fmt == "csv":
        cols = {"note_id": "note_id", "text": "text", "gold_codes": "gold_codes", "split": "split"}
        corpus = Corpus(tuple(_read_csv(path, cols)))
    else:
        corpus = Corpus(tuple(_mullenbach(path)))
    if not len(corpus):
        raise CorpusError(f"empty corpus: {path} holds no records")
    return corpus
