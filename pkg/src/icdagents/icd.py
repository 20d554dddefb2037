"""ICD-9 code grammar, code dictionaries and candidate-code knowledge blocks."""

from __future__ import annotations

import csv
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence

from .errors import IcdError

KNOWLEDGE_HEADER = "Please only use ICD-9 codes that are listed below:"
CANDIDATE_HEADER = "Candidate Codes:"


class CodeKind(str, Enum):
    DIAGNOSIS = "diagnosis"
    PROCEDURE = "procedure"


class GrammarError(IcdError):
    """Raised when a raw string is not a well-formed ICD-9 code."""

    def __init__(self, raw: str, kind: CodeKind | None = None):
        self.raw = raw
        self.kind = kind
        what = f"{kind.value} " if kind else ""
        super().__init__(f"not a valid ICD-9 {what}code: {raw!r}")


_GRAMMAR = {
    # 3-digit root, V + 2 digits, or E + 3 digits; optional 1-2 digit suffix
    CodeKind.DIAGNOSIS: re.compile(r"(?:\d{3}|V\d{2}|E\d{3})(?:\.\d{1,2})?"),
    CodeKind.PROCEDURE: re.compile(r"\d{2}(?:\.\d{1,2})?"),
}


def infer_kind(code: str) -> CodeKind | None:
    """Return the kind whose grammar accepts an already-normalized code.

    The two grammars are disjoint (diagnosis roots have three characters,
    procedure roots two), so at most one kind matches.
    """
    for kind, pattern in _GRAMMAR.items():
        if pattern.fullmatch(code):
            return kind
    return None


def canonicalize_code(raw: str, kind: CodeKind | str | None = None) -> str:
    """Trim and uppercase ``raw`` and check it against the ICD-9 grammar.

    With ``kind=None`` the code is accepted if either grammar matches.
    """
    if not isinstance(raw, str) or not raw.strip():
        raise GrammarError(str(raw), None)
    code = raw.strip().upper()
    if kind is None:
        if infer_kind(code) is None:
            raise GrammarError(raw)
        return code
    kind = CodeKind(kind)
    if not _GRAMMAR[kind].fullmatch(code):
        raise GrammarError(raw, kind)
    return code


def is_valid_code(raw: str, kind: CodeKind | str | None = None) -> bool:
    try:
        canonicalize_code(raw, kind)
    except GrammarError:
        return False
    return True


@dataclass(frozen=True)
class IcdCodeEntry:
    code: str
    description: str
    kind: CodeKind

    def __post_init__(self):
        if not self.description.strip():
            raise IcdError(f"empty description for code {self.code}")
        if canonicalize_code(self.code, self.kind) != self.code:
            raise IcdError(f"code {self.code!r} is not in canonical form")


@dataclass(frozen=True)
class CodeDictionary:
    """Immutable mapping from canonical code to its entry."""

    entries: Mapping[str, IcdCodeEntry] = field(default_factory=dict)
    rejected: tuple[tuple[int, str, str], ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "entries", MappingProxyType(dict(self.entries)))

    @classmethod
    def from_entries(cls, entries: Iterable[IcdCodeEntry]) -> "CodeDictionary":
        table: dict[str, IcdCodeEntry] = {}
        for entry in entries:
            prior = table.get(entry.code)
            if prior is not None and prior.description != entry.description:
                raise IcdError(f"duplicate code {entry.code} with conflicting descriptions")
            table[entry.code] = entry
        return cls(table)

    def __contains__(self, code: object) -> bool:
        return code in self.entries

    def __getitem__(self, code: str) -> IcdCodeEntry:
        return self.entries[code]

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries.values())

    def get(self, code: str) -> IcdCodeEntry | None:
        return self.entries.get(code)

    def lookup(self, raw: str) -> IcdCodeEntry | None:
        """Canonicalize ``raw`` and look it up; invalid codes are simply absent."""
        try:
            return self.entries.get(canonicalize_code(raw))
        except GrammarError:
            return None


def load_dictionary(source: str | Path) -> CodeDictionary:
    """Load a ``code,description,kind`` file.

    Rows that fail the grammar are kept in ``CodeDictionary.rejected`` as
    ``(line_number, raw_code, reason)`` rather than being dropped silently.
    An empty file gives an empty dictionary.
    """
    path = Path(source)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IcdError(f"cannot read dictionary {path}: {exc}") from exc
    if not text.strip():
        return CodeDictionary()

    reader = csv.reader(text.splitlines())
    rows = list(reader)
    header = [h.strip().lower() for h in rows[0]]
    if header[:2] == ["code", "description"]:
        body = enumerate(rows[1:], start=2)
    else:
        body = enumerate(rows, start=1)

    table: dict[str, IcdCodeEntry] = {}
    rejected: list[tuple[int, str, str]] = []
    for lineno, row in body:
        if not row or not any(cell.strip() for cell in row):
            continue
        if len(row) < 2 or not row[1].strip():
            raise IcdError(f"{path}:{lineno}: row needs a code and a description")
        raw_code, description = row[0], row[1].strip()
        raw_kind = row[2].strip().lower() if len(row) > 2 and row[2].strip() else None
        try:
            kind = CodeKind(raw_kind) if raw_kind else None
        except ValueError:
            rejected.append((lineno, raw_code, f"unknown kind {raw_kind!r}"))
            continue
        try:
            code = canonicalize_code(raw_code, kind)
        except GrammarError as exc:
            rejected.append((lineno, raw_code, str(exc)))
            continue
        entry = IcdCodeEntry(code, description, kind or infer_kind(code))
        prior = table.get(code)
        if prior is not None and prior.description != description:
            raise IcdError(
                f"{path}:{lineno}: duplicate code {code} with conflicting descriptions"
            )
        table[code] = entry
    return CodeDictionary(table, tuple(rejected))


@dataclass(frozen=True)
class CandidateSet:
    """Ordered, distinct dictionary entries offered to the agents as knowledge."""

    entries: tuple[IcdCodeEntry, ...]

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        codes = [e.code for e in self.entries]
        if len(set(codes)) != len(codes):
            raise IcdError("candidate set entries must be distinct")

    @property
    def size(self) -> int:
        return len(self.entries)

    @property
    def codes(self) -> tuple[str, ...]:
        return tuple(e.code for e in self.entries)

    def __contains__(self, code: object) -> bool:
        return code in self.codes

    def __len__(self) -> int:
        return len(self.entries)


def build_candidate_set(
    dictionary: CodeDictionary, codes: Sequence[str], n_c: int
) -> CandidateSet:
    """Take the first ``n_c`` distinct codes of ``codes`` as the candidate set."""
    if n_c < 1:
        raise IcdError("n_c must be at least 1")
    chosen: list[IcdCodeEntry] = []
    seen: set[str] = set()
    for raw in codes:
        code = canonicalize_code(raw)
        entry = dictionary.get(code)
        if entry is None:
            raise IcdError(f"unknown code {code} (not in dictionary)")
        if code in seen:
            continue
        seen.add(code)
        chosen.append(entry)
    if len(chosen) < n_c:
        raise IcdError(f"insufficient codes: need {n_c}, have {len(chosen)}")
    return CandidateSet(tuple(chosen[:n_c]))


def render_knowledge_block(cands: CandidateSet) -> str:
    if not cands.entries:
        raise IcdError("cannot render an empty candidate set")
    lines = [KNOWLEDGE_HEADER, CANDIDATE_HEADER]
    lines += [f"{e.code} : {e.description}" for e in cands.entries]
    return "\n".join(lines)


def parse_knowledge_block(block: str) -> list[tuple[str, str]]:
    """Inverse of :func:`render_knowledge_block`: ``(code, description)`` pairs."""
    lines = block.splitlines()
    if lines[:2] != [KNOWLEDGE_HEADER, CANDIDATE_HEADER]:
        raise IcdError("not a knowledge block")
    pairs = []
    for line in lines[2:]:
        code, sep, desc = line.partition(" : ")
        if not sep:
            raise IcdError(f"malformed knowledge line: {line!r}")
        pairs.append((code, desc))
    return pairs


def read_code_list(source: str | Path) -> list[str]:
    """Read an ordered code list: one code per line, ``#`` comments allowed."""
    codes = []
    for line in Path(source).read_text(encoding="utf-8").splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            codes.append(canonicalize_code(line.split(",")[0]))
    return codes
