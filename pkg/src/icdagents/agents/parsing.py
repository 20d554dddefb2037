"""Tolerant extraction of code lists, SOAP sections and review verdicts
from free-form model output."""

from __future__ import annotations

import ast
import json
import re
import warnings
from typing import Any, Iterable, Iterator, Sequence

from ..corpus import SoapNote
from ..errors import NoAssignmentsFound, NoStructuredRegion, ParseError
from ..icd import GrammarError, canonicalize_code
from .types import AgentRole, CodeAssignment, CodeVerdict, ReviewVerdict

DEFAULT_DISPUTE_PATTERNS = ("no evidence", "not documented", "not supported", "disagree")

_CONTEST_WORDS = frozenset(
    {"contest", "contested", "object", "objection", "reject", "rejected",
     "dispute", "disputed", "disagree"}
)
_ACCEPT_WORDS = frozenset({"accept", "accepted", "agree", "approve", "approved", "ok"})

_FENCE = re.compile(r"```[a-zA-Z]*\s*\n?(.*?)```", re.DOTALL)
_OPENERS = {"[": "]", "{": "}"}
# longest region we try to parse as a unit, and deepest nesting we hand to
# the loaders; deeper or longer regions are only searched inside
_MAX_REGION = 200_000
_MAX_DEPTH = 50


# -- locating structured regions -------------------------------------------


def _bracket_table(text: str) -> tuple[dict[int, int], dict[int, int]]:
    """Match every bracket in one pass, honouring quoted strings.

    Returns ``{open_index: close_index}`` and ``{open_index: nesting depth}``.
    A closer that does not match the innermost opener leaves every open
    bracket unmatched.
    """
    close: dict[int, int] = {}
    depth: dict[int, int] = {}
    stack: list[list[int]] = []  # [open index, deepest child depth]
    quote = None
    i, n = 0, len(text)
    while i < n:
        ch = text[i]
        if quote:
            if ch == "\\":
                i += 2
                continue
            if ch == quote:
                quote = None
            elif ch == "\n" and quote == "'":
                # an apostrophe in prose, not a string delimiter
                quote = None
        elif ch in "\"'":
            # apostrophes inside words ("patient's") do not open strings
            if ch == '"' or not (i > 0 and text[i - 1].isalnum()):
                quote = ch
        elif ch in _OPENERS:
            stack.append([i, 0])
        elif ch in "]}":
            if not stack or _OPENERS[text[stack[-1][0]]] != ch:
                stack.clear()
            else:
                start, inner = stack.pop()
                close[start] = i
                depth[start] = inner + 1
                if stack:
                    stack[-1][1] = max(stack[-1][1], inner + 1)
        i += 1
    return close, depth


_SQ_STRING = re.compile(r"'((?:[^'\\\n]|\\.)*)'")
_DQ_OR_SQ = re.compile(r'"(?:[^"\\]|\\.)*"|' + r"'(?:[^'\\\n]|\\.)*'")
_TRAILING_COMMA = re.compile(r",\s*([\]}])")
_BARE_KEY = re.compile(r"([{,]\s*)([A-Za-z_][A-Za-z0-9_ ]*?)\s*:")


def _relax(region: str) -> str:
    """Rewrite common near-JSON into JSON: single quotes, trailing commas,
    bare keys, Python literals."""

    def fix_string(m: re.Match) -> str:
        s = m.group(0)
        if s.startswith("'"):
            inner = s[1:-1].replace("\\'", "'").replace('"', '\\"')
            return '"' + inner + '"'
        return s

    out = _DQ_OR_SQ.sub(fix_string, region)
    # only touch text outside strings for the structural fixes
    parts = re.split(r'("(?:[^"\\]|\\.)*")', out)
    for k in range(0, len(parts), 2):
        seg = parts[k]
        seg = _TRAILING_COMMA.sub(r"\1", seg)
        seg = re.sub(r"\bTrue\b", "true", seg)
        seg = re.sub(r"\bFalse\b", "false", seg)
        seg = re.sub(r"\bNone\b", "null", seg)
        parts[k] = seg
    out = "".join(parts)
    out = _TRAILING_COMMA.sub(r"\1", out)
    out = _BARE_KEY.sub(lambda m: f'{m.group(1)}"{m.group(2).strip()}":', out)
    return out


def _load(region: str) -> Any:
    try:
        return json.loads(region)
    except (ValueError, RecursionError):
        pass
    try:
        return json.loads(_relax(region))
    except (ValueError, RecursionError):
        pass
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")  # stray backslashes in model prose
            value = ast.literal_eval(region)
    except Exception:  # literal_eval raises a zoo: SyntaxError, ValueError, MemoryError, ...
        raise ValueError("not a literal") from None
    if isinstance(value, (list, dict, tuple)):
        return value
    raise ValueError("not a container literal")


def _regions(text: str) -> list[Any]:
    """Every outermost parseable bracketed value in ``text``, in order.

    When a region does not parse as a whole, its interior is searched.
    """
    close, depth = _bracket_table(text)
    found: list[Any] = []
    pending = [(0, len(text))]
    while pending:
        i, end = pending.pop()
        while i < end:
            j = close.get(i)
            if j is None or j >= end or j - i > _MAX_REGION:
                i += 1
                continue
            if depth[i] <= _MAX_DEPTH:
                try:
                    found.append(_load(text[i : j + 1]))
                    i = j + 1
                    continue
                except ValueError:
                    pass
            # interior first, then the rest of this span
            pending.append((j + 1, end))
            pending.append((i + 1, j))
            break
    return found


def find_structures(raw: str) -> list[Any]:
    """Parsed JSON-like values in ``raw``: whole text, fenced blocks, then
    bracketed regions found anywhere in the prose."""
    stripped = raw.strip()
    if stripped[:1] in _OPENERS and len(stripped) <= _MAX_REGION:
        close, depth = _bracket_table(stripped)
        if close.get(0) == len(stripped) - 1 and depth[0] <= _MAX_DEPTH:
            try:
                return [_load(stripped)]
            except ValueError:
                pass
    found: list[Any] = []
    for block in _FENCE.findall(raw):
        found.extend(_regions(block))
    if found:
        return found
    return _regions(raw)


def _walk(value: Any) -> Iterator[Any]:
    """Pre-order traversal of nested containers."""
    stack = [value]
    while stack:
        node = stack.pop()
        yield node
        if isinstance(node, dict):
            stack.extend(reversed(list(node.values())))
        elif isinstance(node, (list, tuple)):
            stack.extend(reversed(node))


def _lower_keys(d: dict) -> dict:
    return {str(k).strip().lower(): v for k, v in d.items()}


# -- key/value stream fallback ---------------------------------------------

_KV = re.compile(
    r"""(?P<q>["']?)(?P<key>code|explanation|verdict|reason)(?P=q)\s*[:=]\s*
        (?P<val>"(?:[^"\\]|\\.)*"|'(?:[^'\\\n]|\\.)*'|[A-Za-z0-9][A-Za-z0-9.]*)""",
    re.IGNORECASE | re.VERBOSE,
)


def _unquote(token: str) -> str:
    if token.startswith('"'):
        try:
            return json.loads(token)
        except ValueError:
            return token[1:-1]
    if token.startswith("'"):
        return token[1:-1].replace("\\'", "'")
    return token


def _kv_records(raw: str) -> list[dict]:
    """Flat ``key: value`` runs grouped into records, one per ``code`` key."""
    records: list[dict] = []
    for m in _KV.finditer(raw):
        key = m.group("key").lower()
        val = _unquote(m.group("val"))
        if key == "code":
            records.append({"code": val})
        elif records and key not in records[-1]:
            records[-1][key] = val
    return records


# -- code lists --------------------------------------------------------------


def _code_records(structures: Sequence[Any]) -> list[dict]:
    records = []
    for value in structures:
        for node in _walk(value):
            if isinstance(node, dict):
                low = _lower_keys(node)
                if "code" in low:
                    records.append(low)
    return records


def _has_explicit_empty(structures: Sequence[Any]) -> bool:
    return any(isinstance(v, (list, tuple)) and not v for v in structures)


def _as_text(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, str):
        return value
    if isinstance(value, (list, tuple)):
        return "\n".join(_as_text(v) for v in value)
    if isinstance(value, dict):
        return json.dumps(value, ensure_ascii=False)
    return str(value)


def _assignments_from(
    records: Iterable[dict], role: AgentRole | None, warnings: list[str]
) -> list[CodeAssignment]:
    out: dict[str, CodeAssignment] = {}
    for rec in records:
        raw_code = rec.get("code")
        if isinstance(raw_code, (int, float)) and not isinstance(raw_code, bool):
            warnings.append(f"numeric code {raw_code!r} read as text")
            raw_code = str(raw_code)
        if not isinstance(raw_code, str):
            warnings.append(f"ignored non-text code {raw_code!r}")
            continue
        try:
            code = canonicalize_code(raw_code)
        except GrammarError:
            warnings.append(f"dropped invalid ICD-9 code {raw_code!r}")
            continue
        missing = "explanation" not in rec or rec["explanation"] is None
        explanation = _as_text(rec.get("explanation")).strip()
        if code in out:
            warnings.append(f"merged duplicate code {code}")
            continue
        if missing:
            warnings.append(f"missing explanation for code {code}")
        out[code] = CodeAssignment(code, explanation, role, missing)
    return list(out.values())


def parse_code_list(
    raw: str, role: AgentRole | None = None
) -> tuple[list[CodeAssignment], list[str]]:
    """Extract ``{"code", "explanation"}`` assignments from model output.

    Returns the assignments (first explanation wins for duplicate codes,
    invalid codes dropped) and the warnings raised along the way. An
    explicit empty list is a valid, empty answer; output with nothing
    recognisable raises :class:`NoAssignmentsFound`.
    """
    if not isinstance(raw, str):
        raise NoAssignmentsFound(f"expected text, got {type(raw).__name__}")
    warnings: list[str] = []
    structures = find_structures(raw)
    records = _code_records(structures)
    if not records:
        records = _kv_records(raw)
    if not records:
        if _has_explicit_empty(structures):
            return [], warnings
        raise NoAssignmentsFound("no code assignments found in model output")
    return _assignments_from(records, role, warnings), warnings


# -- SOAP sections -----------------------------------------------------------

SOAP_KEYS = ("subjective", "objective", "assessment", "plan")
_SECTION_RE = re.compile(
    r"""["']?(subjective|objective|assessment|plan)["']?\s*:""", re.IGNORECASE
)


def _sections_by_keys(region: str, keys: Sequence[str]) -> dict[str, str]:
    """Split a brace region with unquoted prose values on its section keys."""
    hits = [m for m in _SECTION_RE.finditer(region) if m.group(1).lower() in keys]
    found: dict[str, str] = {}
    for k, m in enumerate(hits):
        end = hits[k + 1].start() if k + 1 < len(hits) else len(region)
        value = region[m.end() : end].strip().rstrip("}").strip().rstrip(",").strip()
        value = _unquote(value) if value[:1] in "\"'" and value[-1:] == value[:1] else value
        found.setdefault(m.group(1).lower(), value)
    return found


def _extract_sections(raw: str, keys: Sequence[str]) -> tuple[dict[str, str], bool]:
    structures = find_structures(raw)
    for value in structures:
        for node in _walk(value):
            if isinstance(node, dict):
                low = _lower_keys(node)
                if any(k in low for k in keys):
                    return {k: _as_text(low[k]).strip() for k in keys if k in low}, True
    start = raw.find("{")
    if start >= 0:
        end = raw.rfind("}")
        region = raw[start + 1 : end if end > start else len(raw)]
        found = _sections_by_keys(region, keys)
        if found:
            return found, True
    return {}, bool(structures)


def parse_soap(raw: str, note_id: str = "") -> SoapNote:
    """Read Subjective/Objective/Assessment/Plan (any case) from model output."""
    sections, structured = _extract_sections(raw, SOAP_KEYS)
    if not structured:
        raise NoStructuredRegion("no JSON object with SOAP sections in model output")
    warnings = tuple(f"missing SOAP section {k!r}" for k in SOAP_KEYS if k not in sections)
    return SoapNote(
        note_id,
        sections.get("subjective", ""),
        sections.get("objective", ""),
        sections.get("assessment", ""),
        sections.get("plan", ""),
        warnings,
    )


def parse_assessment_plan(raw: str, note_id: str = "") -> SoapNote:
    """Generated assessment and plan, returned as a SoapNote with empty S/O."""
    sections, _ = _extract_sections(raw, ("assessment", "plan"))
    if not sections:
        raise NoStructuredRegion("no assessment or plan found in model output")
    warnings = tuple(f"missing section {k!r}" for k in ("assessment", "plan") if k not in sections)
    return SoapNote(
        note_id,
        assessment=sections.get("assessment", ""),
        plan=sections.get("plan", ""),
        warnings=warnings,
    )


# -- review verdicts ---------------------------------------------------------


def _verdict_word(value: Any) -> bool | None:
    """True for contest, False for accept, None if unrecognised."""
    if isinstance(value, bool):
        return not value
    if not isinstance(value, str):
        return None
    word = value.strip().lower()
    if word in _CONTEST_WORDS:
        return True
    if word in _ACCEPT_WORDS:
        return False
    return None


def _disputes(text: str, patterns: Sequence[str]) -> bool:
    low = text.lower()
    return any(p.lower() in low for p in patterns)


def parse_review(
    raw: str,
    codes_under_review: Sequence[str],
    patterns: Sequence[str] = DEFAULT_DISPUTE_PATTERNS,
) -> tuple[ReviewVerdict, list[str]]:
    """Decide, per reviewed code, whether the reviewer contests it.

    An explicit ``verdict`` field decides; otherwise the explanation is
    matched against the dispute patterns. Codes the reviewer does not
    mention are accepted with a warning.
    """
    if not codes_under_review:
        raise ParseError("parse_review needs at least one code under review")
    warnings: list[str] = []
    under_review = [canonicalize_code(c) for c in codes_under_review]
    structures = find_structures(raw)

    records: dict[str, dict] = {}

    def add(code_raw: Any, rec: dict) -> None:
        try:
            code = canonicalize_code(str(code_raw))
        except GrammarError:
            warnings.append(f"ignored invalid code {code_raw!r} in review")
            return
        records.setdefault(code, rec)

    for value in structures:
        for node in _walk(value):
            if not isinstance(node, dict):
                continue
            low = _lower_keys(node)
            if "code" in low:
                add(low["code"], low)
                continue
            # {"401.9": "contest"} or {"401.9": {"verdict": ...}}
            for key, val in node.items():
                key = str(key).strip()
                if key.upper() in under_review:
                    if isinstance(val, dict):
                        add(key, _lower_keys(val))
                    else:
                        add(key, {"verdict": val})
    if not records:
        for rec in _kv_records(raw):
            add(rec["code"], rec)

    if not records:
        mentioned = {c for c in under_review if c in raw.upper()}
        if not structures and not mentioned:
            raise NoStructuredRegion("review names none of the codes under review")
        for code in mentioned:
            lines = [ln for ln in raw.splitlines() if code in ln.upper()]
            records[code] = {"explanation": " ".join(lines)}
        if mentioned:
            warnings.append("review read from prose mentions")

    per_code: dict[str, CodeVerdict] = {}
    for code in under_review:
        rec = records.get(code)
        if rec is None:
            warnings.append(f"code {code} not addressed by reviewer; treated as accepted")
            per_code[code] = CodeVerdict(False, "")
            continue
        explanation = _as_text(rec.get("explanation") or rec.get("reason")).strip()
        contested = None
        if "verdict" in rec:
            contested = _verdict_word(rec["verdict"])
            if contested is None:
                warnings.append(f"unrecognised verdict {rec['verdict']!r} for {code}")
        if contested is None:
            contested = _disputes(explanation, patterns)
        per_code[code] = CodeVerdict(contested, explanation if contested else "")
    for code in records:
        if code not in per_code:
            warnings.append(f"review mentioned {code}, which was not under review")
    return ReviewVerdict(per_code), warnings
