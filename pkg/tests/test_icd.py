import re

import pytest
from hypothesis import given
from hypothesis import strategies as st

from icdagents.errors import IcdError
from icdagents.icd import (
    CANDIDATE_HEADER,
    CodeDictionary,
    IcdCodeEntry,
    KNOWLEDGE_HEADER,
    CodeKind,
    GrammarError,
    build_candidate_set,
    canonicalize_code,
    infer_kind,
    is_valid_code,
    load_dictionary,
    parse_knowledge_block,
    read_code_list,
    render_knowledge_block,
)

from conftest import CANDIDATES, DICTIONARY_ROWS, GOLDEN


@pytest.mark.parametrize(
    "raw,expected,kind",
    [
        ("401.9", "401.9", CodeKind.DIAGNOSIS),
        (" v45.81 ", "V45.81", CodeKind.DIAGNOSIS),
        ("e880.9", "E880.9", CodeKind.DIAGNOSIS),
        ("427", "427", CodeKind.DIAGNOSIS),
        ("96.04", "96.04", CodeKind.PROCEDURE),
        ("38", "38", CodeKind.PROCEDURE),
    ],
)
def test_canonicalize_valid(raw, expected, kind):
    assert canonicalize_code(raw) == expected
    assert infer_kind(expected) is kind
    assert canonicalize_code(raw, kind) == expected


@pytest.mark.parametrize("raw", ["", "  ", "4019", "401.", "401.999", "V4.5", "E88.1", "9.1", "abc", "96.04x"])
def test_canonicalize_invalid(raw):
    with pytest.raises(GrammarError):
        canonicalize_code(raw)
    assert not is_valid_code(raw)


def test_kind_mismatch_is_rejected():
    with pytest.raises(GrammarError):
        canonicalize_code("96.04", CodeKind.DIAGNOSIS)
    with pytest.raises(GrammarError):
        canonicalize_code("401.9", "procedure")


# independent reference: hand-written character-level checks
def _oracle_kind(code: str):
    root, _, suffix = code.partition(".")
    if "." in code and not (suffix.isdigit() and 1 <= len(suffix) <= 2):
        return None
    if len(root) == 2 and root.isdigit():
        return CodeKind.PROCEDURE
    if len(root) == 3 and root.isdigit():
        return CodeKind.DIAGNOSIS
    if len(root) == 3 and root[0] == "V" and root[1:].isdigit():
        return CodeKind.DIAGNOSIS
    if len(root) == 4 and root[0] == "E" and root[1:].isdigit():
        return CodeKind.DIAGNOSIS
    return None


@given(st.text(alphabet="0123456789.VEve x", max_size=8))
def test_grammar_matches_oracle(raw):
    code = raw.strip().upper()
    expected = _oracle_kind(code) if code and code.isascii() else None
    if expected is None:
        assert not is_valid_code(raw)
    else:
        assert canonicalize_code(raw) == code
        assert infer_kind(code) is expected


@given(st.from_regex(r"\A(?:\d{3}|V\d{2}|E\d{3}|\d{2})(?:\.\d{1,2})?\Z"))
def test_canonicalization_idempotent(code):
    once = canonicalize_code(code.lower())
    assert canonicalize_code(once) == once


def test_load_dictionary(tmp_path):
    path = tmp_path / "dict.csv"
    path.write_text(
        "code,description,kind\n"
        "401.9,Unspecified essential hypertension,diagnosis\n"
        "96.04,Insertion of endotracheal tube,procedure\n"
        "4019,Bad grammar,diagnosis\n"
        "96.6,Wrong kind,diagnosis\n"
        "v45.81,Aortocoronary bypass status,\n"
        "401.9,Unspecified essential hypertension,diagnosis\n",
        encoding="utf-8",
    )
    d = load_dictionary(path)
    assert sorted(e.code for e in d) == ["401.9", "96.04", "V45.81"]
    assert d["V45.81"].kind is CodeKind.DIAGNOSIS
    assert [r[:2] for r in d.rejected] == [(4, "4019"), (5, "96.6")]
    assert d.lookup(" v45.81") is d["V45.81"]
    assert d.lookup("nonsense") is None
    with pytest.raises(TypeError):
        d.entries["x"] = None


def test_load_dictionary_edge_cases(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("", encoding="utf-8")
    assert len(load_dictionary(empty)) == 0

    clash = tmp_path / "clash.csv"
    clash.write_text("401.9,Hypertension\n401.9,Something else\n", encoding="utf-8")
    with pytest.raises(IcdError, match="conflicting"):
        load_dictionary(clash)

    with pytest.raises(IcdError):
        load_dictionary(tmp_path / "missing.csv")


def test_candidate_set(dictionary):
    cands = build_candidate_set(dictionary, ["401.9", "401.9", "96.04", "428.0"], 2)
    assert cands.codes == ("401.9", "96.04")
    assert cands.size == 2
    with pytest.raises(IcdError, match="insufficient"):
        build_candidate_set(dictionary, ["401.9"], 2)
    with pytest.raises(IcdError, match="unknown"):
        build_candidate_set(dictionary, ["999.9"], 1)


def test_knowledge_block_matches_golden(candidates):
    block = render_knowledge_block(candidates)
    assert block == (GOLDEN / "knowledge_block.txt").read_text(encoding="utf-8").rstrip("\n")


@given(st.integers(min_value=1, max_value=len(CANDIDATES)))
def test_knowledge_block_shape(n):
    d = CodeDictionary.from_entries(IcdCodeEntry(c, t, infer_kind(c)) for c, t in DICTIONARY_ROWS)
    cands = build_candidate_set(d, CANDIDATES, n)
    block = render_knowledge_block(cands)
    lines = block.splitlines()
    assert len(lines) == 2 + n
    assert lines[:2] == [KNOWLEDGE_HEADER, CANDIDATE_HEADER]
    assert all(re.fullmatch(r"\S+ : .+", line) for line in lines[2:])
    assert parse_knowledge_block(block) == [(e.code, e.description) for e in cands.entries]


def test_read_code_list(tmp_path):
    p = tmp_path / "codes.txt"
    p.write_text("# top codes\n401.9\n\nv45.81  # bypass\n96.04,extra\n", encoding="utf-8")
    assert read_code_list(p) == ["401.9", "V45.81", "96.04"]
