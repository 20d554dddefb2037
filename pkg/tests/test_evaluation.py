import pytest
from hypothesis import given
from hypothesis import strategies as st

from icdagents.agents import CodeAssignment
from icdagents.corpus import EvidencePair, NoteRecord
from icdagents.errors import EvaluationError
from icdagents.evaluation import (
    MetricsReport,
    compare_runs,
    evidence_overlap,
    extract_predicted_evidence,
    format_delta,
    format_evidence_table,
    format_metrics_table,
    format_per_label_table,
    normalize_evidence_text,
    score_evidence,
    score_multilabel,
)


def test_zero_division_and_absent_labels():
    rep = score_multilabel({"n": set()}, {"n": set()}, ["401.9", "428.0"])
    assert rep.micro.f1 == 0 and rep.macro.f1 == 0
    # a label nobody predicted or needed still enters the macro mean
    rep = score_multilabel({"n": {"401.9"}}, {"n": {"401.9"}}, ["401.9", "428.0"])
    assert rep.micro.f1 == 1.0 and rep.macro.f1 == 0.5


def test_out_of_space_and_failed_notes():
    rep = score_multilabel({"a": {"401.9", "999.9"}}, {"a": {"401.9"}, "b": {"401.9"}}, ["401.9"], failed=["b"])
    assert rep.rejected_predictions == 1
    assert rep.notes_failed == 1 and rep.notes_evaluated == 2
    assert rep.per_label["401.9"].fn == 1
    with pytest.raises(EvaluationError):
        score_multilabel({"zz": set()}, {"a": set()}, ["401.9"])
    with pytest.raises(EvaluationError):
        score_multilabel({}, {}, [])


labels = st.sampled_from(["A", "B", "C", "D"])
instances = st.dictionaries(st.sampled_from(["n1", "n2", "n3"]), st.tuples(st.sets(labels), st.sets(labels)), min_size=1)


@given(instances)
def test_metric_bounds_and_report_round_trip(inst):
    gold = {k: v[0] for k, v in inst.items()}
    pred = {k: v[1] for k, v in inst.items()}
    rep = score_multilabel(pred, gold, ["A", "B", "C", "D"])
    for avg in (rep.micro, rep.macro):
        assert 0 <= avg.f1 <= 1 and 0 <= avg.precision <= 1 and 0 <= avg.recall <= 1
    assert MetricsReport.from_dict(rep.to_dict()) == rep
    if pred == gold and any(gold.values()):
        assert rep.micro.f1 == 1.0


def test_evidence_identity_and_code_mismatch():
    gold = [EvidencePair("n", 0, 10, "401.9"), EvidencePair("n", 11, 20, "428.0")]
    same = score_evidence(gold, gold)
    assert (same.precision, same.recall, same.f1) == (1.0, 1.0, 1.0)
    wrong = score_evidence([EvidencePair("n", 0, 10, "428.0")], gold)
    assert wrong.precision == 0 and wrong.unmatched_predicted
    empty = score_evidence([], [])
    assert empty.f1 == 0


def test_normalization_and_overlap():
    assert normalize_evidence_text("Mr. [**Known  lastname**]\nWAS seen") == "mr. known lastname was seen"
    assert evidence_overlap("", "anything") == 0.0
    assert evidence_overlap("Peptic ulcer", "Discharge Diagnosis: Peptic ulcer") == 1.0


NOTE = NoteRecord(
    "n",
    "Mr. [**Known lastname 85439**] was managed for a CHF exacerbation. "
    "Diuresis was deferred due to hypotension. Discharge Diagnosis: Peptic ulcer.",
    frozenset({"428.0", "569.81"}),
    "test",
)


def test_extract_predicted_evidence():
    codes = [
        CodeAssignment("569.81", "Discharge Diagnosis: Peptic ulcer"),
        CodeAssignment("428.0", "Mr. [**Known lastname 85439**] was managed for a CHF exacerbation. Diuresis was deferred due to hypotension."),
        CodeAssignment("401.9", "Hypertension"),
        CodeAssignment("531.90", "Peptic ulcer"),
    ]
    pairs = extract_predicted_evidence(codes, NOTE)
    got = {(p.code, p.text) for p in pairs}
    assert ("569.81", "Discharge Diagnosis: Peptic ulcer.") in got
    assert ("531.90", "Discharge Diagnosis: Peptic ulcer.") in got
    assert all(code != "401.9" for code, _ in got)
    assert any(code == "428.0" for code, _ in got)


def test_compare_runs_and_tables():
    a = score_multilabel({"n": {"A"}}, {"n": {"A", "B"}}, ["A", "B"])
    b = score_multilabel({"n": set()}, {"n": {"A", "B"}}, ["A", "B"])
    d = compare_runs(a, b)
    assert d.macro.f1 == pytest.approx(0.5) and d.per_label["A"].f1 == 1.0
    assert format_delta(0.0123) == "+0.012" and format_delta(-0.5) == "-0.500"
    table = format_metrics_table([("Coder", b), ("+Reviewer", a)], baseline=b)
    lines = table.splitlines()
    assert lines[0].split() == ["Method", "Macro-F1", "Micro-F1", "dMacro-F1", "dMicro-F1"]
    assert lines[2].split()[1:] == ["0.500", "0.667", "+0.500", "+0.667"]
    with pytest.raises(EvaluationError):
        compare_runs(a, score_multilabel({}, {"n": set()}, ["A"]))
    assert "Precision" in format_evidence_table([("MAC", score_evidence([], []))])
    assert format_per_label_table(a).splitlines()[1].split() == ["A", "1", "0", "0", "1.000", "1.000", "1.000"]
