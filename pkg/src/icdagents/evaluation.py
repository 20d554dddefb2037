"""Multi-label coding metrics, evidence matching and report tables."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Collection, Iterable, Mapping, Sequence

from .corpus import EvidencePair, NoteRecord, segment_sentences
from .errors import EvaluationError


def _rate(num: int, den: int) -> float:
    return num / den if den else 0.0


def _f1(p: float, r: float) -> float:
    return 2 * p * r / (p + r) if p + r else 0.0


@dataclass(frozen=True)
class LabelScore:
    tp: int
    fp: int
    fn: int

    @property
    def precision(self) -> float:
        return _rate(self.tp, self.tp + self.fp)

    @property
    def recall(self) -> float:
        return _rate(self.tp, self.tp + self.fn)

    @property
    def f1(self) -> float:
        return _f1(self.precision, self.recall)

    def to_dict(self) -> dict:
        return {
            "tp": self.tp, "fp": self.fp, "fn": self.fn,
            "precision": self.precision, "recall": self.recall, "f1": self.f1,
        }


@dataclass(frozen=True)
class Averages:
    precision: float
    recall: float
    f1: float

    def to_dict(self) -> dict:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


@dataclass(frozen=True)
class MetricsReport:
    micro: Averages
    macro: Averages
    per_label: Mapping[str, LabelScore]
    label_space: tuple[str, ...]
    notes_evaluated: int
    notes_failed: int = 0
    rejected_predictions: int = 0

    @property
    def totals(self) -> LabelScore:
        s = self.per_label.values()
        return LabelScore(sum(x.tp for x in s), sum(x.fp for x in s), sum(x.fn for x in s))

    def to_dict(self) -> dict:
        return {
            "micro": self.micro.to_dict(),
            "macro": self.macro.to_dict(),
            "per_label": {k: v.to_dict() for k, v in self.per_label.items()},
            "label_space": list(self.label_space),
            "notes_evaluated": self.notes_evaluated,
            "notes_failed": self.notes_failed,
            "rejected_predictions": self.rejected_predictions,
        }

    @classmethod
    def from_dict(cls, rec: Mapping) -> "MetricsReport":
        return cls(
            micro=Averages(**rec["micro"]),
            macro=Averages(**rec["macro"]),
            per_label={
                k: LabelScore(v["tp"], v["fp"], v["fn"]) for k, v in rec["per_label"].items()
            },
            label_space=tuple(rec["label_space"]),
            notes_evaluated=rec["notes_evaluated"],
            notes_failed=rec.get("notes_failed", 0),
            rejected_predictions=rec.get("rejected_predictions", 0),
        )


def score_multilabel(
    preds: Mapping[str, Collection[str]],
    gold: Mapping[str, Collection[str]],
    label_space: Sequence[str],
    failed: Collection[str] = (),
) -> MetricsReport:
    """Micro and macro precision/recall/F1 over a fixed label space.

    Notes in ``gold`` without a prediction count as predicting nothing.
    Predicted codes outside the label space are tallied in
    ``rejected_predictions`` instead of counting as false positives.
    Labels never predicted nor present score 0 and still enter the macro
    mean.
    """
    if not label_space:
        raise EvaluationError("label space is empty")
    unknown = set(preds) - set(gold)
    if unknown:
        raise EvaluationError(f"predictions for notes absent from gold: {sorted(unknown)[:5]}")
    space = tuple(dict.fromkeys(label_space))
    in_space = set(space)

    tp = dict.fromkeys(space, 0)
    fp = dict.fromkeys(space, 0)
    fn = dict.fromkeys(space, 0)
    rejected = 0
    for note_id, gold_codes in gold.items():
        g = set(gold_codes) & in_space
        p_all = set(preds.get(note_id, ()))
        p = p_all & in_space
        rejected += len(p_all - in_space)
        for code in p & g:
            tp[code] += 1
        for code in p - g:
            fp[code] += 1
        for code in g - p:
            fn[code] += 1

    per_label = {c: LabelScore(tp[c], fp[c], fn[c]) for c in space}
    TP, FP, FN = sum(tp.values()), sum(fp.values()), sum(fn.values())
    micro_p, micro_r = _rate(TP, TP + FP), _rate(TP, TP + FN)
    n = len(space)
    macro = Averages(
        sum(s.precision for s in per_label.values()) / n,
        sum(s.recall for s in per_label.values()) / n,
        sum(s.f1 for s in per_label.values()) / n,
    )
    return MetricsReport(
        micro=Averages(micro_p, micro_r, _f1(micro_p, micro_r)),
        macro=macro,
        per_label=per_label,
        label_space=space,
        notes_evaluated=len(gold),
        notes_failed=len(set(failed) & set(gold)),
        rejected_predictions=rejected,
    )


@dataclass(frozen=True)
class EvidenceReport:
    precision: float
    recall: float
    f1: float
    matched: tuple[EvidencePair, ...] = ()
    unmatched_predicted: tuple[EvidencePair, ...] = ()
    unmatched_gold: tuple[EvidencePair, ...] = ()

    def to_dict(self) -> dict:
        return {
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "matched": [p.to_dict() for p in self.matched],
            "unmatched_predicted": [p.to_dict() for p in self.unmatched_predicted],
            "unmatched_gold": [p.to_dict() for p in self.unmatched_gold],
        }


def score_evidence(
    pred_pairs: Iterable[EvidencePair], gold_pairs: Iterable[EvidencePair]
) -> EvidenceReport:
    """Pair-level precision/recall/F1.

    A predicted pair matches a gold pair with the same note and code whose
    sentence span overlaps it. Precision counts matched predictions, recall
    counts gold pairs matched by at least one prediction.
    """
    preds = list(dict.fromkeys(pred_pairs))
    golds = list(dict.fromkeys(gold_pairs))
    by_key: dict[tuple[str, str], list[EvidencePair]] = {}
    for g in golds:
        by_key.setdefault((g.note_id, g.code), []).append(g)

    matched, unmatched = [], []
    hit_gold: set[EvidencePair] = set()
    for p in preds:
        hits = [g for g in by_key.get((p.note_id, p.code), ()) if p.overlaps(g)]
        if hits:
            matched.append(p)
            hit_gold.update(hits)
        else:
            unmatched.append(p)
    precision = _rate(len(matched), len(preds))
    recall = _rate(len(hit_gold), len(golds))
    return EvidenceReport(
        precision, recall, _f1(precision, recall),
        tuple(matched), tuple(unmatched), tuple(g for g in golds if g not in hit_gold),
    )


_DEID = re.compile(r"\[\*\*|\*\*\]")
_SPACE = re.compile(r"\s+")


def normalize_evidence_text(text: str) -> str:
    return _SPACE.sub(" ", _DEID.sub("", text).lower()).strip()


def _grams(text: str, n: int = 4) -> set[str]:
    return {text[i : i + n] for i in range(len(text) - n + 1)}


def evidence_overlap(explanation: str, sentence: str) -> float:
    """Overlap coefficient of normalized character 4-grams.

    Shared grams over the smaller gram set, so a sentence quoted whole
    inside a longer explanation scores 1, as does an explanation quoting
    part of a sentence.
    """
    eg = _grams(normalize_evidence_text(explanation))
    sg = _grams(normalize_evidence_text(sentence))
    if not eg or not sg:
        return 0.0
    return len(eg & sg) / min(len(eg), len(sg))


def extract_predicted_evidence(
    final_codes: Iterable, note: NoteRecord, threshold: float = 0.6
) -> list[EvidencePair]:
    """Pair each final code with the note sentence its explanation quotes.

    ``final_codes`` is a WorkflowResult or any iterable of objects with
    ``code`` and ``explanation`` attributes. Codes
    whose best sentence overlap falls below ``threshold`` get no pair.
    """
    final_codes = getattr(final_codes, "final_codes", final_codes)
    sentences = segment_sentences(note.text)
    pairs = []
    for assignment in final_codes:
        best, best_score = None, 0.0
        for sent in sentences:
            score = evidence_overlap(assignment.explanation, sent.text)
            if score > best_score:
                best, best_score = sent, score
        if best is not None and best_score >= threshold:
            pairs.append(EvidencePair(note.note_id, best.start, best.end, assignment.code, best.text))
    return pairs


@dataclass(frozen=True)
class RunDelta:
    micro: Averages
    macro: Averages
    per_label: Mapping[str, Averages] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "micro": self.micro.to_dict(),
            "macro": self.macro.to_dict(),
            "per_label": {k: v.to_dict() for k, v in self.per_label.items()},
        }


def _diff(a: Averages, b: Averages) -> Averages:
    return Averages(a.precision - b.precision, a.recall - b.recall, a.f1 - b.f1)


def compare_runs(a: MetricsReport, b: MetricsReport) -> RunDelta:
    """Metric differences ``a - b``; both runs must share a label space."""
    if set(a.label_space) != set(b.label_space):
        raise EvaluationError("cannot compare runs over different label spaces")
    per_label = {}
    for code in a.label_space:
        x, y = a.per_label[code], b.per_label[code]
        per_label[code] = Averages(x.precision - y.precision, x.recall - y.recall, x.f1 - y.f1)
    return RunDelta(_diff(a.micro, b.micro), _diff(a.macro, b.macro), per_label)


def format_delta(value: float) -> str:
    return f"{value:+.3f}"


def _table(header: Sequence[str], rows: Sequence[Sequence[str]]) -> str:
    widths = [max(len(str(r[i])) for r in [header, *rows]) for i in range(len(header))]
    lines = []
    for row in [header, *rows]:
        cells = [str(row[0]).ljust(widths[0])]
        cells += [str(c).rjust(w) for c, w in zip(row[1:], widths[1:])]
        lines.append("  ".join(cells).rstrip())
    return "\n".join(lines) + "\n"


def format_metrics_table(
    rows: Sequence[tuple[str, MetricsReport]],
    baseline: MetricsReport | None = None,
) -> str:
    """Method / Macro-F1 / Micro-F1 table; with ``baseline``, delta columns too."""
    header = ["Method", "Macro-F1", "Micro-F1"]
    if baseline is not None:
        header += ["dMacro-F1", "dMicro-F1"]
    body = []
    for name, rep in rows:
        row = [name, f"{rep.macro.f1:.3f}", f"{rep.micro.f1:.3f}"]
        if baseline is not None:
            d = compare_runs(rep, baseline)
            row += [format_delta(d.macro.f1), format_delta(d.micro.f1)]
        body.append(row)
    return _table(header, body)


def format_evidence_table(rows: Sequence[tuple[str, EvidenceReport]]) -> str:
    body = [[n, f"{r.f1:.3f}", f"{r.precision:.3f}", f"{r.recall:.3f}"] for n, r in rows]
    return _table(["Method", "F1", "Precision", "Recall"], body)


def format_per_label_table(report: MetricsReport) -> str:
    body = [
        [code, s.tp, s.fp, s.fn, f"{s.precision:.3f}", f"{s.recall:.3f}", f"{s.f1:.3f}"]
        for code, s in report.per_label.items()
    ]
    return _table(["Code", "TP", "FP", "FN", "P", "R", "F1"], body)
