from __future__ import annotations

import json
import threading
from pathlib import Path

import pytest

from icdagents.agents import AgentRole
from icdagents.gateway import CompletionRequest, Gateway, ScriptProvider
from icdagents.icd import CodeDictionary, IcdCodeEntry, build_candidate_set, infer_kind

GOLDEN = Path(__file__).parent / "golden"

DICTIONARY_ROWS = [
    ("401.9", "Unspecified essential hypertension"),
    ("38.93", "Venous catheterization, not elsewhere classified"),
    ("428.0", "Congestive heart failure, unspecified"),
    ("427.31", "Atrial fibrillation"),
    ("414.01", "Coronary atherosclerosis of native coronary artery"),
    ("96.04", "Insertion of endotracheal tube"),
    ("96.6", "Enteral infusion of concentrated nutritional substances"),
    ("569.81", "Fistula of intestine, excluding rectum and anus"),
    ("250.00", "Diabetes mellitus without mention of complication"),
    ("V45.81", "Aortocoronary bypass status"),
]
CANDIDATES = [c for c, _ in DICTIONARY_ROWS[:7]]


def code_list(*codes: str, explanation: str = "documented in the note") -> str:
    return json.dumps([{"code": c, "explanation": explanation} for c in codes])


def review(accept=(), contest=()) -> str:
    rows = [{"code": c, "explanation": "fine", "verdict": "accept"} for c in accept]
    rows += [{"code": c, "explanation": "No evidence found.", "verdict": "contest"} for c in contest]
    return json.dumps(rows)


SOAP_JSON = json.dumps({
    "Subjective": "Shortness of breath for two days.",
    "Objective": "BP 170/95. Crackles at both bases.",
    "Assessment": "Acute on chronic heart failure. Hypertension.",
    "Plan": "Diuresis, continue losartan.",
})
AP_JSON = json.dumps({"Assessment": "Heart failure exacerbation.", "Plan": "IV diuretics."})


class RoleScript:
    """Scripted completions keyed by agent role.

    A value is a string, a list of strings consumed one per call (the last
    one repeats) or a callable taking the request. ``per_note`` overrides
    by (note_id, role). Every call is recorded in ``calls``.
    """

    def __init__(self, responses=None, per_note=None):
        self.responses = dict(responses or {})
        self.per_note = dict(per_note or {})
        self.calls: list[tuple[str, str]] = []
        self._seen: dict[tuple[str, str], int] = {}
        self._lock = threading.Lock()

    def __call__(self, req: CompletionRequest) -> str:
        role, note = req.tags.get("role"), req.tags.get("note_id")
        with self._lock:
            self.calls.append((note, role))
            n = self._seen.get((note, role), 0)
            self._seen[(note, role)] = n + 1
        value = self.per_note.get((note, role), self.responses.get(role))
        if value is None:
            raise AssertionError(f"unscripted role {role} for note {note}")
        if callable(value):
            return value(req)
        if isinstance(value, list):
            return value[min(n, len(value) - 1)]
        return value

    def roles(self, note_id: str | None = None) -> list[str]:
        return [r for n, r in self.calls if note_id is None or n == note_id]


def default_responses(**overrides) -> dict:
    base = {
        AgentRole.CODER.value: code_list("401.9", "428.0"),
        AgentRole.REVIEWER.value: code_list("401.9", "428.0"),
        AgentRole.PATIENT.value: review(accept=("401.9", "428.0")),
        AgentRole.PHYSICIAN_V1.value: review(accept=("401.9", "428.0")),
        AgentRole.ADJUSTER.value: code_list("428.0"),
        AgentRole.SOAP_FORMATTER.value: SOAP_JSON,
        AgentRole.PHYSICIAN_V2.value: AP_JSON,
        AgentRole.PHYSICIAN_V3.value: code_list("401.9", "428.0"),
    }
    base.update({AgentRole(k).value: v for k, v in overrides.items()})
    return base


def scripted_gateway(script: RoleScript) -> Gateway:
    return Gateway(ScriptProvider(script))


@pytest.fixture
def dictionary() -> CodeDictionary:
    return CodeDictionary.from_entries(IcdCodeEntry(c, d, infer_kind(c)) for c, d in DICTIONARY_ROWS)


@pytest.fixture
def candidates(dictionary):
    return build_candidate_set(dictionary, CANDIDATES, len(CANDIDATES))


# -- on-disk workspace for CLI and pipeline tests ----------------------------

NOTE_TEMPLATES = [
    ("Patient with hypertension on losartan. Blood pressure remained high.", ["401.9"]),
    ("Admitted for congestive heart failure. Diuresis was started.", ["428.0"]),
    ("New atrial fibrillation noted on telemetry. Started on anticoagulation.", ["427.31", "401.9"]),
    ("Intubated in the field. Endotracheal tube placed for airway protection.", ["96.04"]),
    ("Coronary artery disease with prior stent. Chest pain resolved.", ["414.01", "428.0"]),
]

SCRIPT_RULES = [
    {"role": "SoapFormatter", "text": SOAP_JSON},
    {"role": "PhysicianV2", "text": AP_JSON},
    {"role": "Coder", "contains": "atrial fibrillation", "text": code_list("427.31", "401.9", "250.00")},
    {"role": "Coder", "contains": "on losartan", "text": code_list("401.9")},
    {"role": "Coder", "contains": "Endotracheal", "text": code_list("96.04", "38.93")},
    {"role": "Coder", "text": code_list("428.0", "414.01")},
    {"role": "Reviewer", "contains": "\"38.93\"", "text": code_list("96.04")},
    {"role": "Reviewer", "contains": "\"427.31\"", "text": code_list("427.31", "401.9", "250.00")},
    {"role": "Reviewer", "contains": "\"401.9\"", "text": code_list("401.9")},
    {"role": "Reviewer", "contains": "\"96.04\"", "text": code_list("96.04")},
    {"role": "Reviewer", "text": code_list("428.0", "414.01")},
    {"role": "PhysicianV3", "text": code_list("428.0", "401.9")},
    {"role": "Patient", "contains": "Blood pressure remained high", "text": review(contest=("401.9",))},
    {"role": "Patient", "contains": "atrial fibrillation", "text": review(accept=("427.31",), contest=("401.9",))},
    {"role": "Patient", "text": json.dumps([])},
    {"role": "PhysicianV1", "text": review(accept=("401.9",))},
    {"role": "Adjuster", "contains": "Blood pressure remained high", "text": code_list("401.9", explanation="Patient with hypertension on losartan.")},
    {"role": "Adjuster", "text": json.dumps([
        {"code": "427.31", "explanation": "New atrial fibrillation noted on telemetry."},
        {"code": "250.00", "explanation": "Diabetes"},
    ])},
]


def synthetic_notes(n: int, split: str = "test") -> list[dict]:
    out = []
    for i in range(n):
        text, codes = NOTE_TEMPLATES[i % len(NOTE_TEMPLATES)]
        out.append({"note_id": f"s{i:03d}", "text": f"Case {i}. {text}", "gold_codes": codes, "split": split})
    return out


def build_workspace(root: Path, n_notes: int = 5, **workflow) -> Path:
    """Write corpus, dictionary, candidates, script and config; return the config path."""
    import yaml

    root.mkdir(parents=True, exist_ok=True)
    (root / "corpus.jsonl").write_text(
        "".join(json.dumps(r) + "\n" for r in synthetic_notes(n_notes)), encoding="utf-8"
    )
    (root / "dict.csv").write_text(
        "code,description\n" + "".join(f'{c},"{d}"\n' for c, d in DICTIONARY_ROWS), encoding="utf-8"
    )
    (root / "candidates.txt").write_text("\n".join(CANDIDATES) + "\n", encoding="utf-8")
    (root / "script.yaml").write_text(yaml.safe_dump({"rules": SCRIPT_RULES}), encoding="utf-8")
    config = {
        "paths": {
            "corpus": "corpus.jsonl",
            "dictionary": "dict.csv",
            "candidates": "candidates.txt",
            "cache": "cache/completions.jsonl",
            "output_dir": "out",
        },
        "workflow": {"n_candidates": len(CANDIDATES), **workflow},
        "provider": {"kind": "script", "script": "script.yaml"},
    }
    path = root / "config.yaml"
    path.write_text(yaml.safe_dump(config), encoding="utf-8")
    return path


@pytest.fixture
def workspace(tmp_path) -> Path:
    return build_workspace(tmp_path / "ws")


# -- acceptance summary --------------------------------------------------------

ACCEPTANCE = {
    1: "metric oracle equivalence",
    2: "workflow call sequences",
    3: "candidate containment",
    4: "prompt fidelity",
    5: "replay determinism",
    6: "truncation bound",
    7: "evidence matching",
    8: "parser robustness",
    9: "live smoke (optional)",
}
_acceptance: dict[int, list[str]] = {}


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is not None:
        report.user_properties.append(("acceptance", marker.args[0]))


def pytest_runtest_logreport(report):
    number = dict(report.user_properties).get("acceptance")
    if number is None:
        return
    if report.when == "call" or report.outcome != "passed":
        _acceptance.setdefault(number, []).append(report.outcome)


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_acceptance):
        outcomes = _acceptance[number]
        if "failed" in outcomes:
            verdict = "FAIL"
        elif all(o == "skipped" for o in outcomes):
            verdict = "SKIP"
        else:
            verdict = "PASS"
        terminalreporter.write_line(
            f"criterion {number}: {verdict}  {ACCEPTANCE.get(number, '')} ({len(outcomes)} test(s))"
        )
