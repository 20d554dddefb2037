"""MAC-I and MAC-II workflows over agent turns, plus the batch runner."""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Iterable, Mapping, Sequence

from .agents import (
    AgentContext,
    AgentRole,
    AgentSettings,
    AgentTurn,
    CodeAssignment,
    Objection,
    ReviewVerdict,
    prompt_checksums,
    run_agent,
)
from .agents.parsing import DEFAULT_DISPUTE_PATTERNS
from .corpus import Corpus, NoteRecord, SoapNote
from .errors import ConfigError, IcdAgentsError
from .gateway import DEFAULT_MAX_RESPONSE_TOKENS, DEFAULT_TEMPERATURE, DEFAULT_TOKEN_BUDGET, Gateway
from .icd import CandidateSet, render_knowledge_block

log = logging.getLogger(__name__)

R = AgentRole


class Mode(str, Enum):
    MAC1 = "MAC1"
    MAC2 = "MAC2"


MAC1_ROLES = (R.CODER, R.REVIEWER, R.PATIENT, R.PHYSICIAN_V1, R.ADJUSTER)
MAC2_ROLES = (R.SOAP_FORMATTER, R.PHYSICIAN_V2, R.PHYSICIAN_V3, R.PATIENT, R.PHYSICIAN_V1, R.ADJUSTER)
ROLE_ORDER = {role: i for i, role in enumerate(R)}

# agent subsets of the role ablation, MAC-I
ABLATION_AGENT_SETS = {
    "Coder": frozenset({R.CODER}),
    "+Reviewer": frozenset({R.CODER, R.REVIEWER}),
    "+Reviewer+Patient": frozenset({R.CODER, R.REVIEWER, R.PATIENT}),
    "+Reviewer+Physician": frozenset({R.CODER, R.REVIEWER, R.PHYSICIAN_V1}),
    "+Reviewer+Physician+Adjuster": frozenset({R.CODER, R.REVIEWER, R.PHYSICIAN_V1, R.ADJUSTER}),
}


def parse_agent_set(names: Iterable[str | AgentRole]) -> frozenset[AgentRole]:
    roles = set()
    for name in names:
        try:
            roles.add(AgentRole(name))
        except ValueError:
            raise ConfigError(f"unknown agent role {name!r}") from None
    return frozenset(roles)


@dataclass(frozen=True)
class WorkflowConfig:
    mode: Mode = Mode.MAC1
    agent_set: frozenset[AgentRole] | None = None
    confrontation: bool = True
    external_knowledge: bool = True
    candidate_set: CandidateSet | None = None
    model_id: str = "gpt-4"
    temperature: float = DEFAULT_TEMPERATURE
    token_budget: int = DEFAULT_TOKEN_BUDGET
    max_response_tokens: int = DEFAULT_MAX_RESPONSE_TOKENS
    parallelism: int = 1
    retry_budget: int = 2
    dispute_patterns: tuple[str, ...] = DEFAULT_DISPUTE_PATTERNS

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        roles = self.agent_set
        if roles is None:
            roles = MAC1_ROLES if self.mode is Mode.MAC1 else MAC2_ROLES
        object.__setattr__(self, "agent_set", parse_agent_set(roles))
        object.__setattr__(self, "dispute_patterns", tuple(self.dispute_patterns))
        self.validate()

    def validate(self) -> None:
        allowed = MAC1_ROLES if self.mode is Mode.MAC1 else MAC2_ROLES
        stray = sorted(r.value for r in self.agent_set - set(allowed))
        if stray:
            raise ConfigError(f"roles {stray} do not take part in {self.mode.value}")
        if self.mode is Mode.MAC1 and R.CODER not in self.agent_set:
            raise ConfigError("MAC1 agent set must include Coder")
        if self.mode is Mode.MAC2 and not {R.PHYSICIAN_V2, R.PHYSICIAN_V3} <= self.agent_set:
            raise ConfigError("MAC2 agent set must include PhysicianV2 and PhysicianV3")
        if R.ADJUSTER in self.agent_set and not {R.PATIENT, R.PHYSICIAN_V1} & self.agent_set:
            raise ConfigError("Adjuster needs a reviewing role (Patient or PhysicianV1)")
        if self.external_knowledge and not self.candidate_set:
            raise ConfigError("external_knowledge requires a non-empty candidate set")
        if not 0.0 <= self.temperature <= 2.0:
            raise ConfigError("temperature must lie in [0, 2]")
        if self.token_budget <= self.max_response_tokens:
            raise ConfigError("token_budget must exceed max_response_tokens")
        if self.parallelism < 1:
            raise ConfigError("parallelism must be at least 1")
        if self.retry_budget < 0:
            raise ConfigError("retry_budget must be non-negative")

    def agent_settings(self) -> AgentSettings:
        return AgentSettings(
            model_id=self.model_id,
            temperature=self.temperature,
            token_budget=self.token_budget,
            max_response_tokens=self.max_response_tokens,
            retry_budget=self.retry_budget,
            dispute_patterns=self.dispute_patterns,
        )

    def knowledge_block(self) -> str | None:
        if not self.external_knowledge:
            return None
        return render_knowledge_block(self.candidate_set)

    def snapshot(self) -> dict:
        return {
            "mode": self.mode.value,
            "agent_set": sorted((r.value for r in self.agent_set), key=lambda v: ROLE_ORDER[R(v)]),
            "confrontation": self.confrontation,
            "external_knowledge": self.external_knowledge,
            "candidate_codes": list(self.candidate_set.codes) if self.candidate_set else None,
            "model_id": self.model_id,
            "temperature": self.temperature,
            "token_budget": self.token_budget,
            "max_response_tokens": self.max_response_tokens,
            "parallelism": self.parallelism,
            "retry_budget": self.retry_budget,
            "dispute_patterns": list(self.dispute_patterns),
        }


@dataclass(frozen=True)
class WorkflowResult:
    note_id: str
    final_codes: tuple[CodeAssignment, ...] = ()
    transcript: tuple[AgentTurn, ...] = ()
    adjuster_invoked: bool = False
    objections: tuple[Objection, ...] = ()
    status: str = "complete"
    failure_reason: str | None = None
    hallucinations: tuple[CodeAssignment, ...] = ()

    @property
    def complete(self) -> bool:
        return self.status == "complete"

    @property
    def roles_invoked(self) -> list[AgentRole]:
        return [t.role for t in self.transcript]

    @property
    def codes(self) -> frozenset[str]:
        return frozenset(c.code for c in self.final_codes)

    def to_dict(self, include_transcript: bool = True) -> dict:
        rec = {
            "note_id": self.note_id,
            "status": self.status,
            "failure_reason": self.failure_reason,
            "final_codes": [c.to_dict() for c in self.final_codes],
            "adjuster_invoked": self.adjuster_invoked,
            "objections": [o.to_dict() for o in self.objections],
            "hallucinations": [c.to_dict() for c in self.hallucinations],
            "roles_invoked": [r.value for r in self.roles_invoked],
        }
        if include_transcript:
            rec["transcript"] = [t.to_dict() for t in self.transcript]
        return rec

    def to_json(self, include_transcript: bool = True) -> str:
        return json.dumps(self.to_dict(include_transcript), ensure_ascii=False)


def knowledge_filter(
    codes: Sequence[CodeAssignment], cands: CandidateSet, note_id: str = ""
) -> tuple[list[CodeAssignment], list[CodeAssignment]]:
    """Split codes into candidate-set members and rejected (hallucinated) codes."""
    allowed = set(cands.codes)
    kept, rejected = [], []
    for c in codes:
        (kept if c.code in allowed else rejected).append(c)
    for c in rejected:
        log.info("hallucination: note=%s role=%s code=%s outside candidate set",
                 note_id, c.source_role, c.code)
    return kept, rejected


class _AgentFailed(Exception):
    pass


class _Run:
    """Mutable state of one workflow instance; strictly sequential."""

    def __init__(self, note: NoteRecord, cfg: WorkflowConfig, gateway: Gateway):
        self.note = note
        self.cfg = cfg
        self.gateway = gateway
        self.settings = cfg.agent_settings()
        self.turns: list[AgentTurn] = []
        self.objections: list[Objection] = []
        self.adjuster_invoked = False
        self.knowledge = cfg.knowledge_block()

    def ctx(self, **fields) -> AgentContext:
        return AgentContext(
            note_id=self.note.note_id,
            knowledge_block=self.knowledge,
            confrontation=self.cfg.confrontation,
            **fields,
        )

    def turn(self, role: AgentRole, ctx: AgentContext):
        turn = run_agent(role, ctx, self.gateway, self.settings, self.turns)
        if not turn.ok:
            raise _AgentFailed(f"{role.value} output unusable after retries ({turn.error})")
        return turn.payload

    def review_and_adjudicate(self, codes: tuple[CodeAssignment, ...]) -> tuple[CodeAssignment, ...]:
        if not codes:
            return codes
        ctx = self.ctx(note_text=self.note.text, codes=codes)
        for role in (R.PATIENT, R.PHYSICIAN_V1):
            if role in self.cfg.agent_set:
                verdict: ReviewVerdict = self.turn(role, ctx)
                for code, reason in verdict.contested.items():
                    self.objections.append(Objection(role, code, reason))
        if self.objections and R.ADJUSTER in self.cfg.agent_set:
            self.adjuster_invoked = True
            return self.turn(
                R.ADJUSTER,
                self.ctx(note_text=self.note.text, codes=codes, objections=tuple(self.objections)),
            )
        return codes

    def finish(self, codes: Sequence[CodeAssignment]) -> WorkflowResult:
        rejected: list[CodeAssignment] = []
        if self.cfg.external_knowledge:
            codes, rejected = knowledge_filter(codes, self.cfg.candidate_set, self.note.note_id)
        return WorkflowResult(
            self.note.note_id,
            tuple(codes),
            tuple(self.turns),
            self.adjuster_invoked,
            tuple(self.objections),
            hallucinations=tuple(rejected),
        )

    def fail(self, reason: str) -> WorkflowResult:
        return WorkflowResult(
            self.note.note_id,
            transcript=tuple(self.turns),
            adjuster_invoked=self.adjuster_invoked,
            objections=tuple(self.objections),
            status="failed",
            failure_reason=reason,
        )


def run_mac1(note: NoteRecord, cfg: WorkflowConfig, gateway: Gateway) -> WorkflowResult:
    """Coder -> Reviewer -> Patient/Physician review -> Adjuster on objection.

    Roles outside ``cfg.agent_set`` are skipped. The reviewer's list replaces
    the coder's; without objections (or without an adjuster) the reviewed
    list is final. Review turns are skipped when there is nothing to review.
    """
    if cfg.mode is not Mode.MAC1:
        raise ConfigError("run_mac1 needs a MAC1 config")
    run = _Run(note, cfg, gateway)
    try:
        codes = run.turn(R.CODER, run.ctx(note_text=note.text))
        if R.REVIEWER in cfg.agent_set:
            codes = run.turn(R.REVIEWER, run.ctx(note_text=note.text, codes=codes))
        codes = run.review_and_adjudicate(codes)
    except (_AgentFailed, IcdAgentsError) as exc:
        return run.fail(str(exc))
    return run.finish(codes)


def run_mac2(
    note: NoteRecord,
    cfg: WorkflowConfig,
    gateway: Gateway,
    soap: SoapNote | None = None,
) -> WorkflowResult:
    """SOAP conversion -> A+P generation -> self-correcting coding -> review.

    A supplied ``soap`` form (e.g. from a sidecar) skips the conversion turn.
    Its Assessment and Plan serve as the gold standard the generated ones
    are checked against.
    """
    if cfg.mode is not Mode.MAC2:
        raise ConfigError("run_mac2 needs a MAC2 config")
    run = _Run(note, cfg, gateway)
    try:
        if soap is None:
            if R.SOAP_FORMATTER not in cfg.agent_set:
                return run.fail("no SOAP form supplied and SoapFormatter not in agent set")
            soap = run.turn(R.SOAP_FORMATTER, run.ctx(note_text=note.text))
        if soap.missing_history:
            return run.fail("degenerate SOAP: empty Subjective and Objective")
        generated = run.turn(R.PHYSICIAN_V2, run.ctx(soap=soap))
        codes = run.turn(R.PHYSICIAN_V3, run.ctx(soap=soap, generated=generated))
        codes = run.review_and_adjudicate(codes)
    except (_AgentFailed, IcdAgentsError) as exc:
        return run.fail(str(exc))
    return run.finish(codes)


def run_note(
    note: NoteRecord, cfg: WorkflowConfig, gateway: Gateway, soap: SoapNote | None = None
) -> WorkflowResult:
    if cfg.mode is Mode.MAC1:
        return run_mac1(note, cfg, gateway)
    return run_mac2(note, cfg, gateway, soap)


@dataclass
class BatchRun:
    results: list[WorkflowResult]
    manifest: dict = field(default_factory=dict)

    @property
    def failed(self) -> list[WorkflowResult]:
        return [r for r in self.results if not r.complete]


def run_batch(
    corpus: Corpus | Sequence[NoteRecord],
    cfg: WorkflowConfig,
    gateway: Gateway,
    soap_forms: Mapping[str, SoapNote] | None = None,
    on_result: Callable[[WorkflowResult], None] | None = None,
) -> BatchRun:
    """Run every note with up to ``cfg.parallelism`` concurrent workflows.

    Results come back in corpus order; a failure in one note never stops
    the others. ``on_result`` is called as each note finishes.
    """
    notes = list(corpus)
    if not notes:
        raise ConfigError("cannot run a batch over an empty corpus")
    soap_forms = soap_forms or {}
    calls_before = gateway.calls

    def one(note: NoteRecord) -> WorkflowResult:
        try:
            result = run_note(note, cfg, gateway, soap_forms.get(note.note_id))
        except Exception as exc:  # isolate per-note failures, whatever they are
            log.exception("note %s failed", note.note_id)
            result = WorkflowResult(
                note.note_id, status="failed", failure_reason=f"{type(exc).__name__}: {exc}"
            )
        if on_result is not None:
            on_result(result)
        return result

    if cfg.parallelism == 1:
        results = [one(n) for n in notes]
    else:
        with ThreadPoolExecutor(max_workers=cfg.parallelism) as pool:
            results = list(pool.map(one, notes))

    counter = gateway.counter
    manifest = {
        "config": cfg.snapshot(),
        "prompt_checksums": prompt_checksums(),
        "token_counter": getattr(counter, "name", type(counter).__name__),
        "approximate_token_counter": bool(getattr(counter, "approximate", False)),
        "counts": {
            "notes": len(results),
            "complete": sum(r.complete for r in results),
            "failed": sum(not r.complete for r in results),
            "adjuster_invoked": sum(r.adjuster_invoked for r in results),
            "hallucinations": sum(len(r.hallucinations) for r in results),
        },
        "gateway_calls": gateway.calls - calls_before,
    }
    return BatchRun(results, manifest)


def with_overrides(cfg: WorkflowConfig, **changes) -> WorkflowConfig:
    if "agent_set" in changes and changes["agent_set"] is not None:
        changes["agent_set"] = parse_agent_set(changes["agent_set"])
    return replace(cfg, **changes)
