"""Role prompt templates and rendering."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Sequence

from ..corpus import SoapNote
from ..errors import PromptError
from .types import AgentRole, CodeAssignment, Objection

TEMPLATE_FILES = {
    AgentRole.SOAP_FORMATTER: "soap_formatter.txt",
    AgentRole.PATIENT: "patient.txt",
    AgentRole.PHYSICIAN_V1: "physician_v1.txt",
    AgentRole.PHYSICIAN_V2: "physician_v2.txt",
    AgentRole.PHYSICIAN_V3: "physician_v3.txt",
    AgentRole.CODER: "coder.txt",
    AgentRole.REVIEWER: "reviewer.txt",
    AgentRole.ADJUSTER: "adjuster.txt",
}

# sentences carrying the confrontation strategy, removed when it is off
CONFRONTATION_SENTENCES = {
    AgentRole.CODER: "You assign as many as possible ICD-9 codes and explain the reasons for each code.",
    AgentRole.PHYSICIAN_V3: "You assign as many as possible ICD-9 codes and explain the reasons for each code.",
    AgentRole.PATIENT: "You also check the ICD-9 codes to avoid being overbilled.",
}

KNOWLEDGE_ROLES = frozenset(
    {AgentRole.CODER, AgentRole.REVIEWER, AgentRole.PHYSICIAN_V3, AgentRole.ADJUSTER}
)
REVIEW_ROLES = frozenset({AgentRole.PATIENT, AgentRole.PHYSICIAN_V1})
CODING_ROLES = frozenset(
    {AgentRole.CODER, AgentRole.REVIEWER, AgentRole.PHYSICIAN_V3, AgentRole.ADJUSTER}
)

CODE_LIST_SUFFIX = (
    "Output format: respond with a JSON list containing one object per ICD-9 code, "
    'each of the form {"code": "<ICD-9 code>", "explanation": "<reason, quoting the '
    'note where possible>"}. Respond with [] if no code applies.'
)
REVIEW_SUFFIX = (
    "Output format: respond with a JSON list containing one object per assigned "
    'ICD-9 code, each of the form {"code": "<ICD-9 code>", "explanation": "<reason>", '
    '"verdict": "accept" or "contest"}. Use "contest" for every code you object to.'
)
SOAP_SUFFIX = (
    "Output format: respond only with the JSON object, with the four keys "
    '"Subjective", "Objective", "Assessment" and "Plan" and text values.'
)
AP_SUFFIX = (
    'Output format: respond only with a JSON object of the form '
    '{"Assessment": "<text>", "Plan": "<text>"}.'
)
LIST_REMINDER = "Respond only with the list, in the JSON format requested above."
OBJECT_REMINDER = "Respond only with the JSON object, in the format requested above."


@lru_cache(maxsize=None)
def load_template(role: AgentRole) -> str:
    ref = resources.files("icdagents.agents").joinpath("templates", TEMPLATE_FILES[role])
    return ref.read_text(encoding="utf-8").rstrip("\n")


def prompt_checksums() -> dict[str, str]:
    return {
        role.value: hashlib.sha256(load_template(role).encode("utf-8")).hexdigest()
        for role in AgentRole
    }


def suffix_for(role: AgentRole) -> str:
    if role is AgentRole.SOAP_FORMATTER:
        return SOAP_SUFFIX
    if role is AgentRole.PHYSICIAN_V2:
        return AP_SUFFIX
    if role in REVIEW_ROLES:
        return REVIEW_SUFFIX
    return CODE_LIST_SUFFIX


def reminder_for(role: AgentRole) -> str:
    if role in (AgentRole.SOAP_FORMATTER, AgentRole.PHYSICIAN_V2):
        return OBJECT_REMINDER
    return LIST_REMINDER


def system_prompt(
    role: AgentRole, *, confrontation: bool = True, knowledge_block: str | None = None
) -> str:
    text = load_template(role)
    if not confrontation and role in CONFRONTATION_SENTENCES:
        sentence = CONFRONTATION_SENTENCES[role]
        text = text.replace(" " + sentence, "").replace(sentence, "").strip()
    parts = [text]
    if knowledge_block and role in KNOWLEDGE_ROLES:
        parts.append(knowledge_block)
    parts.append(suffix_for(role))
    return "\n\n".join(parts)


@dataclass(frozen=True)
class AgentContext:
    """Everything a role's prompt may draw on. Unused fields are ignored."""

    note_id: str
    note_text: str | None = None
    soap: SoapNote | None = None
    generated: SoapNote | None = None
    codes: tuple[CodeAssignment, ...] | None = None
    objections: tuple[Objection, ...] = ()
    knowledge_block: str | None = None
    confrontation: bool = True


@dataclass(frozen=True)
class RenderedPrompt:
    """System prompt plus a user message split around its truncatable body."""

    system: str
    head: str
    body: str
    tail: str = ""

    @property
    def user(self) -> str:
        return self.head + self.body + self.tail

    def with_body(self, body: str) -> "RenderedPrompt":
        return RenderedPrompt(self.system, self.head, body, self.tail)


def format_codes(codes: Sequence[CodeAssignment]) -> str:
    if not codes:
        return "[]"
    rows = [json.dumps({"code": c.code, "explanation": c.explanation}, ensure_ascii=False) for c in codes]
    return "[\n" + ",\n".join(rows) + "\n]"


def _require(ctx: AgentContext, role: AgentRole, *names: str) -> None:
    missing = [n for n in names if getattr(ctx, n) is None]
    if missing:
        raise PromptError(f"{role.value} prompt needs context field(s): {', '.join(missing)}")


def render_prompt(role: AgentRole, ctx: AgentContext) -> RenderedPrompt:
    role = AgentRole(role)
    system = system_prompt(
        role, confrontation=ctx.confrontation, knowledge_block=ctx.knowledge_block
    )
    if role is AgentRole.SOAP_FORMATTER:
        _require(ctx, role, "note_text")
        return RenderedPrompt(system, "EHR note:\n", ctx.note_text)
    if role is AgentRole.CODER:
        _require(ctx, role, "note_text")
        return RenderedPrompt(system, "Discharge summary:\n", ctx.note_text)
    if role is AgentRole.REVIEWER:
        _require(ctx, role, "note_text", "codes")
        tail = "\n\nICD-9 codes assigned by the coder:\n" + format_codes(ctx.codes)
        return RenderedPrompt(system, "Discharge summary:\n", ctx.note_text, tail)
    if role in REVIEW_ROLES:
        _require(ctx, role, "note_text", "codes")
        tail = "\n\nAssigned ICD-9 codes:\n" + format_codes(ctx.codes)
        return RenderedPrompt(system, "Discharge summary:\n", ctx.note_text, tail)
    if role is AgentRole.ADJUSTER:
        _require(ctx, role, "note_text", "codes")
        objections = "\n".join(
            f"- {o.role.value} contests {o.code}: {o.reason or '(no reason given)'}"
            for o in ctx.objections
        ) or "- (none)"
        tail = (
            "\n\nICD-9 codes assigned by the coder and checked by the reviewer:\n"
            + format_codes(ctx.codes)
            + "\n\nObjections raised:\n"
            + objections
        )
        return RenderedPrompt(system, "Discharge summary:\n", ctx.note_text, tail)
    if role is AgentRole.PHYSICIAN_V2:
        _require(ctx, role, "soap")
        body = f"Subjective:\n{ctx.soap.subjective}\n\nObjective:\n{ctx.soap.objective}"
        return RenderedPrompt(system, "", body)
    if role is AgentRole.PHYSICIAN_V3:
        _require(ctx, role, "soap", "generated")
        head = (
            f"Generated assessment:\n{ctx.generated.assessment}\n\n"
            f"Generated plan:\n{ctx.generated.plan}\n\n"
        )
        body = (
            f"Gold standard assessment:\n{ctx.soap.assessment}\n\n"
            f"Gold standard plan:\n{ctx.soap.plan}"
        )
        return RenderedPrompt(system, head, body)
    raise PromptError(f"no prompt for role {role!r}")
