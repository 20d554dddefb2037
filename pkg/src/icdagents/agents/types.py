from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from types import MappingProxyType
from typing import Mapping, Union

from ..corpus import SoapNote


class AgentRole(str, Enum):
    SOAP_FORMATTER = "SoapFormatter"
    PATIENT = "Patient"
    PHYSICIAN_V1 = "PhysicianV1"
    PHYSICIAN_V2 = "PhysicianV2"
    PHYSICIAN_V3 = "PhysicianV3"
    CODER = "Coder"
    REVIEWER = "Reviewer"
    ADJUSTER = "Adjuster"

    def __str__(self) -> str:
        return self.value


@dataclass(frozen=True)
class CodeAssignment:
    code: str
    explanation: str = ""
    source_role: AgentRole | None = None
    # True when the model gave no explanation at all
    explanation_missing: bool = False

    def to_dict(self) -> dict:
        rec = {
            "code": self.code,
            "explanation": self.explanation,
            "source_role": self.source_role.value if self.source_role else None,
        }
        if self.explanation_missing:
            rec["explanation_missing"] = True
        return rec

    @classmethod
    def from_dict(cls, rec: Mapping) -> "CodeAssignment":
        role = rec.get("source_role")
        return cls(
            rec["code"],
            rec.get("explanation", ""),
            AgentRole(role) if role else None,
            bool(rec.get("explanation_missing", False)),
        )


@dataclass(frozen=True)
class CodeVerdict:
    contested: bool
    reason: str = ""


@dataclass(frozen=True)
class ReviewVerdict:
    per_code: Mapping[str, CodeVerdict] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "per_code", MappingProxyType(dict(self.per_code)))

    @property
    def overall_objection(self) -> bool:
        return any(v.contested for v in self.per_code.values())

    @property
    def contested(self) -> dict[str, str]:
        return {c: v.reason for c, v in self.per_code.items() if v.contested}

    def to_dict(self) -> dict:
        return {
            "per_code": {
                c: {"verdict": "contest" if v.contested else "accept", "reason": v.reason}
                for c, v in self.per_code.items()
            },
            "overall_objection": self.overall_objection,
        }


@dataclass(frozen=True)
class Objection:
    role: AgentRole
    code: str
    reason: str

    def to_dict(self) -> dict:
        return {"role": self.role.value, "code": self.code, "reason": self.reason}


Payload = Union[tuple[CodeAssignment, ...], SoapNote, ReviewVerdict, None]


@dataclass(frozen=True)
class AgentTurn:
    role: AgentRole
    note_id: str
    system_prompt: str
    user_messages: tuple[str, ...]
    raw_response: str
    payload: Payload = None
    parse_warnings: tuple[str, ...] = ()
    error: str | None = None
    attempt: int = 1
    truncated: bool = False
    prompt_tokens_estimate: int = 0
    digest: str = ""

    @property
    def rendered_prompt(self) -> str:
        return "\n\n".join((self.system_prompt, *self.user_messages))

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        payload = self.payload
        if isinstance(payload, tuple):
            payload = [a.to_dict() for a in payload]
        elif payload is not None:
            payload = payload.to_dict()
        return {
            "role": self.role.value,
            "note_id": self.note_id,
            "attempt": self.attempt,
            "digest": self.digest,
            "system_prompt": self.system_prompt,
            "user_messages": list(self.user_messages),
            "raw_response": self.raw_response,
            "payload": payload,
            "parse_warnings": list(self.parse_warnings),
            "error": self.error,
            "truncated": self.truncated,
            "prompt_tokens_estimate": self.prompt_tokens_estimate,
        }
