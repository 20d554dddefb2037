from __future__ import annotations

from dataclasses import dataclass

from ..errors import BudgetError, ParseError
from ..gateway import (
    DEFAULT_MAX_RESPONSE_TOKENS,
    DEFAULT_TEMPERATURE,
    DEFAULT_TOKEN_BUDGET,
    CompletionRequest,
    Gateway,
    truncate_to_budget,
)
from .parsing import (
    DEFAULT_DISPUTE_PATTERNS,
    parse_assessment_plan,
    parse_code_list,
    parse_review,
    parse_soap,
)
from .prompts import REVIEW_ROLES, AgentContext, RenderedPrompt, reminder_for, render_prompt
from .types import AgentRole, AgentTurn, ReviewVerdict


@dataclass(frozen=True)
class AgentSettings:
    model_id: str = "gpt-4"
    temperature: float = DEFAULT_TEMPERATURE
    token_budget: int = DEFAULT_TOKEN_BUDGET
    max_response_tokens: int = DEFAULT_MAX_RESPONSE_TOKENS
    retry_budget: int = 2
    dispute_patterns: tuple[str, ...] = DEFAULT_DISPUTE_PATTERNS


def _parse(role: AgentRole, raw: str, ctx: AgentContext, settings: AgentSettings):
    if role is AgentRole.SOAP_FORMATTER:
        soap = parse_soap(raw, ctx.note_id)
        return soap, list(soap.warnings)
    if role is AgentRole.PHYSICIAN_V2:
        ap = parse_assessment_plan(raw, ctx.note_id)
        return ap, list(ap.warnings)
    if role in REVIEW_ROLES:
        codes = [c.code for c in ctx.codes or ()]
        if not codes:
            return ReviewVerdict({}), []
        return parse_review(raw, codes, settings.dispute_patterns)
    assignments, warnings = parse_code_list(raw, role)
    return tuple(assignments), warnings


def _fit(prompt: RenderedPrompt, reminder: str, gateway: Gateway,
         settings: AgentSettings) -> tuple[RenderedPrompt, bool, int]:
    """Truncate the prompt body so every attempt fits the token budget."""
    budget = settings.token_budget
    fixed = [prompt.system, prompt.head, prompt.tail, reminder]
    while True:
        cut = truncate_to_budget(
            prompt.body, fixed, budget, settings.max_response_tokens, gateway.counter
        )
        fitted = prompt.with_body(cut.text)
        estimate = (gateway.count(fitted.system) + gateway.count(fitted.user)
                    + gateway.count(reminder))
        excess = estimate + settings.max_response_tokens - settings.token_budget
        if excess <= 0:
            return fitted, cut.truncated, estimate
        # counters that are not subadditive over concatenation need another pass
        budget -= excess
        if budget <= 0:
            raise BudgetError("cannot fit prompt into the token budget")


def run_agent(
    role: AgentRole,
    ctx: AgentContext,
    gateway: Gateway,
    settings: AgentSettings | None = None,
    transcript: list[AgentTurn] | None = None,
) -> AgentTurn:
    """Render, truncate, complete and parse one role's turn.

    Unparseable output is re-asked up to ``settings.retry_budget`` times
    with a short reminder appended. Every attempt is appended to
    ``transcript``; the returned turn is the last one and carries
    ``error`` if no attempt parsed. Gateway errors propagate.
    """
    role = AgentRole(role)
    settings = settings or AgentSettings()
    reminder = reminder_for(role)
    prompt, truncated, estimate = _fit(render_prompt(role, ctx), reminder, gateway, settings)

    turn = None
    for attempt in range(1, settings.retry_budget + 2):
        messages = (prompt.user,) if attempt == 1 else (prompt.user, reminder)
        req = CompletionRequest(
            system_prompt=prompt.system,
            user_messages=messages,
            temperature=settings.temperature,
            max_response_tokens=settings.max_response_tokens,
            model_id=settings.model_id,
            token_budget=settings.token_budget,
            tags={"role": role.value, "note_id": ctx.note_id, "attempt": str(attempt)},
        )
        resp = gateway.complete(req)
        common = dict(
            role=role, note_id=ctx.note_id, system_prompt=prompt.system,
            user_messages=messages, raw_response=resp.text, attempt=attempt,
            truncated=truncated, prompt_tokens_estimate=estimate, digest=req.digest,
        )
        try:
            payload, warnings = _parse(role, resp.text, ctx, settings)
        except ParseError as exc:
            turn = AgentTurn(**common, error=f"{type(exc).__name__}: {exc}")
        else:
            turn = AgentTurn(**common, payload=payload, parse_warnings=tuple(warnings))
        if transcript is not None:
            transcript.append(turn)
        if turn.ok:
            break
    return turn
