"""Agent roles: prompt rendering, completion and response parsing."""

from .parsing import (
    DEFAULT_DISPUTE_PATTERNS,
    find_structures,
    parse_assessment_plan,
    parse_code_list,
    parse_review,
    parse_soap,
)
from .prompts import (
    CONFRONTATION_SENTENCES,
    KNOWLEDGE_ROLES,
    AgentContext,
    RenderedPrompt,
    load_template,
    prompt_checksums,
    render_prompt,
    system_prompt,
)
from .runner import AgentSettings, run_agent
from .types import (
    AgentRole,
    AgentTurn,
    CodeAssignment,
    CodeVerdict,
    Objection,
    ReviewVerdict,
)

__all__ = [
    "AgentContext",
    "AgentRole",
    "AgentSettings",
    "AgentTurn",
    "CONFRONTATION_SENTENCES",
    "CodeAssignment",
    "CodeVerdict",
    "DEFAULT_DISPUTE_PATTERNS",
    "KNOWLEDGE_ROLES",
    "Objection",
    "RenderedPrompt",
    "ReviewVerdict",
    "find_structures",
    "load_template",
    "parse_assessment_plan",
    "parse_code_list",
    "parse_review",
    "parse_soap",
    "prompt_checksums",
    "render_prompt",
    "run_agent",
    "system_prompt",
]
