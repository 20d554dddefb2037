"""Multi-agent LLM pipelines for ICD-9 coding of clinical notes.

Five cooperating and contesting roles (coder, reviewer, patient,
physician, adjuster) assign codes to discharge summaries in two workflow
modes: MAC1, led by the coder, and MAC2, where the physician regenerates
the assessment and plan from a SOAP form and self-corrects before coding.
"""

__version__ = "0.1.0"

from .agents import AgentRole, CodeAssignment, render_prompt, run_agent
from .corpus import Corpus, NoteRecord, SoapNote, load_corpus, segment_sentences
from .evaluation import score_evidence, score_multilabel
from .gateway import (
    CachingProvider,
    CompletionRequest,
    CompletionResponse,
    Gateway,
    RemoteProvider,
    ReplayProvider,
    ScriptProvider,
    count_tokens,
    truncate_to_budget,
)
from .icd import CandidateSet, CodeDictionary, build_candidate_set, canonicalize_code, load_dictionary
from .workflow import Mode, WorkflowConfig, WorkflowResult, run_batch, run_mac1, run_mac2

__all__ = [
    "AgentRole",
    "CachingProvider",
    "CandidateSet",
    "CodeAssignment",
    "CodeDictionary",
    "CompletionRequest",
    "CompletionResponse",
    "Corpus",
    "Gateway",
    "Mode",
    "NoteRecord",
    "RemoteProvider",
    "ReplayProvider",
    "ScriptProvider",
    "SoapNote",
    "WorkflowConfig",
    "WorkflowResult",
    "build_candidate_set",
    "canonicalize_code",
    "count_tokens",
    "load_corpus",
    "load_dictionary",
    "render_prompt",
    "run_agent",
    "run_batch",
    "run_mac1",
    "run_mac2",
    "score_evidence",
    "score_multilabel",
    "segment_sentences",
    "truncate_to_budget",
]
