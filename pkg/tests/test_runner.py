import pytest

from icdagents.agents import AgentContext, AgentRole, AgentSettings, run_agent
from icdagents.agents.prompts import LIST_REMINDER
from icdagents.errors import GatewayTimeout
from icdagents.gateway import Gateway, ScriptProvider

from conftest import RoleScript, scripted_gateway
from test_parsing import FIG2_CODER

R = AgentRole
CTX = AgentContext(note_id="n1", note_text="Hypertension. Peptic ulcer.")


def test_coder_turn_from_figure_text():
    gw = scripted_gateway(RoleScript({"Coder": FIG2_CODER}))
    turn = run_agent(R.CODER, CTX, gw)
    assert turn.ok and turn.attempt == 1
    assert [a.code for a in turn.payload] == ["401.9", "569.81"]
    assert turn.rendered_prompt.startswith("You are an ICD-9 coder.")


def test_retry_after_parse_failure():
    script = RoleScript({"Coder": ["Sorry, let me think.", '[{"code": "401.9", "explanation": "BP"}]']})
    transcript = []
    turn = run_agent(R.CODER, CTX, scripted_gateway(script), AgentSettings(retry_budget=2), transcript)
    assert turn.ok and turn.attempt == 2
    assert [t.attempt for t in transcript] == [1, 2]
    assert transcript[0].error and "NoAssignmentsFound" in transcript[0].error
    assert transcript[1].user_messages[-1] == LIST_REMINDER


def test_retry_budget_exhausted():
    transcript = []
    gw = scripted_gateway(RoleScript({"Coder": "no idea"}))
    turn = run_agent(R.CODER, CTX, gw, AgentSettings(retry_budget=1), transcript)
    assert not turn.ok and turn.error
    assert len(transcript) == 2 and gw.calls == 2


def test_gateway_errors_propagate():
    def boom(req):
        raise GatewayTimeout("slow")

    transcript = []
    with pytest.raises(GatewayTimeout):
        run_agent(R.CODER, CTX, scripted_gateway(RoleScript({"Coder": boom})), transcript=transcript)
    assert transcript == []


def test_oversized_note_is_truncated_within_budget():
    seen = []

    def record(req):
        seen.append(req)
        return "[]"

    note = "Patient reports chest pain. " * 2000
    settings = AgentSettings(token_budget=2000, max_response_tokens=200)
    gw = scripted_gateway(RoleScript({"Coder": record}))
    turn = run_agent(R.CODER, AgentContext("n", note_text=note), gw, settings)
    assert turn.truncated and turn.payload == ()
    used = gw.count(seen[0].system_prompt) + sum(gw.count(m) for m in seen[0].user_messages)
    assert used + 200 <= 2000
    assert turn.prompt_tokens_estimate >= used


def test_review_turn_without_codes_needs_no_parse():
    gw = scripted_gateway(RoleScript({"Patient": "whatever"}))
    turn = run_agent(R.PATIENT, AgentContext("n", note_text="x", codes=()), gw)
    assert turn.ok and not turn.payload.overall_objection


def test_request_tags_and_settings():
    seen = []
    provider = ScriptProvider(lambda req: seen.append(req) or "[]")
    run_agent(R.CODER, CTX, Gateway(provider), AgentSettings(model_id="m", temperature=0.3))
    assert seen[0].tags == {"role": "Coder", "note_id": "n1", "attempt": "1"}
    assert (seen[0].model_id, seen[0].temperature) == ("m", 0.3)
