import json
import logging

import pytest

from icdagents.agents import AgentRole, CodeAssignment
from icdagents.corpus import NoteRecord, SoapNote
from icdagents.errors import ConfigError, GatewayTimeout
from icdagents.workflow import (
    ABLATION_AGENT_SETS,
    Mode,
    WorkflowConfig,
    knowledge_filter,
    run_batch,
    run_mac1,
    run_mac2,
    run_note,
    with_overrides,
)

from conftest import RoleScript, code_list, default_responses, review, scripted_gateway

R = AgentRole
NOTE = NoteRecord("n1", "Hypertension on losartan. Heart failure.", frozenset({"401.9"}), "test")


def cfg(candidates, **kw):
    kw.setdefault("candidate_set", candidates)
    return WorkflowConfig(**kw)


@pytest.mark.parametrize(
    "kw,msg",
    [
        (dict(agent_set={"Reviewer"}), "Coder"),
        (dict(agent_set={"Coder", "PhysicianV2"}), "do not take part"),
        (dict(agent_set={"Coder", "Adjuster"}), "Adjuster"),
        (dict(mode="MAC2", agent_set={"PhysicianV2"}), "PhysicianV3"),
        (dict(agent_set={"Coder", "Chief"}), "unknown agent role"),
        (dict(temperature=3.0), "temperature"),
        (dict(token_budget=1000, max_response_tokens=1024), "token_budget"),
        (dict(parallelism=0), "parallelism"),
    ],
)
def test_config_validation(candidates, kw, msg):
    with pytest.raises(ConfigError, match=msg):
        cfg(candidates, **kw)


def test_knowledge_needs_candidates():
    with pytest.raises(ConfigError, match="candidate"):
        WorkflowConfig()
    assert WorkflowConfig(external_knowledge=False).knowledge_block() is None


def test_ablation_sets_are_valid_mac1_configs(candidates):
    for roles in ABLATION_AGENT_SETS.values():
        assert cfg(candidates, agent_set=roles).agent_set == roles


def test_snapshot_is_json_and_ordered(candidates):
    snap = cfg(candidates).snapshot()
    assert snap["agent_set"] == sorted(snap["agent_set"], key=[r.value for r in R].index)
    json.dumps(snap)
    assert snap["candidate_codes"][0] == "401.9"


def test_knowledge_filter_logs(caplog):
    codes = [CodeAssignment("401.9", "", R.CODER), CodeAssignment("250.00", "", R.CODER)]

    class Cands:
        codes = ("401.9",)

    with caplog.at_level(logging.INFO, logger="icdagents.workflow"):
        kept, rejected = knowledge_filter(codes, Cands(), "n1")
    assert [c.code for c in kept] == ["401.9"] and [c.code for c in rejected] == ["250.00"]
    assert "hallucination" in caplog.text and "250.00" in caplog.text


def test_mac1_reviewer_list_replaces_coder_list(candidates):
    script = RoleScript(default_responses(Coder=code_list("401.9"), Reviewer=code_list("428.0", "427.31")))
    res = run_mac1(NOTE, cfg(candidates, agent_set={"Coder", "Reviewer"}), scripted_gateway(script))
    assert res.complete and res.codes == {"428.0", "427.31"}


def test_mac1_objection_without_adjuster_keeps_codes(candidates):
    script = RoleScript(default_responses(Patient=review(accept=("428.0",), contest=("401.9",))))
    c = cfg(candidates, agent_set={"Coder", "Reviewer", "Patient"})
    res = run_mac1(NOTE, c, scripted_gateway(script))
    assert res.codes == {"401.9", "428.0"}
    assert [(o.role, o.code) for o in res.objections] == [(R.PATIENT, "401.9")]
    assert not res.adjuster_invoked


def test_mac1_failure_after_retries(candidates):
    script = RoleScript(default_responses(Reviewer="cannot comply"))
    res = run_mac1(NOTE, cfg(candidates), scripted_gateway(script))
    assert res.status == "failed" and "Reviewer" in res.failure_reason
    assert res.roles_invoked == [R.CODER, R.REVIEWER, R.REVIEWER, R.REVIEWER]
    assert res.final_codes == ()


def test_mac1_gateway_error_fails_note(candidates):
    def boom(req):
        raise GatewayTimeout("slow")

    res = run_mac1(NOTE, cfg(candidates), scripted_gateway(RoleScript(default_responses(Coder=boom))))
    assert res.status == "failed" and "slow" in res.failure_reason


def test_mac2_uses_supplied_soap(candidates):
    script = RoleScript(default_responses())
    soap = SoapNote("n1", "s", "o", "a", "p")
    c = cfg(candidates, mode="MAC2")
    res = run_mac2(NOTE, c, scripted_gateway(script), soap)
    assert res.complete
    assert res.roles_invoked[:2] == [R.PHYSICIAN_V2, R.PHYSICIAN_V3]


def test_mac2_degenerate_soap_fails(candidates):
    script = RoleScript(default_responses(SoapFormatter='{"Assessment": "a", "Plan": "p"}'))
    res = run_mac2(NOTE, cfg(candidates, mode="MAC2"), scripted_gateway(script))
    assert res.status == "failed" and "degenerate" in res.failure_reason
    assert script.roles() == ["SoapFormatter"]


def test_mac2_without_soap_or_formatter(candidates):
    c = cfg(candidates, mode="MAC2", agent_set={"PhysicianV2", "PhysicianV3"})
    res = run_mac2(NOTE, c, scripted_gateway(RoleScript({})))
    assert res.status == "failed" and "SoapFormatter" in res.failure_reason


def test_run_note_dispatch_and_mode_guard(candidates):
    with pytest.raises(ConfigError):
        run_mac2(NOTE, cfg(candidates), scripted_gateway(RoleScript({})))
    res = run_note(NOTE, cfg(candidates), scripted_gateway(RoleScript(default_responses())))
    assert res.roles_invoked[0] is R.CODER


def notes(n):
    return [NoteRecord(f"n{i}", f"Note {i} text.", frozenset({"401.9"}), "test") for i in range(n)]


def test_batch_isolates_failures_and_keeps_order(candidates):
    def coder(req):
        if req.tags["note_id"] == "n3":
            raise RuntimeError("provider exploded")
        return code_list("401.9")

    script = RoleScript(default_responses(Coder=coder))
    seen = []
    batch = run_batch(notes(6), cfg(candidates, parallelism=3), scripted_gateway(script), on_result=seen.append)
    assert [r.note_id for r in batch.results] == [f"n{i}" for i in range(6)]
    assert [r.note_id for r in batch.failed] == ["n3"]
    assert "RuntimeError" in batch.failed[0].failure_reason
    assert len(seen) == 6
    m = batch.manifest
    assert m["counts"]["failed"] == 1 and m["counts"]["complete"] == 5
    assert m["approximate_token_counter"] is True
    assert m["gateway_calls"] == len(script.calls)


def test_parallel_batch_equals_serial(candidates):
    runs = []
    for p in (1, 4):
        script = RoleScript(default_responses(Patient=review(contest=("401.9",), accept=("428.0",))))
        batch = run_batch(notes(8), cfg(candidates, parallelism=p), scripted_gateway(script))
        runs.append([r.to_json() for r in batch.results])
    assert runs[0] == runs[1]


def test_empty_batch_rejected(candidates):
    with pytest.raises(ConfigError):
        run_batch([], cfg(candidates), scripted_gateway(RoleScript({})))


def test_with_overrides(candidates):
    base = cfg(candidates)
    v = with_overrides(base, agent_set=["Coder"], confrontation=False)
    assert v.agent_set == {R.CODER} and not v.confrontation
    assert base.confrontation
    with pytest.raises(ConfigError):
        with_overrides(base, mode=Mode.MAC2)
