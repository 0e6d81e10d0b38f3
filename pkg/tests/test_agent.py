import json
from pathlib import Path

import pytest

from cama.agent import (
    AgentError,
    MonitoringReport,
    break_down,
    fallback_action,
    FeatureInsight,
    parse_compiled,
    parse_feature_response,
    prepare,
    refactor,
    run,
)
from cama.llm import RecordingLLM, ScriptedBackend, ScriptRule
from cama.memory import EpisodicMemory
from cama.scenario import default_scenario

GOLDEN = Path(__file__).parent / "golden" / "loan_default_report.json"
FIXED_CLOCK = lambda: "2026-01-01T00:00:00+00:00"  # noqa: E731


def run_offline(scenario, procedural, backend, episodic=None, **config):
    pm = procedural.with_config(**config) if config else procedural
    return run(scenario.semantic(), episodic if episodic is not None else EpisodicMemory(), scenario.test, pm,
               backend, clock=FIXED_CLOCK)


def test_refactor_builds_ordered_contexts_without_llm(loan, procedural, offline_backend):
    be = offline_backend()
    wm = prepare(loan.semantic(), EpisodicMemory(), loan.test, procedural)
    before = be.call_count
    contexts = refactor(wm)
    assert be.call_count == before == 0
    assert [c.name for c in contexts] == loan.schema.names
    income = contexts[loan.schema.index("Income")]
    assert income.drifted is True
    assert "drift[Income]: test=ks statistic=0.7400" in income.render()
    assert "drifted=yes" in income.render()


@pytest.mark.parametrize("parallelism", [1, 4])
def test_full_run_call_count_and_order(loan, procedural, offline_backend, parallelism):
    be = offline_backend()
    episodic = EpisodicMemory()
    report = run_offline(loan, procedural, be, episodic, parallelism=parallelism)
    assert be.call_count == 12
    assert len(episodic) == 1
    assert [i.feature for i in report.insights] == loan.schema.names
    assert report.metrics["calls"] == 12
    assert report.executive_summary.startswith("The monitoring run compared")
    assert report.action == "retrain"


def test_verdicts_follow_drift_flags(loan, procedural, offline_backend):
    report = run_offline(loan, procedural, offline_backend())
    drifted = {i.feature for i in report.insights if i.verdict == "drifted"}
    assert drifted == {"Income", "Home Ownership", "Employment Status"}


def test_parallelism_does_not_change_report(loan, procedural, offline_backend):
    a = run_offline(loan, procedural, offline_backend(), parallelism=1)
    b = run_offline(loan, procedural, offline_backend(), parallelism=4)
    assert a.insights == b.insights
    assert a.to_dict()["insights"] == b.to_dict()["insights"]


def test_golden_report(loan, procedural, offline_backend):
    first = run_offline(loan, procedural, offline_backend()).to_json()
    second = run_offline(loan, procedural, offline_backend()).to_json()
    assert first == second
    assert first == GOLDEN.read_text(encoding="utf-8")


def test_report_round_trip(loan, procedural, offline_backend, tmp_path):
    report = run_offline(loan, procedural, offline_backend())
    report.save(tmp_path / "r.json")
    assert MonitoringReport.load(tmp_path / "r.json") == report
    text = report.render()
    positions = [text.index(f"### {name} (") for name in loan.schema.names]
    assert positions == sorted(positions)


def test_without_compile_concatenates(loan, procedural, offline_backend):
    be = offline_backend()
    report = run_offline(loan, procedural, be, compile=False)
    assert be.call_count == 10
    assert not any("TASK: report-" in req.text for req, _ in be.calls)
    assert report.executive_summary.startswith("Findings for 10 features are listed without synthesis")
    assert report.key_points == [f"{i.feature}: {i.verdict}" for i in report.insights]


def test_without_refactor_sends_raw_rows(loan, procedural, offline_backend):
    be = offline_backend()
    report = run_offline(loan, procedural, be, refactor=False)
    assert be.call_count == 12
    feature_calls = [req.text for req, _ in be.calls if "TASK: feature-analysis" in req.text]
    assert len(feature_calls) == 10
    header = ",".join(loan.schema.names)
    for text in feature_calls:
        assert header in text and "drift[" not in text and "FEATURE CONTEXT" not in text
    assert all(i.verdict == "watch" for i in report.insights)


def test_without_breakdown_single_global_call(loan, procedural, offline_backend):
    be = offline_backend()
    report = run_offline(loan, procedural, be, breakdown=False)
    assert be.call_count == 3
    assert [t for t in ("global-analysis", "report-overview", "report-assembly")
            if any(f"TASK: {t}" in req.text for req, _ in be.calls)] == ["global-analysis", "report-overview",
                                                                        "report-assembly"]
    assert report.insights == [] and report.body


def _with_failure(rules_path, pattern):
    spec = json.loads(Path(rules_path).read_text())
    spec["rules"].insert(0, {"match": pattern, "error": "unavailable"})
    spec["strict"] = False
    return ScriptedBackend.from_dict(spec)


def test_single_feature_failure_degrades_one_insight(loan, procedural):
    from cama.cli import default_script_path

    be = _with_failure(default_script_path(), r"feature: Credit Score \(")
    report = run_offline(loan, procedural, be)
    degraded = [i.feature for i in report.insights if i.degraded]
    assert degraded == ["Credit Score"]
    assert all(not i.degraded for i in report.insights if i.feature != "Credit Score")


def test_backend_down_leaves_episodic_unchanged(loan, procedural, tmp_path):
    path = tmp_path / "ep.jsonl"
    episodic = EpisodicMemory(path)
    be = ScriptedBackend([ScriptRule(".", error="unavailable")])
    with pytest.raises(AgentError):
        run_offline(loan, procedural, be, episodic)
    assert len(episodic) == 0 and not path.exists()


def test_compile_failure_leaves_episodic_unchanged(loan, procedural):
    from cama.cli import default_script_path

    episodic = EpisodicMemory()
    with pytest.raises(AgentError) as err:
        run_offline(loan, procedural, _with_failure(default_script_path(), "TASK: report-assembly"), episodic)
    assert err.value.stage == "compile" and len(err.value.insights) == 10
    assert len(episodic) == 0


def test_second_run_sees_history(loan, procedural, offline_backend):
    episodic = EpisodicMemory()
    first = run_offline(loan, procedural, offline_backend(), episodic)
    be = offline_backend()
    second = run_offline(loan, procedural, be, episodic)
    assert len(episodic) == 2 and first.run_id != second.run_id
    income = [req.text for req, _ in be.calls if "feature: Income (" in req.text]
    assert len(income) == 1 and "flagged drifted in 1 of the last 1 runs" in income[0]


@pytest.mark.parametrize("dataset_id", ["eligibility", "chronic"])
def test_call_count_law_other_datasets(dataset_id, procedural, offline_backend):
    sc = default_scenario(dataset_id)
    be = offline_backend()
    run_offline(sc, procedural, be)
    assert be.call_count == len(sc.schema) + 2


def test_parse_feature_response_fallbacks():
    assert parse_feature_response("VERDICT: drifted\nANALYSIS: a\nb\nRECOMMENDATION: r", None) == \
        ("drifted", "a b", "r")
    assert parse_feature_response("no structure", True)[0] == "drifted"
    assert parse_feature_response("no structure", None)[0] == "watch"


def test_parse_compiled_sections():
    text = "EXECUTIVE SUMMARY: s\nKEY POINTS:\n- p1\n- p2\nRECOMMENDATION: no action\nRATIONALE: fine"
    out = parse_compiled(text)
    assert out == {"executive_summary": "s", "key_points": ["p1", "p2"], "action": "no action", "rationale": "fine"}


def test_fallback_action():
    def ins(v):
        return FeatureInsight("f", v, "", "")

    assert fallback_action([ins("stable"), ins("drifted")])[0] == "retrain"
    assert fallback_action([ins("stable"), ins("watch")])[0] == "relabel"
    assert fallback_action([ins("stable")])[0] == "no action"


def test_break_down_all_failures_abort(loan, procedural):
    wm = prepare(loan.semantic(), EpisodicMemory(), loan.test, procedural)
    llm = RecordingLLM(ScriptedBackend([ScriptRule(".", error="timeout")]))
    with pytest.raises(AgentError) as err:
        break_down(refactor(wm), llm, procedural, parallelism=4)
    assert err.value.stage == "break_down" and len(err.value.insights) == 10
