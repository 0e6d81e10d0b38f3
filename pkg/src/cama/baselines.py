"""Prompting and agent baselines that turn the same working memory into a MonitoringReport."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Any, Mapping

from .agent import AgentError, MonitoringReport, make_run_id, parse_action, synopsis
from .llm import LLMError, Message, RecordingLLM
from .memory import ProceduralMemory, WorkingMemory, _fmt_stats, sha256_text

STRATEGIES = ("standard", "cot", "reflection", "react", "self_discover", "plan_execute")

REASONING_MODULES = (
    "Critical thinking: question assumptions and check the evidence behind each claim.",
    "Step decomposition: break the task into smaller sub-problems and solve them in order.",
    "Comparison: contrast the reference and test distributions feature by feature.",
    "Risk analysis: assess which findings threaten model performance the most.",
    "Quantitative check: verify claims against the reported statistics and p-values.",
    "Synthesis: combine the partial findings into one coherent conclusion.",
)

DEFAULT_PARAMS: dict[str, dict[str, Any]] = {
    "standard": {},
    "cot": {},
    "reflection": {"critique_rounds": 1},
    "react": {"max_steps": 8},
    "self_discover": {"modules": len(REASONING_MODULES)},
    "plan_execute": {"max_plan_steps": 6},
}


@dataclass(frozen=True)
class Strategy:
    id: str
    params: Mapping[str, Any] = field(default_factory=dict)

    def __post_init__(self) -> None:
        sid = self.id.replace("-", "_")
        if sid not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.id!r}; valid: {', '.join(STRATEGIES)}")
        object.__setattr__(self, "id", sid)
        object.__setattr__(self, "params", {**DEFAULT_PARAMS[sid], **dict(self.params)})


# ---------------------------------------------------------------------- react


_ACTION_LINE = re.compile(r"^\s*Action\s*:\s*([A-Za-z_]+)\s*\[(.*)$", re.MULTILINE)
REACT_TOOLS = ("get_drift", "get_attribution", "get_stats")


def parse_react_action(text: str) -> tuple[str, str] | None:
    """First ``Action: name[arg]`` in ``text``; ``finish`` may span lines up to the last ``]``."""
    m = _ACTION_LINE.search(text)
    if m is None:
        return None
    name = m.group(1)
    rest = text[m.start(2):]
    if name == "finish":
        end = rest.rfind("]")
    else:
        end = rest.find("]")
        if "\n" in rest[: end if end >= 0 else len(rest)]:
            end = -1
    if end < 0:
        return None
    return name, rest[:end].strip()


def react_observation(wm: WorkingMemory, name: str, arg: str) -> str:
    wm.ensure_tools()
    if name not in REACT_TOOLS:
        return f"invalid action: unknown tool {name!r}"
    feature = arg.strip().strip("\"'")
    if feature not in wm.schema.names:
        return f"invalid action: unknown feature {feature!r}"
    if name == "get_drift":
        return wm.drift.get(feature).line()
    if name == "get_attribution":
        return wm.attribution.get(feature).line()
    return (f"stats[{feature}]: train {_fmt_stats(wm.train_stats(feature))}; "
            f"test {_fmt_stats(wm.test_stats(feature))}")


def _react(wm: WorkingMemory, llm: RecordingLLM, pm: ProceduralMemory, params: Mapping[str, Any]):
    max_steps = int(params["max_steps"])
    system = pm.render("react_system", dataset=wm.schema.name, features=", ".join(wm.schema.names),
                       max_steps=max_steps)
    messages = [Message("system", system), Message("user", pm.render("react_user"))]
    trajectory = []
    for step in range(1, max_steps + 1):
        reply = llm.ask(messages).content
        messages.append(Message("assistant", reply))
        action = parse_react_action(reply)
        if action is not None and action[0] == "finish":
            trajectory.append({"step": step, "action": "finish"})
            return action[1], {"steps": step, "truncated": False, "trajectory": trajectory}
        if action is None:
            obs = "invalid action"
        else:
            obs = react_observation(wm, *action)
        trajectory.append({"step": step, "action": None if action is None else f"{action[0]}[{action[1]}]",
                           "observation": obs})
        messages.append(Message("user", f"Observation: {obs}"))
    observations = "\n".join(t["observation"] for t in trajectory if "observation" in t)
    return observations, {"steps": max_steps, "truncated": True, "trajectory": trajectory}


# ---------------------------------------------------------------- other flows


def _plan_steps(text: str) -> list[str]:
    numbered = re.findall(r"^\s*\d+[.)]\s+(.+?)\s*$", text, re.MULTILINE)
    if numbered:
        return numbered
    return [line.strip("-* \t") for line in text.splitlines() if line.strip("-* \t")]


def _plan_execute(wm, llm, pm, ctx, params):
    cap = int(params["max_plan_steps"])
    plan = llm.ask(pm.render("plan", context=ctx, max_steps=cap)).content
    steps = _plan_steps(plan)
    truncated = len(steps) > cap
    steps = steps[:cap]
    results: list[str] = []
    for i, step in enumerate(steps, 1):
        previous = "\n".join(results) or "(none)"
        out = llm.ask(pm.render("plan_step", index=i, step=step, context=ctx, previous=previous)).content
        results.append(f"Step {i} ({step}): {out.strip()}")
    final = llm.ask(pm.render("plan_synthesis", results="\n".join(results) or "(no steps)")).content
    return final, {"plan_steps": len(steps), "truncated": truncated}


def run_baseline(strategy: Strategy | str, wm: WorkingMemory, llm: RecordingLLM, procedural: ProceduralMemory,
                 config: Mapping[str, Any] | None = None, n_prior: int = 0) -> MonitoringReport:
    """Run one comparison strategy over an assembled working memory."""
    if isinstance(strategy, str):
        strategy = Strategy(strategy)
    pm = procedural
    ctx = wm.context_text()
    p = strategy.params
    extra: dict[str, Any] = {}
    try:
        if strategy.id == "standard":
            text = llm.ask(pm.render("standard", context=ctx)).content
        elif strategy.id == "cot":
            text = llm.ask(pm.render("cot", context=ctx)).content
        elif strategy.id == "reflection":
            draft = llm.ask(pm.render("reflection_draft", context=ctx)).content
            text = draft
            for _ in range(int(p["critique_rounds"])):
                critique = llm.ask(pm.render("reflection_critique", context=ctx, draft=text)).content
                text = llm.ask(pm.render("reflection_revise", context=ctx, draft=text, critique=critique)).content
        elif strategy.id == "react":
            text, extra = _react(wm, llm, pm, p)
        elif strategy.id == "self_discover":
            modules = "\n".join(f"- {m}" for m in REASONING_MODULES[: int(p["modules"])])
            selected = llm.ask(pm.render("self_discover_select", modules=modules, context=ctx)).content
            structure = llm.ask(pm.render("self_discover_adapt", selected=selected)).content
            text = llm.ask(pm.render("self_discover_solve", structure=structure, context=ctx)).content
        else:
            text, extra = _plan_execute(wm, llm, pm, ctx, p)
    except LLMError as exc:
        raise AgentError(strategy.id, str(exc)) from exc

    text = text.strip()
    wm.log(strategy.id, text)
    run_config = dict(config or {})
    first_para = text.split("\n\n", 1)[0].strip()
    return MonitoringReport(
        run_id=make_run_id(strategy.id, wm, {**run_config, **dict(p)}, n_prior),
        method=strategy.id,
        dataset=wm.schema.name,
        executive_summary=first_para,
        dataset_synopsis=synopsis(wm, with_tools=False),
        body=text,
        action=parse_action(text),
        metrics=llm.total().to_dict(),
        metadata={"context_digest": sha256_text(ctx), "strategy": {"id": strategy.id, **dict(p)},
                  "truncated": bool(extra.get("truncated", False)), "backend": llm.backend_id,
                  **{k: v for k, v in extra.items() if k != "truncated"}},
        config=run_config,
    )
