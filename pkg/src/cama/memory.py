"""Procedural, semantic, episodic and working memory for the monitoring agent."""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path
from string import Template
from typing import Any, Mapping, Sequence

from .model import Model
from .tabular import Dataset, SchemaError, monitoring_sample, summarize, to_csv_text
from .tools import AttributionReport, DriftReport, drift_report, permutation_importance

TEMPLATE_KEYS = (
    "feature_system",
    "feature_user",
    "feature_raw_user",
    "focus_drifted",
    "focus_stable",
    "focus_unknown",
    "global_analysis",
    "overview",
    "compile",
    "standard",
    "cot",
    "reflection_draft",
    "reflection_critique",
    "reflection_revise",
    "react_system",
    "react_user",
    "self_discover_select",
    "self_discover_adapt",
    "self_discover_solve",
    "plan",
    "plan_step",
    "plan_synthesis",
    "ground_truth",
    "question_gen",
    "question_regen",
    "judge",
)


class MemoryStoreError(RuntimeError):
    pass


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ------------------------------------------------------------------ procedural


@dataclass(frozen=True)
class AgentConfig:
    parallelism: int = 4
    refactor: bool = True
    breakdown: bool = True
    compile: bool = True
    backend: str = "scripted"
    model: str = "default"
    temperature: float = 0.0
    max_tokens: int | None = None
    k_recent: int = 3

    def __post_init__(self) -> None:
        if self.parallelism < 1:
            raise ValueError("parallelism must be >= 1")
        if self.k_recent < 0:
            raise ValueError("k_recent must be >= 0")

    @property
    def ablation(self) -> dict[str, bool]:
        return {"refactor": self.refactor, "breakdown": self.breakdown, "compile": self.compile}

    def to_dict(self) -> dict[str, Any]:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _default_templates() -> dict[str, str]:
    root = resources.files("cama") / "prompts"
    return {key: (root / f"{key}.txt").read_text(encoding="utf-8") for key in TEMPLATE_KEYS}


@dataclass(frozen=True)
class ProceduralMemory:
    templates: Mapping[str, str]
    config: AgentConfig = AgentConfig()

    def __post_init__(self) -> None:
        missing = [k for k in TEMPLATE_KEYS if k not in self.templates]
        if missing:
            raise MemoryStoreError(f"procedural memory lacks templates: {missing}")

    @classmethod
    def load(cls, template_dir: str | Path | None = None, config: AgentConfig | None = None) -> "ProceduralMemory":
        """Built-in templates, overridden by any ``<key>.txt`` found in ``template_dir``."""
        templates = _default_templates()
        if template_dir is not None:
            for path in sorted(Path(template_dir).glob("*.txt")):
                if path.stem in templates:
                    templates[path.stem] = path.read_text(encoding="utf-8")
        return cls(templates, config or AgentConfig())

    def with_config(self, **changes: Any) -> "ProceduralMemory":
        return ProceduralMemory(self.templates, replace(self.config, **changes))

    def render(self, key: str, **values: Any) -> str:
        return Template(self.templates[key]).substitute({k: str(v) for k, v in values.items()})


# -------------------------------------------------------------------- semantic


@dataclass(frozen=True)
class ToolConfig:
    alpha: float = 0.05
    n_repeats: int = 5
    sample_size: int = 100
    seed: int = 0

    def to_dict(self) -> dict[str, Any]:
        return {"alpha": self.alpha, "n_repeats": self.n_repeats, "sample_size": self.sample_size,
                "seed": self.seed}


@dataclass(frozen=True)
class SemanticMemory:
    train: Dataset
    model: Model
    tools: ToolConfig = ToolConfig()
    descriptions: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.model.schema != self.train.schema:
            raise SchemaError("model schema does not match training data schema")
        desc = dict(self.descriptions) or {f.name: f.description for f in self.train.schema}
        missing = [n for n in self.train.schema.names if n not in desc]
        if missing:
            raise SchemaError(f"dataset description misses features: {missing}")
        object.__setattr__(self, "descriptions", desc)

    @property
    def schema(self):
        return self.train.schema


# -------------------------------------------------------------------- episodic


@dataclass(frozen=True)
class EpisodicEntry:
    run_id: str
    timestamp: str
    sample_digest: str
    n_rows: int
    summary: str
    drifted: Mapping[str, bool]
    report: Mapping[str, Any]

    def to_json(self) -> str:
        return canonical_json({
            "run_id": self.run_id, "timestamp": self.timestamp, "sample_digest": self.sample_digest,
            "n_rows": self.n_rows, "summary": self.summary, "drifted": dict(self.drifted),
            "report": self.report,
        })

    @classmethod
    def from_json(cls, line: str) -> "EpisodicEntry":
        d = json.loads(line)
        return cls(d["run_id"], d["timestamp"], d["sample_digest"], int(d["n_rows"]), d["summary"],
                   d["drifted"], d["report"])

    def headline(self) -> str:
        drifted = [k for k, v in self.drifted.items() if v]
        names = ", ".join(drifted) if drifted else "none"
        return f"{self.timestamp} run {self.run_id}: drifted features [{names}]; {self.summary}"


class EpisodicMemory:
    """Append-only log of past monitoring runs, persisted as JSON Lines.

    A line is written and flushed before the entry becomes visible in memory,
    so a failed write leaves both the file and the object unchanged.
    """

    def __init__(self, path: str | Path | None = None, entries: Sequence[EpisodicEntry] = ()):
        self.path = Path(path) if path is not None else None
        self._entries: list[EpisodicEntry] = list(entries)
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._entries)

    @property
    def entries(self) -> tuple[EpisodicEntry, ...]:
        return tuple(self._entries)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EpisodicMemory):
            return NotImplemented
        return self.entries == other.entries

    @classmethod
    def load(cls, path: str | Path) -> "EpisodicMemory":
        path = Path(path)
        entries = []
        if path.exists():
            # split on "\n" only: entries may contain other Unicode line separators
            for line in path.read_text(encoding="utf-8").split("\n"):
                if line.strip():
                    entries.append(EpisodicEntry.from_json(line))
        return cls(path, entries)

    def save(self, path: str | Path) -> None:
        text = "".join(e.to_json() + "\n" for e in self._entries)
        Path(path).write_text(text, encoding="utf-8")

    def append(self, entry: EpisodicEntry) -> "EpisodicMemory":
        with self._lock:
            if self.path is not None:
                try:
                    self.path.parent.mkdir(parents=True, exist_ok=True)
                    with open(self.path, "a", encoding="utf-8") as fh:
                        fh.write(entry.to_json() + "\n")
                        fh.flush()
                        os.fsync(fh.fileno())
                except OSError as exc:
                    raise MemoryStoreError(f"could not persist episodic entry to {self.path}: {exc}") from exc
            self._entries.append(entry)
        return self

    def recent_entries(self, k: int) -> list[EpisodicEntry]:
        """The ``min(k, len)`` most recent entries, newest first."""
        if k < 0:
            raise ValueError("k must be >= 0")
        if k == 0:
            return []
        return list(reversed(self._entries[-k:]))

    def recent(self, k: int) -> list[str]:
        return [e.headline() for e in self.recent_entries(k)]


def episodic_append(memory: EpisodicMemory, entry: EpisodicEntry) -> EpisodicMemory:
    return memory.append(entry)


def episodic_recent(memory: EpisodicMemory, k: int) -> list[str]:
    return memory.recent(k)


def dataset_digest(dataset: Dataset) -> str:
    return hashlib.sha256(to_csv_text(dataset).encode("utf-8")).hexdigest()


# --------------------------------------------------------------------- working


def _domain(feat) -> str:
    if feat.is_numerical:
        return f"range [{feat.range[0]:g}, {feat.range[1]:g}]"
    return "categories {" + ", ".join(feat.categories) + "}"


def _fmt_stats(stats) -> str:
    if stats.kind == "numerical":
        return (f"mean={stats.mean:.4g} std={stats.std:.4g} min={stats.min:.4g} q1={stats.q1:.4g} "
                f"median={stats.q2:.4g} q3={stats.q3:.4g} max={stats.max:.4g}")
    return " ".join(f"{k}={v:.3f}" for k, v in stats.frequencies.items())


@dataclass
class WorkingMemory:
    """Per-run context. Built fresh for every run and never shared between runs."""

    semantic: SemanticMemory
    history: list[str]
    test_sample: Dataset
    reference_sample: Dataset
    recent_drift: list[Mapping[str, bool]] = field(default_factory=list)
    drift: DriftReport | None = None
    attribution: AttributionReport | None = None
    transcript: list[dict[str, Any]] = field(default_factory=list)

    @property
    def schema(self):
        return self.semantic.schema

    def ensure_tools(self) -> "WorkingMemory":
        tc = self.semantic.tools
        if self.drift is None:
            self.drift = drift_report(self.reference_sample, self.test_sample, tc.alpha)
        if self.attribution is None:
            target = self.test_sample if self.test_sample.labels is not None else self.reference_sample
            self.attribution = permutation_importance(self.semantic.model, target, tc.n_repeats, tc.seed)
        return self

    def log(self, phase: str, content: str, **extra: Any) -> None:
        self.transcript.append({"phase": phase, "content": content, **extra})

    def train_stats(self, name: str):
        return summarize(self.semantic.train, name)

    def test_stats(self, name: str):
        return summarize(self.test_sample, name)

    def snapshot(self) -> dict[str, Any]:
        schema = self.schema
        feats = []
        for f in schema:
            feats.append({
                "name": f.name,
                "kind": f.kind,
                "domain": _domain(f),
                "description": self.semantic.descriptions[f.name],
                "train_stats": self.train_stats(f.name).to_dict(),
            })
        meta = self.semantic.model.metadata
        return {
            "dataset": schema.name,
            "features": feats,
            "model": {"family": "logistic_regression",
                      **{k: meta[k] for k in sorted(meta) if k in ("epochs", "learning_rate", "final_train_log_loss", "n_train")}},
            "tool_config": self.semantic.tools.to_dict(),
            "history": list(self.history),
            "test_sample": {"rows": len(self.test_sample), "digest": dataset_digest(self.test_sample)},
            "reference_sample": {"rows": len(self.reference_sample), "digest": dataset_digest(self.reference_sample)},
            "tools": None if self.drift is None else {
                "drift": self.drift.to_dict(),
                "attribution": None if self.attribution is None else self.attribution.to_dict(),
            },
        }

    def serialize(self) -> str:
        return json.dumps(self.snapshot(), indent=2, ensure_ascii=False) + "\n"

    def context_text(self) -> str:
        """The whole-dataset context handed to single-prompt strategies."""
        self.ensure_tools()
        schema = self.schema
        lines = [
            f"Dataset: {schema.name} ({len(schema)} features; reference sample {len(self.reference_sample)} rows "
            f"from {len(self.semantic.train)} training rows; test sample {len(self.test_sample)} rows)",
            f"Model: logistic regression, train log-loss {self.semantic.model.metadata.get('final_train_log_loss', float('nan')):.4f}",
            f"Drift significance level: {self.drift.alpha}",
            "",
        ]
        for f in schema:
            lines += [
                f"## {f.name} ({f.kind}, {_domain(f)})",
                f"description: {self.semantic.descriptions[f.name]}",
                f"train: {_fmt_stats(self.train_stats(f.name))}",
                f"test: {_fmt_stats(self.test_stats(f.name))}",
                self.drift.get(f.name).line(),
                self.attribution.get(f.name).line(),
                "",
            ]
        lines.append("Recent monitoring history:")
        lines += [f"- {h}" for h in self.history] or ["- none"]
        return "\n".join(lines) + "\n"


def working_assemble(semantic: SemanticMemory, episodic: EpisodicMemory, test_sample: Dataset,
                     k_recent: int = 3) -> WorkingMemory:
    """Assemble per-run context; no LLM calls and no tool computation happen here."""
    if test_sample.schema != semantic.schema:
        raise SchemaError(f"test sample schema {test_sample.schema.name!r} does not match "
                          f"semantic memory schema {semantic.schema.name!r}")
    tc = semantic.tools
    m = min(tc.sample_size, len(semantic.train))
    reference = monitoring_sample(semantic.train, m, tc.seed)
    recent = episodic.recent_entries(k_recent)
    return WorkingMemory(semantic, [e.headline() for e in recent], test_sample, reference,
                         recent_drift=[dict(e.drifted) for e in recent])
