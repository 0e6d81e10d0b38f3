"""Cognitive-architecture monitoring agent for tabular ML models."""

from .agent import MonitoringReport, run
from .baselines import run_baseline
from .memory import AgentConfig, EpisodicMemory, ProceduralMemory, SemanticMemory, ToolConfig, working_assemble
from .tabular import builtin_schema, default_drift, generate, monitoring_sample

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "EpisodicMemory",
    "MonitoringReport",
    "ProceduralMemory",
    "SemanticMemory",
    "ToolConfig",
    "builtin_schema",
    "default_drift",
    "generate",
    "monitoring_sample",
    "run",
    "run_baseline",
    "working_assemble",
]
