"""The pinned default scenario per built-in dataset: training data, drifted test data and a trained model."""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from .memory import SemanticMemory, ToolConfig
from .model import Model, train
from .tabular import Dataset, DriftSpec, Schema, builtin_schema, default_drift, generate

N_ROWS = 1000
TRAIN_SEED = 7
TEST_SEED = 8


@dataclass(frozen=True)
class Scenario:
    schema: Schema
    train: Dataset
    test: Dataset
    model: Model
    drift: DriftSpec

    def semantic(self, tools: ToolConfig = ToolConfig()) -> SemanticMemory:
        return SemanticMemory(self.train, self.model, tools)


@lru_cache(maxsize=None)
def default_scenario(dataset_id: str, n: int = N_ROWS, train_seed: int = TRAIN_SEED,
                     test_seed: int = TEST_SEED) -> Scenario:
    """Same data as ``cama generate --dataset <id>`` followed by ``cama train`` with default flags."""
    schema = builtin_schema(dataset_id)
    drift = default_drift(dataset_id)
    train_set = generate(schema, n, train_seed)
    test_set = generate(schema, n, test_seed, drift)
    return Scenario(schema, train_set, test_set, train(train_set), drift)
