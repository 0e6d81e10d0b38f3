import pytest

from cama.cli import default_script_path
from cama.llm import ScriptedBackend
from cama.memory import EpisodicMemory, ProceduralMemory
from cama.scenario import default_scenario

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def loan():
    return default_scenario("loan_default")


@pytest.fixture
def procedural():
    return ProceduralMemory.load()


@pytest.fixture
def offline_backend():
    """Fresh strict backend built from the shipped offline rules."""

    def make() -> ScriptedBackend:
        return ScriptedBackend.from_file(default_script_path())

    return make


@pytest.fixture
def episodic():
    return EpisodicMemory()
