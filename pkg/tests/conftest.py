import json

import pytest

from toolrefusal.adapter import TinyAdapter
from toolrefusal.harness.generation import StubBackend
from toolrefusal.toolset import build_corpus, bundled_templates

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny():
    return TinyAdapter()


@pytest.fixture(scope="session")
def templates():
    return bundled_templates()


@pytest.fixture(scope="session")
def small_templates(templates):
    return templates[:6]


@pytest.fixture(scope="session")
def small_corpus(small_templates):
    return build_corpus(small_templates, StubBackend(), seed=0)


@pytest.fixture(scope="session")
def d0(templates):
    return build_corpus(templates, StubBackend(), seed=0)


@pytest.fixture()
def templates_file(tmp_path, small_templates):
    path = tmp_path / "templates.json"
    path.write_text(json.dumps([t.to_json() for t in small_templates]))
    return path
