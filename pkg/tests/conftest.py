from __future__ import annotations

from pathlib import Path

import pytest

from vmmr_rag.domain import load_queries, reference_label_set
from vmmr_rag.embed import EmbeddingBackendConfig
from vmmr_rag.fixtures import SUITE_DIM, build_suite_kb, write_suite
from vmmr_rag.kb import kb_build_index
from vmmr_rag.modelclients import ChatBackendConfig
from vmmr_rag.pipeline import PipelineConfig


@pytest.fixture(scope="session")
def suite_dir(tmp_path_factory) -> Path:
    root = tmp_path_factory.mktemp("suite")
    write_suite(root)
    return root


@pytest.fixture(scope="session")
def suite_queries(suite_dir):
    return load_queries(suite_dir / "queries.jsonl")


@pytest.fixture(scope="session")
def suite_truths(suite_queries):
    return {q.id: q.true_label for q in suite_queries}


@pytest.fixture
def suite_kb(suite_dir):
    return build_suite_kb(suite_dir, reference_label_set())


@pytest.fixture
def mock_embed() -> EmbeddingBackendConfig:
    return EmbeddingBackendConfig(kind="mock", dim=SUITE_DIM)


@pytest.fixture
def suite_index(suite_kb, mock_embed):
    return kb_build_index(suite_kb, mock_embed)


@pytest.fixture
def suite_config(suite_dir, mock_embed) -> PipelineConfig:
    chat = ChatBackendConfig(kind="fixture", fixture_dir=str(suite_dir / "fixtures"))
    return PipelineConfig(describer=chat, reasoner=chat, embed_backend=mock_embed, determinism_mode=True)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
