
import pytest

from vmmr_rag.domain import Description, QueryInput, canonicalize_label
from vmmr_rag.errors import BatchEmpty, ConfigError, DimensionMismatch, MissingFixture
from vmmr_rag.evaluation import sweep_k
from vmmr_rag.fixtures import RecordingReasoner
from vmmr_rag.index import VectorIndex
from vmmr_rag.kb import KnowledgeBase
from vmmr_rag.modelclients import ChatBackendConfig, build_prompt, prompt_hash
from vmmr_rag.pipeline import (
    PipelineConfig,
    QueryFailure,
    Recognizer,
    dumps_run_log,
    read_run_log,
    recognize,
    write_run_log,
)


class PickFirst:
    """Reasoner that always names candidate [1]; records what it answered."""

    def __init__(self, kb, responses_dir=None):
        self.kb = kb
        self.responses_dir = responses_dir
        self.reason_calls = 0

    def complete(self, prompt):
        self.reason_calls += 1
        line = next(ln for ln in prompt.splitlines() if ln.startswith("[1] "))
        answer = "ANSWER: " + line[4:].split(":", 1)[0]
        if self.responses_dir is not None:
            self.responses_dir.mkdir(parents=True, exist_ok=True)
            (self.responses_dir / f"{prompt_hash(prompt)}.txt").write_text(answer)
        return answer


def test_self_retrieval_query(suite_config, suite_kb, suite_index):
    rec = suite_kb.records[3]
    query = QueryInput("self", description=Description(rec.description.text, "fixture"))
    r = Recognizer(suite_config, suite_kb, suite_index, reasoner=PickFirst(suite_kb))
    p = r.recognize(query)
    assert p.hits[0].record_id == rec.record_id
    assert p.hits[0].score == pytest.approx(1.0, abs=1e-6)
    assert p.label == rec.label and p.match_rule == "canonical"
    assert len(p.hits) == 5 and p.k == 5


def test_empty_index_degrades(suite_config, tmp_path):
    kb = KnowledgeBase()
    index = VectorIndex(suite_config.embed_backend.dim)
    prompts = []

    class Echo:
        def complete(self, prompt):
            prompts.append(prompt)
            return "no idea"

    p = Recognizer(suite_config, kb, index, reasoner=Echo()).recognize(
        QueryInput("q", description=Description("round lamps"))
    )
    assert "No reference entries available." in prompts[0]
    assert p.hits == () and p.match_rule == "abstain"


def test_determinism_same_serialization(suite_config, suite_kb, suite_index, suite_queries):
    a = recognize(suite_config, suite_kb, suite_index, suite_queries[0])
    b = recognize(suite_config, suite_kb, suite_index, suite_queries[0])
    assert dumps_run_log([a], include_timings=False) == dumps_run_log([b], include_timings=False)


def test_batch_order_and_partial_failure(suite_config, suite_kb, suite_index, suite_queries):
    queries = [suite_queries[5], QueryInput("ghost", image="ghost.jpg"), suite_queries[2]]
    results = Recognizer(suite_config, suite_kb, suite_index).recognize_batch(queries)
    assert [r.query_id for r in results] == [suite_queries[5].id, "ghost", suite_queries[2].id]
    failure = results[1]
    assert isinstance(failure, QueryFailure)
    assert (failure.stage, failure.error_type) == ("describe", "MissingFixture")


def test_batch_empty(suite_config, suite_kb, suite_index):
    with pytest.raises(BatchEmpty):
        Recognizer(suite_config, suite_kb, suite_index).recognize_batch([])


def test_single_query_errors_are_stage_tagged(suite_config, suite_kb, suite_index):
    from vmmr_rag.errors import StageError

    with pytest.raises(StageError) as info:
        recognize(suite_config, suite_kb, suite_index, QueryInput("ghost", image="x"))
    assert info.value.stage == "describe" and isinstance(info.value.cause, MissingFixture)
    with pytest.raises(StageError) as info:
        recognize(suite_config, suite_kb, suite_index, QueryInput("q", description=Description("unseen words")))
    assert info.value.stage == "reason"


def test_index_dim_must_match(suite_config, suite_kb):
    with pytest.raises(DimensionMismatch):
        Recognizer(suite_config, suite_kb, VectorIndex(8))


def test_determinism_mode_requires_zero_temperature(suite_dir):
    chat = ChatBackendConfig(kind="fixture", fixture_dir=str(suite_dir), temperature=0.7)
    with pytest.raises(ConfigError):
        PipelineConfig(describer=chat, reasoner=chat, determinism_mode=True)


def test_description_payload_skips_describer(suite_config, suite_kb, suite_index, suite_queries, suite_dir):
    q = suite_queries[7]
    text = (suite_dir / "fixtures" / "descriptions" / f"{q.id}.txt").read_text()
    r = Recognizer(suite_config, suite_kb, suite_index)
    from_image = r.recognize(q)
    from_text = r.recognize(QueryInput(q.id, description=Description(text, "fixture")))
    assert from_image.to_dict() == from_text.to_dict()
    assert r.describer.describe_calls == 1


def test_replay_reproduces_prompt_hash(suite_config, suite_kb, suite_index, suite_queries):
    r = Recognizer(suite_config, suite_kb, suite_index)
    for p in r.recognize_batch(suite_queries[:10]):
        prompt = build_prompt(p.description_used, p.hits, suite_kb, suite_config.reasoner_template)
        assert prompt_hash(prompt) == p.prompt_hash


def test_k_prefix_property(suite_config, suite_kb, suite_index, suite_queries):
    r = Recognizer(suite_config, suite_kb, suite_index)
    prepared = r.prepare(suite_queries[11])
    for k in (1, 3, 5):
        small = [h.record_id for h in r.finish(prepared, k).hits]
        big = [h.record_id for h in r.finish(prepared, {1: 3, 3: 5, 5: 7}[k]).hits]
        assert big[: len(small)] == small


def test_run_log_round_trip(tmp_path, suite_config, suite_kb, suite_index, suite_queries, suite_truths):
    queries = suite_queries[:4] + [QueryInput("ghost", image="x", true_label=canonicalize_label("Kia", "EV9"))]
    results = Recognizer(suite_config, suite_kb, suite_index).recognize_batch(queries)
    truths = {**suite_truths, "ghost": canonicalize_label("Kia", "EV9")}
    path = tmp_path / "run.jsonl"
    write_run_log(path, results, truths)
    loaded, logged_truths = read_run_log(path)
    assert [r.to_dict() for r in loaded] == [r.to_dict() for r in results]
    assert logged_truths == {q.id: truths[q.id] for q in queries}
    lines = path.read_text().splitlines()
    assert "latency_ms" in lines[0] and "error" in lines[-1]


def _exact_suite(tmp_path, suite_kb, suite_config):
    """Queries identical to kb texts, responses recorded from a pick-first reasoner."""
    fixtures = tmp_path / "fixtures"
    queries, truths = [], {}
    for i, rec in enumerate(suite_kb.records):
        for j in range(3):
            qid = f"x{i}-{j}"
            (fixtures / "descriptions").mkdir(parents=True, exist_ok=True)
            (fixtures / "descriptions" / f"{qid}.txt").write_text(rec.description.text)
            queries.append(QueryInput(qid, image=f"{qid}.jpg"))
            truths[qid] = rec.label
    chat = ChatBackendConfig(kind="fixture", fixture_dir=str(fixtures))
    config = PipelineConfig(describer=chat, reasoner=chat, embed_backend=suite_config.embed_backend,
                            determinism_mode=True)
    return config, queries, truths, fixtures


def test_sweep_all_rank_one_gives_perfect_accuracy(tmp_path, suite_kb, suite_index, suite_config):
    config, queries, truths, fixtures = _exact_suite(tmp_path, suite_kb, suite_config)
    recorder = Recognizer(config, suite_kb, suite_index,
                          reasoner=PickFirst(suite_kb, fixtures / "responses"))
    for k in (1, 3, 5, 7):
        recorder.recognize_batch(queries, k)
    rows = sweep_k(Recognizer(config, suite_kb, suite_index), queries, truths, [7, 1, 5, 3])
    assert [row.k for row in rows] == [1, 3, 5, 7]
    assert all(row.report.accuracy == 1.0 for row in rows)
    assert all(row.report.rank_distribution[1] == len(queries) for row in rows)


def test_sweep_saturated_k_gives_identical_reports(tmp_path, suite_kb, suite_index, suite_config):
    config, queries, truths, fixtures = _exact_suite(tmp_path, suite_kb, suite_config)
    # A reasoner that sometimes picks the wrong candidate, so reports are not trivially perfect.
    fixtures.joinpath("responses").mkdir(parents=True, exist_ok=True)
    rec = Recognizer(config, suite_kb, suite_index, reasoner=RecordingReasoner(fixtures / "responses"))
    rec.recognize_batch(queries, 10)
    rows = sweep_k(Recognizer(config, suite_kb, suite_index), queries, truths, [10, 12, 40])
    first = rows[0].report
    for row in rows[1:]:
        assert [[h.record_id for h in p.hits] for p in row.results] == \
            [[h.record_id for h in p.hits] for p in rows[0].results]
        assert row.report.overall_row() == first.overall_row()
        assert row.report.confusion.counts.tolist() == first.confusion.counts.tolist()


def test_batch_parallelism_keeps_order(suite_config, suite_kb, suite_index, suite_queries):
    from dataclasses import replace

    serial = Recognizer(replace(suite_config, max_parallel_queries=1), suite_kb, suite_index)
    parallel = Recognizer(replace(suite_config, max_parallel_queries=8), suite_kb, suite_index)
    a = serial.recognize_batch(suite_queries)
    b = parallel.recognize_batch(suite_queries)
    assert dumps_run_log(a, include_timings=False) == dumps_run_log(b, include_timings=False)
