import threading
import time

import pytest

from adaptljp.gateway import (
    ChatRequest,
    ChatResponse,
    Decoding,
    EmbeddingDimensionError,
    LlmGateway,
    Message,
    RetriesExhaustedError,
    ScriptedBackendError,
    ScriptedChatBackend,
    ScriptedEmbeddingBackend,
    ScriptedRule,
    TransientBackendError,
    Usage,
)


def req(prompt="hello", greedy=True, model="gen"):
    decoding = Decoding(greedy=True) if greedy else Decoding(greedy=False, temperature=0.7)
    return ChatRequest.user(model, prompt, decoding)


class CountingBackend:
    """Echo backend with an in-flight counter for concurrency assertions."""

    def __init__(self, delay=0.0):
        self.delay = delay
        self.calls = 0
        self.in_flight = 0
        self.max_in_flight = 0
        self._lock = threading.Lock()

    def chat(self, request):
        with self._lock:
            self.calls += 1
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)
        if self.delay:
            time.sleep(self.delay)
        text = request.prompt_text()
        with self._lock:
            self.in_flight -= 1
        return ChatResponse(content=f"echo:{text}", finish_reason="stop")


class FlakyBackend:
    def __init__(self, failures, response="recovered"):
        self.failures = failures
        self.response = response
        self.calls = 0

    def chat(self, request):
        self.calls += 1
        if self.calls <= self.failures:
            raise TransientBackendError("boom")
        return ChatResponse(content=self.response, finish_reason="stop")


class TestTypes:
    def test_request_needs_messages(self):
        with pytest.raises(ValueError):
            ChatRequest(model_id="m", messages=())

    def test_greedy_excludes_sampling(self):
        with pytest.raises(ValueError):
            Decoding(greedy=True, temperature=0.5)
        Decoding(greedy=False, temperature=0.5)

    def test_bad_role_rejected(self):
        with pytest.raises(ValueError):
            Message("tool", "x")

    def test_content_iff_stop_or_length(self):
        ChatResponse(content="x", finish_reason="stop")
        ChatResponse(content=None, finish_reason="refusal")
        with pytest.raises(ValueError):
            ChatResponse(content=None, finish_reason="stop")
        with pytest.raises(ValueError):
            ChatResponse(content="x", finish_reason="refusal")


class TestScriptedBackend:
    def test_fixture_identity(self):
        backend = ScriptedChatBackend([ScriptedRule(response="OK", contains=("ping",))])
        gateway = LlmGateway(backend)
        response = gateway.complete(req("ping"))
        assert response.content == "OK"
        assert response.finish_reason == "stop"

    def test_unmatched_request_errors(self):
        backend = ScriptedChatBackend([ScriptedRule(response="OK", contains=("ping",))])
        with pytest.raises(ScriptedBackendError):
            LlmGateway(backend).complete(req("pong"))

    def test_rules_from_path(self, tmp_path):
        (tmp_path / "a.json").write_text(
            '{"rules": [{"contains": "alpha", "response": "A"}]}', encoding="utf-8"
        )
        (tmp_path / "b.json").write_text(
            '{"rules": [{"contains": ["beta"], "response": "B"}]}', encoding="utf-8"
        )
        backend = ScriptedChatBackend.from_path(tmp_path)
        gateway = LlmGateway(backend)
        assert gateway.complete(req("say alpha")).content == "A"
        assert gateway.complete(req("say beta")).content == "B"

    def test_scripted_refusal(self):
        backend = ScriptedChatBackend(
            [ScriptedRule(contains=("sentence",), finish_reason="refusal")]
        )
        gateway = LlmGateway(backend)
        response = gateway.complete(req("sentence him"))
        assert response.finish_reason == "refusal"
        assert response.content is None
        assert gateway.stats.refusals == 1


class TestCache:
    def test_identical_greedy_request_served_from_cache(self, tmp_path):
        backend = CountingBackend()
        gateway = LlmGateway(backend, cache_dir=tmp_path)
        first = gateway.complete(req("ping"))
        calls_after_first = backend.calls
        second = gateway.complete(req("ping"))
        assert backend.calls == calls_after_first == 1
        assert second.content == first.content
        assert gateway.stats.cache_hits == 1

    def test_cache_persists_across_gateways(self, tmp_path):
        backend = CountingBackend()
        LlmGateway(backend, cache_dir=tmp_path).complete(req("ping"))
        fresh_backend = CountingBackend()
        gateway = LlmGateway(fresh_backend, cache_dir=tmp_path)
        response = gateway.complete(req("ping"))
        assert fresh_backend.calls == 0
        assert response.content == "echo:ping"

    def test_non_greedy_bypasses_cache(self, tmp_path):
        backend = CountingBackend()
        gateway = LlmGateway(backend, cache_dir=tmp_path)
        gateway.complete(req("ping", greedy=False))
        gateway.complete(req("ping", greedy=False))
        assert backend.calls == 2
        assert gateway.stats.cache_hits == 0

    def test_cache_key_distinguishes_model_and_budget(self, tmp_path):
        backend = CountingBackend()
        gateway = LlmGateway(backend, cache_dir=tmp_path)
        gateway.complete(req("ping", model="a"))
        gateway.complete(req("ping", model="b"))
        gateway.complete(
            ChatRequest.user("a", "ping", Decoding(greedy=True, max_output_tokens=7))
        )
        assert backend.calls == 3

    def test_refusals_are_cached(self, tmp_path):
        backend = ScriptedChatBackend(
            [ScriptedRule(contains=("x",), finish_reason="refusal")]
        )
        gateway = LlmGateway(backend, cache_dir=tmp_path)
        gateway.complete(req("x"))
        gateway.complete(req("x"))
        assert len(backend.call_log) == 1


class TestRetries:
    def test_two_transient_failures_then_success(self):
        backend = FlakyBackend(failures=2)
        gateway = LlmGateway(backend, max_retries=3, sleep=lambda _: None)
        response = gateway.complete(req("go"))
        assert response.content == "recovered"
        assert gateway.stats.retries == 2
        assert backend.calls == 3

    def test_retried_result_equals_unretried_result(self):
        flaky = LlmGateway(FlakyBackend(failures=2), sleep=lambda _: None).complete(req("go"))
        clean = LlmGateway(FlakyBackend(failures=0), sleep=lambda _: None).complete(req("go"))
        assert flaky == clean

    def test_exhausted_retries(self):
        backend = FlakyBackend(failures=99)
        gateway = LlmGateway(backend, max_retries=2, sleep=lambda _: None)
        with pytest.raises(RetriesExhaustedError):
            gateway.complete(req("go"))
        assert backend.calls == 3  # initial try plus two retries

    def test_backoff_is_exponential(self):
        sleeps = []
        backend = FlakyBackend(failures=3)
        gateway = LlmGateway(backend, max_retries=3, backoff_base=0.5, sleep=sleeps.append)
        gateway.complete(req("go"))
        assert sleeps == [0.5, 1.0, 2.0]


class TestRefusalMarkers:
    def test_textual_refusal_classified(self):
        backend = ScriptedChatBackend(
            [ScriptedRule(contains=("term",), response="I cannot provide sentencing ranges.")]
        )
        gateway = LlmGateway(backend)
        response = gateway.complete(req("term?"))
        assert response.finish_reason == "refusal"
        assert response.content is None

    def test_normal_answer_not_classified(self):
        backend = ScriptedChatBackend(
            [ScriptedRule(contains=("term",), response="Charges: theft")]
        )
        response = LlmGateway(backend).complete(req("term?"))
        assert response.finish_reason == "stop"


class TestEmbeddings:
    def test_fixture_vector_identity(self):
        backend = ScriptedEmbeddingBackend(dimension=4, vectors={"theft": [1, 0, 0, 0]})
        gateway = LlmGateway(embedding_backend=backend)
        [vector] = gateway.embed(["theft"])
        assert vector.values == (1.0, 0.0, 0.0, 0.0)
        assert vector.dimension == 4

    def test_same_text_twice_identical(self):
        gateway = LlmGateway(embedding_backend=ScriptedEmbeddingBackend(dimension=4))
        a, b = gateway.embed(["x", "x"])
        assert a == b

    def test_order_preserved(self):
        backend = ScriptedEmbeddingBackend(
            dimension=2, vectors={"a": [1, 0], "b": [0, 1], "c": [1, 1]}
        )
        gateway = LlmGateway(embedding_backend=backend)
        vectors = gateway.embed(["b", "c", "a"])
        assert [v.values for v in vectors] == [(0.0, 1.0), (1.0, 1.0), (1.0, 0.0)]

    def test_empty_batch_rejected(self):
        gateway = LlmGateway(embedding_backend=ScriptedEmbeddingBackend(dimension=2))
        with pytest.raises(ValueError):
            gateway.embed([])

    def test_embedding_cache(self, tmp_path):
        backend = ScriptedEmbeddingBackend(dimension=4)
        gateway = LlmGateway(embedding_backend=backend, cache_dir=tmp_path)
        gateway.embed(["x"])
        gateway.embed(["x"])
        assert backend.call_count == 1
        assert gateway.stats.embed_cache_hits == 1

    def test_dimension_mismatch_across_batch(self):
        class Ragged:
            def embed(self, texts):
                return [[0.0] * (2 + i) for i, _ in enumerate(texts)]

        gateway = LlmGateway(embedding_backend=Ragged())
        with pytest.raises(EmbeddingDimensionError):
            gateway.embed(["a", "b"])


class TestConcurrency:
    def test_limit_one_is_sequential(self):
        backend = CountingBackend(delay=0.005)
        gateway = LlmGateway(backend).with_concurrency(1)
        threads = [
            threading.Thread(target=gateway.complete, args=(req(f"p{i}"),)) for i in range(8)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert backend.max_in_flight == 1
        assert backend.calls == 8

    def test_limit_bounds_in_flight(self):
        backend = CountingBackend(delay=0.002)
        gateway = LlmGateway(backend).with_concurrency(8)
        threads = [
            threading.Thread(target=gateway.complete, args=(req(f"p{i}"),)) for i in range(100)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert backend.calls == 100
        assert backend.max_in_flight <= 8

    def test_all_cached_means_zero_network_calls(self, tmp_path):
        backend = CountingBackend()
        warm = LlmGateway(backend, cache_dir=tmp_path)
        for i in range(20):
            warm.complete(req(f"p{i}"))
        baseline = backend.calls
        gateway = LlmGateway(backend, cache_dir=tmp_path).with_concurrency(8)
        threads = [
            threading.Thread(target=gateway.complete, args=(req(f"p{i}"),)) for i in range(20)
        ]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert backend.calls == baseline

    def test_limit_must_be_positive(self):
        with pytest.raises(ValueError):
            LlmGateway(CountingBackend()).with_concurrency(0)

    def test_usage_counters_pass_through(self):
        backend = ScriptedChatBackend([ScriptedRule(response="hi", contains=("x",))])
        response = LlmGateway(backend).complete(req("x"))
        assert response.usage == Usage(prompt_tokens=1, completion_tokens=2)
