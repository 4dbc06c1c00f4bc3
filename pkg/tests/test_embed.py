import json
import math

import httpx
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vmmr_rag.embed import (
    EmbeddingBackendConfig,
    RemoteEmbedder,
    cosine_similarity,
    embed_text,
    fnv1a_64,
    mock_embedding,
    tokenize,
)
from vmmr_rag.errors import (
    BackendProtocolError,
    BackendUnreachable,
    ConfigError,
    DimensionMismatch,
    ZeroVector,
)

MOCK8 = EmbeddingBackendConfig(kind="mock", dim=8)


def test_fnv1a_reference_values():
    # Published FNV-1a 64-bit test vectors.
    assert fnv1a_64(b"") == 0xCBF29CE484222325
    assert fnv1a_64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a_64(b"foobar") == 0x85944171F73967E8


def test_tokenize_splits_on_non_alphanumerics():
    assert tokenize("Split-LED  headlights, hex_grille!") == ["split", "led", "headlights", "hex", "grille"]


def _reference_mock(text, dim):
    # Independent re-statement of the hashing rule.
    vec = [0.0] * dim
    for tok in tokenize(text):
        h = 0xCBF29CE484222325
        for b in tok.encode():
            h = ((h ^ b) * 0x100000001B3) % 2**64
        vec[h % dim] += 1.0 if h < 2**63 else -1.0
    norm = math.sqrt(sum(v * v for v in vec))
    if norm == 0:
        return [1.0] + [0.0] * (dim - 1)
    return [v / norm for v in vec]


@pytest.mark.parametrize("text", ["abc", "split headlights", "The grille is hexagonal; LEDs split.", "!!!"])
def test_mock_matches_reference(text):
    np.testing.assert_allclose(mock_embedding(text, 16), _reference_mock(text, 16), rtol=0, atol=1e-15)


def test_mock_is_pure():
    a = embed_text(MOCK8, "abc")
    b = embed_text(MOCK8, "abc")
    assert a.tobytes() == b.tobytes()


@given(st.text(min_size=1).filter(str.strip), st.integers(1, 128))
def test_mock_is_unit_norm(text, dim):
    vec = mock_embedding(text, dim)
    assert vec.shape == (dim,)
    assert abs(np.linalg.norm(vec) - 1.0) <= 1e-6


def test_mock_overlap_sensitivity():
    cfg = EmbeddingBackendConfig(kind="mock", dim=64)
    a = embed_text(cfg, "split headlights")
    b = embed_text(cfg, "split headlights")
    c = embed_text(cfg, "round grille")
    assert np.array_equal(a, b)
    assert np.any(a != c)


def test_empty_token_list_maps_to_e0():
    vec = mock_embedding("---", 4)
    assert vec.tolist() == [1.0, 0.0, 0.0, 0.0]


def test_cosine_examples():
    v = np.array([0.3, -2.0, 5.0])
    assert cosine_similarity(v, v) == pytest.approx(1.0, abs=1e-9)
    assert cosine_similarity([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_similarity(np.array([1.0, 1.0]) / math.sqrt(2), [1.0, 0.0]) == pytest.approx(0.7071, abs=1e-4)


def test_cosine_errors():
    with pytest.raises(DimensionMismatch):
        cosine_similarity([1.0, 0.0], [1.0, 0.0, 0.0])
    with pytest.raises(ZeroVector):
        cosine_similarity([0.0, 0.0], [1.0, 0.0])


coord = st.floats(-1e3, 1e3).filter(lambda x: x == 0 or abs(x) > 1e-100)
vectors = st.integers(1, 16).flatmap(
    lambda n: st.tuples(
        st.lists(coord, min_size=n, max_size=n),
        st.lists(coord, min_size=n, max_size=n),
    )
).filter(lambda ab: any(ab[0]) and any(ab[1]))


@given(vectors)
def test_cosine_symmetric_and_bounded(ab):
    a, b = ab
    s = cosine_similarity(a, b)
    assert s == cosine_similarity(b, a)
    assert abs(s) <= 1 + 1e-9


def test_config_validation():
    with pytest.raises(ConfigError):
        EmbeddingBackendConfig(kind="mock", dim=0)
    with pytest.raises(ConfigError):
        EmbeddingBackendConfig(kind="remote", dim=4)
    with pytest.raises(ConfigError):
        EmbeddingBackendConfig.from_dict({"kind": "mock", "dims": 4})


REMOTE = EmbeddingBackendConfig(
    kind="remote", dim=3, endpoint_url="http://embed.test", model_name="clip-text",
    api_key_env_var="VMMR_TEST_KEY", timeout_ms=500,
)


def test_remote_wire_format(monkeypatch):
    seen = {}

    def handler(request: httpx.Request) -> httpx.Response:
        seen["url"] = str(request.url)
        seen["auth"] = request.headers.get("authorization")
        body = json.loads(request.content)
        seen["body"] = body
        data = [{"index": i, "embedding": [float(len(t)), 0.0, 0.0]} for i, t in enumerate(body["input"])]
        return httpx.Response(200, json={"data": list(reversed(data))})

    monkeypatch.setenv("VMMR_TEST_KEY", "sekret")
    emb = RemoteEmbedder(REMOTE, transport=httpx.MockTransport(handler))
    out = emb.embed_many(["ab", "abc"])
    assert seen["url"] == "http://embed.test/v1/embeddings"
    assert seen["auth"] == "Bearer sekret"
    assert seen["body"] == {"model": "clip-text", "input": ["ab", "abc"]}
    assert [v.tolist() for v in out] == [[1.0, 0.0, 0.0], [1.0, 0.0, 0.0]]


def test_remote_truncates_long_text():
    def handler(request):
        body = json.loads(request.content)
        assert len(body["input"][0]) == 512
        return httpx.Response(200, json={"data": [{"embedding": [0.0, 1.0, 0.0]}]})

    RemoteEmbedder(REMOTE, transport=httpx.MockTransport(handler)).embed_many(["x" * 2000])


@pytest.mark.parametrize(
    "payload, error",
    [
        ({"data": [{"embedding": [1.0, 0.0]}]}, DimensionMismatch),
        ({"nope": []}, BackendProtocolError),
        ({"data": [{"embedding": ["a", 0, 0]}]}, BackendProtocolError),
        ({"data": []}, BackendProtocolError),
    ],
)
def test_remote_malformed(payload, error):
    emb = RemoteEmbedder(REMOTE, transport=httpx.MockTransport(lambda r: httpx.Response(200, json=payload)))
    with pytest.raises(error):
        emb.embed_many(["grille"])


def test_remote_unreachable_retries_once():
    calls = []

    def handler(request):
        calls.append(1)
        raise httpx.ConnectError("refused", request=request)

    emb = RemoteEmbedder(REMOTE, transport=httpx.MockTransport(handler))
    with pytest.raises(BackendUnreachable):
        emb.embed_many(["grille"])
    assert len(calls) == 2


def test_remote_http_error_is_not_retried():
    calls = []

    def handler(request):
        calls.append(1)
        return httpx.Response(500, text="boom")

    emb = RemoteEmbedder(REMOTE, transport=httpx.MockTransport(handler))
    with pytest.raises(BackendProtocolError):
        emb.embed_many(["grille"])
    assert len(calls) == 1


def test_remote_real_socket_unreachable():
    cfg = EmbeddingBackendConfig(kind="remote", dim=3, endpoint_url="http://127.0.0.1:9",
                                 model_name="m", timeout_ms=300)
    with pytest.raises(BackendUnreachable):
        embed_text(cfg, "grille")
