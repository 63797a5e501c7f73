import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mome.context_provider import (EmbeddingRecord, HashEncoder, PrecomputedProvider, hash_embed_text,
                                   load_precomputed_embeddings, make_provider, tokenize, write_embeddings)
from mome.errors import EmptyContextError, FormatError, NotFoundError


def test_determinism_and_order():
    a = hash_embed_text("the quick brown fox", 16, 100)
    assert np.array_equal(a, hash_embed_text("the quick brown fox", 16, 100))
    ab, ba = hash_embed_text("a b", 8, 10), hash_embed_text("b a", 8, 10)
    assert np.array_equal(ab[0], ba[1]) and np.array_equal(ab[1], ba[0])
    assert not np.array_equal(ab, ba)
    assert hash_embed_text("single", 8, 10).shape == (1, 8)


def test_empty_text():
    for text in ("", "   ", "... !!"):
        with pytest.raises(EmptyContextError):
            hash_embed_text(text, 8, 10)


def test_tokenizer_normalises():
    assert tokenize("Rally, RALLY rally!") == ["rally", "rally", "rally"]
    rows = hash_embed_text("Rally, RALLY rally!", 4, 10)
    assert np.array_equal(rows[0], rows[2])


@given(st.lists(st.text(alphabet="abcdefg ", min_size=1, max_size=8), min_size=1, max_size=30), st.integers(1, 12))
def test_truncation(words, cap):
    text = " ".join(words)
    if not tokenize(text):
        return
    m = hash_embed_text(text, 4, cap)
    assert m.shape[0] == min(len(tokenize(text)), cap) <= cap


def test_rows_are_unit_variance_and_distinct():
    rng = np.random.default_rng(0)
    words = {"w" + "".join(rng.choice(list("abcdefghijklmnop"), 8)) for _ in range(10_000)}
    mat = hash_embed_text(" ".join(sorted(words)), 64, len(words))
    assert len({row.tobytes() for row in mat}) == len(words)
    assert abs(mat.var() - 1.0) < 0.02


def test_file_roundtrip(tmp_path, rng):
    recs = [EmbeddingRecord("a", rng.standard_normal((3, 64))), EmbeddingRecord("b", rng.standard_normal((1, 64)))]
    path = tmp_path / "emb.jsonl"
    write_embeddings(path, recs)
    loaded = load_precomputed_embeddings(path)
    assert loaded["a"].matrix.shape == (3, 64)
    for r in recs:
        assert np.array_equal(loaded[r.id].matrix, r.matrix)
    prov = PrecomputedProvider(loaded)
    assert np.array_equal(prov("b"), recs[1].matrix)
    with pytest.raises(NotFoundError):
        prov("zzz")


def test_empty_file(tmp_path):
    p = tmp_path / "e.jsonl"
    p.write_text("")
    assert load_precomputed_embeddings(p) == {}


def test_mixed_dprime_rejected(tmp_path):
    p = tmp_path / "m.jsonl"
    p.write_text(json.dumps({"id": "a", "dims": [1, 2], "data": [1, 2]}) + "\n"
                 + json.dumps({"id": "b", "dims": [1, 3], "data": [1, 2, 3]}) + "\n")
    with pytest.raises(FormatError):
        load_precomputed_embeddings(p)
    p.write_text(json.dumps({"id": "a", "dims": [2, 2], "data": [1, 2]}) + "\n")
    with pytest.raises(FormatError):
        load_precomputed_embeddings(p)


def test_make_provider(tmp_path):
    assert isinstance(make_provider("hash", 8), HashEncoder)
    with pytest.raises(FormatError):
        make_provider("llm")
    with pytest.raises(FormatError):
        make_provider("precomputed")
