import warnings

import numpy as np
import pytest

from alignrec import decode, seqmodel, tokenizer
from alignrec.decode import CacheFile, UserNotFound
from alignrec.errors import DataError
from alignrec.tokenizer import CodeBook, CodeBookConfig

from helpers import TableModel, exhaustive_ranking, random_sids


def test_membership():
    trie = decode.build_trie({"a": (3, 1, 4, 1)}, codes_per_level=5)
    assert (3, 1, 4, 1) in trie
    assert (3, 1, 4, 2) not in trie
    assert (3, 1, 4) not in trie


def test_root_continuations():
    trie = decode.build_trie({"a": (2, 0), "b": (0, 1), "c": (2, 1)}, codes_per_level=3)
    assert trie.next_codes(()) == [0, 2]
    assert trie.next_codes((2,)) == [0, 1]
    assert trie.next_codes((1,)) == []


def test_collision_leaf_sorted():
    trie = decode.build_trie({"z": (1, 1), "a": (1, 1), "m": (0, 1)})
    assert trie.items((1, 1)) == ["a", "z"]
    assert len(trie) == 3 and len(trie.semantic_ids()) == 2


def test_build_errors():
    with pytest.raises(DataError, match="empty"):
        decode.build_trie({})
    with pytest.raises(DataError):
        decode.build_trie({"a": (1, 2), "b": (1,)})
    with pytest.raises(DataError):
        decode.build_trie({"a": (5,)}, codes_per_level=4)


def test_token_layout():
    trie = decode.build_trie({"a": (1, 2)}, codes_per_level=4, code_token_base=10)
    assert trie.tokens((1, 2)) == [11, 16]


@pytest.fixture
def catalog_trie(rng):
    return decode.build_trie(random_sids(rng, 40, 3, 4), codes_per_level=4, code_token_base=2)


def test_results_are_members(catalog_trie, rng):
    vocab = 2 + 3 * 4
    for seed in range(200):
        model = TableModel(vocab, 12, seed)
        prompt = list(rng.integers(0, vocab, 3))
        res = decode.beam_search(model, prompt, catalog_trie, K=3, beam_width=4)
        assert len(res) == 3
        assert all(sid in catalog_trie for sid, _ in res)
        scores = [s for _, s in res]
        assert scores == sorted(scores, reverse=True)


def test_wide_beam_matches_oracle(catalog_trie, rng):
    vocab = 2 + 3 * 4
    width = len(catalog_trie.semantic_ids())
    for seed in range(20):
        model = TableModel(vocab, 12, seed)
        prompt = list(rng.integers(0, vocab, 2))
        want = exhaustive_ranking(model, prompt, catalog_trie)
        got = decode.beam_search(model, prompt, catalog_trie, K=width, beam_width=width)
        assert got == want


def test_forced_argmax():
    sids = {"a": (0, 0, 0), "b": (1, 2, 0), "c": (0, 1, 1)}
    trie = decode.build_trie(sids, codes_per_level=3)

    def model(prefix):
        lp = np.full(9, -5.0)
        lp[[0, 3, 6]] = -0.01  # code 0 at every level
        return lp
    assert decode.beam_search(model, [0], trie, K=1, beam_width=1)[0][0] == (0, 0, 0)


def test_ties_lexicographic():
    trie = decode.build_trie({"a": (1, 0), "b": (0, 1), "c": (0, 0)}, codes_per_level=2)
    res = decode.beam_search(lambda p: np.zeros(4), [0], trie, K=3, beam_width=3)
    assert [sid for sid, _ in res] == [(0, 0), (0, 1), (1, 0)]


def test_beam_argument_checks(catalog_trie):
    model = TableModel(14, 12, 0)
    with pytest.raises(ValueError):
        decode.beam_search(model, [1], catalog_trie, K=5, beam_width=4)
    with pytest.raises(DataError):
        decode.beam_search(model, [], catalog_trie)


def test_context_overflow():
    cfg = seqmodel.ModelConfig(vocab_size=8, context_len=6, model_dim=8, n_heads=2, ff_dim=8)
    p = seqmodel.init_params(cfg)
    trie = decode.build_trie({"a": (0, 1)}, codes_per_level=2, code_token_base=4)
    with pytest.raises(DataError, match="context"):
        decode.beam_search(p, [1, 2, 3, 1, 2, 3], trie, K=1, beam_width=1)


def test_params_scorer_matches_callable(rng):
    cfg = seqmodel.ModelConfig(vocab_size=14, context_len=16, model_dim=8, n_heads=2, ff_dim=8)
    p = seqmodel.init_params(cfg)
    trie = decode.build_trie(random_sids(rng, 20, 3, 4), codes_per_level=4, code_token_base=2)
    a = decode.beam_search(p, [1, 0], trie, 5, 8)
    b = decode.beam_search(lambda s: seqmodel.next_token_logprobs(p, s), [1, 0], trie, 5, 8)
    assert [s for s, _ in a] == [s for s, _ in b]
    assert np.allclose([x for _, x in a], [x for _, x in b], atol=1e-10)


def test_expand_to_items():
    trie = decode.build_trie({"b": (0,), "a": (0,), "c": (1,)})
    assert decode.expand_to_items([((1,), -1.0), ((0,), -2.0)], trie) == ["c", "a", "b"]
    assert decode.expand_to_items([((0,), -1.0), ((1,), -2.0)], trie, K=2) == ["a", "b"]
    assert decode.expand_to_items([], trie) == []


@pytest.fixture
def served(rng):
    trie = decode.build_trie(random_sids(rng, 30, 3, 4), codes_per_level=4, code_token_base=2)
    cfg = seqmodel.ModelConfig(vocab_size=14, context_len=16, model_dim=8, n_heads=2, ff_dim=8)
    params = seqmodel.init_params(cfg)
    users = [(f"u{k}", list(rng.integers(0, 14, 4))) for k in range(12)]
    return params, trie, users


def test_cache_equals_live(served):
    params, trie, users = served
    cache = decode.precache(params, users, trie, K=5, beam_width=10)
    for user, prompt in users:
        live = decode.beam_search(params, prompt, trie, 5, 10)
        assert cache.entries[user] == live
        assert decode.lookup(cache, user, trie) == decode.expand_to_items(live, trie, 5)


def test_cache_file_roundtrip(tmp_path, served):
    params, trie, users = served
    cache = decode.precache(params, users, trie, K=5, beam_width=10, codebook_checksum="ab12")
    cache.save(tmp_path / "c.tsv")
    back = CacheFile.load(tmp_path / "c.tsv")
    assert back == cache
    head = (tmp_path / "c.tsv").read_text().splitlines()[0]
    assert head.startswith(f"k=5 model={params.checksum()} codebook=ab12")


def test_stale_cache_warns(served):
    params, trie, users = served
    cache = decode.precache(params, users, trie, K=2, beam_width=2)
    other = params.copy()
    other.arrays["head.b"][0] += 1.0
    with pytest.warns(decode.StaleCacheWarning):
        assert decode.validate_cache(cache, other)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert decode.validate_cache(cache, params) == []


def test_lookup_unknown_user(served):
    params, trie, users = served
    cache = decode.precache(params, users[:1], trie, K=2, beam_width=2)
    with pytest.raises(UserNotFound):
        decode.lookup(cache, "ghost", trie)


def test_lookup_k_beyond_catalog():
    trie = decode.build_trie({"a": (0,), "b": (1,)})
    cache = decode.precache(lambda p: np.log(np.full(2, 0.5)), [("u", [0])], trie, K=5,
                            beam_width=5)
    assert decode.lookup(cache, "u", trie) == ["a", "b"]


def test_precache_error_names_user():
    trie = decode.build_trie({"a": (0,)})
    with pytest.raises(DataError, match="'bad'"):
        decode.precache(lambda p: np.zeros(1), [("bad", [])], trie, K=1, beam_width=1)


@pytest.fixture
def book(rng):
    cfg = CodeBookConfig(levels=3, codes_per_level=4, dim=5)
    return CodeBook(cfg, rng.standard_normal((3, 4, 5)))


def test_cold_item_admission(book, rng):
    vectors = rng.standard_normal((20, 5))
    ids = {f"it{k:02d}": tokenizer.tokenize_item(v, book) for k, v in enumerate(vectors)}
    trie = decode.build_trie(ids, codes_per_level=4, code_token_base=2)
    before = {sid: trie.items(sid) for sid in trie.semantic_ids()}
    new = decode.admit_cold_item("cold", vectors[7], book, trie)
    assert new.semantic_id("cold") == ids["it07"]
    assert new.items(ids["it07"]) == sorted(trie.items(ids["it07"]) + ["cold"])
    # the old trie is untouched and other leaves keep their members
    assert "cold" not in trie.item_ids
    for sid, members in before.items():
        if sid != ids["it07"]:
            assert new.items(sid) == members
        assert trie.items(sid) == members


def test_cold_item_fresh_leaf_reachable(book, rng):
    ids = {"a": (0, 0, 0), "b": (1, 1, 1)}
    trie = decode.build_trie(ids, codes_per_level=4, code_token_base=2)
    vec = rng.standard_normal(5)
    new = decode.admit_cold_item("cold", vec, book, trie)
    sid = tokenizer.tokenize_item(vec, book)
    assert sid in new
    width = len(new.semantic_ids())
    res = decode.beam_search(TableModel(14, 8, 1), [1], new, width, width)
    assert sid in [s for s, _ in res]


def test_cold_item_dimension_mismatch(book):
    trie = decode.build_trie({"a": (0, 0, 0)}, codes_per_level=4)
    with pytest.raises(DataError, match="dimension"):
        decode.admit_cold_item("x", np.zeros(3), book, trie)


def test_duplicate_admission_rejected(book):
    trie = decode.build_trie({"a": (0, 0, 0)}, codes_per_level=4)
    with pytest.raises(DataError):
        decode.admit_cold_item("a", np.zeros(5), book, trie)
