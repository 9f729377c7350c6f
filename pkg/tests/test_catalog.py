import json
import math

import numpy as np
import pytest

from alignrec import catalog
from alignrec.catalog import Interaction, UserHistory
from alignrec.errors import DataError


def write_lines(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


def test_load_empty(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text("")
    assert catalog.load_interactions(p) == []


def test_load_one_line(tmp_path):
    p = write_lines(tmp_path / "x.jsonl",
                    [{"user_id": "u", "item_id": "i", "ts": 5, "review": "nice"}])
    assert catalog.load_interactions(p) == [Interaction("u", "i", 5, "nice")]


def test_load_missing_item_field(tmp_path):
    p = write_lines(tmp_path / "x.jsonl", [{"user_id": "u", "ts": 5}])
    with pytest.raises(DataError, match="line 1: missing field item_id"):
        catalog.load_interactions(p)


def test_load_reports_later_line(tmp_path):
    p = tmp_path / "x.jsonl"
    p.write_text('{"user_id": "u", "item_id": "i", "ts": 1}\nnot json\n')
    with pytest.raises(DataError, match="line 2"):
        catalog.load_interactions(p)


def test_interaction_invariants():
    with pytest.raises(DataError):
        Interaction("u", "i", -1)
    with pytest.raises(DataError):
        Interaction("", "i", 0)


def test_interaction_roundtrip(tmp_path, small_synth):
    inter, items = small_synth
    catalog.save_interactions(inter, tmp_path / "a.jsonl")
    catalog.save_items(items, tmp_path / "b.jsonl")
    assert catalog.load_interactions(tmp_path / "a.jsonl") == inter
    assert catalog.load_items(tmp_path / "b.jsonl") == items


def test_duplicate_item_rejected(tmp_path):
    row = {"item_id": "a", "title": "t", "description": "d"}
    p = write_lines(tmp_path / "items.jsonl", [row, row])
    with pytest.raises(DataError, match="duplicate"):
        catalog.load_items(p)


def test_truncate_to_most_recent():
    inter = [Interaction("u", f"i{t}", t) for t in range(25)]
    (h,) = catalog.build_histories(inter, max_history=20)
    assert h.items == tuple(f"i{t}" for t in range(5, 25))


def test_short_history_kept():
    inter = [Interaction("u", f"i{t}", 10 - t) for t in range(5)]
    (h,) = catalog.build_histories(inter)
    assert h.items == ("i4", "i3", "i2", "i1", "i0")
    assert list(h.timestamps) == sorted(h.timestamps)


def test_equal_timestamps_keep_input_order():
    inter = [Interaction("u", "b", 3), Interaction("u", "a", 3), Interaction("u", "c", 1)]
    (h,) = catalog.build_histories(inter)
    assert h.items == ("c", "b", "a")


def test_max_history_lower_bound():
    with pytest.raises(ValueError):
        catalog.build_histories([], max_history=1)


def test_split_three():
    split = catalog.split_leave_one_out([UserHistory("u", ("a", "b", "c"))])
    assert split.train_histories == {"u": ["a", "b"]}
    assert split.eval_pairs == {"u": (["a", "b"], "c")}
    assert split.skipped_users == 0


@pytest.mark.parametrize("items", [("a",), ("a", "b")])
def test_split_too_short(items):
    split = catalog.split_leave_one_out([UserHistory("u", items)])
    assert split.train_histories == {} and split.eval_pairs == {}
    assert split.skipped_users == 1


def test_split_invariants(small_synth):
    inter, _ = small_synth
    hists = {h.user_id: list(h.items) for h in catalog.build_histories(inter)}
    split = catalog.make_split(inter)
    assert set(split.train_histories) == set(split.eval_pairs)
    for user, (prompt, label) in split.eval_pairs.items():
        assert prompt + [label] == hists[user]
        assert split.train_histories[user] == prompt


def test_split_deterministic(small_synth):
    inter, _ = small_synth
    assert catalog.make_split(inter) == catalog.make_split(inter)


def test_duplicates_retained():
    inter = [Interaction("u", "a", 1), Interaction("u", "a", 2), Interaction("u", "a", 3)]
    (h,) = catalog.build_histories(inter)
    assert h.items == ("a", "a", "a")


def _pairs(inter):
    hists = catalog.build_histories(inter, max_history=10 ** 6)
    return [(a, b) for h in hists for a, b in zip(h.items, h.items[1:])]


def test_noise_free_chain_follows_successors():
    inter, items = catalog.generate_synthetic(50, 30, 0.0, seed=11)
    nxt = catalog.planted_successors(30, 11)
    index = {it.item_id: k for k, it in enumerate(items)}
    pairs = _pairs(inter)
    assert pairs
    assert all(index[b] == nxt[index[a]] for a, b in pairs)


def test_successor_map_is_single_cycle():
    nxt = catalog.planted_successors(40, 5)
    seen, cur = set(), 0
    for _ in range(40):
        seen.add(cur)
        cur = int(nxt[cur])
    assert cur == 0 and len(seen) == 40


def test_same_seed_identical():
    a = catalog.generate_synthetic(30, 10, 0.3, seed=2)
    b = catalog.generate_synthetic(30, 10, 0.3, seed=2)
    assert a == b


def test_full_noise_match_rate():
    n_items = 50
    inter, items = catalog.generate_synthetic(1500, n_items, 1.0, seed=4, min_len=10, max_len=12)
    nxt = catalog.planted_successors(n_items, 4)
    index = {it.item_id: k for k, it in enumerate(items)}
    pairs = _pairs(inter)
    assert len(pairs) >= 10_000
    hits = sum(index[b] == nxt[index[a]] for a, b in pairs)
    p = 1 / n_items
    sigma = math.sqrt(p * (1 - p) / len(pairs))
    assert abs(hits / len(pairs) - p) <= 3 * sigma


@pytest.mark.parametrize("noise", [-0.1, 1.5, float("nan")])
def test_invalid_probability(noise):
    with pytest.raises(ValueError):
        catalog.generate_synthetic(5, 5, noise, seed=0)


def test_reviews_attached(small_synth):
    inter, _ = small_synth
    split = catalog.make_split(inter)
    reviewed = [it for it in inter if it.review_text]
    assert reviewed
    for it in reviewed:
        assert split.reviews[(it.user_id, it.item_id)]
