"""Leave-one-out HR@K / NDCG@K and a popularity baseline."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

from .corpus import history_prompt
from .decode import CacheFile, beam_search, expand_to_items, lookup
from .errors import DataError


def _check_users(ranked, labels):
    if set(ranked) != set(labels):
        missing = sorted(set(labels) ^ set(ranked))[:5]
        raise DataError(f"ranked lists and labels cover different users (e.g. {missing})")


def _rank(items, label):
    """1-based rank of ``label`` in ``items`` or None."""
    try:
        return items.index(label) + 1
    except ValueError:
        return None


def hit_ratio(ranked_items, labels, K: int) -> float:
    _check_users(ranked_items, labels)
    if not labels:
        return 0.0
    hits = 0
    for user, label in labels.items():
        r = _rank(list(ranked_items[user]), label)
        hits += r is not None and r <= K
    return hits / len(labels)


def ndcg(ranked_items, labels, K: int) -> float:
    """Single relevant item per user, so the ideal DCG is 1."""
    _check_users(ranked_items, labels)
    if not labels:
        return 0.0
    total = 0.0
    for user, label in labels.items():
        r = _rank(list(ranked_items[user]), label)
        if r is not None and r <= K:
            total += 1.0 / math.log2(r + 1)
    return total / len(labels)


def popularity_baseline(train_histories, K: int | None = None) -> list[str]:
    """Items by training-set frequency, ties by item id."""
    counts = Counter()
    for hist in (train_histories.values() if isinstance(train_histories, dict)
                 else train_histories):
        counts.update(getattr(hist, "items", hist))
    if not counts:
        raise DataError("popularity baseline needs non-empty training data")
    ranked = sorted(counts, key=lambda item: (-counts[item], item))
    return ranked if K is None else ranked[:K]


@dataclass
class EvalReport:
    metrics: dict[str, float]
    n_users: int
    n_skipped: int = 0
    config: dict = field(default_factory=dict)
    ranked: dict[str, list[str]] = field(default_factory=dict, repr=False, compare=False)

    TABLE_KEYS = ("hr@1", "hr@5", "hr@10", "ndcg@5", "ndcg@10")

    def to_json(self) -> str:
        keys = [k for k in self.TABLE_KEYS if k in self.metrics] or sorted(self.metrics)
        body = {k: self.metrics[k] for k in keys}
        body.update({"n_users": self.n_users, "n_skipped": self.n_skipped,
                     "config": self.config})
        return json.dumps(body, indent=2, sort_keys=False)

    def table(self) -> str:
        keys = [k for k in self.TABLE_KEYS if k in self.metrics] or sorted(self.metrics)
        head = " | ".join(f"{k:>8}" for k in keys)
        row = " | ".join(f"{self.metrics[k]:8.4f}" for k in keys)
        return (f"{head}\n{'-' * len(head)}\n{row}\n"
                f"users evaluated: {self.n_users}  skipped: {self.n_skipped}")


def metrics_for(ranked, labels, Ks) -> dict[str, float]:
    Ks = sorted(set(Ks))
    if not Ks:
        raise ValueError("need at least one cutoff K")
    out = {}
    for k in Ks:
        out[f"hr@{k}"] = hit_ratio(ranked, labels, k)
    for k in Ks:
        out[f"ndcg@{k}"] = ndcg(ranked, labels, k)
    return out


def evaluate(source, split, trie, Ks=(1, 5, 10), *, vocab=None, semantic_ids=None,
             beam_width: int = 20, exclude_seen: bool = False, config: dict | None = None
             ) -> EvalReport:
    """Rank the full catalog for every eval user and score against the held-out item.

    ``source`` is a CacheFile (lists come from :func:`lookup`) or a model (lists
    come from a fresh constrained beam search over the serving prompt).  With
    ``exclude_seen`` the user's prompt items are removed from the ranked list.
    """
    Ks = sorted(set(Ks))
    if not Ks:
        raise ValueError("need at least one cutoff K")
    depth = max(Ks)
    ranked = {}
    for user, (prompt_items, label) in split.eval_pairs.items():
        if isinstance(source, CacheFile):
            if source.k < depth:
                raise DataError(f"cache holds top-{source.k}, evaluation needs {depth}")
            items = lookup(source, user, trie)
        else:
            if vocab is None or semantic_ids is None:
                raise ValueError("live evaluation needs vocab and semantic_ids")
            prompt = history_prompt(prompt_items, vocab, semantic_ids, "inference")
            items = expand_to_items(beam_search(source, prompt, trie, depth, beam_width),
                                    trie, depth)
        if exclude_seen:
            seen = set(prompt_items)
            items = [i for i in items if i not in seen]
        ranked[user] = items[:depth]
    return EvalReport(metrics_for(ranked, split.labels, Ks), len(ranked),
                      split.skipped_users, dict(config or {}), ranked)
