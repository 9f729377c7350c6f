"""Valid-code trie, constrained beam search, per-user top-K cache and cold-start admission."""
from __future__ import annotations

import datetime as _dt
import warnings
from dataclasses import dataclass, field

import numpy as np

from ._util import parse_header
from .errors import AlignRecError, DataError
from .seqmodel import Params, last_token_logprobs
from .tokenizer import SemanticId, tokenize_item


class UserNotFound(AlignRecError, KeyError):
    def __str__(self):
        return f"user {self.args[0]!r} not found in cache"


class StaleCacheWarning(UserWarning):
    """A cache was built from a different model or codebook than the one supplied."""


class CodeTrie:
    """Prefix tree over the Semantic IDs of real catalog items.

    Leaves hold the sorted ids of every item sharing that code sequence.  Code
    ``c`` at level ``n`` is token ``code_token_base + n * codes_per_level + c``.
    Instances are never mutated; :func:`admit_cold_item` returns a new trie.
    """

    def __init__(self, root: dict, item_ids: dict[str, SemanticId], n_levels: int,
                 codes_per_level: int, code_token_base: int = 0):
        self._root = root
        self._items = item_ids
        self.n_levels = n_levels
        self.codes_per_level = codes_per_level
        self.code_token_base = code_token_base

    def _node(self, prefix):
        node = self._root
        for c in prefix:
            node = node.get(c) if isinstance(node, dict) else None
            if node is None:
                return None
        return node

    def __contains__(self, sid) -> bool:
        sid = tuple(sid)
        return len(sid) == self.n_levels and self._node(sid) is not None

    membership = __contains__

    def next_codes(self, prefix=()) -> list[int]:
        """Codes that extend ``prefix`` towards at least one real item (sorted)."""
        if len(prefix) >= self.n_levels:
            return []
        node = self._node(prefix)
        return sorted(node) if node is not None else []

    def items(self, sid) -> list[str]:
        node = self._node(tuple(sid)) if len(sid) == self.n_levels else None
        return list(node) if node is not None else []

    def semantic_id(self, item_id: str) -> SemanticId:
        return self._items[item_id]

    def semantic_ids(self) -> list[SemanticId]:
        out = []

        def walk(node, prefix):
            if len(prefix) == self.n_levels:
                out.append(prefix)
                return
            for c in sorted(node):
                walk(node[c], prefix + (c,))
        walk(self._root, ())
        return out

    @property
    def item_ids(self) -> dict[str, SemanticId]:
        return dict(self._items)

    def __len__(self):
        return len(self._items)

    def token(self, level: int, code: int) -> int:
        return self.code_token_base + level * self.codes_per_level + code

    def tokens(self, sid) -> list[int]:
        return [self.token(n, c) for n, c in enumerate(sid)]

    def with_item(self, item_id: str, sid: SemanticId) -> CodeTrie:
        """Copy-on-write insertion: only the nodes on ``sid``'s path are copied."""
        sid = tuple(int(c) for c in sid)
        if len(sid) != self.n_levels:
            raise DataError(f"semantic id {sid} has {len(sid)} levels, trie has {self.n_levels}")
        if item_id in self._items:
            raise DataError(f"item {item_id!r} already in trie")
        root = dict(self._root)
        node = root
        for c in sid[:-1]:
            node[c] = dict(node.get(c, {}))
            node = node[c]
        node[sid[-1]] = tuple(sorted(node.get(sid[-1], ()) + (item_id,)))
        items = dict(self._items)
        items[item_id] = sid
        return CodeTrie(root, items, self.n_levels, self.codes_per_level, self.code_token_base)


def build_trie(semantic_ids: dict[str, SemanticId], *, vocab=None,
               codes_per_level: int | None = None, code_token_base: int = 0) -> CodeTrie:
    """Trie over ``semantic_ids`` (item -> SemanticId).

    Token ids come from ``vocab`` when given, otherwise from ``code_token_base``
    and ``codes_per_level`` (default: the largest code in use + 1).
    """
    if not semantic_ids:
        raise DataError("cannot build a trie over an empty catalog")
    lengths = {len(s) for s in semantic_ids.values()}
    if len(lengths) != 1:
        raise DataError(f"semantic ids have mixed lengths {sorted(lengths)}")
    n_levels = lengths.pop()
    if vocab is not None:
        if vocab.n_levels != n_levels:
            raise DataError(f"vocab has {vocab.n_levels} code levels, ids have {n_levels}")
        codes_per_level, code_token_base = vocab.codes_per_level, vocab.code_base
    elif codes_per_level is None:
        codes_per_level = max(max(s) for s in semantic_ids.values()) + 1
    root: dict = {}
    leaves: dict[SemanticId, list[str]] = {}
    for item, sid in semantic_ids.items():
        sid = tuple(int(c) for c in sid)
        if min(sid) < 0 or max(sid) >= codes_per_level:
            raise DataError(f"item {item!r}: code outside [0, {codes_per_level})")
        node = root
        for c in sid[:-1]:
            node = node.setdefault(c, {})
        leaves.setdefault(sid, []).append(item)
        node[sid[-1]] = None
    for sid, members in leaves.items():
        node = root
        for c in sid[:-1]:
            node = node[c]
        node[sid[-1]] = tuple(sorted(members))
    items = {item: tuple(int(c) for c in sid) for item, sid in semantic_ids.items()}
    return CodeTrie(root, items, n_levels, codes_per_level, code_token_base)


# -- beam search -------------------------------------------------------------------

def _scorer(model):
    """Batch scorer ``list of equal-length sequences -> [batch, vocab] log-probs``."""
    if isinstance(model, Params):
        return lambda seqs: last_token_logprobs(model, np.asarray(seqs, dtype=np.int64))
    if callable(model):
        return lambda seqs: np.stack([np.asarray(model(s), dtype=np.float64) for s in seqs])
    raise TypeError("model must be Params or a callable prefix -> log-probs")


def beam_search(model, prompt_ids, trie: CodeTrie, K: int = 10, beam_width: int = 20
                ) -> list[tuple[SemanticId, float]]:
    """Top-K valid Semantic IDs by cumulative log-probability.

    Every beam only extends along trie continuations, so each result is a real
    catalog code sequence.  Ties are broken by the lexicographically smaller code
    sequence.  ``model`` is a Params or any callable ``prefix_ids -> log-probs``.
    """
    if not 1 <= K <= beam_width:
        raise ValueError(f"need 1 <= K <= beam_width, got K={K}, beam_width={beam_width}")
    if len(trie) == 0:
        raise DataError("trie is empty")
    prompt = [int(t) for t in prompt_ids]
    if not prompt:
        raise DataError("prompt must be non-empty")
    if isinstance(model, Params) and len(prompt) + trie.n_levels - 1 > model.config.context_len:
        raise DataError(f"prompt of {len(prompt)} tokens plus {trie.n_levels} codes exceeds "
                        f"context {model.config.context_len}")
    score = _scorer(model)
    beams: list[tuple[SemanticId, float]] = [((), 0.0)]
    for level in range(trie.n_levels):
        logp = score([prompt + trie.tokens(prefix) for prefix, _ in beams])
        candidates = []
        for row, (prefix, total) in enumerate(beams):
            for c in trie.next_codes(prefix):
                candidates.append((prefix + (c,), float(total + logp[row, trie.token(level, c)])))
        candidates.sort(key=lambda cand: (-cand[1], cand[0]))
        beams = candidates[:beam_width]
    return beams[:K]


def expand_to_items(results, trie: CodeTrie, K: int | None = None) -> list[str]:
    """Replace each Semantic ID by its collision group (item-id order), keep the first K items."""
    out = []
    for sid, _ in results:
        out.extend(trie.items(sid))
    return out if K is None else out[:K]


# -- cache ------------------------------------------------------------------------

@dataclass
class CacheFile:
    k: int
    model_checksum: str
    codebook_checksum: str
    created_at: str = ""
    entries: dict[str, list[tuple[SemanticId, float]]] = field(default_factory=dict)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"k={self.k} model={self.model_checksum} codebook={self.codebook_checksum}"
                     + (f" created_at={self.created_at}" if self.created_at else "") + "\n")
            for user, results in self.entries.items():
                body = ";".join(".".join(str(c) for c in sid) + ":" + repr(float(s))
                                for sid, s in results)
                fh.write(f"{user}\t{body}\n")

    @classmethod
    def load(cls, path) -> CacheFile:
        with open(path, encoding="utf-8") as fh:
            head = parse_header(fh.readline())
            cache = cls(int(head["k"]), head["model"], head["codebook"], head.get("created_at", ""))
            for lineno, line in enumerate(fh, 2):
                line = line.rstrip("\n")
                if not line:
                    continue
                user, sep, body = line.partition("\t")
                if not sep:
                    raise DataError(f"line {lineno}: expected user_id<TAB>entries")
                results = []
                for part in filter(None, body.split(";")):
                    codes, _, score = part.rpartition(":")
                    results.append((tuple(int(c) for c in codes.split(".")), float(score)))
                cache.entries[user] = results
        return cache


def precache(model, users, trie: CodeTrie, K: int = 10, beam_width: int = 20, *,
             model_checksum: str | None = None, codebook_checksum: str = "",
             created_at: str | None = None) -> CacheFile:
    """One beam search per ``(user_id, prompt_ids)`` pair."""
    if model_checksum is None:
        model_checksum = model.checksum() if isinstance(model, Params) else "none"
    if created_at is None:
        created_at = _dt.datetime.now(_dt.timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")
    cache = CacheFile(K, model_checksum, codebook_checksum, created_at)
    for user, prompt in users:
        try:
            cache.entries[user] = beam_search(model, prompt, trie, K, beam_width)
        except AlignRecError as exc:
            raise type(exc)(f"user {user!r}: {exc}") from exc
    return cache


def validate_cache(cache: CacheFile, model=None, codebook=None) -> list[str]:
    """Warn (and return the messages) when checksums disagree with the supplied artifacts."""
    problems = []
    if model is not None and model.checksum() != cache.model_checksum:
        problems.append(f"model checksum {model.checksum()} != cached {cache.model_checksum}")
    if codebook is not None and codebook.checksum() != cache.codebook_checksum:
        problems.append(f"codebook checksum {codebook.checksum()} != cached "
                        f"{cache.codebook_checksum}")
    for msg in problems:
        warnings.warn(f"stale cache: {msg}", StaleCacheWarning, stacklevel=2)
    return problems


def lookup(cache: CacheFile, user_id: str, trie: CodeTrie) -> list[str]:
    """Ranked items for a cached user.  No fallback inference for unknown users."""
    try:
        results = cache.entries[user_id]
    except KeyError:
        raise UserNotFound(user_id) from None
    return expand_to_items(results, trie, cache.k)


def admit_cold_item(item, behavior_vector, codebook, trie: CodeTrie) -> CodeTrie:
    """Tokenize a new item through the trained codebooks and add it to a new trie.

    Neither the model nor the codebooks change; existing caches stay as they were.
    """
    item_id = getattr(item, "item_id", item)
    vec = np.asarray(behavior_vector, dtype=np.float64)
    if vec.shape != (codebook.config.dim,):
        raise DataError(f"dimension mismatch: vector {vec.shape}, codebook dim "
                        f"{codebook.config.dim}")
    return trie.with_item(item_id, tokenize_item(vec, codebook))
