"""Code-token vocabulary and the prompt/label alignment tasks."""
from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Literal

from ._util import rng_for
from .errors import DataError

TaskKind = Literal["sequential", "text_align", "query_align", "negative"]
TASK_KINDS: tuple[str, ...] = ("sequential", "text_align", "query_align", "negative")

PAD, BOS, EOS, SEP, UNK = "<pad>", "<bos>", "<eos>", "<sep>", "<unk>"
SPECIAL_TOKENS = (PAD, BOS, EOS, SEP, UNK)

HISTORY_PREFIX = "Here is the item interaction history of the user:"
RECOMMEND_SUFFIX = "what to recommend to the user next?"
HATE_SUFFIX = "what will user hate next?"
TEXT_TEMPLATE = ("An item is called {title} and described as {description}, "
                 "can you tell me which item it is?")
QUERY_TEMPLATE = ("You meet a user's query: {query}. Please respond to this user by "
                  "selecting an appropriate item")
INFERENCE_PREFIX = "The user has interacted with"
INFERENCE_SUFFIX = ("in chronological order. Can you predict the next possible item "
                    "that the user may expect?")
TEMPLATE_TEXTS = (HISTORY_PREFIX, RECOMMEND_SUFFIX, HATE_SUFFIX, TEXT_TEMPLATE,
                  QUERY_TEMPLATE, INFERENCE_PREFIX, INFERENCE_SUFFIX)

_TEXT_RE = re.compile(r"[a-z0-9]+|[^\sa-z0-9]")
_CODE_RE = re.compile(r"^<c_(\d+)_(\d+)>$")


def text_tokens(text: str) -> list[str]:
    """Lowercased words plus single punctuation marks."""
    return _TEXT_RE.findall(text.lower())


def code_token(level: int, code: int) -> str:
    return f"<c_{level}_{code}>"


class Vocab:
    """Dense token ids: special tokens, text words, then N*C code tokens in (level, code) order."""

    def __init__(self, tokens: list[str]):
        self.tokens = list(tokens)
        self.index = {}
        for i, tok in enumerate(self.tokens):
            if tok in self.index:
                raise DataError(f"token {tok!r} appears twice in vocabulary")
            self.index[tok] = i
        codes = [(i, _CODE_RE.match(t)) for i, t in enumerate(self.tokens)]
        codes = [(i, int(m.group(1)), int(m.group(2))) for i, m in codes if m]
        if codes:
            self.code_base = codes[0][0]
            self.n_levels = max(c[1] for c in codes) + 1
            self.codes_per_level = max(c[2] for c in codes) + 1
            if len(codes) != self.n_levels * self.codes_per_level:
                raise DataError("code tokens do not form a full N x C grid")
            for offset, (i, n, j) in enumerate(codes):
                if i != self.code_base + offset or offset != n * self.codes_per_level + j:
                    raise DataError("code tokens must be contiguous and in (level, code) order")
        else:
            self.code_base, self.n_levels, self.codes_per_level = len(self.tokens), 0, 0

    def __len__(self):
        return len(self.tokens)

    def __eq__(self, other):
        return isinstance(other, Vocab) and self.tokens == other.tokens

    def id(self, token: str) -> int:
        return self.index.get(token, self.index[UNK])

    def encode_text(self, text: str) -> list[int]:
        return [self.id(t) for t in text_tokens(text)]

    def code_id(self, level: int, code: int) -> int:
        if not (0 <= level < self.n_levels and 0 <= code < self.codes_per_level):
            raise DataError(f"code ({level}, {code}) outside the {self.n_levels}x"
                            f"{self.codes_per_level} code grid")
        return self.code_base + level * self.codes_per_level + code

    def code_ids(self, sid) -> list[int]:
        return [self.code_id(n, c) for n, c in enumerate(sid)]

    def is_code(self, token_id: int) -> bool:
        return self.code_base <= token_id < self.code_base + self.n_levels * self.codes_per_level

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for tok in self.tokens:
                fh.write(tok + "\n")

    @classmethod
    def load(cls, path) -> Vocab:
        with open(path, encoding="utf-8") as fh:
            return cls([line.rstrip("\n") for line in fh])

    @property
    def pad_id(self) -> int:
        return self.index[PAD]


def extend_vocab(text_corpus, n_levels: int, codes_per_level: int, min_count: int = 1) -> Vocab:
    """Word vocabulary by frequency (ties alphabetical), then the code tokens appended.

    Template words are always kept regardless of ``min_count``.
    """
    counts = Counter()
    for text in text_corpus:
        counts.update(text_tokens(text))
    keep = {w for w, c in counts.items() if c >= min_count}
    for text in TEMPLATE_TEXTS:
        for tok in text_tokens(text.format(title="", description="", query="")):
            keep.add(tok)
            counts[tok] += 0
    word_list = sorted(keep, key=lambda w: (-counts[w], w))
    codes = [code_token(n, j) for n in range(n_levels) for j in range(codes_per_level)]
    return Vocab(list(SPECIAL_TOKENS) + word_list + codes)


def corpus_texts(items, reviews=()) -> list[str]:
    """Every free text the tasks can render: titles, descriptions and review queries."""
    texts = [f"{it.title} {it.description}" for it in items]
    texts.extend(reviews)
    return texts


# -- rendering --------------------------------------------------------------

@dataclass
class PromptExample:
    kind: str
    input_ids: list[int]
    label_ids: list[int]
    user_id: str | None = None

    def to_json(self) -> str:
        obj = {"kind": self.kind, "input_ids": self.input_ids, "label_ids": self.label_ids}
        if self.user_id is not None:
            obj["user_id"] = self.user_id
        return json.dumps(obj)

    @classmethod
    def from_json(cls, line: str) -> PromptExample:
        obj = json.loads(line)
        return cls(obj["kind"], list(obj["input_ids"]), list(obj["label_ids"]), obj.get("user_id"))


class RejectedExample(DataError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"example rejected: {reason}" + (f" ({detail})" if detail else ""))
        self.reason = reason


def _codes(item, vocab, semantic_ids):
    try:
        return vocab.code_ids(semantic_ids[item])
    except KeyError:
        raise DataError(f"unknown item {item!r}: no semantic id") from None


def history_prompt(history, vocab: Vocab, semantic_ids, template: str = "history") -> list[int]:
    """Token ids of a history prompt.

    ``template`` is ``"history"`` (recommend), ``"hate"`` (negative task) or
    ``"inference"`` (the serving-time prompt).
    """
    items = [t for item in history for t in _codes(item, vocab, semantic_ids)]
    if template == "inference":
        return vocab.encode_text(INFERENCE_PREFIX) + items + vocab.encode_text(INFERENCE_SUFFIX)
    suffix = {"history": RECOMMEND_SUFFIX, "hate": HATE_SUFFIX}.get(template)
    if suffix is None:
        raise ValueError(f"unknown history template {template!r}")
    return vocab.encode_text(HISTORY_PREFIX) + items + vocab.encode_text(suffix)


def render_task(kind: str, data: dict, vocab: Vocab, semantic_ids, *,
                max_prompt_len: int | None = None, template: str = "history") -> PromptExample:
    """Render one alignment task.

    ``data`` keys by kind: sequential/negative -> ``history``, ``target``;
    text_align -> ``item`` (an ItemRecord); query_align -> ``query``, ``target``.
    ``user_id`` is optional everywhere.
    """
    if kind == "sequential":
        inputs = history_prompt(data["history"], vocab, semantic_ids, template)
        target = data["target"]
    elif kind == "negative":
        inputs = history_prompt(data["history"], vocab, semantic_ids, "hate")
        target = data["target"]
    elif kind == "text_align":
        item = data["item"]
        inputs = vocab.encode_text(TEXT_TEMPLATE.format(title=item.title,
                                                        description=item.description))
        target = item.item_id
    elif kind == "query_align":
        inputs = vocab.encode_text(QUERY_TEMPLATE.format(query=data["query"]))
        target = data["target"]
    else:
        raise ValueError(f"unknown task kind {kind!r}")
    label = _codes(target, vocab, semantic_ids)
    if max_prompt_len is not None and len(inputs) + len(label) > max_prompt_len:
        raise RejectedExample("length", f"{len(inputs) + len(label)} > {max_prompt_len}")
    return PromptExample(kind, inputs, label, data.get("user_id"))


# -- negatives and corpus assembly ----------------------------------------------

def parse_nsr(value) -> int:
    """Accept ``3`` or ``"1:3"``; returns negatives per positive."""
    if isinstance(value, str) and ":" in value:
        pos, neg = value.split(":")
        if int(pos) != 1:
            raise ValueError(f"negative sampling ratio must be 1:b, got {value!r}")
        value = neg
    ratio = int(value)
    if ratio < 0:
        raise ValueError("negative sampling ratio must be >= 0")
    return ratio


def sample_negatives(user_history, item_pool, ratio: int, seed: int, *, user_id: str = "",
                     n_positives: int | None = None) -> list[str]:
    """Uniform draw without replacement from ``item_pool`` minus the history.

    Draws ``ratio * n_positives`` items; ``n_positives`` defaults to the number of
    sequential positives a history yields, ``len(history) - 1``.
    """
    if n_positives is None:
        n_positives = max(len(user_history) - 1, 0)
    want = ratio * n_positives
    if want == 0:
        return []
    seen = set(user_history)
    available = sorted(set(item_pool) - seen)
    if len(available) < want:
        raise DataError(f"user {user_id!r}: needs {want} negatives but only "
                        f"{len(available)} non-interacted items exist")
    rng = rng_for(seed, "negatives", user_id)
    picks = rng.choice(len(available), size=want, replace=False)
    return [available[k] for k in picks]


@dataclass
class Corpus:
    examples: list[PromptExample]
    generated: Counter = field(default_factory=Counter)
    dropped: Counter = field(default_factory=Counter)

    def __len__(self):
        return len(self.examples)

    def __iter__(self):
        return iter(self.examples)

    def __getitem__(self, k):
        return self.examples[k]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            for ex in self.examples:
                fh.write(ex.to_json() + "\n")

    @classmethod
    def load(cls, path) -> Corpus:
        with open(path, encoding="utf-8") as fh:
            examples = [PromptExample.from_json(line) for line in fh if line.strip()]
        return cls(examples, Counter(ex.kind for ex in examples))


def build_corpus(split, items, semantic_ids, vocab: Vocab, task_mix: dict | None = None,
                 nsr=0, max_prompt_len: int = 256, seed: int = 0,
                 inference_prompt_rate: float = 0.5) -> Corpus:
    """Render every alignment task for a split and shuffle.

    ``task_mix`` maps task kind to a repeat count (0 disables the task).  Each
    sequential positive is rendered under the history template, or with
    probability ``inference_prompt_rate`` under the serving-time template.
    """
    mix = {kind: 1 for kind in TASK_KINDS}
    mix.update(task_mix or {})
    ratio = parse_nsr(nsr)
    pool = sorted(semantic_ids)
    generated, dropped = Counter(), Counter()
    examples = []

    def emit(kind, data, template="history"):
        generated[kind] += 1
        try:
            ex = render_task(kind, data, vocab, semantic_ids, max_prompt_len=max_prompt_len,
                             template=template)
        except RejectedExample:
            dropped[kind] += 1
            return
        examples.extend([ex] * mix[kind])

    for user, history in split.train_histories.items():
        negatives = []
        if mix["negative"] and ratio:
            negatives = sample_negatives(history, pool, ratio, seed, user_id=user)
        for k in range(1, len(history)):
            prefix = history[:k]
            if mix["sequential"]:
                coin = rng_for(seed, "template", user, k).random()
                template = "inference" if coin < inference_prompt_rate else "history"
                emit("sequential", {"history": prefix, "target": history[k], "user_id": user},
                     template)
            for neg in negatives[(k - 1) * ratio:k * ratio]:
                emit("negative", {"history": prefix, "target": neg, "user_id": user})
        if mix["query_align"]:
            for item in dict.fromkeys(history):
                review = split.reviews.get((user, item))
                if review:
                    emit("query_align", {"query": review, "target": item, "user_id": user})

    if mix["text_align"]:
        for item in items:
            if item.item_id in semantic_ids:
                emit("text_align", {"item": item})

    order = rng_for(seed, "shuffle").permutation(len(examples))
    return Corpus([examples[k] for k in order], generated, dropped)
