"""Interaction logs, item records, user histories and the leave-one-out split."""
from __future__ import annotations

import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import rng_for
from .errors import DataError


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    review_text: str | None = None

    def __post_init__(self):
        if not self.user_id or not self.item_id:
            raise DataError("user_id and item_id must be non-empty")
        if self.timestamp < 0:
            raise DataError(f"negative timestamp {self.timestamp}")


@dataclass(frozen=True)
class ItemRecord:
    item_id: str
    title: str
    description: str


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    items: tuple[str, ...]
    timestamps: tuple[int, ...] = ()

    def __len__(self):
        return len(self.items)


@dataclass
class Split:
    """Leave-one-out split.

    ``train_histories`` maps user -> the first S-1 items, ``eval_pairs`` maps
    user -> (prompt items, label item).  Both sides cover the same users.
    """

    train_histories: dict[str, list[str]]
    eval_pairs: dict[str, tuple[list[str], str]]
    skipped_users: int = 0
    reviews: dict[tuple[str, str], str] = field(default_factory=dict)

    @property
    def labels(self) -> dict[str, str]:
        return {u: label for u, (_, label) in self.eval_pairs.items()}


# -- file formats -----------------------------------------------------------

_REQUIRED = ("user_id", "item_id", "ts")


def load_interactions(path) -> list[Interaction]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(obj, dict):
                raise DataError(f"line {lineno}: expected a JSON object")
            for key in _REQUIRED:
                if key not in obj:
                    raise DataError(f"line {lineno}: missing field {key}")
            user, item, ts = obj["user_id"], obj["item_id"], obj["ts"]
            if not isinstance(user, str) or not isinstance(item, str) or not user or not item:
                raise DataError(f"line {lineno}: user_id and item_id must be non-empty strings")
            if isinstance(ts, bool) or not isinstance(ts, int) or ts < 0:
                raise DataError(f"line {lineno}: ts must be a non-negative integer")
            review = obj.get("review")
            if review is not None and not isinstance(review, str):
                raise DataError(f"line {lineno}: review must be a string")
            out.append(Interaction(user, item, ts, review))
    return out


def save_interactions(interactions, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in interactions:
            obj = {"user_id": it.user_id, "item_id": it.item_id, "ts": it.timestamp}
            if it.review_text is not None:
                obj["review"] = it.review_text
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


def load_items(path) -> list[ItemRecord]:
    out = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            obj = json.loads(line)
            for key in ("item_id", "title", "description"):
                if key not in obj:
                    raise DataError(f"line {lineno}: missing field {key}")
            if obj["item_id"] in seen:
                raise DataError(f"line {lineno}: duplicate item_id {obj['item_id']}")
            seen.add(obj["item_id"])
            out.append(ItemRecord(obj["item_id"], obj["title"], obj["description"]))
    return out


def save_items(items, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for it in items:
            obj = {"item_id": it.item_id, "title": it.title, "description": it.description}
            fh.write(json.dumps(obj, ensure_ascii=False) + "\n")


# -- histories and split ----------------------------------------------------

def build_histories(interactions, max_history: int = 20) -> list[UserHistory]:
    """Group by user, sort by timestamp (stable), keep the last ``max_history``.

    Users appear in order of their first interaction in the input.
    """
    if max_history < 2:
        raise ValueError("max_history must be >= 2")
    by_user: dict[str, list[Interaction]] = defaultdict(list)
    for it in interactions:
        by_user[it.user_id].append(it)
    out = []
    for user, rows in by_user.items():
        rows = sorted(rows, key=lambda r: r.timestamp)[-max_history:]
        out.append(UserHistory(user, tuple(r.item_id for r in rows),
                               tuple(r.timestamp for r in rows)))
    return out


def split_leave_one_out(histories, min_length: int = 3) -> Split:
    train, evals = {}, {}
    skipped = 0
    for h in histories:
        items = list(h.items)
        if len(items) < min_length:
            skipped += 1
            continue
        train[h.user_id] = items[:-1]
        evals[h.user_id] = (items[:-1], items[-1])
    return Split(train, evals, skipped)


def collect_reviews(interactions) -> dict[tuple[str, str], str]:
    """(user, item) -> review text; later reviews overwrite earlier ones."""
    out = {}
    for it in sorted(interactions, key=lambda r: r.timestamp):
        if it.review_text:
            out[(it.user_id, it.item_id)] = it.review_text
    return out


def make_split(interactions, max_history: int = 20) -> Split:
    split = split_leave_one_out(build_histories(interactions, max_history))
    split.reviews = collect_reviews(interactions)
    return split


# -- synthetic planted-pattern data -----------------------------------------

_ADJECTIVES = (
    "red", "blue", "green", "silver", "golden", "dark", "bright", "tiny", "giant", "quiet",
    "rapid", "ancient", "modern", "wooden", "electric", "cosmic", "frozen", "wild", "gentle",
    "heavy", "royal", "hidden", "lucky", "broken", "crystal",
)
_NOUNS = (
    "lamp", "guitar", "dragon", "castle", "racer", "puzzle", "knight", "rocket", "garden",
    "brush", "drum", "canvas", "piano", "sword", "island", "robot", "violin", "planet",
    "marker", "forest", "engine", "harp", "tower", "pirate", "easel",
)
_CATEGORIES = ("game", "art", "instrument", "toy", "tool")
_FEATURES = (
    "classic", "deluxe", "portable", "handmade", "limited", "edition", "set", "kit",
    "collector", "starter", "professional", "multiplayer", "acoustic", "digital", "vintage",
)
_OPINIONS = ("loved the", "really enjoyed this", "great value", "not bad", "fun with the")


def planted_successors(n_items: int, seed: int) -> np.ndarray:
    """Seeded successor map ``next`` forming one cycle over all items."""
    order = rng_for(seed, "successor").permutation(n_items)
    nxt = np.empty(n_items, dtype=np.int64)
    nxt[order] = np.roll(order, -1)
    return nxt


def synthetic_item_ids(n_items: int) -> list[str]:
    width = max(4, len(str(n_items - 1)))
    return [f"item{i:0{width}d}" for i in range(n_items)]


def generate_synthetic(n_users: int, n_items: int, chain_noise: float, seed: int, *,
                       min_len: int = 4, max_len: int = 14, review_rate: float = 0.3,
                       ) -> tuple[list[Interaction], list[ItemRecord]]:
    """Planted-chain data: each step follows ``next(i)`` with prob 1 - chain_noise.

    Otherwise the next item is drawn uniformly from the whole catalog.
    """
    if n_items < 2:
        raise ValueError("n_items must be >= 2")
    if not 0.0 <= chain_noise <= 1.0 or chain_noise != chain_noise:
        raise ValueError(f"chain_noise must be a probability, got {chain_noise}")
    if not 1 <= min_len <= max_len:
        raise ValueError("need 1 <= min_len <= max_len")

    ids = synthetic_item_ids(n_items)
    rng = rng_for(seed, "items")
    items = []
    for i, item_id in enumerate(ids):
        adj, noun = rng.choice(_ADJECTIVES), rng.choice(_NOUNS)
        cat = _CATEGORIES[i % len(_CATEGORIES)]
        feats = rng.choice(_FEATURES, size=3, replace=False)
        items.append(ItemRecord(
            item_id,
            f"{adj} {noun} {i}",
            f"a {feats[0]} {cat} {noun} {feats[1]} {feats[2]}",
        ))

    nxt = planted_successors(n_items, seed)
    rng = rng_for(seed, "users")
    width = max(4, len(str(n_users - 1)))
    interactions = []
    for u in range(n_users):
        user = f"user{u:0{width}d}"
        length = int(rng.integers(min_len, max_len + 1))
        ts = int(rng.integers(1_500_000_000, 1_600_000_000))
        cur = int(rng.integers(n_items))
        for step in range(length):
            if step:
                if rng.random() < chain_noise:
                    cur = int(rng.integers(n_items))
                else:
                    cur = int(nxt[cur])
                ts += int(rng.integers(60, 86_400))
            review = None
            if rng.random() < review_rate:
                review = f"{rng.choice(_OPINIONS)} {items[cur].title}"
            interactions.append(Interaction(user, ids[cur], ts, review))
    return interactions, items
