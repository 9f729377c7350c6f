"""Behavior embeddings (skip-gram with negative sampling) and hashed text embeddings."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Literal

import numpy as np

from ._util import format_floats, parse_floats, parse_header, rng_for, words
from .errors import DataError

Kind = Literal["behavior", "semantic"]


@dataclass
class EmbeddingTable:
    dim: int
    vectors: dict[str, np.ndarray]
    kind: Kind

    def __post_init__(self):
        if self.kind not in ("behavior", "semantic"):
            raise ValueError(f"unknown embedding kind {self.kind!r}")
        for item, vec in self.vectors.items():
            if vec.shape != (self.dim,):
                raise DataError(f"{item}: vector has shape {vec.shape}, expected ({self.dim},)")
            if not np.all(np.isfinite(vec)):
                raise DataError(f"{item}: non-finite embedding component")
            if self.kind == "semantic" and abs(np.linalg.norm(vec) - 1.0) > 1e-6:
                raise DataError(f"{item}: semantic vectors must have unit norm")

    def __getitem__(self, item_id: str) -> np.ndarray:
        try:
            return self.vectors[item_id]
        except KeyError:
            raise KeyError(f"no {self.kind} embedding for item {item_id!r}") from None

    def __contains__(self, item_id):
        return item_id in self.vectors

    def __len__(self):
        return len(self.vectors)

    @property
    def item_ids(self) -> list[str]:
        return list(self.vectors)

    def matrix(self, item_ids=None) -> np.ndarray:
        ids = self.item_ids if item_ids is None else item_ids
        return np.stack([self[i] for i in ids]) if ids else np.zeros((0, self.dim))

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"dim={self.dim} kind={self.kind}\n")
            for item, vec in self.vectors.items():
                fh.write(f"{item}\t{format_floats(vec)}\n")

    @classmethod
    def load(cls, path) -> EmbeddingTable:
        with open(path, encoding="utf-8") as fh:
            header = parse_header(fh.readline())
            dim, kind = int(header["dim"]), header["kind"]
            vectors = {}
            for lineno, line in enumerate(fh, 2):
                line = line.rstrip("\n")
                if not line:
                    continue
                item, sep, values = line.partition("\t")
                if not sep:
                    raise DataError(f"line {lineno}: expected item_id<TAB>values")
                vectors[item] = parse_floats(values)
        return cls(dim, vectors, kind)


# -- behavior embeddings ----------------------------------------------------

def _skipgram_pairs(histories, index, window):
    centers, contexts = [], []
    for h in histories:
        seq = [index[i] for i in h]
        for pos, c in enumerate(seq):
            lo, hi = max(0, pos - window), min(len(seq), pos + window + 1)
            for other in range(lo, hi):
                if other != pos:
                    centers.append(c)
                    contexts.append(seq[other])
    return np.array(centers, dtype=np.int64), np.array(contexts, dtype=np.int64)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def train_behavior_embeddings(histories, dim: int = 32, window: int = 2, epochs: int = 30,
                              learning_rate: float = 0.05, negatives_per_pair: int = 5,
                              seed: int = 0, batch_size: int = 256) -> EmbeddingTable:
    """Skip-gram with negative sampling over co-occurrence windows.

    ``histories`` is an iterable of item-id sequences (or UserHistory objects).
    Negatives are drawn from the unigram distribution raised to 0.75.  Returns
    the input ("center") vectors.
    """
    if dim < 2:
        raise ValueError("dim must be >= 2")
    seqs = [list(getattr(h, "items", h)) for h in histories]
    vocab = list(dict.fromkeys(i for s in seqs for i in s))
    if not any(len(s) >= 2 for s in seqs):
        raise DataError("empty corpus: need at least one history with >= 2 items")
    index = {item: k for k, item in enumerate(vocab)}
    centers, contexts = _skipgram_pairs(seqs, index, window)

    counts = np.bincount(np.concatenate([centers, contexts]), minlength=len(vocab)).astype(float)
    noise = counts ** 0.75
    noise /= noise.sum()
    noise_cdf = np.cumsum(noise)

    rng = rng_for(seed, "sgns")
    w_in = (rng.random((len(vocab), dim)) - 0.5) / dim
    w_out = np.zeros((len(vocab), dim))
    n_pairs = len(centers)
    for epoch in range(epochs):
        lr = learning_rate * (1.0 - epoch / epochs) + 1e-4
        order = rng.permutation(n_pairs)
        for start in range(0, n_pairs, batch_size):
            idx = order[start:start + batch_size]
            c, o = centers[idx], contexts[idx]
            neg = np.searchsorted(noise_cdf, rng.random((len(idx), negatives_per_pair)))
            neg = np.minimum(neg, len(vocab) - 1)
            targets = np.concatenate([o[:, None], neg], axis=1)          # [b, 1+k]
            labels = np.zeros(targets.shape)
            labels[:, 0] = 1.0
            v_c = w_in[c]                                               # [b, d]
            v_t = w_out[targets]                                        # [b, 1+k, d]
            scores = np.einsum("bd,bkd->bk", v_c, v_t)
            g = _sigmoid(scores) - labels                               # dL/dscore
            grad_c = np.einsum("bk,bkd->bd", g, v_t)
            grad_t = g[:, :, None] * v_c[:, None, :]
            np.add.at(w_in, c, -lr * grad_c)
            np.add.at(w_out, targets.ravel(), -lr * grad_t.reshape(-1, dim))
    return EmbeddingTable(dim, {item: w_in[k].copy() for item, k in index.items()}, "behavior")


# -- text embeddings ---------------------------------------------------------

def _hash_token(token: str, seed: int) -> int:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8,
                             key=str(int(seed)).encode()).digest()
    return int.from_bytes(digest, "little")


def text_embedding(item, dim: int = 64, seed: int = 0) -> np.ndarray:
    """Feature-hashed bag of words over title + description, averaged then L2-normalized.

    Bucket from the low hash bits, sign from the top bit.
    """
    tokens = words(f"{item.title} {item.description}")
    if not tokens:
        raise DataError("item has no text tokens")
    vec = np.zeros(dim)
    for tok in tokens:
        h = _hash_token(tok, seed)
        vec[h % dim] += 1.0 if (h >> 63) else -1.0
    vec /= len(tokens)
    norm = np.linalg.norm(vec)
    if norm == 0.0:
        # every token cancelled out under the sign hash
        vec[_hash_token(tokens[0], seed) % dim] = 1.0
        return vec
    return vec / norm


class RandomProjection:
    """Seeded Gaussian linear map ``R^input_dim -> R^target_dim``.

    Entries are N(0, 1) / sqrt(target_dim), so squared norms are preserved in
    expectation.
    """

    def __init__(self, input_dim: int, target_dim: int, seed: int = 0):
        if not input_dim >= target_dim >= 1:
            raise ValueError("need input_dim >= target_dim >= 1")
        self.input_dim, self.target_dim, self.seed = input_dim, target_dim, seed
        rng = rng_for(seed, "projection", input_dim, target_dim)
        self.matrix = rng.standard_normal((target_dim, input_dim)) / np.sqrt(target_dim)

    def __call__(self, vector) -> np.ndarray:
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape[-1] != self.input_dim:
            raise DataError(f"projection expects dim {self.input_dim}, got {vector.shape[-1]}")
        return vector @ self.matrix.T


def project(vector, target_dim: int, seed: int = 0) -> np.ndarray:
    vector = np.asarray(vector, dtype=np.float64)
    return RandomProjection(vector.shape[-1], target_dim, seed)(vector)


def semantic_table(items, dim: int, text_dim: int = 64, seed: int = 0) -> EmbeddingTable:
    """Text embeddings for ``items`` projected to ``dim`` and renormalized to unit length."""
    proj = RandomProjection(text_dim, dim, seed) if text_dim != dim else None
    vectors = {}
    for item in items:
        vec = text_embedding(item, text_dim, seed)
        if proj is not None:
            vec = proj(vec)
            vec = vec / np.linalg.norm(vec)
        vectors[item.item_id] = vec
    return EmbeddingTable(dim, vectors, "semantic")
