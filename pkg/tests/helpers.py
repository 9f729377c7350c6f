"""Shared builders for tests."""
import numpy as np

from alignrec.embeddings import EmbeddingTable


def tables(behavior, semantic=None, seed=0):
    """Behavior/semantic tables over ids it0000.. from arrays (semantic made unit norm)."""
    behavior = np.asarray(behavior, dtype=np.float64)
    n, d = behavior.shape
    if semantic is None:
        semantic = np.random.default_rng(seed).standard_normal((n, d))
    semantic = semantic / np.linalg.norm(semantic, axis=1, keepdims=True)
    ids = [f"it{k:04d}" for k in range(n)]
    return (EmbeddingTable(d, dict(zip(ids, behavior)), "behavior"),
            EmbeddingTable(d, dict(zip(ids, semantic)), "semantic"))


def gaussian_mixture(n, dim, n_clusters, seed, spread=0.3):
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, dim)) * 2.0
    which = rng.integers(n_clusters, size=n)
    return centers[which] + spread * rng.standard_normal((n, dim))


class TableModel:
    """Toy scorer: log-probs depend on (prefix length, last token) through a random table."""

    def __init__(self, vocab_size, max_len, seed):
        rng = np.random.default_rng(seed)
        logits = rng.standard_normal((max_len + 1, vocab_size, vocab_size)) * 2.0
        self.table = logits - np.log(np.exp(logits).sum(-1, keepdims=True))

    def __call__(self, prefix):
        return self.table[len(prefix), prefix[-1]]


def exhaustive_ranking(model, prompt, trie):
    """Score every valid code sequence by summed log-probs, best first, ties by sequence."""
    scored = []
    for sid in trie.semantic_ids():
        total, seq = 0.0, list(prompt)
        for level, code in enumerate(sid):
            total = float(total + model(seq)[trie.token(level, code)])
            seq.append(trie.token(level, code))
        scored.append((sid, total))
    scored.sort(key=lambda r: (-r[1], r[0]))
    return scored


def random_sids(rng, n_items, levels, codes):
    return {f"it{k:04d}": tuple(int(c) for c in rng.integers(codes, size=levels))
            for k in range(n_items)}


# one line per acceptance criterion, echoed again in the terminal summary
ACCEPTANCE = []


def verdict(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return line
