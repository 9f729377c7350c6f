"""Cascaded residual codebooks with behavior- and LLM-alignment losses.

Each level quantizes the residual left by the previous levels.  Codes are fit
by alternating minimization: assign every item to a code, then move each code
to the closed-form minimizer of

    sum_assigned Dist(E_i, B) + llm_loss_weight * sum_assigned Dist(B, S_i)

where ``E_i`` is the item's residual at this level and ``S_i`` its semantic
(text) embedding.  For squared Euclidean distance the minimizer is
``(mean E + w * mean S) / (1 + w)``.
"""
from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import asdict, dataclass, field, replace
from typing import Literal

import numpy as np

from ._util import format_floats, parse_floats, parse_header, rng_for
from .errors import DataError

SemanticId = tuple[int, ...]

Distance = Literal["squared_euclidean", "cosine"]
ResidualMode = Literal["plain", "absolute"]
AssignmentMode = Literal["behavior_only", "joint"]

_CHUNK = 512


@dataclass(frozen=True)
class CodeBookConfig:
    levels: int = 4
    codes_per_level: int = 256
    dim: int = 32
    distance: Distance = "squared_euclidean"
    residual_mode: ResidualMode = "plain"
    llm_loss_weight: float = 1.0
    assignment_mode: AssignmentMode = "behavior_only"
    max_iters: int = 50
    init_iters: int = 25
    seed: int = 0
    # False keeps iterating to max_iters after the assignment stops changing
    stop_on_convergence: bool = True

    def __post_init__(self):
        if self.levels < 1 or self.codes_per_level < 1 or self.dim < 1:
            raise ValueError("levels, codes_per_level and dim must all be >= 1")
        if self.distance not in ("squared_euclidean", "cosine"):
            raise ValueError(f"unknown distance {self.distance!r}")
        if self.residual_mode not in ("plain", "absolute"):
            raise ValueError(f"unknown residual_mode {self.residual_mode!r}")
        if self.assignment_mode not in ("behavior_only", "joint"):
            raise ValueError(f"unknown assignment_mode {self.assignment_mode!r}")
        if not self.llm_loss_weight >= 0:
            raise ValueError("llm_loss_weight must be >= 0")


@dataclass
class CodeBook:
    config: CodeBookConfig
    levels: np.ndarray  # [N, C, D]

    def __post_init__(self):
        cfg = self.config
        expected = (cfg.levels, cfg.codes_per_level, cfg.dim)
        if self.levels.shape != expected:
            raise DataError(f"codebook has shape {self.levels.shape}, expected {expected}")
        if not np.all(np.isfinite(self.levels)):
            raise DataError("codebook contains non-finite values")

    def checksum(self) -> str:
        h = hashlib.sha256(self._header().encode())
        h.update(np.ascontiguousarray(self.levels, dtype="<f8").tobytes())
        return h.hexdigest()[:16]

    def _header(self) -> str:
        c = self.config
        return (f"levels={c.levels} codes={c.codes_per_level} dim={c.dim} "
                f"distance={c.distance} residual={c.residual_mode}")

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self._header() + "\n")
            for n, level in enumerate(self.levels):
                for j, vec in enumerate(level):
                    fh.write(f"{n}\t{j}\t{format_floats(vec)}\n")

    @classmethod
    def load(cls, path) -> CodeBook:
        with open(path, encoding="utf-8") as fh:
            head = parse_header(fh.readline())
            cfg = CodeBookConfig(levels=int(head["levels"]), codes_per_level=int(head["codes"]),
                                 dim=int(head["dim"]), distance=head["distance"],
                                 residual_mode=head["residual"])
            levels = np.full((cfg.levels, cfg.codes_per_level, cfg.dim), np.nan)
            for lineno, line in enumerate(fh, 2):
                if not line.strip():
                    continue
                n, j, values = line.rstrip("\n").split("\t")
                vec = parse_floats(values)
                if vec.shape != (cfg.dim,):
                    raise DataError(f"line {lineno}: expected {cfg.dim} values")
                levels[int(n), int(j)] = vec
        return cls(cfg, levels)


@dataclass
class LevelReport:
    loss_behavior: list[float] = field(default_factory=list)
    loss_llm: list[float] = field(default_factory=list)
    loss_total: list[float] = field(default_factory=list)
    iterations: int = 0
    mean_quantization_error: float = float("nan")


@dataclass
class TrainReport:
    config: CodeBookConfig
    levels: list[LevelReport]
    collision_rate: float
    iterations_run: int

    @property
    def final_loss_behavior(self) -> float:
        return sum(lv.loss_behavior[-1] for lv in self.levels if lv.loss_behavior)

    @property
    def final_loss_llm(self) -> float:
        return sum(lv.loss_llm[-1] for lv in self.levels if lv.loss_llm)

    def to_dict(self) -> dict:
        return {"config": asdict(self.config),
                "levels": [asdict(lv) for lv in self.levels],
                "collision_rate": self.collision_rate,
                "iterations_run": self.iterations_run}


# -- distances ----------------------------------------------------------------

def pairwise_distance(x: np.ndarray, codes: np.ndarray, distance: Distance = "squared_euclidean"
                      ) -> np.ndarray:
    """[n, D] x [C, D] -> [n, C].  Squared distances use explicit differences, not the
    expanded ``|x|^2 - 2xc + |c|^2`` form, so an exact match gives exactly 0."""
    x = np.atleast_2d(x)
    out = np.empty((len(x), len(codes)))
    if distance == "squared_euclidean":
        for s in range(0, len(x), _CHUNK):
            diff = x[s:s + _CHUNK, None, :] - codes[None, :, :]
            out[s:s + _CHUNK] = np.einsum("ncd,ncd->nc", diff, diff)
    elif distance == "cosine":
        xn = np.linalg.norm(x, axis=1)
        cn = np.linalg.norm(codes, axis=1)
        denom = np.outer(xn, cn)
        sim = np.divide(x @ codes.T, denom, out=np.zeros_like(out), where=denom > 0)
        out[:] = 1.0 - sim
    else:
        raise ValueError(f"unknown distance {distance!r}")
    return out


def rowwise_distance(a: np.ndarray, b: np.ndarray, distance: Distance = "squared_euclidean"
                     ) -> np.ndarray:
    if distance == "squared_euclidean":
        diff = a - b
        return np.einsum("nd,nd->n", diff, diff)
    an, bn = np.linalg.norm(a, axis=1), np.linalg.norm(b, axis=1)
    denom = an * bn
    dots = np.einsum("nd,nd->n", a, b)
    return 1.0 - np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)


def assign(residual, level_codes, distance: Distance = "squared_euclidean") -> int:
    """Index of the nearest code; ties go to the lowest index."""
    residual = np.asarray(residual, dtype=np.float64)
    level_codes = np.asarray(level_codes, dtype=np.float64)
    if residual.shape[-1] != level_codes.shape[-1]:
        raise DataError(f"dimension mismatch: residual {residual.shape[-1]}, "
                        f"codes {level_codes.shape[-1]}")
    return int(np.argmin(pairwise_distance(residual[None, :], level_codes, distance)[0]))


# -- per-level fitting ----------------------------------------------------------

def _update_codes(e, s, labels, codes, weight, distance):
    n_codes, dim = codes.shape
    counts = np.bincount(labels, minlength=n_codes)
    sum_e = np.zeros((n_codes, dim))
    np.add.at(sum_e, labels, e)
    new = codes.copy()
    used = counts > 0
    mean_e = sum_e[used] / counts[used, None]
    if s is not None and weight > 0:
        sum_s = np.zeros((n_codes, dim))
        np.add.at(sum_s, labels, s)
        target = (mean_e + weight * (sum_s[used] / counts[used, None])) / (1.0 + weight)
    else:
        target = mean_e
    if distance == "cosine":
        norms = np.linalg.norm(target, axis=1, keepdims=True)
        ok = norms[:, 0] > 0
        target[ok] /= norms[ok]
        target[~ok] = codes[used][~ok]
    new[used] = target
    return new, counts


def _reseed_empty(e, codes, labels, counts, distance):
    """Move codes nobody uses onto the currently worst-quantized residuals."""
    empty = np.flatnonzero(counts == 0)
    if len(empty) == 0:
        return codes
    err = rowwise_distance(e, codes[labels], distance)
    worst = np.argsort(-err, kind="stable")
    codes = codes.copy()
    for code, point in zip(empty, worst):
        if err[point] <= 0:
            break
        codes[code] = e[point]
    return codes


def _kmeans_pp(x, n_codes, rng, distance):
    n = len(x)
    centers = np.empty((n_codes, x.shape[1]))
    centers[0] = x[rng.integers(n)]
    closest = pairwise_distance(x, centers[:1], distance)[:, 0]
    for k in range(1, n_codes):
        total = closest.sum()
        if total <= 0:
            pick = rng.integers(n)
        else:
            cdf = np.cumsum(closest)
            pick = min(int(np.searchsorted(cdf, rng.random() * total, side="right")), n - 1)
        centers[k] = x[pick]
        closest = np.minimum(closest, pairwise_distance(x, centers[k:k + 1], distance)[:, 0])
    return centers


def init_level(residuals, n_codes: int, seed: int = 0, *, distance: Distance = "squared_euclidean",
               iters: int = 25) -> np.ndarray:
    """k-means++ seeding then capped Lloyd iterations on the residuals alone.

    With fewer distinct residuals than ``n_codes``, every distinct residual becomes a
    code and the surplus codes sit at the mean residual plus 1e-6 seeded jitter.
    """
    x = np.atleast_2d(np.asarray(residuals, dtype=np.float64))
    if len(x) == 0:
        raise ValueError("init_level needs at least one residual")
    rng = rng_for(seed, "init_level")
    _, first = np.unique(x, axis=0, return_index=True)
    if len(first) <= n_codes:
        distinct = x[np.sort(first)]
        extra = n_codes - len(distinct)
        jitter = rng.standard_normal((extra, x.shape[1]))
        jitter *= 1e-6 / np.maximum(np.linalg.norm(jitter, axis=1, keepdims=True), 1e-300)
        return np.concatenate([distinct, x.mean(axis=0) + jitter])

    codes = _kmeans_pp(x, n_codes, rng, distance)
    labels = None
    for _ in range(iters):
        new_labels = np.argmin(pairwise_distance(x, codes, distance), axis=1)
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        codes, counts = _update_codes(x, None, labels, codes, 0.0, distance)
        codes = _reseed_empty(x, codes, labels, counts, distance)
    return codes


def _next_residual(e, chosen, mode):
    diff = e - chosen
    return np.abs(diff) if mode == "absolute" else diff


def train_codebooks(behavior, semantic, config: CodeBookConfig) -> tuple[CodeBook, TrainReport]:
    """Fit ``config.levels`` codebooks in cascade order and report loss trajectories.

    ``behavior`` and ``semantic`` are EmbeddingTables over the same item set, both
    of dimension ``config.dim``.  Losses are totals over items.
    """
    if set(behavior.item_ids) != set(semantic.item_ids):
        raise DataError("behavior and semantic tables cover different item sets")
    if behavior.dim != config.dim or semantic.dim != config.dim:
        raise DataError(f"dimension mismatch: behavior {behavior.dim}, semantic {semantic.dim}, "
                        f"codebook {config.dim}")
    if len(behavior) == 0:
        raise DataError("no items to tokenize")
    item_ids = behavior.item_ids
    e = behavior.matrix(item_ids)
    s = semantic.matrix(item_ids)
    weight = config.llm_loss_weight
    dist = config.distance

    levels, reports = [], []
    total_iters = 0
    for n in range(config.levels):
        codes = init_level(e, config.codes_per_level, seed=config.seed * 1_000_003 + n,
                           distance=dist, iters=config.init_iters)
        rep = LevelReport()
        prev = None
        for _ in range(config.max_iters):
            cost = pairwise_distance(e, codes, dist)
            if config.assignment_mode == "joint" and weight > 0:
                cost = cost + weight * pairwise_distance(s, codes, dist)
            labels = np.argmin(cost, axis=1)
            if config.stop_on_convergence and prev is not None and np.array_equal(labels, prev):
                break
            codes, counts = _update_codes(e, s, labels, codes, weight, dist)
            codes = _reseed_empty(e, codes, labels, counts, dist)
            chosen = codes[labels]
            lb = float(rowwise_distance(e, chosen, dist).sum())
            ll = float(rowwise_distance(chosen, s, dist).sum())
            rep.loss_behavior.append(lb)
            rep.loss_llm.append(ll)
            rep.loss_total.append(lb + weight * ll)
            rep.iterations += 1
            prev = labels
        total_iters += rep.iterations
        # final IDs always come from the nearest-code rule, as tokenize_item does
        labels = np.argmin(pairwise_distance(e, codes, dist), axis=1)
        rep.mean_quantization_error = float(rowwise_distance(e, codes[labels], dist).mean())
        levels.append(codes)
        reports.append(rep)
        e = _next_residual(e, codes[labels], config.residual_mode)

    book = CodeBook(config, np.stack(levels))
    ids = dict(zip(item_ids, encode(book, behavior.matrix(item_ids))))
    rate = collision_report(ids).rate
    return book, TrainReport(config, reports, rate, total_iters)


# -- encoding -----------------------------------------------------------------

def encode(codebook: CodeBook, vectors, *, return_residual: bool = False):
    """Greedy cascade over a batch of vectors; returns a list of SemanticIds."""
    x = np.atleast_2d(np.asarray(vectors, dtype=np.float64))
    cfg = codebook.config
    if x.shape[1] != cfg.dim:
        raise DataError(f"dimension mismatch: vector {x.shape[1]}, codebook {cfg.dim}")
    codes = np.empty((len(x), cfg.levels), dtype=np.int64)
    residual = x
    for n, level in enumerate(codebook.levels):
        codes[:, n] = np.argmin(pairwise_distance(residual, level, cfg.distance), axis=1)
        residual = _next_residual(residual, level[codes[:, n]], cfg.residual_mode)
    ids = [tuple(int(c) for c in row) for row in codes]
    return (ids, residual) if return_residual else ids


def tokenize_item(behavior_vector, codebook: CodeBook, *, return_residual: bool = False):
    ids, residual = encode(codebook, np.asarray(behavior_vector)[None, :], return_residual=True)
    return (ids[0], residual[0]) if return_residual else ids[0]


def encode_table(codebook: CodeBook, table) -> dict[str, SemanticId]:
    ids = table.item_ids
    return dict(zip(ids, encode(codebook, table.matrix(ids))))


def reconstruct(codebook: CodeBook, sid: SemanticId) -> np.ndarray:
    """Sum of the chosen code vectors (plain residual mode inverts the cascade)."""
    return sum(codebook.levels[n, c] for n, c in enumerate(sid))


# -- collisions ---------------------------------------------------------------

@dataclass
class CollisionReport:
    rate: float
    groups: dict[SemanticId, list[str]]


def collision_report(ids: dict[str, SemanticId]) -> CollisionReport:
    """Fraction of items whose full code sequence is shared with another item."""
    members = defaultdict(list)
    for item, sid in ids.items():
        members[tuple(sid)].append(item)
    groups = {sid: sorted(items) for sid, items in members.items() if len(items) > 1}
    colliding = sum(len(g) for g in groups.values())
    rate = colliding / len(ids) if ids else 0.0
    return CollisionReport(rate, dict(sorted(groups.items())))


# -- semantic-id map file -------------------------------------------------------

def save_semantic_ids(ids: dict[str, SemanticId], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for item, sid in ids.items():
            fh.write(f"{item}\t{','.join(str(c) for c in sid)}\n")


def load_semantic_ids(path) -> dict[str, SemanticId]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            item, sep, codes = line.partition("\t")
            if not sep:
                raise DataError(f"line {lineno}: expected item_id<TAB>codes")
            out[item] = tuple(int(c) for c in codes.split(","))
    return out


def with_levels(config: CodeBookConfig, levels: int) -> CodeBookConfig:
    return replace(config, levels=levels)
