"""Stage-by-stage orchestration with file artifacts in one output directory.

Stages run in the order synth -> embed -> tokenize -> corpus -> train -> cache ->
eval.  Each stage reads what earlier stages wrote, so any stage can be rerun on
its own.
"""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields, is_dataclass
from pathlib import Path

from . import catalog, corpus, decode, embeddings, evaluation, seqmodel, tokenizer
from ._util import derive_seed
from .errors import ArtifactError

log = logging.getLogger(__name__)

STAGES = ("synth", "embed", "tokenize", "corpus", "train", "cache", "eval")

ARTIFACTS = {
    "interactions": "interactions.jsonl",
    "items": "items.jsonl",
    "behavior": "behavior.emb",
    "semantic": "semantic.emb",
    "codebook": "codebook.txt",
    "semantic_ids": "semantic_ids.tsv",
    "tokenizer_report": "tokenizer_report.json",
    "vocab": "vocab.txt",
    "corpus": "corpus.jsonl",
    "corpus_stats": "corpus_stats.json",
    "model": "model.ckpt",
    "train_log": "train_log.json",
    "cache": "cache.tsv",
    "metrics": "metrics.json",
    "baseline": "baseline.json",
    "report": "report.txt",
}


@dataclass
class SynthStage:
    # with both paths set the stage copies these files instead of generating data
    interactions: str | None = None
    items: str | None = None
    n_users: int = 500
    n_items: int = 100
    chain_noise: float = 0.1
    min_len: int = 4
    max_len: int = 14
    review_rate: float = 0.3
    max_history: int = 20
    seed: int | None = None


@dataclass
class EmbedStage:
    dim: int = 32
    window: int = 2
    epochs: int = 30
    learning_rate: float = 0.05
    negatives_per_pair: int = 5
    text_dim: int = 64
    # externally computed tables in the embeddings file format
    behavior_file: str | None = None
    semantic_file: str | None = None
    seed: int | None = None


@dataclass
class TokenizeStage:
    levels: int = 4
    codes_per_level: int = 16
    distance: str = "squared_euclidean"
    residual_mode: str = "plain"
    llm_loss_weight: float = 1.0
    assignment_mode: str = "behavior_only"
    max_iters: int = 50
    init_iters: int = 25
    seed: int | None = None


@dataclass
class CorpusStage:
    nsr: str = "1:0"
    max_prompt_len: int = 256
    min_count: int = 1
    task_mix: dict = field(default_factory=lambda: {k: 1 for k in corpus.TASK_KINDS})
    inference_prompt_rate: float = 0.5
    seed: int | None = None


@dataclass
class ModelStage:
    context_len: int = 256
    model_dim: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_dim: int = 256
    dropout: float = 0.0
    tie_embeddings: bool = False


@dataclass
class TrainStage:
    model: ModelStage = field(default_factory=ModelStage)
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # the budget is in passes over the corpus so extra tasks add steps; an explicit
    # ``steps`` overrides it
    epochs: float = 6.5
    steps: int | None = None
    batch_size: int = 16
    grad_clip: float | None = 1.0
    warmup_steps: int = 50
    schedule: str = "cosine"
    log_every: int = 200
    seed: int | None = None


@dataclass
class CacheStage:
    k: int = 10
    beam_width: int = 20


@dataclass
class EvalStage:
    ks: list = field(default_factory=lambda: [1, 5, 10])
    mode: str = "cache"  # or "live"
    exclude_seen: bool = False


@dataclass
class PipelineConfig:
    seed: int = 0
    out: str = "runs/default"
    synth: SynthStage = field(default_factory=SynthStage)
    embed: EmbedStage = field(default_factory=EmbedStage)
    tokenize: TokenizeStage = field(default_factory=TokenizeStage)
    corpus: CorpusStage = field(default_factory=CorpusStage)
    train: TrainStage = field(default_factory=TrainStage)
    cache: CacheStage = field(default_factory=CacheStage)
    eval: EvalStage = field(default_factory=EvalStage)

    @classmethod
    def from_dict(cls, data: dict) -> PipelineConfig:
        return _from_dict(cls, data, "")

    @classmethod
    def load(cls, path) -> PipelineConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self) -> dict:
        return asdict(self)

    def stage_seed(self, stage: str) -> int:
        explicit = getattr(getattr(self, stage), "seed", None)
        return explicit if explicit is not None else derive_seed(self.seed, stage) % (2 ** 31)

    def set(self, dotted: str, value) -> None:
        """Override one key, e.g. ``set("train.steps", 500)``."""
        *path, last = dotted.split(".")
        target = self
        for part in path:
            if not hasattr(target, part):
                raise ValueError(f"unknown config key {dotted!r}")
            target = getattr(target, part)
        if not is_dataclass(target) or last not in {f.name for f in fields(target)}:
            raise ValueError(f"unknown config key {dotted!r}")
        setattr(target, last, value)


def _from_dict(cls, data, prefix):
    if not isinstance(data, dict):
        raise ValueError(f"config section {prefix or '<root>'} must be an object")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown config key {prefix + key!r}")
        default = known[key].default_factory() if callable(known[key].default_factory) else None
        if is_dataclass(default):
            kwargs[key] = _from_dict(type(default), value, f"{prefix}{key}.")
        elif key == "task_mix":
            mix = {k: 1 for k in corpus.TASK_KINDS}
            mix.update(value)
            kwargs[key] = mix
        else:
            kwargs[key] = value
    return cls(**kwargs)


# -- artifacts ------------------------------------------------------------------------

class Workspace:
    def __init__(self, out):
        self.root = Path(out)

    def path(self, name: str) -> Path:
        return self.root / ARTIFACTS[name]

    def need(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise ArtifactError(f"missing artifact: {name}")
        return p


@dataclass
class PipelineResult:
    artifacts: dict[str, Path]
    report: evaluation.EvalReport | None = None
    timings: dict[str, float] = field(default_factory=dict)


def _split(cfg, ws):
    inter = catalog.load_interactions(ws.need("interactions"))
    return catalog.make_split(inter, cfg.synth.max_history)


def stage_synth(cfg: PipelineConfig, ws: Workspace) -> None:
    s = cfg.synth
    if s.interactions and s.items:
        inter = catalog.load_interactions(s.interactions)
        items = catalog.load_items(s.items)
    else:
        inter, items = catalog.generate_synthetic(
            s.n_users, s.n_items, s.chain_noise, cfg.stage_seed("synth"),
            min_len=s.min_len, max_len=s.max_len, review_rate=s.review_rate)
    catalog.save_interactions(inter, ws.path("interactions"))
    catalog.save_items(items, ws.path("items"))


def stage_embed(cfg: PipelineConfig, ws: Workspace) -> None:
    e = cfg.embed
    seed = cfg.stage_seed("embed")
    split = _split(cfg, ws)
    items = catalog.load_items(ws.need("items"))
    if e.behavior_file:
        behavior = embeddings.EmbeddingTable.load(e.behavior_file)
    else:
        behavior = embeddings.train_behavior_embeddings(
            list(split.train_histories.values()), dim=e.dim, window=e.window, epochs=e.epochs,
            learning_rate=e.learning_rate, negatives_per_pair=e.negatives_per_pair, seed=seed)
    # the catalog is every item that has a behavior vector and a record
    records = [it for it in items if it.item_id in behavior]
    if e.semantic_file:
        semantic = embeddings.EmbeddingTable.load(e.semantic_file)
    else:
        semantic = embeddings.semantic_table(records, behavior.dim, e.text_dim, seed)
    keep = [it.item_id for it in records if it.item_id in semantic]
    behavior = embeddings.EmbeddingTable(behavior.dim, {i: behavior[i] for i in keep}, "behavior")
    semantic = embeddings.EmbeddingTable(semantic.dim, {i: semantic[i] for i in keep}, "semantic")
    behavior.save(ws.path("behavior"))
    semantic.save(ws.path("semantic"))


def stage_tokenize(cfg: PipelineConfig, ws: Workspace) -> None:
    t = cfg.tokenize
    behavior = embeddings.EmbeddingTable.load(ws.need("behavior"))
    semantic = embeddings.EmbeddingTable.load(ws.need("semantic"))
    book_cfg = tokenizer.CodeBookConfig(
        levels=t.levels, codes_per_level=t.codes_per_level, dim=behavior.dim,
        distance=t.distance, residual_mode=t.residual_mode, llm_loss_weight=t.llm_loss_weight,
        assignment_mode=t.assignment_mode, max_iters=t.max_iters, init_iters=t.init_iters,
        seed=cfg.stage_seed("tokenize"))
    book, report = tokenizer.train_codebooks(behavior, semantic, book_cfg)
    book.save(ws.path("codebook"))
    tokenizer.save_semantic_ids(tokenizer.encode_table(book, behavior), ws.path("semantic_ids"))
    ws.path("tokenizer_report").write_text(json.dumps(report.to_dict(), indent=2))


def stage_corpus(cfg: PipelineConfig, ws: Workspace) -> None:
    c = cfg.corpus
    book = tokenizer.CodeBook.load(ws.need("codebook"))
    sids = tokenizer.load_semantic_ids(ws.need("semantic_ids"))
    items = catalog.load_items(ws.need("items"))
    split = _split(cfg, ws)
    vocab = corpus.extend_vocab(corpus.corpus_texts(items, split.reviews.values()),
                                book.config.levels, book.config.codes_per_level, c.min_count)
    built = corpus.build_corpus(split, items, sids, vocab, c.task_mix, c.nsr, c.max_prompt_len,
                                cfg.stage_seed("corpus"), c.inference_prompt_rate)
    vocab.save(ws.path("vocab"))
    built.save(ws.path("corpus"))
    ws.path("corpus_stats").write_text(json.dumps(
        {"examples": len(built), "generated": dict(built.generated),
         "dropped": dict(built.dropped)}, indent=2))


def stage_train(cfg: PipelineConfig, ws: Workspace) -> None:
    t = cfg.train
    vocab = corpus.Vocab.load(ws.need("vocab"))
    examples = corpus.Corpus.load(ws.need("corpus"))
    seed = cfg.stage_seed("train")
    model_cfg = seqmodel.ModelConfig(vocab_size=len(vocab), seed=seed, **asdict(t.model))
    steps = t.steps if t.steps is not None else math.ceil(t.epochs * len(examples) / t.batch_size)
    settings = seqmodel.TrainSettings(
        learning_rate=t.learning_rate, beta1=t.beta1, beta2=t.beta2, eps=t.eps, steps=steps,
        batch_size=t.batch_size, seed=seed, grad_clip=t.grad_clip, warmup_steps=t.warmup_steps,
        schedule=t.schedule, log_every=t.log_every)
    result = seqmodel.train(examples, model_cfg, settings, pad_id=vocab.pad_id)
    seqmodel.save_checkpoint(result.params, ws.path("model"))
    ws.path("train_log").write_text(json.dumps({"steps": steps, "losses": result.losses}))


def _serving_inputs(cfg, ws):
    vocab = corpus.Vocab.load(ws.need("vocab"))
    sids = tokenizer.load_semantic_ids(ws.need("semantic_ids"))
    trie = decode.build_trie(sids, vocab=vocab)
    return vocab, sids, trie


def stage_cache(cfg: PipelineConfig, ws: Workspace) -> None:
    params = seqmodel.load_checkpoint(ws.need("model"))
    book = tokenizer.CodeBook.load(ws.need("codebook"))
    vocab, sids, trie = _serving_inputs(cfg, ws)
    split = _split(cfg, ws)
    users = [(u, corpus.history_prompt(prompt, vocab, sids, "inference"))
             for u, (prompt, _) in split.eval_pairs.items()]
    cache = decode.precache(params, users, trie, cfg.cache.k, cfg.cache.beam_width,
                            codebook_checksum=book.checksum())
    cache.save(ws.path("cache"))


def stage_eval(cfg: PipelineConfig, ws: Workspace) -> evaluation.EvalReport:
    e = cfg.eval
    vocab, sids, trie = _serving_inputs(cfg, ws)
    split = _split(cfg, ws)
    params = seqmodel.load_checkpoint(ws.need("model"))
    if e.mode == "cache":
        source = decode.CacheFile.load(ws.need("cache"))
        decode.validate_cache(source, params, tokenizer.CodeBook.load(ws.need("codebook")))
    elif e.mode == "live":
        source = params
    else:
        raise ValueError(f"unknown eval mode {e.mode!r}")
    echo = {"seed": cfg.seed, "mode": e.mode, "nsr": cfg.corpus.nsr,
            "levels": cfg.tokenize.levels, "codes_per_level": cfg.tokenize.codes_per_level}
    report = evaluation.evaluate(source, split, trie, e.ks, vocab=vocab, semantic_ids=sids,
                                 beam_width=cfg.cache.beam_width, exclude_seen=e.exclude_seen,
                                 config=echo)
    popular = evaluation.popularity_baseline(split.train_histories, max(e.ks))
    baseline = evaluation.metrics_for({u: popular for u in split.eval_pairs}, split.labels, e.ks)
    ws.path("metrics").write_text(report.to_json())
    ws.path("baseline").write_text(json.dumps({"popularity": baseline}, indent=2))
    ws.path("report").write_text(report.table() + "\n\npopularity baseline: " +
                                 ", ".join(f"{k}={v:.4f}" for k, v in baseline.items()) + "\n")
    return report


_RUNNERS = {"synth": stage_synth, "embed": stage_embed, "tokenize": stage_tokenize,
            "corpus": stage_corpus, "train": stage_train, "cache": stage_cache,
            "eval": stage_eval}


def run_stage(name: str, cfg: PipelineConfig):
    if name not in _RUNNERS:
        raise ValueError(f"unknown stage {name!r}")
    ws = Workspace(cfg.out)
    ws.root.mkdir(parents=True, exist_ok=True)
    return _RUNNERS[name](cfg, ws)


def run_pipeline(cfg: PipelineConfig, stages=STAGES) -> PipelineResult:
    ws = Workspace(cfg.out)
    ws.root.mkdir(parents=True, exist_ok=True)
    (ws.root / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2))
    result = PipelineResult({})
    for name in stages:
        start = time.perf_counter()
        log.info("stage %s", name)
        out = run_stage(name, cfg)
        result.timings[name] = time.perf_counter() - start
        if name == "eval":
            result.report = out
    result.artifacts = {k: ws.path(k) for k in ARTIFACTS if ws.path(k).exists()}
    return result
