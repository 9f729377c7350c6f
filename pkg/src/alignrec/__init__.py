"""Residual-codebook item tokenization and generative next-item recommendation in numpy."""
from .errors import AlignRecError, ArtifactError, DataError, NumericalError
from .tokenizer import CodeBook, CodeBookConfig, encode, tokenize_item, train_codebooks
from .decode import CodeTrie, admit_cold_item, beam_search, build_trie, lookup, precache
from .evaluation import EvalReport, evaluate, hit_ratio, ndcg
from .pipeline import PipelineConfig, run_pipeline, run_stage

__all__ = [
    "AlignRecError", "ArtifactError", "DataError", "NumericalError",
    "CodeBook", "CodeBookConfig", "encode", "tokenize_item", "train_codebooks",
    "CodeTrie", "admit_cold_item", "beam_search", "build_trie", "lookup", "precache",
    "EvalReport", "evaluate", "hit_ratio", "ndcg",
    "PipelineConfig", "run_pipeline", "run_stage",
]
__version__ = "0.1.0"
