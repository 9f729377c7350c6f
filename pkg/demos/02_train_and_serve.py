"""End to end on planted data, stage by stage, then a look at one user's cached list.

Takes a few minutes on a laptop CPU.  Run: python3 demos/02_train_and_serve.py [out_dir]
"""
# %%
import json
import sys

from alignrec import decode, pipeline
from alignrec.corpus import Vocab
from alignrec.tokenizer import load_semantic_ids

cfg = pipeline.PipelineConfig(out=sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
cfg.train.log_every = 250

# %% each stage leaves its files behind, so any one can be rerun alone
for stage in pipeline.STAGES:
    print(f"-- {stage}")
    report = pipeline.run_stage(stage, cfg)

ws = pipeline.Workspace(cfg.out)
print(json.loads(ws.path("corpus_stats").read_text()))
print(report.table())
print(ws.path("baseline").read_text())

# %% serving reads only the cache; the model is not touched
cache = decode.CacheFile.load(ws.path("cache"))
trie = decode.build_trie(load_semantic_ids(ws.path("semantic_ids")), vocab=Vocab.load(ws.path("vocab")))
user = next(iter(cache.entries))
print(user, decode.lookup(cache, user, trie))
