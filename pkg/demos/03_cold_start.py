"""Admit a new item into a trained run without retraining anything.

Needs the artifacts of demos/02_train_and_serve.py.  Run: python3 demos/03_cold_start.py [out_dir]
"""
# %%
import sys

import numpy as np

from alignrec import decode, seqmodel
from alignrec.corpus import Vocab
from alignrec.embeddings import EmbeddingTable
from alignrec.pipeline import Workspace
from alignrec.tokenizer import CodeBook, load_semantic_ids

ws = Workspace(sys.argv[1] if len(sys.argv) > 1 else "runs/demo")
vocab = Vocab.load(ws.need("vocab"))
book = CodeBook.load(ws.need("codebook"))
behavior = EmbeddingTable.load(ws.need("behavior"))
params = seqmodel.load_checkpoint(ws.need("model"))
trie = decode.build_trie(load_semantic_ids(ws.need("semantic_ids")), vocab=vocab)

# %% a near-copy of an existing item lands in the same leaf
twin = behavior.item_ids[5]
vec = behavior[twin] + 1e-9 * np.random.default_rng(0).standard_normal(behavior.dim)
trie2 = decode.admit_cold_item("new-item", vec, book, trie)
print(twin, trie.semantic_id(twin), "new-item", trie2.semantic_id("new-item"))
print("leaf members:", trie2.items(trie2.semantic_id("new-item")))

# %% and beam search can now return it
prompt = vocab.encode_text("The user has interacted with") + vocab.code_ids(trie.semantic_id(twin))
width = len(trie2.semantic_ids())
ranked = decode.expand_to_items(decode.beam_search(params, prompt, trie2, width, width), trie2)
print("rank of new-item:", ranked.index("new-item") + 1, "of", len(ranked))
