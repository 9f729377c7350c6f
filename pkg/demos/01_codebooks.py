"""Cascaded codebooks on a toy catalog: losses, collisions and the telescoping residual.

Run: python3 demos/01_codebooks.py
"""
# %%
import numpy as np

from alignrec import catalog, embeddings, tokenizer
from alignrec.tokenizer import CodeBookConfig

inter, items = catalog.generate_synthetic(300, 120, chain_noise=0.1, seed=0)
split = catalog.make_split(inter)
behavior = embeddings.train_behavior_embeddings(split.train_histories.values(), dim=16, seed=0)
semantic = embeddings.semantic_table([it for it in items if it.item_id in behavior], 16)
print(f"{len(behavior)} items with behavior vectors")

# %% behavior-only assignment; lambda_L only moves the code update
for weight in (0.0, 1.0):
    cfg = CodeBookConfig(levels=4, codes_per_level=16, dim=16, llm_loss_weight=weight)
    book, report = tokenizer.train_codebooks(behavior, semantic, cfg)
    errs = [round(lv.mean_quantization_error, 4) for lv in report.levels]
    print(f"lambda_L={weight}: per-level error {errs}, collision rate {report.collision_rate:.3f}")

# %% collisions shrink as levels are added
rates = []
for n in (1, 2, 3, 4):
    _, report = tokenizer.train_codebooks(behavior, semantic, tokenizer.with_levels(cfg, n))
    rates.append(round(report.collision_rate, 3))
print("collision rate by N:", rates)

# %% plain residuals telescope back to the input
vec = behavior[behavior.item_ids[0]]
sid, rest = tokenizer.tokenize_item(vec, book, return_residual=True)
gap = np.linalg.norm(vec - tokenizer.reconstruct(book, sid) - rest)
print(f"item {behavior.item_ids[0]} -> {sid}, reconstruction gap {gap:.1e}")
