"""
Two-stage training on synthetic scenes
=======================================

A short version of the full pipeline: pretrain the toy decoder on text, align
the vision side with the decoder frozen (stage 1), then tune fusion,
re-alignment and adapters together (stage 2).  Set ``AQ_DEMO_FULL=1`` to use
the default budgets (about ten minutes on one core).
"""

# %%
import os
import time

import numpy as np

from aquila.config import RunConfig
from aquila.scenes import Vocabulary, make_dataset
from aquila.training import TrainPlan, caption_accuracy, encode_dataset, evaluate_loss, pretrain_decoder, run_stage
from aquila.cli import build_model

full = os.environ.get("AQ_DEMO_FULL") == "1"
cfg = RunConfig.load(env={})
if not full:
    cfg.set("pretrain", "steps", "400")
    cfg.set("train.stage1", "steps", "400")
    cfg.set("train.stage2", "steps", "300")
vocab = Vocabulary.from_grammar()
model = build_model(cfg, vocab)

# %%
stage1 = make_dataset(2000, 1, vocab)
stage2 = make_dataset(2000, 2, vocab, instruct=True)
val = encode_dataset(model, make_dataset(100, 3, vocab, instruct=True), vocab)
test = encode_dataset(model, make_dataset(100, 4, vocab), vocab)

# %%
t0 = time.perf_counter()
pretrain_decoder(cfg.pretrain_plan(), stage1 + stage2, vocab, model)
start = evaluate_loss(model, val)
print(f"decoder pretrained in {time.perf_counter() - t0:.0f}s; val loss before vision training {start:.3f}")

# %%
run_stage(cfg.plan(1), encode_dataset(model, stage1, vocab), model)
print(f"after stage 1: val loss {evaluate_loss(model, val):.3f}, exact match {caption_accuracy(model, test, vocab):.2f}")

# %%
records = run_stage(cfg.plan(2), encode_dataset(model, stage2, vocab), model)
end = evaluate_loss(model, val)
print(f"after stage 2: val loss {end:.3f} ({end / start:.3f} of the start), "
      f"exact match {caption_accuracy(model, test, vocab):.2f}")
print("lr at first, middle, last step:", [f"{records[i]['lr']:.2e}" for i in (0, len(records) // 2, -1)])

# %%
outs = model.generate(test.raw.select(np.arange(5)), vocab.bos, vocab.eos)
for sample, ids in zip(test.samples[:5], outs):
    print(f"{vocab.decode(ids):45s} | {sample.caption}")
