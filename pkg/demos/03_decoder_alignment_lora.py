"""
Visual prefix, deep re-alignment and adapters
==============================================

The decoder reads the fused visual tokens as a prefix.  Re-alignment blocks
inside it re-attend to the cached multi-scale features, and LoRA adapters
add low-rank updates to the attention maps.  Both start as exact no-ops.
"""

# %%
import numpy as np

from aquila.mda import DecoderConfig, SequenceBatch, decoder_forward
from aquila.model import AquilaModel, ModelConfig
from aquila.scenes import Vocabulary, make_dataset

vocab = Vocabulary.from_grammar()
model = AquilaModel(ModelConfig(decoder=DecoderConfig(vocab_size=len(vocab))), seed=0)
print("re-alignment after layers", model.config.decoder.sfi_layers)
print("parameter groups:", sorted({n.split(".")[0] for n in model.params}))

# %%
sample = make_dataset(1, seed=7, vocab=vocab)[0]
print("caption:", sample.caption)
ids, supervised = sample.sequence(vocab)
visual, cached = model.visual_tokens(model.encode_images(sample.image[None]))
mask = np.concatenate([np.zeros(16, dtype=bool), supervised])[None]
batch = SequenceBatch(visual, np.array([ids]), mask)

# %%
# Full forward (re-alignment and adapters attached) against the bare decoder.
cfg = model.config.decoder
bare_cfg = DecoderConfig(**{**cfg.__dict__, "sfi_layers": ()})
bare = {n: t for n, t in model.params.items() if n.startswith("decoder.")}
full = decoder_forward(batch, cached, cfg, model.params, model.region_map).data
plain = decoder_forward(batch, None, bare_cfg, bare).data
print("bit-identical at initialization:", np.array_equal(full, plain))

# %%
# Once an output map is non-zero the visual rows change, text rows follow through attention.
rng = np.random.default_rng(1)
w_out = model.params["realign.0.w_out"]
w_out.data = (0.1 * rng.standard_normal(w_out.dims)).astype(w_out.dtype)
moved = decoder_forward(batch, cached, cfg, model.params, model.region_map).data
print("largest logit change:", float(np.abs(moved - plain).max()))
