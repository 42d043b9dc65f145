"""Finite-difference verification of every trainable tensor of a tiny model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .mda import DecoderConfig
from .model import AquilaModel, ModelConfig
from .pyramid import PyramidConfig

TOLERANCE = 1e-5
CHECKED_GROUPS = ("sfi", "decoder", "realign", "lora")
STEP = 1e-5


def tiny_config() -> ModelConfig:
    """2-layer decoder, d_model 16, V 11, N_v 4 (2x2 queries over sides 4 and 2)."""
    return ModelConfig(
        pyramid=PyramidConfig(resolution=16, channels=(4, 8), projected_dim=8),
        query_side=2,
        decoder=DecoderConfig(n_layers=2, d_model=16, n_heads=2, vocab_size=11, max_seq_len=12,
                              sfi_dim=8, mlp_ratio=2, lora_rank=2, lora_alpha=4.0, lora_dropout=0.0),
        fusion="sfi",
        mda=True,
        lora=True,
        dtype="float64",
    )


@dataclass
class GradReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.errors.values())

    def lines(self) -> list[str]:
        width = max(len(n) for n in self.errors)
        out = [f"{n:<{width}}  {e:.3e}  {'ok' if e <= self.tolerance else 'FAIL'}" for n, e in self.errors.items()]
        worst = max(self.errors.values())
        out.append(f"{len(self.errors)} tensors, max rel err {worst:.3e}, tolerance {self.tolerance:.0e}: "
                   f"{'PASS' if self.passed else 'FAIL'}")
        return out


def gradcheck(seed: int = 0, text_len: int = 5, h: float = STEP, tolerance: float = TOLERANCE,
              config: ModelConfig | None = None) -> GradReport:
    """Compare backward-pass gradients with central differences on all parameters.

    Zero-initialised tensors (adapter up-maps, re-alignment output maps,
    biases) are randomised first; otherwise the gradients flowing through
    them would vanish and the check would be vacuous.
    """
    config = config or tiny_config()
    model = AquilaModel(config, seed=seed)
    rng = np.random.default_rng(seed + 1)
    for t in model.params.values():
        t.data = t.data + 0.1 * rng.standard_normal(t.dims)
    r = config.pyramid.resolution
    raw = model.encode_images(rng.random((1, r, r, 3)))
    tokens = rng.integers(0, config.decoder.vocab_size, size=(1, text_len))
    mask = np.zeros((1, config.n_visual + text_len), dtype=bool)
    mask[0, config.n_visual + 1 :] = True

    checked = [n for n in model.params if not n.startswith("pyramid.")]
    model.set_trainable(CHECKED_GROUPS)
    loss = model.loss(raw, tokens, mask)
    loss.backward()
    analytic = {n: model.params[n].grad.copy() for n in checked}
    model.set_trainable(())

    def f(_):
        return float(model.loss(raw, tokens, mask).data)

    errors = {}
    for name in checked:
        numeric = nx.finite_diff_grad(f, model.params[name].data, h)
        errors[name] = nx.relative_error(analytic[name], numeric)
    return GradReport(errors, tolerance)

