"""End-to-end model: frozen pyramid -> projectors -> fusion -> decoder.

All tensors sit in ``AquilaModel.params`` under dotted names.  The first
component of a name decides its parameter group:

    pyramid    frozen encoder weights
    sfi        projectors, query grid and attention maps (or the concat
               mixer), plus the map from fused width to d_model
    decoder    base decoder weights
    realign    per-layer re-alignment blocks
    lora       low-rank adapters
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError
from .mda import DecoderConfig, SequenceBatch, decoder_forward, init_decoder, init_lora, init_realign, next_token_loss
from .pyramid import MultiScaleFeatures, PyramidConfig, extract_pyramid, init_encoder, init_projectors, project_scales
from .sfi import SFIParams, add_positional, build_region_map, concat_fusion, encode_features, sfi_attend

GROUP_OF_PREFIX = {
    "pyramid": "pyramid",
    "projector": "sfi",
    "sfi": "sfi",
    "fusion": "sfi",
    "visual": "sfi",
    "decoder": "decoder",
    "realign": "realign",
    "lora": "lora",
}
FUSIONS = ("sfi", "concat")


def group_of(name: str) -> str:
    return GROUP_OF_PREFIX[name.split(".", 1)[0]]


@dataclass(frozen=True)
class ModelConfig:
    pyramid: PyramidConfig = field(default_factory=PyramidConfig)
    query_side: int = 4
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    fusion: str = "sfi"
    mda: bool = True
    lora: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.fusion not in FUSIONS:
            raise ConfigurationError(f"fusion must be one of {FUSIONS}")
        if self.decoder.sfi_dim != self.pyramid.projected_dim:
            raise ConfigurationError("decoder.sfi_dim must equal the projected feature width")
        # validates divisibility of every scale by the query side
        build_region_map(self.query_side, self.pyramid.sides)
        if not self.mda and self.decoder.sfi_layers:
            object.__setattr__(self, "decoder", replace(self.decoder, sfi_layers=()))

    @property
    def n_visual(self) -> int:
        return self.query_side**2


class AquilaModel:
    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        dt = np.dtype(config.dtype)
        rng = np.random.default_rng(seed)
        pc, dc = config.pyramid, config.decoder
        self.region_map = build_region_map(config.query_side, pc.sides)
        params: dict[str, nx.Tensor] = {}
        params.update({k: nx.Tensor(v, name=k) for k, v in init_encoder(pc, rng, dt).items()})
        params.update(init_projectors(pc, rng, dt))
        d = pc.projected_dim
        if config.fusion == "sfi":
            params.update(SFIParams.init(rng, config.query_side, d, pc.num_scales, dtype=dt).named("sfi"))
        else:
            mix = rng.standard_normal((d, d * pc.num_scales)) / np.sqrt(d * pc.num_scales)
            params["fusion.mix_w"] = nx.Tensor(mix.astype(dt))
            params["fusion.mix_b"] = nx.Tensor(np.zeros(d, dtype=dt))
        params["visual.w"] = nx.Tensor((rng.standard_normal((dc.d_model, d)) / np.sqrt(d)).astype(dt))
        params["visual.b"] = nx.Tensor(np.zeros(dc.d_model, dtype=dt))
        params.update(init_decoder(dc, rng, dt))
        if config.mda:
            params.update(init_realign(dc, config.query_side, pc.num_scales, rng, dt))
        if config.lora:
            params.update(init_lora(dc, rng, dt))
        for name, t in params.items():
            t.name = name
        self.params = params
        self.completed_stage = 0  # raised by training or by loading a checkpoint
        self.set_trainable(())

    # parameter bookkeeping --------------------------------------------------

    def names(self, groups=None) -> list[str]:
        return [n for n in self.params if groups is None or group_of(n) in groups]

    def set_trainable(self, groups) -> None:
        groups = set(groups)
        for name, t in self.params.items():
            t.requires_grad = group_of(name) in groups
            t.grad = None

    def trainable(self) -> dict[str, nx.Tensor]:
        return {n: t for n, t in self.params.items() if t.requires_grad}

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data for n, t in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray], strict: bool = True) -> None:
        missing = set(self.params) - set(state)
        unexpected = set(state) - set(self.params)
        if strict and (missing or unexpected):
            raise ConfigurationError(f"checkpoint mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, arr in state.items():
            if name not in self.params:
                continue
            if arr.shape != self.params[name].dims:
                raise ConfigurationError(f"{name}: checkpoint dims {arr.shape} vs model {self.params[name].dims}")
            self.params[name].data = np.array(arr, dtype=self.params[name].dtype)

    # forward ------------------------------------------------------------------

    def encode_images(self, images: np.ndarray) -> MultiScaleFeatures:
        """Frozen pyramid features for uint8 (or [0, 1] float) images."""
        images = np.asarray(images)
        if images.dtype == np.uint8:
            images = images.astype(self.config.dtype) / 255.0
        weights = {n: t.data for n, t in self.params.items() if group_of(n) == "pyramid"}
        return extract_pyramid(images, self.config.pyramid, weights)

    def visual_tokens(self, raw: MultiScaleFeatures):
        """Return the visual prefix (..., L*L, d_model) and the cached encoded features."""
        p = self.params
        projected = project_scales(raw, {n: t for n, t in p.items() if n.startswith("projector.")})
        cached = encode_features(projected)
        if self.config.fusion == "sfi":
            sfi = SFIParams.from_named(p, "sfi", raw.num_scales)
            queries = add_positional(sfi.query, self.config.query_side)
            fused = sfi_attend(sfi, cached, self.region_map, queries=queries)
        else:
            fused = concat_fusion(projected, self.config.query_side, p["fusion.mix_w"], p["fusion.mix_b"])
        visual = nx.linear(fused, p["visual.w"], p["visual.b"])
        return visual, cached

    def forward(self, raw: MultiScaleFeatures, tokens, loss_mask, rng=None):
        visual, cached = self.visual_tokens(raw)
        batch = SequenceBatch(visual, tokens, loss_mask)
        logits = decoder_forward(batch, cached, self.config.decoder, self.params, self.region_map, rng)
        return logits, batch

    def loss(self, raw: MultiScaleFeatures, tokens, loss_mask, rng=None) -> nx.Tensor:
        logits, batch = self.forward(raw, tokens, loss_mask, rng)
        return next_token_loss(logits, batch)

    def generate(self, raw: MultiScaleFeatures, bos: int, eos: int, max_new: int = 12, prompt=()) -> list[list[int]]:
        """Greedy decoding for a batch of images; stops each row at ``eos``."""
        visual, cached = self.visual_tokens(raw)
        b = visual.dims[0]
        nv = self.config.n_visual
        seqs = np.tile(np.array([bos, *prompt], dtype=np.intp), (b, 1))
        done = np.zeros(b, dtype=bool)
        out: list[list[int]] = [[] for _ in range(b)]
        budget = min(max_new, self.config.decoder.max_seq_len - nv - seqs.shape[1] + 1)
        for _ in range(budget):
            mask = np.zeros((b, nv + seqs.shape[1]), dtype=bool)
            batch = SequenceBatch(visual, seqs, mask)
            logits = decoder_forward(batch, cached, self.config.decoder, self.params, self.region_map)
            nxt = logits.data[:, -1].argmax(axis=-1)
            for i in np.flatnonzero(~done):
                if nxt[i] == eos:
                    done[i] = True
                else:
                    out[i].append(int(nxt[i]))
            if done.all():
                break
            seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
        return out
