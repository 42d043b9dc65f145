"""Small pre-LN causal decoder with visual prefix, LoRA and deep re-alignment.

Parameters live in one flat ``dict[str, Tensor]``; names are

    decoder.tok_emb, decoder.pos_emb, decoder.{l}.ln1.{g,b}, decoder.{l}.attn.{w_q,w_k,w_v,w_o},
    decoder.{l}.ln2.{g,b}, decoder.{l}.mlp.{w1,b1,w2,b2}, decoder.ln_f.{g,b}, decoder.head
    lora.{l}.{q,v}.{A,B}
    realign.{l}.{w_in,w_out}, realign.{l}.sfi.{w_q,w_k.s,w_v.s}

A layer listed in ``sfi_layers`` re-attends to the cached multi-scale
features after its block: the visual rows of the hidden state are mapped
to the feature width, used as queries of a region-restricted attention,
mapped back, and added residually.  Output maps start at zero so that a
freshly inserted re-alignment or adapter leaves the forward pass unchanged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numerics as nx
from .errors import CapacityError, ConfigurationError, ShapeError, StateError
from .pyramid import MultiScaleFeatures
from .sfi import RegionMap, SFIParams, add_positional, sfi_attend

LORA_TARGETS = ("q", "v")


def default_sfi_layers(n_layers: int) -> tuple[int, ...]:
    """Every ceil(n/4)-th layer, skipping the last one.

    Re-aligned visual rows after the final block only reach their own
    (never supervised) logits, so an insertion there would be inert.
    """
    step = max(1, math.ceil(n_layers / 4))
    return tuple(range(step - 1, n_layers - 1, step))


@dataclass(frozen=True)
class DecoderConfig:
    n_layers: int = 4
    d_model: int = 64
    n_heads: int = 2
    vocab_size: int = 32
    max_seq_len: int = 48
    sfi_layers: tuple[int, ...] | None = None  # None -> default placement
    sfi_dim: int = 32
    mlp_ratio: int = 4
    lora_rank: int = 8
    lora_alpha: float = 16.0
    lora_dropout: float = 0.05
    ln_eps: float = 1e-5

    def __post_init__(self):
        if self.sfi_layers is None:
            object.__setattr__(self, "sfi_layers", default_sfi_layers(self.n_layers))
        object.__setattr__(self, "sfi_layers", tuple(int(i) for i in self.sfi_layers))
        if self.d_model % self.n_heads:
            raise ConfigurationError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if any(b <= a for a, b in zip(self.sfi_layers, self.sfi_layers[1:])):
            raise ConfigurationError("sfi_layers must be strictly increasing")
        if any(i < 0 or i >= self.n_layers for i in self.sfi_layers):
            raise ConfigurationError(f"sfi_layers {self.sfi_layers} outside [0, {self.n_layers})")
        if self.lora_rank and self.lora_rank >= self.d_model:
            raise ConfigurationError(f"lora rank {self.lora_rank} must be below d_model {self.d_model}")
        if not 0.0 <= self.lora_dropout < 1.0:
            raise ConfigurationError("lora dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads


@dataclass
class LoRAAdapter:
    target: str
    A: nx.Tensor  # (r, d_in)
    B: nx.Tensor  # (d_out, r)
    alpha: float
    dropout: float = 0.0

    def __post_init__(self):
        r, d_in = self.A.dims
        d_out, r2 = self.B.dims
        if r != r2:
            raise ShapeError(f"adapter ranks disagree: A has {r}, B has {r2}")
        if r >= min(d_in, d_out):
            raise ConfigurationError(f"rank {r} must be below min(d_in, d_out) = {min(d_in, d_out)}")

    @property
    def rank(self) -> int:
        return self.A.dims[0]

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)

    @classmethod
    def init(cls, target, d_in, d_out, rank, alpha, dropout, rng, dtype=np.float64):
        bound = 1.0 / math.sqrt(d_in)
        A = nx.Tensor(rng.uniform(-bound, bound, (rank, d_in)).astype(dtype), requires_grad=True)
        B = nx.Tensor(np.zeros((d_out, rank), dtype=dtype), requires_grad=True)
        return cls(target, A, B, alpha, dropout)


def lora_apply(x, base_weight, adapter: LoRAAdapter | None = None, rng=None):
    """``x (W + (alpha/r) B A)^T`` without ever forming or touching W + delta."""
    y = nx.linear(x, base_weight)
    if adapter is None:
        return y
    if adapter.A.dims[1] != nx.as_tensor(base_weight).dims[1] or adapter.B.dims[0] != nx.as_tensor(base_weight).dims[0]:
        raise ShapeError("adapter does not match the base weight")
    xa = nx.dropout(x, adapter.dropout, rng)
    low = nx.linear(nx.linear(xa, adapter.A), adapter.B)
    return nx.add(y, nx.scale(low, adapter.scaling))


def _split_heads(x: nx.Tensor, n_heads: int) -> nx.Tensor:
    *lead, t, d = x.dims
    n = len(lead)
    x = nx.reshape(x, tuple(lead) + (t, n_heads, d // n_heads))
    return nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))


def _merge_heads(x: nx.Tensor) -> nx.Tensor:
    *lead, h, t, hd = x.dims
    n = len(lead)
    x = nx.transpose(x, tuple(range(n)) + (n + 1, n, n + 2))
    return nx.reshape(x, tuple(lead) + (t, h * hd))


def causal_self_attention(hidden, weights: dict, n_heads: int, lora: dict | None = None,
                          max_seq_len: int | None = None, rng=None) -> nx.Tensor:
    """Multi-head attention where position t sees positions <= t only.

    ``weights`` maps ``w_q, w_k, w_v, w_o`` to (d, d) tensors; ``lora`` maps
    a target letter (``"q"``/``"v"``) to its adapter.
    """
    hidden = nx.as_tensor(hidden)
    t, d = hidden.dims[-2:]
    if max_seq_len is not None and t > max_seq_len:
        raise CapacityError(f"sequence of {t} exceeds max_seq_len {max_seq_len}")
    if d % n_heads:
        raise ConfigurationError(f"width {d} not divisible by {n_heads} heads")
    lora = lora or {}
    q = lora_apply(hidden, weights["w_q"], lora.get("q"), rng)
    k = lora_apply(hidden, weights["w_k"], lora.get("k"), rng)
    v = lora_apply(hidden, weights["w_v"], lora.get("v"), rng)
    q, k, v = (_split_heads(x, n_heads) for x in (q, k, v))
    scores = nx.scale(nx.matmul(q, nx.transpose(k)), 1.0 / math.sqrt(d // n_heads))
    mask = np.tril(np.ones((t, t), dtype=bool))
    ctx = _merge_heads(nx.matmul(nx.softmax_rows(scores, mask), v))
    return lora_apply(ctx, weights["w_o"], lora.get("o"), rng)


@dataclass
class RealignParams:
    w_in: nx.Tensor  # (D, d_model)
    w_out: nx.Tensor  # (d_model, D), zero at init
    sfi: SFIParams

    def named(self, prefix: str) -> dict[str, nx.Tensor]:
        out = {f"{prefix}.w_in": self.w_in, f"{prefix}.w_out": self.w_out}
        out.update(self.sfi.named(f"{prefix}.sfi"))
        return out

    @classmethod
    def from_named(cls, params: dict, prefix: str, num_scales: int) -> "RealignParams":
        return cls(params[f"{prefix}.w_in"], params[f"{prefix}.w_out"],
                   SFIParams.from_named(params, f"{prefix}.sfi", num_scales))

    @classmethod
    def init(cls, rng, d_model: int, dim: int, query_side: int, num_scales: int, dtype=np.float64):
        w_in = nx.Tensor((rng.standard_normal((dim, d_model)) / math.sqrt(d_model)).astype(dtype), requires_grad=True)
        w_out = nx.Tensor(np.zeros((d_model, dim), dtype=dtype), requires_grad=True)
        return cls(w_in, w_out, SFIParams.init(rng, query_side, dim, num_scales, with_query=False, dtype=dtype))


def mda_realign(hidden, n_visual: int, cached_features: MultiScaleFeatures | None,
                realign: RealignParams, region_map: RegionMap) -> nx.Tensor:
    """Let the visual rows of ``hidden`` re-attend to the cached features."""
    if cached_features is None:
        raise StateError("re-alignment needs the cached multi-scale features")
    if not cached_features.encoded:
        raise StateError("cached features must carry positional encodings")
    hidden = nx.as_tensor(hidden)
    if n_visual != region_map.num_queries:
        raise ShapeError(f"{n_visual} visual rows but the query grid has {region_map.num_queries}")
    visual = nx.getitem(hidden, (Ellipsis, slice(0, n_visual), slice(None)))
    rest = nx.getitem(hidden, (Ellipsis, slice(n_visual, None), slice(None)))
    queries = add_positional(nx.linear(visual, realign.w_in), region_map.query_side)
    fused = sfi_attend(realign.sfi, cached_features, region_map, queries=queries)
    visual = nx.add(visual, nx.linear(fused, realign.w_out))
    return nx.concat([visual, rest], axis=-2)


@dataclass
class SequenceBatch:
    """Visual prefix plus text ids; ``loss_mask[j]`` marks token j as a target."""

    visual: nx.Tensor  # (B, Nv, d_model)
    tokens: np.ndarray  # (B, T) int
    loss_mask: np.ndarray  # (B, Nv + T) bool

    def __post_init__(self):
        self.visual = nx.as_tensor(self.visual)
        if self.visual.ndim == 2:
            self.visual = nx.reshape(self.visual, (1,) + self.visual.dims)
        self.tokens = np.atleast_2d(np.asarray(self.tokens, dtype=np.intp))
        self.loss_mask = np.atleast_2d(np.asarray(self.loss_mask, dtype=bool))
        b, nv, _ = self.visual.dims
        if self.tokens.shape[0] != b or self.loss_mask.shape != (b, nv + self.tokens.shape[1]):
            raise ShapeError("visual block, tokens and loss mask disagree on batch or length")
        if self.loss_mask[:, :nv].any():
            raise ShapeError("visual positions cannot be loss targets")

    @property
    def n_visual(self) -> int:
        return self.visual.dims[1]

    @property
    def length(self) -> int:
        return self.n_visual + self.tokens.shape[1]


def init_decoder(config: DecoderConfig, rng, dtype=np.float64) -> dict[str, nx.Tensor]:
    d, v = config.d_model, config.vocab_size
    hidden = config.mlp_ratio * d
    out_std = 1.0 / math.sqrt(d * 2 * config.n_layers)
    raw = {
        "decoder.tok_emb": rng.standard_normal((v, d)),
        "decoder.pos_emb": 0.1 * rng.standard_normal((config.max_seq_len, d)),
    }
    for l in range(config.n_layers):
        p = f"decoder.{l}"
        raw[f"{p}.ln1.g"] = np.ones(d)
        raw[f"{p}.ln1.b"] = np.zeros(d)
        for name in ("w_q", "w_k", "w_v"):
            raw[f"{p}.attn.{name}"] = rng.standard_normal((d, d)) / math.sqrt(d)
        raw[f"{p}.attn.w_o"] = rng.standard_normal((d, d)) * out_std
        raw[f"{p}.ln2.g"] = np.ones(d)
        raw[f"{p}.ln2.b"] = np.zeros(d)
        raw[f"{p}.mlp.w1"] = rng.standard_normal((hidden, d)) / math.sqrt(d)
        raw[f"{p}.mlp.b1"] = np.zeros(hidden)
        raw[f"{p}.mlp.w2"] = rng.standard_normal((d, hidden)) * out_std * math.sqrt(d / hidden)
        raw[f"{p}.mlp.b2"] = np.zeros(d)
    raw["decoder.ln_f.g"] = np.ones(d)
    raw["decoder.ln_f.b"] = np.zeros(d)
    raw["decoder.head"] = rng.standard_normal((v, d)) / math.sqrt(d)
    return {k: nx.Tensor(a.astype(dtype), name=k) for k, a in raw.items()}


def init_lora(config: DecoderConfig, rng, dtype=np.float64) -> dict[str, nx.Tensor]:
    out = {}
    d = config.d_model
    for l in range(config.n_layers):
        for target in LORA_TARGETS:
            a = LoRAAdapter.init(target, d, d, config.lora_rank, config.lora_alpha, config.lora_dropout, rng, dtype)
            out[f"lora.{l}.{target}.A"] = a.A
            out[f"lora.{l}.{target}.B"] = a.B
    return out


def init_realign(config: DecoderConfig, query_side: int, num_scales: int, rng, dtype=np.float64):
    out = {}
    for l in config.sfi_layers:
        rp = RealignParams.init(rng, config.d_model, config.sfi_dim, query_side, num_scales, dtype)
        out.update(rp.named(f"realign.{l}"))
    return out


def _adapters(params: dict, layer: int, config: DecoderConfig) -> dict[str, LoRAAdapter]:
    found = {}
    for target in LORA_TARGETS:
        key = f"lora.{layer}.{target}"
        if f"{key}.A" in params:
            found[target] = LoRAAdapter(target, params[f"{key}.A"], params[f"{key}.B"],
                                        config.lora_alpha, config.lora_dropout)
    return found


def decoder_forward(batch: SequenceBatch, cached_features: MultiScaleFeatures | None, config: DecoderConfig,
                    params: dict, region_map: RegionMap | None = None, rng=None) -> nx.Tensor:
    """Logits (B, Nv + T, V) for a visual-prefixed text batch.

    LoRA adapters and re-alignment blocks are used whenever their tensors
    are present in ``params``; ``rng`` enables adapter dropout.
    """
    n = batch.length
    if n > config.max_seq_len:
        raise CapacityError(f"sequence of {n} exceeds max_seq_len {config.max_seq_len}")
    if batch.visual.dims[-1] != config.d_model:
        raise ShapeError(f"visual width {batch.visual.dims[-1]} differs from d_model {config.d_model}")
    text = nx.take(params["decoder.tok_emb"], batch.tokens, axis=0)
    h = nx.concat([batch.visual, text], axis=1)
    h = nx.add(h, nx.getitem(params["decoder.pos_emb"], slice(0, n)))
    eps = config.ln_eps
    for l in range(config.n_layers):
        p = f"decoder.{l}"
        x = nx.layer_norm(h, params[f"{p}.ln1.g"], params[f"{p}.ln1.b"], eps)
        attn_w = {k: params[f"{p}.attn.{k}"] for k in ("w_q", "w_k", "w_v", "w_o")}
        h = nx.add(h, causal_self_attention(x, attn_w, config.n_heads, _adapters(params, l, config), n, rng))
        x = nx.layer_norm(h, params[f"{p}.ln2.g"], params[f"{p}.ln2.b"], eps)
        x = nx.gelu(nx.linear(x, params[f"{p}.mlp.w1"], params[f"{p}.mlp.b1"]))
        h = nx.add(h, nx.linear(x, params[f"{p}.mlp.w2"], params[f"{p}.mlp.b2"]))
        if l in config.sfi_layers and f"realign.{l}.w_in" in params:
            if region_map is None:
                raise StateError("re-alignment needs a region map")
            num_scales = len(region_map.scale_sides)
            h = mda_realign(h, batch.n_visual, cached_features,
                            RealignParams.from_named(params, f"realign.{l}", num_scales), region_map)
    h = nx.layer_norm(h, params["decoder.ln_f.g"], params["decoder.ln_f.b"], eps)
    return nx.linear(h, params["decoder.head"])


def next_token_loss(logits, batch: SequenceBatch) -> nx.Tensor:
    """Mean cross-entropy of every masked-in token given everything before it."""
    logits = nx.as_tensor(logits)
    if logits.ndim == 2:
        logits = nx.reshape(logits, (1,) + logits.dims)
    b, n, v = logits.dims
    if n != batch.length or b != batch.tokens.shape[0]:
        raise ShapeError("logits do not match the batch")
    seq = np.zeros((b, n), dtype=np.intp)
    seq[:, batch.n_visual:] = batch.tokens
    prev = nx.reshape(nx.getitem(logits, (slice(None), slice(0, n - 1))), (b * (n - 1), v))
    return nx.cross_entropy(prev, seq[:, 1:].reshape(-1), batch.loss_mask[:, 1:].reshape(-1))
