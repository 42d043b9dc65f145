"""Two-stage training: freeze masks, AdamW, cosine schedule with warmup.

Stage 1 trains only the fusion side (projectors, query grid, attention
maps); stage 2 additionally trains the re-alignment blocks and LoRA
adapters.  The encoder and the base decoder never change.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from . import numerics as nx
from .errors import ConfigurationError, NumericError, StateError
from .mda import SequenceBatch, decoder_forward, next_token_loss
from .model import AquilaModel
from .pyramid import MultiScaleFeatures
from .scenes import GRID, SceneSample, Vocabulary

STAGE_GROUPS = {1: ("sfi",), 2: ("sfi", "realign", "lora")}

# per-stage defaults of the reference recipe
STAGE_DEFAULTS = {
    1: dict(base_lr=1e-3, weight_decay=0.05, warmup_ratio=0.06),
    2: dict(base_lr=4e-5, weight_decay=0.1, warmup_ratio=0.03),
}


def cosine_warmup_lr(step: int, total_steps: int, warmup_ratio: float, base_lr: float) -> float:
    """Linear ramp to ``base_lr`` over ceil(warmup_ratio * total) steps, then cosine to 0."""
    if not 0 <= step <= total_steps:
        raise ConfigurationError(f"step {step} outside [0, {total_steps}]")
    if not 0.0 <= warmup_ratio < 1.0:
        raise ConfigurationError("warmup_ratio must lie in [0, 1)")
    warm = math.ceil(warmup_ratio * total_steps)
    if step < warm:
        return base_lr * step / warm
    if total_steps == warm:
        return base_lr
    progress = (step - warm) / (total_steps - warm)
    return 0.5 * base_lr * (1.0 + math.cos(math.pi * progress))


@dataclass
class OptimState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def adamw_step(params: dict, grads: dict, state: OptimState, lr: float, betas=(0.9, 0.95),
               weight_decay: float = 0.0, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place.

    ``params`` maps names to Tensors; only names present in ``grads`` move.
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {name}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + eps)
        if weight_decay:
            p.data *= 1.0 - lr * weight_decay
        p.data -= (lr * update).astype(p.data.dtype)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= factor
    return total


@dataclass
class TrainPlan:
    stage: int
    steps: int = 2000
    batch_size: int = 8
    base_lr: float | None = None
    weight_decay: float | None = None
    warmup_ratio: float | None = None
    betas: tuple[float, float] = (0.9, 0.95)
    eps: float = 1e-8
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGE_GROUPS:
            raise ConfigurationError(f"stage must be 1 or 2, got {self.stage}")
        for key, value in STAGE_DEFAULTS[self.stage].items():
            if getattr(self, key) is None:
                setattr(self, key, value)
        if self.steps < 1 or self.batch_size < 1:
            raise ConfigurationError("steps and batch_size must be positive")

    @property
    def trainable_groups(self) -> tuple[str, ...]:
        return STAGE_GROUPS[self.stage]


@dataclass
class EncodedData:
    """Samples with frozen-encoder features precomputed once."""

    raw: MultiScaleFeatures | None  # leading axis = sample; None for text-only data
    tokens: np.ndarray  # (N, Tmax), padded
    supervised: np.ndarray  # (N, Tmax) bool
    lengths: np.ndarray
    samples: list

    def __len__(self) -> int:
        return self.tokens.shape[0]

    def text_batch(self, index, n_visual: int):
        index = np.asarray(index)
        t = int(self.lengths[index].max())
        tokens = self.tokens[index, :t]
        mask = np.concatenate([np.zeros((len(index), n_visual), dtype=bool), self.supervised[index, :t]], axis=1)
        return tokens, mask

    def batch(self, index, n_visual: int):
        tokens, mask = self.text_batch(index, n_visual)
        return self.raw.select(np.asarray(index)), tokens, mask


def encode_text(samples: list[SceneSample], vocab: Vocabulary) -> EncodedData:
    """Padded token ids and supervision flags, without image features."""
    seqs = [s.sequence(vocab) for s in samples]
    lengths = np.array([len(ids) for ids, _ in seqs])
    tmax = int(lengths.max())
    tokens = np.full((len(samples), tmax), vocab.pad, dtype=np.intp)
    supervised = np.zeros((len(samples), tmax), dtype=bool)
    for i, (ids, sup) in enumerate(seqs):
        tokens[i, : len(ids)] = ids
        supervised[i, : len(sup)] = sup
    return EncodedData(None, tokens, supervised, lengths, samples)


def encode_dataset(model: AquilaModel, samples: list[SceneSample], vocab: Vocabulary, chunk: int = 256) -> EncodedData:
    text = encode_text(samples, vocab)
    parts = []
    for start in range(0, len(samples), chunk):
        images = np.stack([s.image for s in samples[start : start + chunk]])
        parts.append(model.encode_images(images))
    grids = [np.concatenate([p.grids[s] for p in parts]) for s in range(parts[0].num_scales)]
    text.raw = MultiScaleFeatures(grids, parts[0].sides)
    return text


def batch_order(n: int, batch_size: int, steps: int, seed: int) -> np.ndarray:
    """(steps, batch_size) sample indices: consecutive shuffled epochs."""
    rng = np.random.default_rng(seed)
    need = steps * batch_size
    chunks = []
    while sum(len(c) for c in chunks) < need:
        chunks.append(rng.permutation(n))
    return np.concatenate(chunks)[:need].reshape(steps, batch_size)


def evaluate_loss(model: AquilaModel, data: EncodedData, batch_size: int = 64) -> float:
    """Token-weighted mean next-token loss over a whole dataset (no dropout)."""
    total = 0.0
    count = 0
    saved = {n: t.requires_grad for n, t in model.params.items()}
    model.set_trainable(())
    try:
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            raw, tokens, mask = data.batch(idx, model.config.n_visual)
            n_tok = int(mask[:, 1:].sum())
            total += float(model.loss(raw, tokens, mask).data) * n_tok
            count += n_tok
    finally:
        for n, t in model.params.items():
            t.requires_grad = saved[n]
    return total / count


def caption_accuracy(model: AquilaModel, data: EncodedData, vocab: Vocabulary, batch_size: int = 100) -> float:
    """Share of samples whose greedy caption equals the grammar caption exactly."""
    hits = 0
    saved = {n: t.requires_grad for n, t in model.params.items()}
    model.set_trainable(())
    try:
        for start in range(0, len(data), batch_size):
            idx = np.arange(start, min(start + batch_size, len(data)))
            outs = model.generate(data.raw.select(idx), vocab.bos, vocab.eos)
            hits += sum(vocab.decode(o) == data.samples[i].caption for o, i in zip(outs, idx))
    finally:
        for n, t in model.params.items():
            t.requires_grad = saved[n]
    return hits / len(data)


def format_record(rec: dict) -> str:
    return f"{rec['step']},{rec['stage']},{rec['lr']:.9e},{rec['loss']:.9e}"


@dataclass
class PretrainPlan:
    """Text-only language-model pretraining of the toy decoder."""

    steps: int = 1500
    batch_size: int = 16
    base_lr: float = 1e-3
    weight_decay: float = 0.01
    warmup_ratio: float = 0.05
    betas: tuple[float, float] = (0.9, 0.95)
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigurationError("pretraining steps must be >= 0 and batch_size positive")


def scene_prefix_ids(samples: list[SceneSample], vocab: Vocabulary, query_side: int) -> np.ndarray:
    """(N, L*L, 2) word ids spelling out what sits in each query cell.

    Empty cells hold two padding ids.  When the query grid is coarser than
    the scene grid, the last object mapped to a cell wins.
    """
    ids = np.full((len(samples), query_side * query_side, 2), vocab.pad, dtype=np.intp)
    for i, sample in enumerate(samples):
        for obj in sample.scene:
            cell = (obj.row * query_side // GRID) * query_side + obj.col * query_side // GRID
            ids[i, cell] = vocab.index[obj.color], vocab.index[obj.shape]
    return ids


def _decoder_only(params: dict) -> dict:
    return {n: t for n, t in params.items() if n.startswith("decoder.")}


def text_prefix_loss(model: AquilaModel, prefix_ids: np.ndarray, tokens, mask) -> nx.Tensor:
    """Next-token loss when the visual slots hold summed word embeddings."""
    params = _decoder_only(model.params)
    words = nx.take(params["decoder.tok_emb"], prefix_ids, axis=0)
    prefix = nx.add(nx.getitem(words, (Ellipsis, 0, slice(None))), nx.getitem(words, (Ellipsis, 1, slice(None))))
    batch = SequenceBatch(prefix, tokens, mask)
    logits = decoder_forward(batch, None, model.config.decoder, params)
    return next_token_loss(logits, batch)


def pretrain_decoder(plan: PretrainPlan, samples: list[SceneSample], vocab: Vocabulary, model: AquilaModel,
                     log: TextIO | None = None) -> list[dict]:
    """Give the frozen-later decoder some language competence before any vision training.

    The decoder learns the caption and question grammar from text alone: each
    visual slot carries the word embeddings of the object in that cell, the
    way a pretrained language model already knows how to read its context.
    Only ``decoder.*`` tensors move; the stages afterwards keep them frozen.
    """
    if model.completed_stage > 0:
        raise StateError("decoder pretraining must happen before stage 1")
    if plan.steps == 0:
        return []
    data = encode_text(samples, vocab)
    prefix = scene_prefix_ids(samples, vocab, model.config.query_side)
    model.set_trainable(("decoder",))
    trainable = model.trainable()
    state = OptimState()
    order = batch_order(len(samples), plan.batch_size, plan.steps, plan.seed)
    nv = model.config.n_visual
    records = []
    try:
        for step in range(plan.steps):
            idx = order[step]
            tokens, mask = data.text_batch(idx, nv)
            for t in trainable.values():
                t.grad = None
            lr = cosine_warmup_lr(step + 1, plan.steps, plan.warmup_ratio, plan.base_lr)
            loss = text_prefix_loss(model, prefix[idx], tokens, mask)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"pretraining loss is {value} at step {step} (lr={lr:.3e})")
            loss.backward()
            grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in trainable.items()}
            clip_global_norm(grads, plan.clip_norm)
            adamw_step(trainable, grads, state, lr, plan.betas, plan.weight_decay)
            rec = {"step": step, "stage": 0, "lr": lr, "loss": value}
            records.append(rec)
            if log is not None:
                log.write(format_record(rec) + "\n")
    finally:
        for t in trainable.values():
            t.grad = None
        model.set_trainable(())
    return records


def run_stage(plan: TrainPlan, data: EncodedData, model: AquilaModel, log: TextIO | None = None,
              on_step: Callable[[dict], None] | None = None) -> list[dict]:
    """Train ``model`` in place for ``plan.steps`` steps; return per-step records."""
    if plan.stage == 2 and model.completed_stage < 1:
        raise StateError("stage 2 starts from stage-1 weights; load a stage-1 checkpoint first")
    model.set_trainable(plan.trainable_groups)
    trainable = model.trainable()
    state = OptimState()
    order = batch_order(len(data), plan.batch_size, plan.steps, plan.seed)
    dropout_rng = np.random.default_rng([plan.seed, plan.stage]) if plan.stage == 2 else None
    nv = model.config.n_visual
    records = []
    try:
        for step in range(plan.steps):
            raw, tokens, mask = data.batch(order[step], nv)
            for t in trainable.values():
                t.grad = None
            lr = cosine_warmup_lr(step + 1, plan.steps, plan.warmup_ratio, plan.base_lr)
            try:
                loss = model.loss(raw, tokens, mask, rng=dropout_rng)
            except NumericError as exc:
                raise NumericError(f"stage {plan.stage} step {step} (lr={lr:.3e}): {exc}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericError(f"loss is {value} at step {step} (lr={lr:.3e})")
            loss.backward()
            grads = {n: (t.grad if t.grad is not None else np.zeros_like(t.data)) for n, t in trainable.items()}
            norm = clip_global_norm(grads, plan.clip_norm)
            if not math.isfinite(norm):
                worst = max(grads, key=lambda n: float(np.nan_to_num(np.abs(grads[n]).max(), nan=np.inf)))
                raise NumericError(f"non-finite gradient norm at step {step} (lr={lr:.3e}, worst tensor {worst})")
            adamw_step(trainable, grads, state, lr, plan.betas, plan.weight_decay, plan.eps)
            rec = {"step": step, "stage": plan.stage, "lr": lr, "loss": value}
            records.append(rec)
            if log is not None:
                log.write(format_record(rec) + "\n")
            if on_step is not None:
                on_step(rec)
    finally:
        for t in trainable.values():
            t.grad = None
        model.set_trainable(())
    model.completed_stage = max(model.completed_stage, plan.stage)
    return records
