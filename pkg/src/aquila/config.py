"""Sectioned ``key = value`` run configuration.

Every key has a typed default; files only need the keys they change.
Unknown sections or keys are rejected, and the resulting model and
training plans are validated as soon as they are built.
"""

from __future__ import annotations

import configparser
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError
from .mda import DecoderConfig
from .model import ModelConfig
from .pyramid import PyramidConfig
from .training import PretrainPlan, TrainPlan


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _ints(text: str) -> tuple[int, ...]:
    text = text.strip()
    return tuple(int(t) for t in text.split(",") if t.strip()) if text else ()


def _layers(text: str):
    return None if text.strip().lower() == "auto" else _ints(text)


def _fmt(value) -> str:
    if value is None:
        return "auto"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _stage(steps, lr, wd, warmup):
    return {
        "steps": (int, steps),
        "batch_size": (int, 8),
        "lr": (float, lr),
        "weight_decay": (float, wd),
        "warmup_ratio": (float, warmup),
        "beta1": (float, 0.9),
        "beta2": (float, 0.95),
        "eps": (float, 1e-8),
        "clip_norm": (float, 1.0),
    }


SCHEMA: dict[str, dict[str, tuple]] = {
    "pyramid": {
        "resolution": (int, 64),
        "channels": (_ints, (16, 32, 64)),
        "projected_dim": (int, 32),
        "projector_hidden": (int, 0),  # 0 -> projected_dim
    },
    "sfi": {
        "query_side": (int, 4),
        "fusion": (str, "sfi"),
        "mda": (_bool, True),
    },
    "decoder": {
        "n_layers": (int, 4),
        "d_model": (int, 64),
        "n_heads": (int, 2),
        "max_seq_len": (int, 48),
        "mlp_ratio": (int, 4),
        "sfi_layers": (_layers, None),
        "lora": (_bool, True),
        "lora_rank": (int, 8),
        "lora_alpha": (float, 16.0),
        "lora_dropout": (float, 0.05),
        "dtype": (str, "float32"),
    },
    "pretrain": {
        "steps": (int, 1500),
        "batch_size": (int, 16),
        "lr": (float, 1e-3),
        "weight_decay": (float, 0.01),
        "warmup_ratio": (float, 0.05),
    },
    "train.stage1": _stage(2000, 1e-3, 0.05, 0.06),
    "train.stage2": _stage(2000, 4e-5, 0.1, 0.03),
    "data": {
        "seed": (int, 0),
        "train_size": (int, 4000),
        "val_size": (int, 200),
        "test_size": (int, 200),
        "caption_fraction": (float, 0.5),
        "max_new_tokens": (int, 12),
    },
    "ablate": {
        "steps_per_stage": (int, 600),
    },
}


@dataclass
class RunConfig:
    values: dict[str, dict] = field(default_factory=lambda: {s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()})

    @classmethod
    def load(cls, path=None, overrides=(), env=None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
            parser.optionxform = str
            try:
                with open(path, encoding="utf-8") as fh:
                    parser.read_file(fh)
            except configparser.Error as exc:
                raise ConfigurationError(f"{path}: {exc}") from None
            except OSError as exc:
                raise ConfigurationError(f"cannot read config {path}: {exc.strerror}") from None
            for section in parser.sections():
                for key, text in parser.items(section):
                    cfg.set(section, key, text)
        for item in overrides:
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigurationError(f"override {item!r} is not section.key=value")
            lhs, text = item.split("=", 1)
            section, key = lhs.strip().rsplit(".", 1)
            cfg.set(section, key, text)
        env = os.environ if env is None else env
        if env.get("AQ_SEED"):
            cfg.set("data", "seed", env["AQ_SEED"])
        cfg.validate()
        return cfg

    def set(self, section: str, key: str, text) -> None:
        if section not in SCHEMA:
            raise ConfigurationError(f"unknown config section [{section}]")
        if key not in SCHEMA[section]:
            raise ConfigurationError(f"unknown key {key!r} in [{section}]")
        parse = SCHEMA[section][key][0]
        if not isinstance(text, str):
            self.values[section][key] = text
            return
        try:
            self.values[section][key] = parse(text.strip())
        except ValueError as exc:
            raise ConfigurationError(f"[{section}] {key}: {exc}") from None

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    @property
    def seed(self) -> int:
        return self.values["data"]["seed"]

    def model_config(self, vocab_size: int, *, fusion=None, mda=None) -> ModelConfig:
        p, s, d = self["pyramid"], self["sfi"], self["decoder"]
        pyramid = PyramidConfig(p["resolution"], p["channels"], p["projected_dim"], p["projector_hidden"] or None)
        decoder = DecoderConfig(
            n_layers=d["n_layers"],
            d_model=d["d_model"],
            n_heads=d["n_heads"],
            vocab_size=vocab_size,
            max_seq_len=d["max_seq_len"],
            sfi_layers=d["sfi_layers"],
            sfi_dim=p["projected_dim"],
            mlp_ratio=d["mlp_ratio"],
            lora_rank=d["lora_rank"],
            lora_alpha=d["lora_alpha"],
            lora_dropout=d["lora_dropout"],
        )
        return ModelConfig(
            pyramid=pyramid,
            query_side=s["query_side"],
            decoder=decoder,
            fusion=s["fusion"] if fusion is None else fusion,
            mda=s["mda"] if mda is None else mda,
            lora=d["lora"],
            dtype=d["dtype"],
        )

    def plan(self, stage: int, steps: int | None = None) -> TrainPlan:
        t = self[f"train.stage{stage}"]
        return TrainPlan(
            stage=stage,
            steps=t["steps"] if steps is None else steps,
            batch_size=t["batch_size"],
            base_lr=t["lr"],
            weight_decay=t["weight_decay"],
            warmup_ratio=t["warmup_ratio"],
            betas=(t["beta1"], t["beta2"]),
            eps=t["eps"],
            clip_norm=t["clip_norm"],
            seed=self.seed + stage,
        )

    def pretrain_plan(self) -> PretrainPlan:
        p = self["pretrain"]
        return PretrainPlan(
            steps=p["steps"],
            batch_size=p["batch_size"],
            base_lr=p["lr"],
            weight_decay=p["weight_decay"],
            warmup_ratio=p["warmup_ratio"],
            seed=self.seed,
        )

    def validate(self) -> None:
        if self["decoder"]["dtype"] not in ("float32", "float64"):
            raise ConfigurationError("decoder.dtype must be float32 or float64")
        data = self["data"]
        if min(data["train_size"], data["val_size"], data["test_size"]) < 1:
            raise ConfigurationError("dataset sizes must be positive")
        if not 0.0 <= data["caption_fraction"] <= 1.0:
            raise ConfigurationError("caption_fraction must lie in [0, 1]")
        self.model_config(vocab_size=64)
        self.plan(1)
        self.plan(2)
        self.pretrain_plan()

    def dump(self) -> str:
        lines = []
        for section, keys in self.values.items():
            lines.append(f"[{section}]")
            lines.extend(f"{k} = {_fmt(v)}" for k, v in keys.items())
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dump(), encoding="utf-8")
