"""Command-line entry points.

    aquila gradcheck
    aquila train --stage {1|2} [--resume PATH] --config PATH --out DIR
    aquila ablate --config PATH --out DIR
    aquila caption --config PATH --ckpt PATH --image PATH
    aquila inspect --ckpt PATH

``--set section.key=value`` overrides config file values; ``AQ_SEED``
overrides the seed.  Exit codes: 0 ok, 1 usage, 2 file format, 3 numeric.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint
from .config import RunConfig
from .errors import AquilaError, ConfigurationError, FormatError, NumericError, UsageError
from .gradcheck import gradcheck
from .model import AquilaModel
from .pyramid import read_image
from .scenes import Vocabulary, make_dataset
from .training import caption_accuracy, encode_dataset, evaluate_loss, pretrain_decoder, run_stage

EXIT_OK, EXIT_USAGE, EXIT_FORMAT, EXIT_NUMERIC = 0, 1, 2, 3

ABLATION_ROWS = (
    ("Baseline", "concat", False),
    ("+MDA", "concat", True),
    ("+SFI", "sfi", False),
    ("+SFI +MDA", "sfi", True),
)

# offsets from the run seed, one independent stream per split
_SPLITS = {"stage1": 101, "stage2": 202, "val1": 303, "val2": 404, "test": 505}


def _split(cfg: RunConfig, vocab: Vocabulary, split: str):
    d = cfg["data"]
    size = {"val1": d["val_size"], "val2": d["val_size"], "test": d["test_size"]}.get(split, d["train_size"])
    return make_dataset(size, cfg.seed + _SPLITS[split], vocab, cfg["pyramid"]["resolution"],
                        instruct=split in ("stage2", "val2"), caption_fraction=d["caption_fraction"])


def _say(out, text: str = "") -> None:
    if out is not None:
        print(text, file=out)


def cmd_gradcheck(cfg: RunConfig | None = None, out=sys.stdout) -> int:
    seed = cfg.seed if cfg is not None else 0
    report = gradcheck(seed=seed)
    for line in report.lines():
        _say(out, line)
    return EXIT_OK if report.passed else EXIT_NUMERIC


def build_model(cfg: RunConfig, vocab: Vocabulary, fusion=None, mda=None) -> AquilaModel:
    return AquilaModel(cfg.model_config(len(vocab), fusion=fusion, mda=mda), seed=cfg.seed)


def train_stage(cfg: RunConfig, model: AquilaModel, vocab: Vocabulary, stage: int, log=None,
                steps: int | None = None) -> dict:
    """Run one stage on the configured splits; returns summary metrics."""
    train = encode_dataset(model, _split(cfg, vocab, f"stage{stage}"), vocab)
    val = encode_dataset(model, _split(cfg, vocab, f"val{stage}"), vocab)
    plan = cfg.plan(stage, steps)
    before = evaluate_loss(model, val)
    if log is not None:
        log.write(f"# stage {stage}: {plan.steps} steps, trainable groups {','.join(plan.trainable_groups)}\n")
        log.write(f"# val_loss_initial={before:.9e}\n")
        log.write("step,stage,lr,loss\n")
    records = run_stage(plan, train, model, log=log)
    after = evaluate_loss(model, val)
    if log is not None:
        log.write(f"# val_loss_final={after:.9e}\n")
    return {"val_loss_initial": before, "val_loss_final": after, "records": records}


def pretrain(cfg: RunConfig, model: AquilaModel, vocab: Vocabulary, log=None) -> None:
    """Text-only decoder pretraining on the captions and questions of both training splits."""
    plan = cfg.pretrain_plan()
    if plan.steps == 0:
        return
    if log is not None:
        log.write(f"# decoder pretraining: {plan.steps} steps, logged as stage 0\n")
        log.write("step,stage,lr,loss\n")
    samples = _split(cfg, vocab, "stage1") + _split(cfg, vocab, "stage2")
    pretrain_decoder(plan, samples, vocab, model, log)


def _header(cfg: RunConfig) -> str:
    return "".join(f"# {line}\n" for line in cfg.dump().splitlines())


def cmd_train(cfg: RunConfig, stage: int, out_dir, resume=None, out=sys.stdout) -> int:
    if stage not in (1, 2):
        raise UsageError("--stage must be 1 or 2")
    if stage == 2 and resume is None:
        raise UsageError("stage 2 needs --resume with a stage-1 checkpoint")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    vocab = Vocabulary.from_grammar()
    model = build_model(cfg, vocab)
    if resume is not None:
        if not Path(resume).exists():
            raise UsageError(f"resume checkpoint {resume} does not exist")
        model.load_state_dict(checkpoint.load(resume))
        model.completed_stage = 1
    log_path = out_dir / f"metrics_stage{stage}.log"
    with open(log_path, "w", encoding="utf-8") as log:
        log.write(_header(cfg))
        if stage == 1:
            pretrain(cfg, model, vocab, log)
            # the reference point of the learning criterion: stage-2 loss before any vision training
            val2 = encode_dataset(model, _split(cfg, vocab, "val2"), vocab)
            log.write(f"# stage2_val_loss_untrained={evaluate_loss(model, val2):.9e}\n")
        summary = train_stage(cfg, model, vocab, stage, log)
        if stage == 2:
            test = encode_dataset(model, _split(cfg, vocab, "test"), vocab)
            acc = caption_accuracy(model, test, vocab)
            summary["caption_exact_match"] = acc
            log.write(f"# caption_exact_match={acc:.6f}\n")
    ckpt = out_dir / f"stage{stage}.ckpt"
    checkpoint.save(ckpt, model.state_dict())
    (out_dir / "config.ini").write_text(cfg.dump(), encoding="utf-8")
    _say(out, f"stage {stage}: val loss {summary['val_loss_initial']:.4f} -> {summary['val_loss_final']:.4f}")
    if "caption_exact_match" in summary:
        _say(out, f"caption exact match: {summary['caption_exact_match']:.3f}")
    _say(out, f"wrote {ckpt} and {log_path}")
    return EXIT_OK


def run_ablation(cfg: RunConfig, out_dir=None, out=sys.stdout, steps: int | None = None) -> list[dict]:
    vocab = Vocabulary.from_grammar()
    steps = cfg["ablate"]["steps_per_stage"] if steps is None else steps
    # one pretrained decoder shared by every row, so rows differ only in fusion and alignment
    reference = build_model(cfg, vocab)
    pretrain(cfg, reference, vocab)
    decoder = {n: t.data for n, t in reference.params.items() if n.startswith("decoder.")}
    rows = []
    for label, fusion, mda in ABLATION_ROWS:
        start = time.perf_counter()
        model = build_model(cfg, vocab, fusion=fusion, mda=mda)
        model.load_state_dict(decoder, strict=False)
        log = None
        if out_dir is not None:
            slug = label.replace("+", "plus").replace(" ", "_").lower()
            log = open(Path(out_dir) / f"ablate_{slug}.log", "w", encoding="utf-8")
            log.write(_header(cfg))
        try:
            train_stage(cfg, model, vocab, 1, log, steps)
            s2 = train_stage(cfg, model, vocab, 2, log, steps)
        finally:
            if log is not None:
                log.close()
        test = encode_dataset(model, _split(cfg, vocab, "test"), vocab)
        row = {
            "method": label,
            "fusion": fusion,
            "mda": mda,
            "final_loss": s2["val_loss_final"],
            "caption_exact_match": caption_accuracy(model, test, vocab),
            "seconds": time.perf_counter() - start,
        }
        rows.append(row)
        _say(out, f"{label:<10} val loss {row['final_loss']:.4f}  exact match {row['caption_exact_match']:.3f}")
    return rows


def format_table(rows: list[dict]) -> str:
    lines = ["method\tfinal_val_loss\tcaption_exact_match"]
    lines += [f"{r['method']}\t{r['final_loss']:.6f}\t{r['caption_exact_match']:.4f}" for r in rows]
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: RunConfig, out_dir, out=sys.stdout) -> int:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = run_ablation(cfg, out_dir, out)
    table = format_table(rows)
    (out_dir / "ablation.tsv").write_text(table, encoding="utf-8")
    _say(out, table.rstrip())
    return EXIT_OK


def caption_image(cfg: RunConfig, ckpt, image_path) -> str:
    vocab = Vocabulary.from_grammar()
    model = build_model(cfg, vocab)
    model.load_state_dict(checkpoint.load(ckpt))
    pixels = read_image(image_path)
    r = cfg["pyramid"]["resolution"]
    if pixels.shape[:2] != (r, r):
        raise FormatError(f"image is {pixels.shape[1]}x{pixels.shape[0]}, the model expects {r}x{r}")
    raw = model.encode_images(pixels[None])
    ids = model.generate(raw, vocab.bos, vocab.eos, cfg["data"]["max_new_tokens"])[0]
    return vocab.decode(ids)


def cmd_caption(cfg: RunConfig, ckpt, image_path, out=sys.stdout) -> int:
    _say(out, caption_image(cfg, ckpt, image_path))
    return EXIT_OK


def cmd_inspect(ckpt, out=sys.stdout) -> int:
    tensors = checkpoint.load(ckpt)
    for name, arr in tensors.items():
        _say(out, f"{name}\t{'x'.join(map(str, arr.shape))}\t{arr.dtype}")
    _say(out, f"{len(tensors)} tensors, {sum(a.size for a in tensors.values())} values")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aquila", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def with_config(p, required=False):
        p.add_argument("--config", required=required, help="sectioned key=value config file")
        p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                       help="override a config value (repeatable)")

    with_config(sub.add_parser("gradcheck", help="finite-difference check of every trainable tensor"))
    p = sub.add_parser("train", help="run one training stage")
    with_config(p)
    p.add_argument("--stage", type=int, required=True, choices=(1, 2))
    p.add_argument("--resume")
    p.add_argument("--out", required=True)
    p = sub.add_parser("ablate", help="train the four fusion/alignment variants")
    with_config(p)
    p.add_argument("--out", required=True)
    p = sub.add_parser("caption", help="greedy caption for one image file")
    with_config(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p = sub.add_parser("inspect", help="list the tensors of a checkpoint")
    p.add_argument("--ckpt", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        if args.command == "inspect":
            return cmd_inspect(args.ckpt, out=sys.stdout)
        cfg = RunConfig.load(args.config, args.set)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg, out=sys.stdout)
        if args.command == "train":
            return cmd_train(cfg, args.stage, args.out, args.resume, out=sys.stdout)
        if args.command == "ablate":
            return cmd_ablate(cfg, args.out, out=sys.stdout)
        return cmd_caption(cfg, args.ckpt, args.image, out=sys.stdout)
    except (UsageError, ConfigurationError) as exc:
        print(f"aquila: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FormatError as exc:
        print(f"aquila: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except NumericError as exc:
        print(f"aquila: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FileNotFoundError as exc:
        print(f"aquila: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except AquilaError as exc:
        print(f"aquila: {exc}", file=sys.stderr)
        return EXIT_USAGE
