"""Command line entry point: ``tinyvlm {synth,train,caption,eval,metrics}``.

Exit codes: 0 success, 1 usage/configuration error, 2 I/O or format error,
3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data as data_mod
from .errors import ConfigError, FormatError, InputError, SequenceLengthError, TrainingAborted
from .inference import generate_caption, load_checkpoint, save_checkpoint
from .language import Tokenizer
from .metrics import evaluate_corpus, read_lines, score_corpus
from .model import CaptionModel
from .training import CaptionDataset, TrainConfig, run_stage, write_loss_trace
from .vision import ViTConfig, preprocess_image

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("tinyvlm")

MODEL_DEFAULTS = {
    "seed": 0,
    "image_size": 32,
    "patch_size": 8,
    "vit_dim": 64,
    "vit_depth": 2,
    "vit_heads": 4,
    "lm_dim": 96,
    "lm_depth": 2,
    "lm_heads": 4,
    "max_seq_len": 160,
}
CONFIG_SECTIONS = ("model", "stage1", "stage2")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# -- configuration --------------------------------------------------------


def load_config(path) -> dict:
    """Read and validate a JSON training config (unknown keys are rejected)."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    unknown = sorted(set(raw) - set(CONFIG_SECTIONS))
    if unknown:
        raise ConfigError(f"{path}: unknown config sections: {', '.join(unknown)}")
    model = dict(MODEL_DEFAULTS)
    extra = sorted(set(raw.get("model", {})) - set(MODEL_DEFAULTS))
    if extra:
        raise ConfigError(f"{path}: unknown model keys: {', '.join(extra)}")
    model.update(raw.get("model", {}))
    cfg = {"model": model}
    for stage in (1, 2):
        section = dict(raw.get(f"stage{stage}", {}))
        sources = section.pop("data", [])
        entries = []
        for item in sources:
            if isinstance(item, str):
                item = {"manifest": item}
            bad = sorted(set(item) - {"manifest", "weight"})
            if bad or "manifest" not in item:
                raise ConfigError(f"{path}: stage{stage} data entries need 'manifest' (and optional 'weight')")
            entries.append({"manifest": item["manifest"], "weight": float(item.get("weight", 1.0))})
        if "mixture_weights" in section:
            raise ConfigError(f"{path}: give per-source 'weight' in stage{stage}.data instead of mixture_weights")
        if "stage" in section:
            raise ConfigError(f"{path}: 'stage' is implied by the section name")
        TrainConfig.from_dict({**section, "stage": stage})  # validates keys
        cfg[f"stage{stage}"] = {"train": section, "data": entries}
    return cfg


def _fresh_model(model_cfg: dict, manifests) -> CaptionModel:
    words = set(data_mod.corpus_words())
    for m in manifests:
        tmp = Tokenizer.from_texts(s.instruction + " " + s.response for s in m)
        words.update(tmp.vocab[5:])
    tokenizer = Tokenizer(sorted(words))
    vit = ViTConfig(image_size=model_cfg["image_size"], patch_size=model_cfg["patch_size"],
                    embed_dim=model_cfg["vit_dim"], depth=model_cfg["vit_depth"], heads=model_cfg["vit_heads"])
    return CaptionModel.build(tokenizer, seed=model_cfg["seed"], vit=vit, lm_dim=model_cfg["lm_dim"],
                              lm_depth=model_cfg["lm_depth"], lm_heads=model_cfg["lm_heads"],
                              max_seq_len=model_cfg["max_seq_len"])


# -- subcommands ----------------------------------------------------------


def cmd_synth(args) -> int:
    out = Path(args.out)
    manifest = data_mod.synthesize_dataset(args.seed, args.count, args.style, out_dir=out,
                                           resolution=args.resolution, source=args.source)
    lengths = [len(s.response.split()) for s in manifest]
    print(f"wrote {len(manifest)} images and {out / 'manifest.jsonl'} "
          f"(style {args.style}, mean caption length {np.mean(lengths):.1f} words)")
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.config:
        raise UsageError("train needs --config")
    cfg = load_config(args.config)
    stage = args.stage
    section = cfg[f"stage{stage}"]
    if not section["data"]:
        raise ConfigError(f"config has no stage{stage} data sources")
    manifests = [data_mod.load_manifest(d["manifest"]) for d in section["data"]]
    if args.resume:
        model = load_checkpoint(args.resume)
    elif stage == 2:
        raise ConfigError("stage 2 continues from a stage-1 checkpoint; pass --resume")
    else:
        model = _fresh_model(cfg["model"], manifests)

    train = dict(section["train"])
    for flag, key in (("steps", "total_steps"), ("lr", "base_lr"), ("seed", "seed"), ("batch_size", "batch_size")):
        value = getattr(args, flag)
        if value is not None:
            train[key] = value
    if args.lr is not None and "min_lr" in train and train["min_lr"] > args.lr:
        train.pop("min_lr")
    if args.steps is not None and "warmup_steps" in train and train["warmup_steps"] >= args.steps:
        train.pop("warmup_steps")
    train_cfg = TrainConfig.from_dict(
        {**train, "stage": stage, "mixture_weights": tuple(d["weight"] for d in section["data"])}
    )
    datasets = [CaptionDataset.from_manifest(m, model, d["manifest"]) for m, d in zip(manifests, section["data"])]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = run_stage(model, datasets, train_cfg, log_every=args.log_every)
    write_loss_trace(result, out / f"loss_stage{stage}.csv")
    save_checkpoint(model, out / f"stage{stage}.ckpt")
    final = result.losses[-1] if result.losses else float("nan")
    print(f"stage {stage}: {train_cfg.total_steps} steps, final loss {final:.4f}; "
          f"checkpoint {out / f'stage{stage}.ckpt'}")
    return EXIT_OK


def cmd_caption(args) -> int:
    model = load_checkpoint(args.checkpoint)
    image = preprocess_image(data_mod.load_ppm(args.image), model.image_size)
    prompt = args.prompt if args.prompt is not None else data_mod.PROMPTS[0]
    print(generate_caption(model, image, prompt, args.max_new_tokens))
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    manifest = data_mod.load_manifest(args.manifest)
    report, idx, hyps = evaluate_corpus(model, manifest, args.samples, args.seed, args.max_new_tokens,
                                        args.bleu_mode)
    _emit_report(report, args.report)
    if args.hyp_out:
        Path(args.hyp_out).write_text("".join(h + "\n" for h in hyps), encoding="utf-8")
    return EXIT_OK


def cmd_metrics(args) -> int:
    hyps, refs = read_lines(args.hyp), read_lines(args.ref)
    if len(hyps) != len(refs):
        raise InputError(f"{args.hyp} has {len(hyps)} lines but {args.ref} has {len(refs)}")
    _emit_report(score_corpus(hyps, refs, args.bleu_mode), args.report)
    return EXIT_OK


def _emit_report(report, path) -> None:
    print(report.to_table())
    print(report.to_kv())
    if path:
        Path(path).write_text(report.to_kv() + "\n", encoding="utf-8")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tinyvlm", description="Desk-scale vision-language captioning pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic scene dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--count", type=int, required=True)
    s.add_argument("--style", choices=data_mod.STYLES, default="dense")
    s.add_argument("--source", choices=data_mod.SOURCES, default=None)
    s.add_argument("--resolution", type=int, default=32)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run one training stage")
    t.add_argument("--config")
    t.add_argument("--stage", type=int, choices=(1, 2), required=True)
    t.add_argument("--resume", help="checkpoint to continue from (required for stage 2)")
    t.add_argument("--out", required=True)
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--log-every", type=int, default=0)
    t.set_defaults(func=cmd_train)

    c = sub.add_parser("caption", help="caption one PPM image")
    c.add_argument("--checkpoint", required=True)
    c.add_argument("--image", required=True)
    c.add_argument("--prompt")
    c.add_argument("--max-new-tokens", type=int, default=150)
    c.set_defaults(func=cmd_caption)

    e = sub.add_parser("eval", help="caption a sampled subset of a manifest and score it")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--manifest", required=True)
    e.add_argument("--samples", type=int, default=600)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--max-new-tokens", type=int, default=150)
    e.add_argument("--bleu-mode", choices=("corpus", "sentence"), default="corpus")
    e.add_argument("--report")
    e.add_argument("--hyp-out")
    e.set_defaults(func=cmd_eval)

    m = sub.add_parser("metrics", help="score hypothesis/reference text files")
    m.add_argument("--hyp", required=True)
    m.add_argument("--ref", required=True)
    m.add_argument("--bleu-mode", choices=("corpus", "sentence"), default="corpus")
    m.add_argument("--report")
    m.set_defaults(func=cmd_metrics)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except TrainingAborted as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, InputError, SequenceLengthError, UsageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
