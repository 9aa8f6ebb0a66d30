"""Command-line surface: data synthesis, training, evaluation, generation.

Every subcommand resolves its configuration (defaults <- --config file <-
flag overrides), writes a ``run.json`` echoing the resolved state, and keeps
all artifacts under the requested output directory. Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import tensor as T
from . import training as training_mod
from .backbone import (BOI, BOS, EOI, IMG_SLOT, InterleavedSequence, Vocabulary)
from .config import derive_seed, load_config, rng_for
from .errors import HarmonyError
from .experts import attach, attach_dense
from .synthworld import default_vocabulary, make_dataset, write_dataset, write_pgm
from .training import (FORMAT_VERSION, build_model, evaluate, load_checkpoint,
                       prepare_datasets, pretrain, run_experiment,
                       save_checkpoint)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with code 2 on bad flags; the contract here wants 1."""

    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="harmony", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, ckpt=False):
        p.add_argument("--config", type=Path, default=None,
                       help="JSON config file merged over the defaults")
        p.add_argument("--out", type=Path, required=True,
                       help="output directory (created if missing)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config seed")
        if ckpt:
            p.add_argument("--ckpt", type=Path, required=True,
                           help="checkpoint directory to start from")

    common(sub.add_parser("gen-data", help="write the synthetic dataset"))
    common(sub.add_parser("pretrain", help="alignment stage: resampler + diffusion"))

    ft = sub.add_parser("finetune", help="comprehensive stage from a checkpoint")
    common(ft, ckpt=True)
    ft.add_argument("--arm", default="joint_slide_lora",
                    choices=list(training_mod.ARMS))
    ft.add_argument("--placement", default=None,
                    choices=["vision_encoder", "llm", "both"])

    ev = sub.add_parser("eval", help="score a checkpoint on a fresh eval set")
    common(ev, ckpt=True)

    gen = sub.add_parser("generate", help="decode text or sample an image")
    gen.add_argument("--ckpt", type=Path, required=True)
    gen.add_argument("--mode", required=True, choices=["text", "image"])
    gen.add_argument("--prompt", required=True)
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--seed", type=int, default=None)

    common(sub.add_parser("ablate", help="arm comparison plus placement rows"))
    return parser


def _resolve(args) -> dict:
    overrides = {"seed": args.seed} if args.seed is not None else None
    return load_config(args.config, overrides)


def _write_run_stamp(out: Path, command: str, cfg: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    stamp = {"command": command, "version": __version__,
             "checkpoint_format": FORMAT_VERSION, "config": cfg}
    (out / "run.json").write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")


def _save_model(dirpath: Path, model, vocab, cfg: dict, *, arm=None,
                placement=None, step=0) -> None:
    note = {"cfg": cfg, "arm": arm, "placement": placement}
    save_checkpoint(dirpath, model, step=step, config=note)
    vocab.save(dirpath / "vocab.txt")


def _load_model(dirpath: Path):
    """Rebuild the model a checkpoint describes, then restore its weights."""
    manifest_path = dirpath / "manifest.json"
    if not manifest_path.is_file():
        raise HarmonyError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    note = manifest.get("config") or {}
    if "cfg" not in note:
        raise HarmonyError(f"checkpoint {dirpath} carries no model config")
    cfg = note["cfg"]
    vocab = Vocabulary.load(dirpath / "vocab.txt")
    seed = cfg["seed"]
    model = build_model(cfg, len(vocab), seed)
    if note.get("placement"):
        attach(model, note["placement"], cfg["slide_lora"],
               rng_for(seed, f"lora/{note['placement']}"))
    elif note.get("arm") in ("text_only", "image_only", "joint_dense"):
        attach_dense(model, cfg["slide_lora"]["placement"], cfg["slide_lora"],
                     rng_for(seed, "lora/dense"))
    meta = load_checkpoint(dirpath, model)
    return model, vocab, cfg, meta


def _cmd_gen_data(args) -> int:
    cfg = _resolve(args)
    _write_run_stamp(args.out, "gen-data", cfg)
    samples = make_dataset(cfg["seed"], cfg["data"]["train_size"])
    data_path = args.out / "data.jsonl"
    write_dataset(samples, data_path)
    digest = hashlib.sha256(data_path.read_bytes()).hexdigest()
    (args.out / "data.jsonl.sha256").write_text(digest + "\n")
    print(f"wrote {len(samples)} samples to {data_path}")
    return 0


def _cmd_pretrain(args) -> int:
    cfg = _resolve(args)
    _write_run_stamp(args.out, "pretrain", cfg)
    vocab = default_vocabulary()
    seed = cfg["seed"]
    train_seqs, _ = prepare_datasets(cfg, seed, vocab)
    model = build_model(cfg, len(vocab), seed)
    records = pretrain(model, train_seqs, cfg, seed,
                       metrics_path=args.out / "metrics.jsonl")
    _save_model(args.out / "ckpt", model, vocab, cfg,
                step=cfg["train"]["pretrain_steps"])
    print(f"pretrain done, final loss {records[-1]['total']:.4f}")
    return 0


def _cmd_finetune(args) -> int:
    cfg = _resolve(args)
    _write_run_stamp(args.out, "finetune", cfg)
    seed = cfg["seed"]
    model, vocab, _, _ = _load_model(args.ckpt)
    if model.slide_registry is not None or model.dense_registry is not None:
        raise HarmonyError(
            f"checkpoint {args.ckpt} already carries adapters; "
            "finetune starts from a pretrain checkpoint")
    placement = None
    if args.arm == "joint_slide_lora":
        placement = args.placement or cfg["slide_lora"]["placement"]
        attach(model, placement, cfg["slide_lora"],
               rng_for(seed, f"lora/{placement}"))
    else:
        attach_dense(model, cfg["slide_lora"]["placement"], cfg["slide_lora"],
                     rng_for(seed, "lora/dense"))
    train_seqs, eval_samples = prepare_datasets(cfg, seed, vocab)
    tcfg = training_mod.TrainConfig(
        stage="finetune", arm=args.arm, lr=cfg["train"]["lr_finetune"],
        batch=cfg["train"]["batch"], steps=cfg["train"]["finetune_steps"],
        lambda_gate=cfg["train"]["lambda_gate"], seed=seed,
        log_every=cfg["train"]["log_every"])
    records = training_mod.train(model, train_seqs, tcfg,
                                 metrics_path=args.out / "metrics.jsonl")
    scores = evaluate(model, eval_samples, vocab, derive_seed(seed, "eval-run"))
    row = {"seed": seed, "arm": args.arm, "placement": placement,
           "final_loss": records[-1]["total"], **scores}
    (args.out / "scores.json").write_text(
        json.dumps(row, indent=2, sort_keys=True) + "\n")
    _save_model(args.out / "ckpt", model, vocab, cfg, arm=args.arm,
                placement=placement, step=cfg["train"]["finetune_steps"])
    print(f"finetune[{args.arm}] done, accuracy {row['accuracy']}, "
          f"pixel_mse {row['pixel_mse']}")
    return 0


def _cmd_eval(args) -> int:
    cfg = _resolve(args)
    _write_run_stamp(args.out, "eval", cfg)
    model, vocab, ckpt_cfg, _ = _load_model(args.ckpt)
    if args.config is not None and (model.slide_registry is not None
                                    or model.dense_registry is not None):
        mismatched = sorted(
            key for key in set(cfg["slide_lora"]) | set(ckpt_cfg["slide_lora"])
            if cfg["slide_lora"].get(key) != ckpt_cfg["slide_lora"].get(key))
        if mismatched:
            raise HarmonyError(
                "checkpoint adapters disagree with --config slide_lora: "
                f"mismatched={mismatched}")
    samples = make_dataset(derive_seed(cfg["seed"], "data/eval"),
                           cfg["data"]["eval_size"])
    scores = evaluate(model, samples, vocab, derive_seed(cfg["seed"], "eval-run"))
    (args.out / "scores.json").write_text(
        json.dumps(scores, indent=2, sort_keys=True) + "\n")
    print(json.dumps(scores, sort_keys=True))
    return 0


def _image_prompt(prompt_text: str, vocab, model) -> InterleavedSequence:
    """Training-shaped image prompt: all-black input span, then the caption."""
    m = model.cfg["model"]
    queries = m["queries"]
    tokens = ([BOS, BOI] + [IMG_SLOT] * queries + [EOI]
              + vocab.encode(f" {prompt_text} "))
    black = np.zeros((m["grid"], m["grid"]))
    return InterleavedSequence(tokens=tokens, input_image=black,
                               input_span=(2, 2 + queries), task_label=0)


def _cmd_generate(args) -> int:
    model, vocab, cfg, _ = _load_model(args.ckpt)
    args.out.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else cfg["seed"]
    stamp = {"command": "generate", "version": __version__,
             "checkpoint_format": FORMAT_VERSION,
             "config": {"mode": args.mode, "prompt": args.prompt, "seed": seed}}
    (args.out / "run.json").write_text(json.dumps(stamp, indent=2, sort_keys=True) + "\n")

    rng = rng_for(seed, "generate")
    if args.mode == "text":
        prompt = InterleavedSequence(tokens=[BOS] + vocab.encode(args.prompt))
        budget = model.lm.max_len - len(prompt.tokens)
        out = model.generate(prompt, "text", budget, rng)
        text = vocab.decode(out.tokens[len(prompt.tokens):])
        (args.out / "generated.txt").write_text(text + "\n")
        print(text)
        return 0

    prompt = _image_prompt(args.prompt, vocab, model)
    out = model.generate(prompt, "image", 0, rng)
    write_pgm(out.generated_image, args.out / "generated.pgm")
    k = model.lm.image_slots
    slots = list(range(len(prompt.tokens) + 1, len(prompt.tokens) + 1 + k))
    with T.no_grad():
        vision_tokens = model.encode(prompt.input_image)
        hidden = model.lm.hidden_states(out, vision_tokens)
        cond = model.lm.cond_head(T.take_rows(hidden, slots)).data
    (args.out / "conditions.json").write_text(
        json.dumps([[float(v) for v in row] for row in cond], indent=2) + "\n")
    print(f"wrote {args.out / 'generated.pgm'}")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _resolve(args)
    _write_run_stamp(args.out, "ablate", cfg)
    workers = os.environ.get("HARMONY_THREADS")
    max_workers = int(workers) if workers else None
    report = run_experiment(cfg, out_dir=args.out, max_workers=max_workers)
    print(report["table"])
    summary = report["summary"]
    print(f"interference {summary['interference_seeds']}/{summary['n_seeds']} seeds, "
          f"recovery {summary['recovery_seeds']}/{summary['n_seeds']}, "
          f"ablation ordering {summary['ablation_seeds']}/{summary['n_seeds']}")
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "pretrain": _cmd_pretrain,
    "finetune": _cmd_finetune,
    "eval": _cmd_eval,
    "generate": _cmd_generate,
    "ablate": _cmd_ablate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(f"usage error: {err}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return 1
    if getattr(args, "config", None) is not None and not args.config.is_file():
        print(f"usage error: config file not found: {args.config}", file=sys.stderr)
        return 1
    try:
        return _COMMANDS[args.command](args)
    except (HarmonyError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


def entry() -> None:
    sys.exit(main())
