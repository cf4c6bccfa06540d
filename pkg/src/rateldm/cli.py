"""Command-line entry point wiring the full pipeline.

Subcommands: gen-data, train-vae, train-ldm, pretrain-finetune, sample,
evaluate, repro-tables. Exit codes: 0 success, 1 runtime failure, 2 usage.
Setting RATELDM_DETERMINISTIC=1 pins torch to one thread and drops
wall-clock lines from reports so reruns are byte-identical.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .codec import CodecTrainConfig, train_codec
from .data import CorpusConfig, build_corpus, load_manifest
from .diffusion import SamplerConfig
from .dsp import RATE_SET
from .metrics import (
    ClassifierTrainConfig,
    MelClassifier,
    MetricReport,
    evaluate_model,
    mel_at_16k,
    train_classifier,
)
from .train import (
    ExperimentConfig,
    entry_mel,
    load_codec,
    pretrain_then_finetune,
    train_ldm,
)

DETERMINISTIC_ENV = "RATELDM_DETERMINISTIC"


def deterministic_mode() -> bool:
    return os.environ.get(DETERMINISTIC_ENV, "") == "1"


def _log(msg: str) -> None:
    print(msg, file=sys.stderr)


def _record_run(out_dir: Path, subcommand: str, args, outputs: list[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    arg_dict = {k: v for k, v in vars(args).items() if k != "func"}
    entry = {"subcommand": subcommand, "args": arg_dict, "outputs": outputs,
             "config_hash": ckpt.config_hash(arg_dict)}
    with open(out_dir / "run_manifest.jsonl", "a", encoding="utf-8") as f:
        f.write(json.dumps(entry, sort_keys=True) + "\n")


def _parse_rates(text: str) -> tuple[int, ...]:
    return tuple(int(r) for r in text.split(","))


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = CorpusConfig(out_dir=args.out, per_class=args.per_class,
                       rates=_parse_rates(args.rates), seed=args.seed,
                       duration_s=args.duration)
    entries = build_corpus(cfg)
    if not args.no_mel_cache:
        out = Path(args.out)
        for e in entries:
            entry_mel(out, e, write_cache=True)
            mel_at_16k(out, e, write_cache=True)
    _log(f"wrote {len(entries)} clips to {args.out}")
    _record_run(Path(args.out), "gen-data", args, ["manifest.jsonl"])
    return 0


def cmd_train_vae(args) -> int:
    entries = load_manifest(args.corpus)
    corpus = Path(args.corpus)
    train_mels = [entry_mel(corpus, e).values for e in entries if e.split == "train"]
    valid_mels = [entry_mel(corpus, e).values for e in entries if e.split == "valid"]
    cfg = CodecTrainConfig(steps=args.steps, batch_size=args.batch_size,
                           lr=args.lr, seed=args.seed)
    codec, info = train_codec(train_mels, valid_mels, cfg, log=_log)
    from .train import save_codec_checkpoint

    out = Path(args.out)
    save_codec_checkpoint(out, codec, info["scale_factor"],
                          {"best_val_loss": info["best_val_loss"],
                           "best_step": info["best_step"]})
    _log(f"codec saved to {out} (val loss {info['best_val_loss']:.5f})")
    _record_run(out.parent, "train-vae", args, [out.name])
    return 0


def cmd_train_ldm(args) -> int:
    mode = {"fixed": "fixed_rate", "multi": "multi_rate"}[args.mode]
    if args.config:
        config = ExperimentConfig.from_json(args.config)
    else:
        config = ExperimentConfig(mode=mode, rates=_parse_rates(args.rates),
                                  steps=args.steps, batch_size=args.batch_size,
                                  lr=args.lr, seed=args.seed)
    entries = load_manifest(args.corpus)
    codec, scale_factor, _ = load_codec(args.codec)
    out = Path(args.out)
    info = train_ldm(config, entries, Path(args.corpus), codec, scale_factor, out,
                     init=args.init, resume=args.resume, log=_log)
    _log(f"ldm saved to {out} (best val {info['best_val_loss']:.4f} @ step {info['best_step']})")
    _record_run(out.parent, "train-ldm", args, [out.name])
    return 0


def cmd_pretrain_finetune(args) -> int:
    config = ExperimentConfig(
        mode="pretrain_then_finetune", rates=_parse_rates(args.rates),
        pretrain_rate_hz=args.pretrain_rate, steps=args.steps,
        pretrain_steps=args.pretrain_steps, batch_size=args.batch_size,
        lr=args.lr, seed=args.seed,
    )
    codec, scale_factor, _ = load_codec(args.codec)
    info = pretrain_then_finetune(
        config, load_manifest(args.pretrain_corpus), Path(args.pretrain_corpus),
        load_manifest(args.corpus), Path(args.corpus), codec, scale_factor,
        args.out, log=_log,
    )
    _log(f"finetuned checkpoint: {info['finetune']['path']}")
    _record_run(Path(args.out), "pretrain-finetune", args,
                ["pretrain.ckpt", "finetune.ckpt"])
    return 0


def cmd_sample(args) -> int:
    from .train import generate

    sampler = SamplerConfig(num_steps=args.steps, guidance_scale=args.guidance,
                            eta=args.eta, seed=args.seed)
    generate(args.ldm, args.codec, args.prompt, args.rate, sampler, args.out,
             duration_s=args.duration)
    _log(f"wrote {args.out}")
    _record_run(Path(args.out).parent, "sample", args, [Path(args.out).name])
    return 0


def _load_or_train_classifier(path: str | None, corpus: Path, entries, seed: int):
    if path and Path(path).exists():
        tensors, meta = ckpt.load_checkpoint(path)
        clf = MelClassifier(num_classes=int(meta["num_classes"]),
                            embed_dim=int(meta["embed_dim"]))
        clf.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
        clf.eval()
        return clf
    clf, info = train_classifier(entries, corpus,
                                 ClassifierTrainConfig(seed=seed), log=_log)
    if path:
        ckpt.save_checkpoint(path, dict(clf.state_dict()),
                             {"kind": "classifier", "num_classes": clf.num_classes,
                              "embed_dim": clf.embed_dim, **info})
    return clf


def cmd_evaluate(args) -> int:
    entries = load_manifest(args.corpus)
    corpus = Path(args.corpus)
    clf = _load_or_train_classifier(args.classifier, corpus, entries, args.seed)
    sampler = SamplerConfig(num_steps=args.steps, guidance_scale=args.guidance,
                            eta=args.eta, seed=args.seed)
    rates = _parse_rates(args.rates) if args.rates else None
    report = evaluate_model(args.ldm, args.codec, entries, corpus, clf, sampler,
                            rates=rates, log=_log)
    report.config_hash = ckpt.config_hash({k: v for k, v in vars(args).items() if k != "func"})
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.table())
    _record_run(out.parent, "evaluate", args, [out.name])
    return 0


def cmd_repro_tables(args) -> int:
    from .repro import ReproConfig, repro_tables

    if args.config:
        with open(args.config, encoding="utf-8") as f:
            cfg = ReproConfig.from_dict(json.load(f))
    else:
        cfg = ReproConfig()
    cfg.corpus = args.corpus
    cfg.pretrain_corpus = args.pretrain_corpus
    cfg.codec = args.codec
    out = repro_tables(cfg, Path(args.out), log=_log)
    _log(f"report written to {out}")
    _record_run(Path(args.out), "repro-tables", args, ["metrics.json", "tables.txt"])
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rateldm",
                                description="Sampling-rate-conditioned text-to-audio diffusion")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate the synthetic captioned corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--per-class", type=int, default=50)
    g.add_argument("--rates", default=",".join(str(r) for r in RATE_SET))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--duration", type=float, default=1.0)
    g.add_argument("--no-mel-cache", action="store_true",
                   help="skip precomputing mel caches")
    g.set_defaults(func=cmd_gen_data)

    v = sub.add_parser("train-vae", help="train the mel codec")
    v.add_argument("--corpus", required=True)
    v.add_argument("--out", required=True)
    v.add_argument("--steps", type=int, default=1500)
    v.add_argument("--batch-size", type=int, default=32)
    v.add_argument("--lr", type=float, default=2e-4)
    v.add_argument("--seed", type=int, default=0)
    v.set_defaults(func=cmd_train_vae)

    l = sub.add_parser("train-ldm", help="train the diffusion model")
    l.add_argument("--corpus", required=True)
    l.add_argument("--codec", required=True)
    l.add_argument("--out", required=True)
    l.add_argument("--mode", choices=["fixed", "multi"], default="multi")
    l.add_argument("--rates", default=",".join(str(r) for r in RATE_SET))
    l.add_argument("--init", default=None, help="warm-start checkpoint")
    l.add_argument("--resume", default=None, help="resume an interrupted run")
    l.add_argument("--config", default=None, help="experiment config JSON")
    l.add_argument("--steps", type=int, default=2000)
    l.add_argument("--batch-size", type=int, default=32)
    l.add_argument("--lr", type=float, default=1e-4)
    l.add_argument("--seed", type=int, default=0)
    l.set_defaults(func=cmd_train_ldm)

    f = sub.add_parser("pretrain-finetune",
                       help="fixed-rate pretraining then multi-rate fine-tuning")
    f.add_argument("--pretrain-corpus", required=True)
    f.add_argument("--corpus", required=True)
    f.add_argument("--codec", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--pretrain-rate", type=int, default=16000)
    f.add_argument("--rates", default=",".join(str(r) for r in RATE_SET))
    f.add_argument("--steps", type=int, default=2000)
    f.add_argument("--pretrain-steps", type=int, default=None)
    f.add_argument("--batch-size", type=int, default=32)
    f.add_argument("--lr", type=float, default=1e-4)
    f.add_argument("--seed", type=int, default=0)
    f.set_defaults(func=cmd_pretrain_finetune)

    s = sub.add_parser("sample", help="generate a WAV from a prompt")
    s.add_argument("--ldm", required=True)
    s.add_argument("--codec", required=True)
    s.add_argument("--prompt", required=True)
    s.add_argument("--rate", type=int, required=True)
    s.add_argument("--steps", type=int, default=200)
    s.add_argument("--guidance", type=float, default=3.0)
    s.add_argument("--eta", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--duration", type=float, default=1.0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("evaluate", help="score a checkpoint on the test split")
    e.add_argument("--ldm", required=True)
    e.add_argument("--codec", required=True)
    e.add_argument("--corpus", required=True)
    e.add_argument("--classifier", default=None,
                   help="classifier checkpoint (trained and saved here if missing)")
    e.add_argument("--rates", default=None)
    e.add_argument("--steps", type=int, default=200)
    e.add_argument("--guidance", type=float, default=3.0)
    e.add_argument("--eta", type=float, default=0.0)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("repro-tables",
                       help="run the three-paradigm comparison grid")
    r.add_argument("--corpus", required=True)
    r.add_argument("--pretrain-corpus", required=True)
    r.add_argument("--codec", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config", default=None, help="grid config JSON")
    r.set_defaults(func=cmd_repro_tables)
    return p


def main(argv: list[str] | None = None) -> int:
    if deterministic_mode():
        torch.set_num_threads(1)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
