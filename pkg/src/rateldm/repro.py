"""Three-paradigm comparison grid: per-rate baselines, joint multi-rate
training, and pretrain-then-finetune, each evaluated with the shared probe.

Writes metrics.json (byte-identical across reruns with the same seeds in
deterministic mode) and a rendered text table; wall-clock lines are kept out
of metrics.json and skipped entirely in deterministic mode.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass
from pathlib import Path

from . import checkpoint as ckpt
from .data import load_manifest
from .diffusion import SamplerConfig
from .dsp import RATE_SET
from .metrics import ClassifierTrainConfig, evaluate_model, train_classifier
from .train import ExperimentConfig, load_codec, pretrain_then_finetune, train_ldm


@dataclass
class ReproConfig:
    corpus: str = ""
    pretrain_corpus: str = ""
    codec: str = ""
    rates: tuple[int, ...] = RATE_SET
    steps: int = 2000
    pretrain_steps: int | None = None
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    cond_dropout_prob: float = 0.1
    ddim_steps: int = 50
    guidance_scale: float = 3.0
    eta: float = 0.0
    classifier_steps: int = 600
    pretrain_rate_hz: int = 16000

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rates"] = list(self.rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReproConfig":
        d = dict(d)
        if "rates" in d:
            d["rates"] = tuple(d["rates"])
        return cls(**d)


def _experiment(cfg: ReproConfig, mode: str, rates: tuple[int, ...],
                pretrain_rate: int | None = None) -> ExperimentConfig:
    return ExperimentConfig(
        mode=mode, rates=rates, pretrain_rate_hz=pretrain_rate,
        steps=cfg.steps, pretrain_steps=cfg.pretrain_steps,
        batch_size=cfg.batch_size, lr=cfg.lr, seed=cfg.seed,
        cond_dropout_prob=cfg.cond_dropout_prob,
    )


def repro_tables(cfg: ReproConfig, out_dir: Path, log=None) -> Path:
    deterministic = os.environ.get("RATELDM_DETERMINISTIC", "") == "1"
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = Path(cfg.corpus)
    entries = load_manifest(corpus)
    pre_corpus = Path(cfg.pretrain_corpus)
    pre_entries = load_manifest(pre_corpus)
    codec, scale_factor, _ = load_codec(cfg.codec)
    sampler = SamplerConfig(num_steps=cfg.ddim_steps, guidance_scale=cfg.guidance_scale,
                            eta=cfg.eta, seed=cfg.seed)

    clf, clf_info = train_classifier(
        entries, corpus, ClassifierTrainConfig(steps=cfg.classifier_steps, seed=cfg.seed),
        log=log,
    )

    results: dict[str, dict] = {}
    timings: dict[str, float] = {}
    failures: dict[str, str] = {}

    def run_cell(name: str, fn):
        t0 = time.monotonic()
        try:
            results[name] = fn()
        except Exception as exc:
            failures[name] = f"{type(exc).__name__}: {exc}"
            if log:
                log(f"cell {name} failed: {failures[name]}")
        timings[name] = time.monotonic() - t0
        if len(failures) > 1:
            raise RuntimeError(f"grid aborted, {len(failures)} cells failed: {failures}")

    # Table 1 analog: per-rate baselines vs joint multi-rate conditioning
    for rate in cfg.rates:
        def fixed_cell(rate=rate):
            path = out_dir / f"fixed_{rate}.ckpt"
            train_ldm(_experiment(cfg, "fixed_rate", (rate,)), entries, corpus,
                      codec, scale_factor, path, log=log)
            report = evaluate_model(path, cfg.codec, entries, corpus, clf, sampler,
                                    rates=(rate,), log=log)
            return report.per_rate
        run_cell(f"fixed_{rate}", fixed_cell)

    def joint_cell():
        path = out_dir / "joint.ckpt"
        train_ldm(_experiment(cfg, "multi_rate", tuple(cfg.rates)), entries, corpus,
                  codec, scale_factor, path, log=log)
        report = evaluate_model(path, cfg.codec, entries, corpus, clf, sampler,
                                rates=tuple(cfg.rates), log=log)
        return report.per_rate
    run_cell("joint", joint_cell)

    # Table 2 analog: low-rate pretraining then multi-rate fine-tuning
    def pretrain_cell():
        info = pretrain_then_finetune(
            _experiment(cfg, "pretrain_then_finetune", tuple(cfg.rates),
                        pretrain_rate=cfg.pretrain_rate_hz),
            pre_entries, pre_corpus, entries, corpus, codec, scale_factor,
            out_dir / "pretrain_finetune", log=log,
        )
        report = evaluate_model(info["finetune"]["path"], cfg.codec, entries, corpus,
                                clf, sampler, rates=tuple(cfg.rates), log=log)
        return report.per_rate
    run_cell("pretrain_finetune", pretrain_cell)

    metrics = {
        "cells": {name: {str(r): v for r, v in cell.items()}
                  for name, cell in sorted(results.items())},
        "failures": failures,
        "classifier": clf_info,
        "config": cfg.to_dict(),
        "config_hash": ckpt.config_hash(cfg.to_dict()),
        "seeds": {"train": cfg.seed, "sampler": sampler.seed},
    }
    (out_dir / "metrics.json").write_text(
        json.dumps(metrics, sort_keys=True, indent=2) + "\n", encoding="utf-8"
    )

    lines = ["Joint conditioning vs per-rate training (Table 1 analog)",
             f"{'Model':<22}{'Rate':>8}{'FD':>10}{'IS':>8}{'KL':>8}{'PromptAcc':>11}"]
    for rate in cfg.rates:
        name = f"fixed_{rate}"
        if name in results:
            m = results[name][rate]
            lines.append(f"{'fixed-rate':<22}{rate:>8}{m['fd']:>10.3f}{m['is']:>8.3f}"
                         f"{m['kl']:>8.3f}{m['prompt_acc']:>11.3f}")
    for rate in cfg.rates:
        if "joint" in results and rate in results["joint"]:
            m = results["joint"][rate]
            lines.append(f"{'rate-conditioned':<22}{rate:>8}{m['fd']:>10.3f}{m['is']:>8.3f}"
                         f"{m['kl']:>8.3f}{m['prompt_acc']:>11.3f}")
    lines.append("")
    lines.append("Low-rate pretraining then fine-tuning (Table 2 analog)")
    for rate in cfg.rates:
        if "pretrain_finetune" in results and rate in results["pretrain_finetune"]:
            m = results["pretrain_finetune"][rate]
            lines.append(f"{'pretrain+finetune':<22}{rate:>8}{m['fd']:>10.3f}{m['is']:>8.3f}"
                         f"{m['kl']:>8.3f}{m['prompt_acc']:>11.3f}")
    lines.append("")
    lines.append(f"seeds: train={cfg.seed} sampler={sampler.seed}")
    if not deterministic:
        for name, sec in timings.items():
            lines.append(f"wall-clock {name}: {sec:.1f}s")
    (out_dir / "tables.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out_dir
