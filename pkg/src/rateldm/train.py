"""Training paradigms, checkpointing, and prompt-to-waveform generation.

Three paradigms: fixed_rate (single-rate baseline), multi_rate (joint
training with the rate condition), and pretrain_then_finetune (fixed-rate
pretraining on a low-rate corpus, then multi-rate fine-tuning warm-started
from it). All per-step randomness derives from (seed, step), so resuming
from a checkpoint reproduces the exact continuation of a straight run.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .codec import Latent, MelCodec
from .cond import NULL_TOKEN_ID, collate_conditions
from .data import ManifestEntry
from .diffusion import SamplerConfig, build_schedule, ddim_sample, training_loss
from .dsp import (
    RATE_SET,
    MelSpectrogram,
    Waveform,
    config_for_rate,
    extract_mel,
    griffin_lim,
    load_mel,
    read_wav,
    save_mel,
    write_wav,
)
from .model import LdmConfig, LdmModel, pad_tokens

MODES = ("fixed_rate", "multi_rate", "pretrain_then_finetune")


@dataclass
class ExperimentConfig:
    mode: str = "multi_rate"
    rates: tuple[int, ...] = RATE_SET
    pretrain_rate_hz: int | None = None
    steps: int = 2000
    pretrain_steps: int | None = None
    batch_size: int = 32
    lr: float = 1e-4
    seed: int = 0
    cond_dropout_prob: float = 0.1
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    ddim_steps: int = 200
    guidance_scale: float = 3.0
    eta: float = 0.0
    val_interval: int = 200
    duration_s: float = 1.0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not (0.0 <= self.cond_dropout_prob < 1.0):
            raise ValueError("cond_dropout_prob must be in [0, 1)")
        if (self.mode == "pretrain_then_finetune") != (self.pretrain_rate_hz is not None):
            raise ValueError("pretrain_rate_hz is required exactly for pretrain_then_finetune")
        if self.mode == "fixed_rate" and len(self.rates) != 1:
            raise ValueError("fixed_rate mode takes exactly one rate")
        self.rates = tuple(int(r) for r in self.rates)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["rates"] = list(self.rates)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "rates" in d:
            d["rates"] = tuple(d["rates"])
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


def step_generator(seed: int, step: int, stream: int = 0) -> torch.Generator:
    """Deterministic per-step generator; stable across resume boundaries."""
    mixed = int(np.random.SeedSequence((seed, stream, step)).generate_state(1)[0])
    return torch.Generator().manual_seed(mixed)


def draw_batch(seed: int, step: int, dataset_size: int, batch_size: int,
               num_train_steps: int, dropout_prob: float):
    """Per-step batch draw: sample indices, timesteps, and dropout flags.

    One generator per step keeps training order, noise, and dropout
    reproducible regardless of where a run was interrupted.
    """
    g = step_generator(seed, step)
    idx = torch.randint(0, dataset_size, (min(batch_size, dataset_size),), generator=g)
    t = torch.randint(1, num_train_steps + 1, (len(idx),), generator=g)
    drop = torch.rand(len(idx), generator=g) < dropout_prob
    return g, idx, t, drop


# ---------------------------------------------------------------------------
# Mel/latent preparation
# ---------------------------------------------------------------------------

def entry_mel(corpus_dir: Path, entry: ManifestEntry, write_cache: bool = False) -> MelSpectrogram:
    """Mel for a manifest entry; reads the corpus cache when present.

    Writing the cache is opt-in so read-only pipeline stages never touch
    the corpus directory.
    """
    cache = corpus_dir / "mel" / (Path(entry.path).stem + ".melc")
    if cache.exists():
        return load_mel(cache)
    w = read_wav(corpus_dir / entry.path)
    m = extract_mel(w, config_for_rate(entry.rate_hz))
    if write_cache:
        cache.parent.mkdir(exist_ok=True)
        save_mel(cache, m)
    return m


@dataclass
class LatentDataset:
    latents: torch.Tensor      # (N, C, T, F), scaled
    token_ids: torch.Tensor    # (N, L)
    token_mask: torch.Tensor   # (N, L)
    rate_ids: torch.Tensor     # (N,)
    captions: list[str]
    rates_hz: list[int]

    def __len__(self) -> int:
        return self.latents.shape[0]


def build_latent_dataset(entries: list[ManifestEntry], corpus_dir: Path,
                         codec: MelCodec, scale_factor: float,
                         model_rates: tuple[int, ...], vocab_size: int) -> LatentDataset:
    if not entries:
        raise ValueError("no manifest entries for the requested split/rates")
    mels = [entry_mel(corpus_dir, e) for e in entries]
    x = torch.stack([MelCodec.normalize(m.values) for m in mels])[:, None]
    with torch.no_grad():
        means = []
        for lo in range(0, len(x), 128):
            means.append(codec.encode(x[lo : lo + 128])[0])
        latents = torch.cat(means) * scale_factor
    token_ids, token_mask = pad_tokens([e.caption for e in entries], vocab_size)
    rate_ids = torch.tensor([model_rates.index(e.rate_hz) for e in entries])
    return LatentDataset(
        latents, token_ids, token_mask, rate_ids,
        [e.caption for e in entries], [e.rate_hz for e in entries],
    )


def apply_cond_dropout(token_ids: torch.Tensor, token_mask: torch.Tensor,
                       drop: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Replace dropped rows' text with the null prompt; rate rows are untouched."""
    token_ids = token_ids.clone()
    token_mask = token_mask.clone()
    token_ids[drop] = NULL_TOKEN_ID
    token_mask[drop] = False
    token_mask[drop, 0] = True
    return token_ids, token_mask


# ---------------------------------------------------------------------------
# Checkpoint helpers
# ---------------------------------------------------------------------------

def save_codec_checkpoint(path: str | Path, codec: MelCodec, scale_factor: float,
                          extra: dict | None = None) -> None:
    meta = {"kind": "codec", "scale_factor": scale_factor,
            "latent_channels": codec.latent_channels, "kl_weight": codec.kl_weight}
    meta.update(extra or {})
    ckpt.save_checkpoint(path, dict(codec.state_dict()), meta)


def load_codec(path: str | Path) -> tuple[MelCodec, float, dict]:
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "codec":
        raise ValueError(f"{path}: not a codec checkpoint")
    codec = MelCodec(latent_channels=int(meta["latent_channels"]),
                     kl_weight=float(meta["kl_weight"]))
    codec.load_state_dict({k: torch.from_numpy(v) for k, v in tensors.items()})
    codec.eval()
    return codec, float(meta["scale_factor"]), meta


def _optimizer_tensors(model: LdmModel, opt: torch.optim.Adam) -> dict:
    out = {}
    name_of = {id(p): n for n, p in model.named_parameters()}
    for p, state in opt.state.items():
        name = name_of[id(p)]
        out[f"opt.{name}.exp_avg"] = state["exp_avg"]
        out[f"opt.{name}.exp_avg_sq"] = state["exp_avg_sq"]
        out[f"opt.{name}.step"] = torch.as_tensor(float(state["step"]))
    return out


def _restore_optimizer(model: LdmModel, opt: torch.optim.Adam, tensors: dict) -> None:
    for name, p in model.named_parameters():
        key = f"opt.{name}.exp_avg"
        if key not in tensors:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(tensors[f"opt.{name}.step"].reshape(()))),
            "exp_avg": torch.from_numpy(tensors[key]).clone(),
            "exp_avg_sq": torch.from_numpy(tensors[f"opt.{name}.exp_avg_sq"]).clone(),
        }


def save_ldm_checkpoint(path: str | Path, model: LdmModel, best_state: dict,
                        opt: torch.optim.Adam | None, metadata: dict) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    tensors.update({f"best.{k}": v for k, v in best_state.items()})
    if opt is not None:
        tensors.update(_optimizer_tensors(model, opt))
    ckpt.save_checkpoint(path, tensors, metadata)


def load_ldm(path: str | Path, which: str = "best") -> tuple[LdmModel, dict]:
    if which not in ("best", "current"):
        raise ValueError("which must be 'best' or 'current'")
    tensors, meta = ckpt.load_checkpoint(path)
    if meta.get("kind") != "ldm":
        raise ValueError(f"{path}: not an LDM checkpoint")
    model = LdmModel(LdmConfig.from_dict(meta["ldm_config"]))
    prefix = "best." if which == "best" else "model."
    state = {k[len(prefix):]: torch.from_numpy(v)
             for k, v in tensors.items() if k.startswith(prefix)}
    model.load_state_dict(state)
    model.eval()
    return model, meta


# ---------------------------------------------------------------------------
# LDM training
# ---------------------------------------------------------------------------

class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, last_good: str):
        super().__init__(message)
        self.last_good = last_good


def _warm_start(model: LdmModel, init_path: str | Path) -> str:
    """Copy weights from a parent checkpoint; rate rows the parent never
    trained keep their fresh initialization."""
    tensors, meta = ckpt.load_checkpoint(init_path)
    parent_rates = [int(r) for r in meta.get("trained_rates", [])]
    state = dict(model.state_dict())
    for k in state:
        src = tensors.get(f"best.{k}")
        if src is None:
            continue
        src_t = torch.from_numpy(src)
        if k == "rate_embed.weight":
            merged = state[k].clone()
            for rid, rate in enumerate(model.rates):
                if rate in parent_rates:
                    merged[rid] = src_t[rid]
            state[k] = merged
        else:
            state[k] = src_t
    model.load_state_dict(state)
    return ckpt.file_sha256(init_path)


def train_ldm(config: ExperimentConfig, entries: list[ManifestEntry], corpus_dir: Path,
              codec: MelCodec, scale_factor: float, out_path: str | Path,
              init: str | Path | None = None, resume: str | Path | None = None,
              ldm_config: LdmConfig | None = None, log=None) -> dict:
    """Run one training phase and write a checkpoint with best-val weights.

    `init` warm-starts weights only; `resume` restores weights, optimizer
    moments and the step counter from an interrupted run of this config.
    """
    train_rates = set(config.rates)
    for e in entries:
        if e.rate_hz not in RATE_SET:
            raise ValueError(f"manifest entry at unsupported rate {e.rate_hz}")
    train_entries = [e for e in entries if e.split == "train" and e.rate_hz in train_rates]
    valid_entries = [e for e in entries if e.split == "valid" and e.rate_hz in train_rates]
    if not train_entries:
        raise ValueError("no training entries for the configured rates")

    if ldm_config is None:
        ldm_config = LdmConfig(rates=RATE_SET, num_train_steps=config.num_train_steps,
                               beta_start=config.beta_start, beta_end=config.beta_end)
    torch.manual_seed(config.seed)
    model = LdmModel(ldm_config)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    schedule = build_schedule(config.num_train_steps, config.beta_start, config.beta_end)

    parent_hash = None
    start_step = 1
    best_val = float("inf")
    best_step = 0
    loss_curve: list[float] = []
    val_curve: list[list[float]] = []
    if init is not None and resume is not None:
        raise ValueError("pass either init or resume, not both")
    if init is not None:
        parent_hash = _warm_start(model, init)
    best_state = {k: v.clone() for k, v in model.state_dict().items()}
    if resume is not None:
        tensors, meta = ckpt.load_checkpoint(resume)
        model.load_state_dict({k[len("model."):]: torch.from_numpy(v)
                               for k, v in tensors.items() if k.startswith("model.")})
        best_state = {k[len("best."):]: torch.from_numpy(v)
                      for k, v in tensors.items() if k.startswith("best.")}
        _restore_optimizer(model, opt, tensors)
        start_step = int(meta["step"]) + 1
        best_val = float(meta["best_val_loss"])
        best_step = int(meta["best_step"])
        loss_curve = list(meta["loss_curve"])
        val_curve = [list(v) for v in meta["val_curve"]]
        parent_hash = meta.get("parent_checkpoint")

    train_ds = build_latent_dataset(train_entries, corpus_dir, codec, scale_factor,
                                    model.rates, ldm_config.vocab_size)
    valid_ds = build_latent_dataset(valid_entries or train_entries, corpus_dir, codec,
                                    scale_factor, model.rates, ldm_config.vocab_size)

    def metadata(step: int) -> dict:
        return {
            "kind": "ldm",
            "ldm_config": ldm_config.to_dict(),
            "experiment_config": config.to_dict(),
            "step": step,
            "best_step": best_step,
            "best_val_loss": best_val,
            "scale_factor": scale_factor,
            "trained_rates": sorted(train_rates),
            "parent_checkpoint": parent_hash,
            "loss_curve": loss_curve,
            "val_curve": val_curve,
        }

    def validation_loss() -> float:
        g = step_generator(config.seed, 0, stream=1)
        with torch.no_grad():
            n = len(valid_ds)
            t = torch.randint(1, config.num_train_steps + 1, (n,), generator=g)
            noise = torch.randn(valid_ds.latents.shape, generator=g)
            total = 0.0
            for lo in range(0, n, 64):
                sl = slice(lo, min(lo + 64, n))
                cond = model.condition_batch(valid_ds.token_ids[sl], valid_ds.token_mask[sl],
                                             valid_ds.rate_ids[sl])
                loss = training_loss(model, valid_ds.latents[sl], cond, t[sl],
                                     schedule, noise=noise[sl])
                total += float(loss) * (sl.stop - sl.start)
        return total / n

    model.train()
    n = len(train_ds)
    for step in range(start_step, config.steps + 1):
        g, idx, t, drop = draw_batch(config.seed, step, n, config.batch_size,
                                     config.num_train_steps, config.cond_dropout_prob)
        tok, msk = apply_cond_dropout(train_ds.token_ids[idx], train_ds.token_mask[idx], drop)
        cond = model.condition_batch(tok, msk, train_ds.rate_ids[idx])
        z0 = train_ds.latents[idx]
        noise = torch.randn(z0.shape, generator=g)
        try:
            loss = training_loss(model, z0, cond, t, schedule, noise=noise)
            if not torch.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
        except FloatingPointError as exc:
            last_good = str(out_path) + ".last_good"
            save_ldm_checkpoint(last_good, model, best_state, opt, metadata(step - 1))
            raise TrainingDiverged(str(exc), last_good) from exc
        opt.zero_grad()
        loss.backward()
        opt.step()
        loss_curve.append(float(loss.detach()))

        if step % config.val_interval == 0 or step == config.steps:
            model.eval()
            vl = validation_loss()
            model.train()
            val_curve.append([step, vl])
            if vl < best_val:
                best_val = vl
                best_step = step
                best_state = {k: v.clone() for k, v in model.state_dict().items()}
            if log:
                log(f"ldm step {step}: train {float(loss.detach()):.4f} val {vl:.4f} (best {best_val:.4f} @ {best_step})")

    model.eval()
    save_ldm_checkpoint(out_path, model, best_state, opt, metadata(config.steps))
    return {"path": str(out_path), "best_val_loss": best_val, "best_step": best_step,
            "loss_curve": loss_curve, "val_curve": val_curve}


def pretrain_then_finetune(config: ExperimentConfig, pretrain_entries: list[ManifestEntry],
                           pretrain_dir: Path, finetune_entries: list[ManifestEntry],
                           finetune_dir: Path, codec: MelCodec, scale_factor: float,
                           out_dir: str | Path, log=None) -> dict:
    """Phase 1: fixed-rate training on the pretrain corpus. Phase 2:
    multi-rate training warm-started from the phase-1 checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    phase1_cfg = ExperimentConfig.from_dict({
        **config.to_dict(), "mode": "fixed_rate",
        "rates": [config.pretrain_rate_hz], "pretrain_rate_hz": None,
        "steps": config.pretrain_steps or config.steps,
    })
    phase1_path = out_dir / "pretrain.ckpt"
    info1 = train_ldm(phase1_cfg, pretrain_entries, pretrain_dir, codec, scale_factor,
                      phase1_path, log=log)

    phase2_cfg = ExperimentConfig.from_dict({
        **config.to_dict(), "mode": "multi_rate", "pretrain_rate_hz": None,
    })
    phase2_path = out_dir / "finetune.ckpt"
    info2 = train_ldm(phase2_cfg, finetune_entries, finetune_dir, codec, scale_factor,
                      phase2_path, init=phase1_path, log=log)
    return {"pretrain": info1, "finetune": info2}


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def generate_latents(model: LdmModel, prompts: list[str], rate_hz: int,
                     sampler: SamplerConfig, scale_factor: float,
                     latent_shape: tuple[int, int],
                     z_init: torch.Tensor | None = None) -> torch.Tensor:
    """DDIM-sample unscaled latents for a batch of prompts at one rate."""
    conds = [model.build_condition(p, rate_hz) for p in prompts]
    nulls = [model.build_condition(p, rate_hz, null=True) for p in prompts]
    cond_b = collate_conditions(conds)
    null_b = collate_conditions(nulls)
    shape = (len(prompts), model.config.in_channels, *latent_shape)
    schedule = build_schedule(model.config.num_train_steps, model.config.beta_start,
                              model.config.beta_end)
    with torch.no_grad():
        z = ddim_sample(model, cond_b, schedule, sampler, shape, cond_null=null_b,
                        z_init=z_init)
    return z / scale_factor


def generate(ldm_path: str | Path, codec_path: str | Path, prompt: str, rate_hz: int,
             sampler: SamplerConfig, out_path: str | Path | None,
             duration_s: float = 1.0, gl_iters: int = 64) -> Waveform:
    """Prompt + rate -> condition -> DDIM -> decode -> Griffin-Lim -> WAV."""
    model, meta = load_ldm(ldm_path)
    codec, scale_factor, _ = load_codec(codec_path)
    cfg = config_for_rate(rate_hz)
    model.rate_id(rate_hz)  # validates against the model's rate set
    frames = int(round(duration_s * 100)) + 1
    t_lat = (frames + 3) // 4
    f_lat = cfg.mel_dim // 4
    z = generate_latents(model, [prompt], rate_hz, sampler, scale_factor, (t_lat, f_lat))
    latent = Latent(values=z[0] * scale_factor, scale_factor=scale_factor,
                    source_config=cfg)
    mel = codec.decode_latent(latent, frames)
    wave = griffin_lim(mel, iters=gl_iters)
    if out_path is not None:
        write_wav(out_path, wave)
    return wave
