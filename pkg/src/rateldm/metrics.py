"""Objective metrics over a corpus-trained probe classifier.

Fréchet distance and inception score run on the classifier's embeddings and
class posteriors; paired KL compares matched generated/reference clips; and
prompt adherence checks that the generated clip classifies as its prompt's
event class. All classification happens at 16 kHz after resampling, so the
probe measures content rather than bandwidth.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .codec import MEL_SCALE, MelCodec
from .data import EVENT_CLASSES, ManifestEntry
from .diffusion import SamplerConfig
from .dsp import (
    Waveform,
    config_for_rate,
    extract_mel,
    griffin_lim,
    load_mel,
    read_wav,
    resample,
    save_mel,
)
from .train import generate_latents, load_codec, load_ldm, step_generator

CLASSIFY_RATE = 16000
EMBED_DIM = 16


class MelClassifier(nn.Module):
    """Small conv net: 16 kHz log-mel -> class logits + penultimate embedding.

    Pools mean and standard deviation over time only, keeping the frequency
    layout intact; the temporal std separates modulated and impulsive sounds
    from steady tones with the same spectral envelope.
    """

    def __init__(self, num_classes: int = len(EVENT_CLASSES), embed_dim: int = EMBED_DIM):
        super().__init__()
        self.num_classes = num_classes
        self.embed_dim = embed_dim
        self.features = nn.Sequential(
            nn.Conv2d(1, 16, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(16, 32, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(32, 32, 3, stride=2, padding=1), nn.SiLU(),
        )
        self.embed = nn.Linear(32 * 8 * 2, embed_dim)
        self.head = nn.Linear(embed_dim, num_classes)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = self.features(x)  # (B, 32, T', 8)
        pooled = torch.cat([h.mean(dim=2), h.std(dim=2)], dim=1)
        emb = torch.tanh(self.embed(pooled.flatten(1)))
        return self.head(emb), emb


def classify_mels(clf: MelClassifier, mels: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Returns (probs (N, K), embeddings (N, E)) for raw log-mel arrays."""
    x = torch.stack([MelCodec.normalize(m) for m in mels])[:, None]
    with torch.no_grad():
        logits, emb = clf(x)
    return torch.softmax(logits, dim=1).numpy(), emb.numpy()


def mel_at_16k(corpus_dir: Path, entry: ManifestEntry, write_cache: bool = False) -> np.ndarray:
    """16 kHz mel of a (possibly higher-rate) corpus clip; cache is opt-in."""
    cache = corpus_dir / "mel16k" / (Path(entry.path).stem + ".melc")
    if cache.exists():
        return load_mel(cache).values
    w = read_wav(corpus_dir / entry.path)
    if w.rate_hz != CLASSIFY_RATE:
        w = resample(w, CLASSIFY_RATE)
    m = extract_mel(w, config_for_rate(CLASSIFY_RATE))
    if write_cache:
        cache.parent.mkdir(exist_ok=True)
        save_mel(cache, m)
    return m.values


def waveform_mel_16k(w: Waveform) -> np.ndarray:
    if w.rate_hz != CLASSIFY_RATE:
        w = resample(w, CLASSIFY_RATE)
    return extract_mel(w, config_for_rate(CLASSIFY_RATE)).values


@dataclass
class ClassifierTrainConfig:
    steps: int = 600
    batch_size: int = 64
    lr: float = 1e-3
    seed: int = 0
    accuracy_gate: float = 0.9
    # log-mel noise injected during training; vocoded audio never reproduces
    # the bit-exact silence floor of real mels, so the probe must not key on it
    noise_std: float = 1.0


def train_classifier(entries: list[ManifestEntry], corpus_dir: Path,
                     cfg: ClassifierTrainConfig = ClassifierTrainConfig(),
                     log=None) -> tuple[MelClassifier, dict]:
    """Train the probe on the train split; error out below the accuracy gate.

    Metrics computed with a weak probe are meaningless, so a test-split
    accuracy below the gate aborts instead of returning a bad classifier.
    """
    train_e = [e for e in entries if e.split == "train"]
    test_e = [e for e in entries if e.split == "test"]
    if not train_e or not test_e:
        raise ValueError("need non-empty train and test splits")
    class_ids = {c: i for i, c in enumerate(EVENT_CLASSES)}
    x_train = torch.stack(
        [MelCodec.normalize(mel_at_16k(corpus_dir, e)) for e in train_e]
    )[:, None]
    y_train = torch.tensor([class_ids[e.event_class] for e in train_e])
    x_test = torch.stack(
        [MelCodec.normalize(mel_at_16k(corpus_dir, e)) for e in test_e]
    )[:, None]
    y_test = torch.tensor([class_ids[e.event_class] for e in test_e])

    torch.manual_seed(cfg.seed)
    clf = MelClassifier()
    opt = torch.optim.Adam(clf.parameters(), lr=cfg.lr)
    noise_scale = cfg.noise_std / float(MEL_SCALE)
    for step in range(1, cfg.steps + 1):
        g = step_generator(cfg.seed, step, stream=2)
        idx = torch.randint(0, len(x_train), (min(cfg.batch_size, len(x_train)),), generator=g)
        batch = x_train[idx]
        if noise_scale > 0:
            batch = batch + noise_scale * torch.randn(batch.shape, generator=g)
        logits, _ = clf(batch)
        loss = F.cross_entropy(logits, y_train[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log and step % 200 == 0:
            log(f"classifier step {step}: loss {float(loss):.4f}")

    clf.eval()
    with torch.no_grad():
        train_acc = float((clf(x_train)[0].argmax(1) == y_train).float().mean())
        test_acc = float((clf(x_test)[0].argmax(1) == y_test).float().mean())
    if test_acc < cfg.accuracy_gate:
        raise RuntimeError(
            f"classifier accuracy gate failed: held-out {test_acc:.3f} < {cfg.accuracy_gate}"
        )
    return clf, {"train_acc": train_acc, "test_acc": test_acc}


# ---------------------------------------------------------------------------
# Metric primitives
# ---------------------------------------------------------------------------

def frechet_distance(emb_a: np.ndarray, emb_b: np.ndarray, reg: float = 1e-6) -> float:
    """||mu_a - mu_b||^2 + Tr(Sa + Sb - 2 (Sa Sb)^1/2), eigendecomposition form."""
    emb_a = np.asarray(emb_a, dtype=np.float64)
    emb_b = np.asarray(emb_b, dtype=np.float64)
    dim = emb_a.shape[1]
    if emb_a.shape[0] < dim + 1 or emb_b.shape[0] < dim + 1:
        raise ValueError(
            f"need at least dim+1 = {dim + 1} vectors per set, got {emb_a.shape[0]} and {emb_b.shape[0]}"
        )
    mu_a, mu_b = emb_a.mean(0), emb_b.mean(0)
    cov_a = np.cov(emb_a, rowvar=False) + reg * np.eye(dim)
    cov_b = np.cov(emb_b, rowvar=False) + reg * np.eye(dim)

    # Tr((Sa Sb)^1/2) via the symmetrized product Sa^1/2 Sb Sa^1/2
    vals_a, vecs_a = np.linalg.eigh(cov_a)
    sqrt_a = vecs_a @ np.diag(np.sqrt(np.clip(vals_a, 0.0, None))) @ vecs_a.T
    inner = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh((inner + inner.T) / 2.0)
    tr_sqrt = np.sum(np.sqrt(np.clip(vals, 0.0, None)))
    return float(np.sum((mu_a - mu_b) ** 2) + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_sqrt)


def _check_simplex(probs: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.ndim != 2:
        raise ValueError("expected (N, K) probability vectors")
    if np.any(probs < -tol) or np.any(np.abs(probs.sum(1) - 1.0) > tol):
        raise ValueError("inputs must lie on the probability simplex")
    return np.clip(probs, 0.0, None)


def inception_score(probs: np.ndarray) -> float:
    """exp(mean_i KL(p_i || mean_p)); in [1, K]."""
    probs = _check_simplex(probs)
    marginal = probs.mean(0)
    terms = np.where(probs > 0, probs * (np.log(probs, where=probs > 0) - np.log(marginal)), 0.0)
    return float(np.exp(terms.sum(1).mean()))


def paired_kl(gen_probs: np.ndarray, ref_probs: np.ndarray, floor: float = 1e-8) -> float:
    """Mean over pairs of KL(ref_i || gen_i), probabilities floored."""
    gen = _check_simplex(gen_probs)
    ref = _check_simplex(ref_probs)
    if gen.shape != ref.shape:
        raise ValueError(f"unpaired sets: {gen.shape} vs {ref.shape}")
    gen = np.maximum(gen, floor)
    terms = np.where(ref > 0, ref * (np.log(np.maximum(ref, floor)) - np.log(gen)), 0.0)
    return float(terms.sum(1).mean())


# ---------------------------------------------------------------------------
# Model evaluation
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    per_rate: dict[int, dict]
    config_hash: str = ""

    def to_json(self) -> str:
        payload = {str(r): v for r, v in sorted(self.per_rate.items())}
        return json.dumps({"per_rate": payload, "config_hash": self.config_hash},
                          sort_keys=True, indent=2)

    def table(self, label: str = "model") -> str:
        lines = [f"{'Model':<24}{'Rate':>8}{'FD':>10}{'IS':>8}{'KL':>8}{'PromptAcc':>11}"]
        for rate, m in sorted(self.per_rate.items()):
            lines.append(
                f"{label:<24}{rate:>8}{m['fd']:>10.3f}{m['is']:>8.3f}"
                f"{m['kl']:>8.3f}{m['prompt_acc']:>11.3f}"
            )
        return "\n".join(lines)


def evaluate_sets(gen_mels: list[np.ndarray], ref_mels: list[np.ndarray],
                  target_classes: list[str], clf: MelClassifier) -> dict:
    """Metrics for matched generated/reference 16 kHz mel lists."""
    if len(gen_mels) != len(ref_mels) or len(gen_mels) != len(target_classes):
        raise ValueError("generated, reference, and class lists must be paired")
    class_ids = {c: i for i, c in enumerate(EVENT_CLASSES)}
    gen_probs, gen_emb = classify_mels(clf, gen_mels)
    ref_probs, ref_emb = classify_mels(clf, ref_mels)
    target = np.array([class_ids[c] for c in target_classes])
    return {
        "fd": frechet_distance(gen_emb, ref_emb),
        "is": inception_score(gen_probs),
        "kl": paired_kl(gen_probs, ref_probs),
        "prompt_acc": float((gen_probs.argmax(1) == target).mean()),
        "n": len(gen_mels),
    }


def evaluate_model(ldm_path: str | Path, codec_path: str | Path,
                   entries: list[ManifestEntry], corpus_dir: Path,
                   clf: MelClassifier, sampler: SamplerConfig,
                   rates: tuple[int, ...] | None = None,
                   duration_s: float = 1.0, gl_iters: int = 32,
                   max_failure_frac: float = 0.05, log=None) -> MetricReport:
    """Generate one clip per test caption per rate and score against the
    matching real clips. Failed generations are excluded and counted; more
    than max_failure_frac failures aborts."""
    model, meta = load_ldm(ldm_path)
    codec, scale_factor, _ = load_codec(codec_path)
    if rates is None:
        rates = tuple(int(r) for r in meta["trained_rates"])

    per_rate: dict[int, dict] = {}
    for rate in rates:
        test_e = [e for e in entries if e.split == "test" and e.rate_hz == rate]
        if not test_e:
            raise ValueError(f"no test entries at {rate} Hz")
        cfg = config_for_rate(rate)
        frames = int(round(duration_s * 100)) + 1
        shape = ((frames + 3) // 4, cfg.mel_dim // 4)

        z_init = torch.stack([
            torch.randn((model.config.in_channels, *shape),
                        generator=step_generator(sampler.seed, i, stream=3 + cfg.rate_id))
            for i in range(len(test_e))
        ])
        gen_mels, ref_mels, classes = [], [], []
        failures = 0
        prompts = [e.caption for e in test_e]
        z = generate_latents(model, prompts, rate, sampler, scale_factor, shape,
                             z_init=z_init)
        for i, e in enumerate(test_e):
            try:
                mel = codec.decode_mel(z[i], frames, cfg)
                wave = griffin_lim(mel, iters=gl_iters)
                gen_mels.append(waveform_mel_16k(wave))
                ref_mels.append(mel_at_16k(corpus_dir, e))
                classes.append(e.event_class)
            except Exception as exc:  # pragma: no cover - failure path
                failures += 1
                if log:
                    log(f"generation failed for {e.caption!r} @ {rate}: {exc}")
        if failures > max_failure_frac * len(test_e):
            raise RuntimeError(f"{failures}/{len(test_e)} generations failed at {rate} Hz")
        stats = evaluate_sets(gen_mels, ref_mels, classes, clf)
        stats["failures"] = failures
        per_rate[rate] = stats
        if log:
            log(f"rate {rate}: " + ", ".join(f"{k}={v:.4g}" for k, v in stats.items()))
    return MetricReport(per_rate)
