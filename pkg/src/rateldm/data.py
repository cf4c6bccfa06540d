"""Procedural captioned audio corpus at multiple sampling rates.

Eight event classes with template captions. One class (ultra_tone) lives
above 8 kHz, so it can only be rendered at rates whose Nyquist exceeds its
base frequency; producing it is what forces a generator to actually use the
sampling-rate condition.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dsp import RATE_SET, Waveform, write_wav

EVENT_CLASSES = (
    "low_tone",
    "high_tone",
    "rising_chirp",
    "falling_chirp",
    "noise_burst",
    "am_tone",
    "click_train",
    "ultra_tone",
)

CAPTION_TEMPLATES: dict[str, tuple[str, ...]] = {
    "low_tone": (
        "a low steady tone",
        "a deep sustained hum",
        "a constant bass tone",
    ),
    "high_tone": (
        "a high pitched tone",
        "a bright steady whistle",
        "a piercing constant note",
    ),
    "rising_chirp": (
        "a rising chirp",
        "a sweep going up in pitch",
        "a tone sliding upward",
    ),
    "falling_chirp": (
        "a falling chirp",
        "a sweep going down in pitch",
        "a tone sliding downward",
    ),
    "noise_burst": (
        "a burst of static noise",
        "a hiss of white noise",
        "a rush of noisy air",
    ),
    "am_tone": (
        "a pulsing warbling tone",
        "a tone with a tremolo beat",
        "a wobbling modulated note",
    ),
    "click_train": (
        "a series of sharp clicks",
        "a rapid ticking sound",
        "a steady train of clicks",
    ),
    "ultra_tone": (
        "an ultrasonic high frequency tone",
        "a very high whine near the hearing limit",
        "an extremely high thin tone",
    ),
}

_CAPTION_TO_CLASS = {
    caption: cls for cls, caps in CAPTION_TEMPLATES.items() for caption in caps
}


def invert_caption(caption: str) -> str:
    """Recover the event class from a template caption."""
    try:
        return _CAPTION_TO_CLASS[caption]
    except KeyError:
        raise ValueError(f"caption not generated by any template: {caption!r}") from None


@dataclass
class SoundEvent:
    event_class: str
    params: dict[str, float]
    caption: str

    def min_rate_hz(self) -> int:
        """Smallest supported rate at which this event is representable."""
        top = self.params.get("freq_hz", 0.0)
        if self.event_class in ("rising_chirp", "falling_chirp"):
            top = max(self.params["freq_start_hz"], self.params["freq_end_hz"])
        for rate in RATE_SET:
            if top < rate / 2:
                return rate
        raise ValueError(f"event exceeds every Nyquist: {self.params}")


def draw_event(event_class: str, rng: np.random.Generator) -> SoundEvent:
    """Draw class-specific parameters and a caption template."""
    if event_class not in EVENT_CLASSES:
        raise ValueError(f"unknown event class {event_class!r}")
    p: dict[str, float] = {}
    if event_class == "low_tone":
        p["freq_hz"] = rng.uniform(150.0, 400.0)
    elif event_class == "high_tone":
        p["freq_hz"] = rng.uniform(1200.0, 3200.0)
    elif event_class == "rising_chirp":
        p["freq_start_hz"] = rng.uniform(200.0, 500.0)
        p["freq_end_hz"] = p["freq_start_hz"] * rng.uniform(3.0, 5.0)
    elif event_class == "falling_chirp":
        p["freq_start_hz"] = rng.uniform(1500.0, 3000.0)
        p["freq_end_hz"] = p["freq_start_hz"] / rng.uniform(3.0, 5.0)
    elif event_class == "noise_burst":
        p["attack_s"] = rng.uniform(0.02, 0.1)
        p["noise_seed"] = float(rng.integers(0, 2**31 - 1))
    elif event_class == "am_tone":
        p["freq_hz"] = rng.uniform(600.0, 1500.0)
        p["mod_rate_hz"] = rng.uniform(4.0, 14.0)
    elif event_class == "click_train":
        p["click_rate_hz"] = rng.uniform(8.0, 25.0)
    elif event_class == "ultra_tone":
        p["freq_hz"] = rng.uniform(9000.0, 11000.0)
    caption = CAPTION_TEMPLATES[event_class][int(rng.integers(0, len(CAPTION_TEMPLATES[event_class])))]
    return SoundEvent(event_class, p, caption)


def synth_event(e: SoundEvent, rate_hz: int, duration_s: float = 1.0) -> Waveform:
    """Render an event deterministically at the given rate, peak 0.9."""
    if duration_s <= 0:
        raise ValueError("duration must be positive")
    if rate_hz <= 0:
        raise ValueError("rate must be positive")
    n = int(round(duration_s * rate_hz))
    t = np.arange(n) / rate_hz
    cls, p = e.event_class, e.params

    top_freq = p.get("freq_hz", 0.0)
    if cls in ("rising_chirp", "falling_chirp"):
        top_freq = max(p["freq_start_hz"], p["freq_end_hz"])
    if top_freq >= rate_hz / 2:
        raise ValueError(
            f"{cls} at {top_freq:.0f} Hz not representable at {rate_hz} Hz (Nyquist {rate_hz // 2})"
        )

    if cls in ("low_tone", "high_tone", "ultra_tone"):
        x = np.sin(2 * np.pi * p["freq_hz"] * t)
    elif cls in ("rising_chirp", "falling_chirp"):
        # exponential sweep from freq_start to freq_end
        f0, f1 = p["freq_start_hz"], p["freq_end_hz"]
        k = np.log(f1 / f0)
        phase = 2 * np.pi * f0 * duration_s / k * (np.exp(k * t / duration_s) - 1.0)
        x = np.sin(phase)
    elif cls == "noise_burst":
        noise_rng = np.random.default_rng(int(p["noise_seed"]))
        x = noise_rng.standard_normal(n)
        attack = max(1, int(p["attack_s"] * rate_hz))
        env = np.ones(n)
        env[:attack] = np.linspace(0.0, 1.0, attack)
        env[-attack:] *= np.linspace(1.0, 0.0, attack)
        x *= env
    elif cls == "am_tone":
        carrier = np.sin(2 * np.pi * p["freq_hz"] * t)
        x = carrier * (0.5 + 0.5 * np.sin(2 * np.pi * p["mod_rate_hz"] * t))
    elif cls == "click_train":
        x = np.zeros(n)
        period = int(rate_hz / p["click_rate_hz"])
        width = max(2, rate_hz // 4000)
        for start in range(0, n - width, period):
            x[start : start + width] = 1.0
            x[start + width : start + 2 * width] = -1.0
    else:
        raise ValueError(f"unknown event class {cls!r}")

    # short fade at both ends avoids clicks from hard edges
    fade = max(1, n // 200)
    x[:fade] *= np.linspace(0.0, 1.0, fade)
    x[-fade:] *= np.linspace(1.0, 0.0, fade)
    peak = np.max(np.abs(x))
    if peak > 0:
        x = 0.9 * x / peak
    return Waveform(x, rate_hz)


@dataclass
class ManifestEntry:
    path: str
    caption: str
    event_class: str
    rate_hz: int
    split: str
    seed: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "path": self.path,
                "caption": self.caption,
                "class": self.event_class,
                "rate_hz": self.rate_hz,
                "split": self.split,
                "seed": self.seed,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, line: str) -> "ManifestEntry":
        d = json.loads(line)
        return cls(d["path"], d["caption"], d["class"], d["rate_hz"], d["split"], d["seed"])


@dataclass
class CorpusConfig:
    out_dir: str
    per_class: int = 50
    rates: tuple[int, ...] = RATE_SET
    classes: tuple[str, ...] = EVENT_CLASSES
    duration_s: float = 1.0
    seed: int = 0
    split_fracs: tuple[float, float] = (0.8, 0.1)  # train, valid; rest is test


def _split_for_index(i: int, per_class: int, fracs: tuple[float, float]) -> str:
    n_train = int(round(per_class * fracs[0]))
    n_valid = int(round(per_class * fracs[1]))
    if i < n_train:
        return "train"
    if i < n_train + n_valid:
        return "valid"
    return "test"


def build_corpus(cfg: CorpusConfig) -> list[ManifestEntry]:
    """Render the corpus and write WAVs plus a JSON-lines manifest.

    Each event is rendered once per configured rate at which it is
    representable, so multi-rate training sees matched content across rates.
    Deterministic: per-clip seeds derive from (seed, clip_index).
    """
    if cfg.per_class < 1:
        raise ValueError("per_class must be >= 1")
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "wav").mkdir(exist_ok=True)

    entries: list[ManifestEntry] = []
    clip_index = 0
    for cls in cfg.classes:
        for i in range(cfg.per_class):
            clip_seed = int(
                np.random.SeedSequence((cfg.seed, clip_index)).generate_state(1)[0]
            )
            rng = np.random.default_rng(clip_seed)
            event = draw_event(cls, rng)
            split = _split_for_index(i, cfg.per_class, cfg.split_fracs)
            min_rate = event.min_rate_hz()
            for rate in cfg.rates:
                if rate < min_rate:
                    continue
                w = synth_event(event, rate, cfg.duration_s)
                rel = f"wav/{cls}_{i:04d}_{rate}.wav"
                write_wav(out / rel, w)
                entries.append(
                    ManifestEntry(rel, event.caption, cls, rate, split, clip_seed)
                )
            clip_index += 1

    with open(out / "manifest.jsonl", "w", encoding="utf-8") as f:
        for entry in entries:
            f.write(entry.to_json() + "\n")
    return entries


def load_manifest(path: str | Path) -> list[ManifestEntry]:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.jsonl"
    with open(path, encoding="utf-8") as f:
        return [ManifestEntry.from_json(line) for line in f if line.strip()]


def manifest_dir(path: str | Path) -> Path:
    path = Path(path)
    return path if path.is_dir() else path.parent
