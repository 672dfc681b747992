"""Seeded synthetic two-party dialogues with matching stereo audio.

A dialogue is a chain of inter-pausal units (IPUs). After each IPU the
floor either passes to the other speaker (shift, with ``shift_prob``,
followed by a silence drawn from the gap distribution) or stays (hold,
silence drawn from the shorter pause distribution). Each speaker's audio is
a sinusoid at their carrier frequency during their IPUs plus a Gaussian
noise floor on both channels. IPUs that precede a shift usually end with a
falling-pitch glide (the yield cue), IPUs before a hold usually do not;
``cue_reliability`` sets how often the cue tells the truth.

All times are quantized to the 20 ms frame grid so that rasterized VAD
matches the audio exactly.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from vap.features import DialogueRecording, write_vad_csv, write_wav
from vap.state import FRAME_MS

FRAME_S = FRAME_MS / 1000.0


@dataclass
class SynthConfig:
    seed: int = 0
    n_dialogues: int = 100
    duration_s: float = 30.0
    sample_rate: int = 8000
    ipu_s: tuple[float, float] = (0.4, 2.5)
    pause_s: tuple[float, float] = (0.1, 0.6)
    gap_s: tuple[float, float] = (0.25, 1.2)
    shift_prob: float = 0.5
    overlap_prob: float = 0.0
    overlap_s: tuple[float, float] = (0.1, 0.3)
    carrier_hz: tuple[float, float] = (440.0, 880.0)
    amplitude: tuple[float, float] = (0.2, 0.5)
    glide_s: float = 0.3
    glide_ratio: float = 0.6
    cue_reliability: float = 0.9
    noise_floor: float = 0.003

    def __post_init__(self):
        for name in ("ipu_s", "pause_s", "gap_s", "overlap_s", "carrier_hz", "amplitude"):
            lo, hi = getattr(self, name)
            setattr(self, name, (float(lo), float(hi)))
            if not 0 < lo <= hi:
                raise ValueError(f"{name} bounds must satisfy 0 < lo <= hi, got {(lo, hi)}")
        for name in ("shift_prob", "overlap_prob", "cue_reliability"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be a probability, got {v}")
        if self.log_uniform_mean(self.pause_s) >= self.log_uniform_mean(self.gap_s):
            raise ValueError("mean within-turn pause must be shorter than mean between-turn gap")
        if self.n_dialogues < 1:
            raise ValueError("n_dialogues must be >= 1")
        if self.ipu_s[0] > self.duration_s:
            raise ValueError(f"minimum IPU {self.ipu_s[0]} s exceeds dialogue duration {self.duration_s} s")
        if self.sample_rate < 8000 or max(self.carrier_hz) >= self.sample_rate / 2:
            raise ValueError("sample rate must be >= 8000 Hz and above twice the carrier frequency")
        if not 0 <= self.glide_s < self.ipu_s[0] + 1e-9:
            raise ValueError("glide_s must be shorter than the shortest IPU")

    @staticmethod
    def log_uniform_mean(bounds) -> float:
        lo, hi = bounds
        return lo if hi == lo else (hi - lo) / np.log(hi / lo)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dialogue:
    recording: DialogueRecording
    intervals: list  # per speaker [(start_s, end_s), ...]
    cues: list = field(default_factory=list)  # (speaker, ipu_end_s) of IPUs carrying the yield cue


def _frames(rng, bounds) -> int:
    lo, hi = bounds
    v = lo if lo == hi else float(np.exp(rng.uniform(np.log(lo), np.log(hi))))
    return max(1, int(round(v / FRAME_S)))


def _timeline(cfg: SynthConfig, rng):
    """Sample IPUs as (speaker, start_frame, end_frame, yield_cue) on the frame grid."""
    total = int(round(cfg.duration_s / FRAME_S))
    ipus = []
    spk = int(rng.integers(2))
    t = _frames(rng, cfg.pause_s)  # leading silence
    while t < total:
        end = min(t + _frames(rng, cfg.ipu_s), total)
        shift = rng.random() < cfg.shift_prob
        truthful = rng.random() < cfg.cue_reliability
        ipus.append([spk, t, end, shift == truthful])
        if shift:
            if rng.random() < cfg.overlap_prob:
                nxt = max(end - _frames(rng, cfg.overlap_s), t + 1)
            else:
                nxt = end + _frames(rng, cfg.gap_s)
            spk = 1 - spk
        else:
            nxt = end + _frames(rng, cfg.pause_s)
        t = nxt
    return ipus, total


def _render(cfg: SynthConfig, rng, ipus, total_frames):
    sr = cfg.sample_rate
    n = (total_frames * sr) // 50
    audio = cfg.noise_floor * rng.standard_normal((2, n))
    for spk, f0, f1, cue in ipus:
        s0, s1 = (f0 * sr) // 50, (f1 * sr) // 50
        m = s1 - s0
        freq = np.full(m, cfg.carrier_hz[spk])
        if cue and cfg.glide_s > 0:
            g = min(m, int(round(cfg.glide_s * sr)))
            freq[m - g:] *= np.linspace(1.0, cfg.glide_ratio, g)
        phase = 2 * np.pi * np.cumsum(freq) / sr + rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(*cfg.amplitude)
        audio[spk, s0:s1] += amp * np.sin(phase)
    return DialogueRecording(sr, np.clip(audio, -1.0, 1.0 - 1 / 32768))


def _intervals(ipus):
    """Merge same-speaker IPUs into non-overlapping per-speaker intervals in seconds."""
    out = [[], []]
    for spk, f0, f1, _ in ipus:
        cur = out[spk]
        if cur and f0 <= cur[-1][1]:
            cur[-1] = (cur[-1][0], max(cur[-1][1], f1))
        else:
            cur.append((f0, f1))
    return [[(a * FRAME_MS / 1000, b * FRAME_MS / 1000) for a, b in spk] for spk in out]


def generate_one(cfg: SynthConfig, rng) -> Dialogue:
    ipus, total = _timeline(cfg, rng)
    rec = _render(cfg, rng, ipus, total)
    cues = [(spk, f1 * FRAME_MS / 1000) for spk, _, f1, cue in ipus if cue]
    return Dialogue(rec, _intervals(ipus), cues)


def generate(cfg: SynthConfig) -> list[Dialogue]:
    """``cfg.n_dialogues`` dialogues; dialogue ``i`` depends only on ``(seed, i)``."""
    return [generate_one(cfg, np.random.default_rng([cfg.seed, i])) for i in range(cfg.n_dialogues)]


def split_names(n: int, ratios=(8, 1, 1)) -> list[str]:
    total = sum(ratios)
    n_train = int(round(n * ratios[0] / total))
    n_val = int(round(n * ratios[1] / total))
    return ["train"] * n_train + ["validation"] * n_val + ["test"] * (n - n_train - n_val)


def write_corpus(out_dir, dialogues: list[Dialogue], cfg: SynthConfig | None = None) -> Path:
    """Write WAV + VAD CSV per dialogue and a ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (dlg, split) in enumerate(zip(dialogues, split_names(len(dialogues)))):
        stem = f"dialogue_{i:04d}"
        write_wav(out / f"{stem}.wav", dlg.recording)
        write_vad_csv(out / f"{stem}.csv", dlg.intervals)
        entries.append({"id": stem, "wav": f"{stem}.wav", "vad": f"{stem}.csv", "split": split,
                        "duration_s": dlg.recording.duration_s})
    manifest = {"sample_rate": dialogues[0].recording.sample_rate if dialogues else None,
                "config": cfg.to_dict() if cfg else None, "dialogues": entries}
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2))
    return path


def read_manifest(path) -> tuple[Path, dict]:
    path = Path(path)
    manifest = json.loads(path.read_text())
    if "dialogues" not in manifest:
        raise ValueError(f"{path}: not a corpus manifest")
    return path.parent, manifest
