"""Stereo audio -> per-channel spectral frames at 50 Hz, and interval VAD -> frame VAD.

Each frame ``t`` covers ``[t*20 ms, (t+1)*20 ms)``; its 40 ms analysis
window ends at the frame's right edge, so no feature looks ahead of the
frame it belongs to. Samples before the start of the recording are zeros.
"""

from __future__ import annotations

import csv
import io
import warnings
import wave
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from vap.state import FRAME_MS, FRAME_RATE_HZ, N_SPEAKERS

N_BANDS = 8
LOG_FLOOR = 1e-10
WINDOW_S = 0.040
MIN_SAMPLE_RATE = 8000

VadIntervals = list  # [[(start_s, end_s), ...] for speaker 0, [...] for speaker 1]


@dataclass
class DialogueRecording:
    sample_rate: int
    channels: np.ndarray  # (2, n_samples), float in [-1, 1]

    def __post_init__(self):
        self.channels = np.asarray(self.channels, dtype=np.float64)
        if self.channels.ndim != 2 or self.channels.shape[0] != N_SPEAKERS:
            raise ValueError(f"expected 2 channels with equal length, got shape {self.channels.shape}")
        if self.sample_rate < MIN_SAMPLE_RATE:
            raise ValueError(f"sample rate {self.sample_rate} Hz below {MIN_SAMPLE_RATE} Hz")

    @property
    def n_samples(self) -> int:
        return self.channels.shape[1]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate

    @classmethod
    def from_channels(cls, sample_rate: int, left, right) -> "DialogueRecording":
        left, right = np.asarray(left), np.asarray(right)
        if left.shape != right.shape:
            raise ValueError(f"unequal channel lengths: {left.shape[0]} vs {right.shape[0]}")
        return cls(sample_rate, np.stack([left, right]))


def n_frames_for(n_samples: int, sample_rate: int) -> int:
    return (n_samples * FRAME_RATE_HZ) // sample_rate


def frame_end(t, sample_rate: int):
    """Exclusive sample index where frame ``t`` ends."""
    return ((np.asarray(t) + 1) * sample_rate) // FRAME_RATE_HZ


def window_length(sample_rate: int) -> int:
    return int(round(WINDOW_S * sample_rate))


def band_filters(sample_rate: int, n_fft: int, n_bands: int = N_BANDS) -> np.ndarray:
    """Triangular filters over rfft bins, evenly spaced from 0 Hz to Nyquist; shape (n_bands, n_fft//2+1)."""
    freqs = np.fft.rfftfreq(n_fft, d=1.0 / sample_rate)
    pts = np.linspace(0.0, sample_rate / 2.0, n_bands + 2)
    fb = np.zeros((n_bands, freqs.size))
    for k in range(n_bands):
        lo, mid, hi = pts[k], pts[k + 1], pts[k + 2]
        up = (freqs - lo) / (mid - lo)
        down = (hi - freqs) / (hi - mid)
        fb[k] = np.clip(np.minimum(up, down), 0.0, None)
    return fb


class _Analyzer:
    # cached window/filterbank for one sample rate
    def __init__(self, sample_rate: int, n_bands: int = N_BANDS):
        self.sample_rate = sample_rate
        self.n_bands = n_bands
        self.win = window_length(sample_rate)
        self.taper = np.hanning(self.win)
        self.fb = band_filters(sample_rate, self.win, n_bands)

    def __call__(self, frames: np.ndarray) -> np.ndarray:
        """(..., win) sample windows -> (..., n_bands + 1) features."""
        spec = np.abs(np.fft.rfft(frames * self.taper, axis=-1)) ** 2
        energies = spec @ self.fb.T
        logs = np.log(np.maximum(energies, LOG_FLOOR))
        zc = (frames[..., 1:] * frames[..., :-1] < 0).sum(axis=-1) / (self.win - 1)
        return np.concatenate([logs, zc[..., None]], axis=-1)


def frame_audio(rec: DialogueRecording, n_bands: int = N_BANDS) -> np.ndarray:
    """Spectral features of shape ``(n_frames, 2, n_bands + 1)``.

    Per frame and channel: log energies in ``n_bands`` triangular bands
    (Hann-tapered 40 ms window, power spectrum, log floor 1e-10) followed by
    the zero-crossing rate of the same window.
    """
    if rec.n_samples == 0:
        raise ValueError("zero-length audio")
    n = n_frames_for(rec.n_samples, rec.sample_rate)
    if n == 0:
        raise ValueError(f"audio shorter than one {FRAME_MS} ms frame")
    an = _Analyzer(rec.sample_rate, n_bands)
    padded = np.concatenate([np.zeros((N_SPEAKERS, an.win)), rec.channels], axis=1)
    ends = frame_end(np.arange(n), rec.sample_rate) + an.win
    idx = ends[:, None] - an.win + np.arange(an.win)[None, :]
    windows = padded[:, idx]  # (2, n, win)
    return an(windows).transpose(1, 0, 2).copy()


class StreamingFramer:
    """Incremental version of :func:`frame_audio` for chunked ingestion.

    ``append`` buffers samples, ``next_frame`` analyses the oldest completed
    frame. Only samples still needed by an unfinished analysis window are
    kept. Results are identical to the batch function.
    """

    def __init__(self, sample_rate: int, n_bands: int = N_BANDS):
        if sample_rate < MIN_SAMPLE_RATE:
            raise ValueError(f"sample rate {sample_rate} Hz below {MIN_SAMPLE_RATE} Hz")
        self.sample_rate = sample_rate
        self._an = _Analyzer(sample_rate, n_bands)
        self._buf = np.zeros((N_SPEAKERS, self._an.win))
        self._buf_start = -self._an.win  # absolute sample index of _buf[:, 0]
        self.n_frames = 0

    @property
    def feature_dim(self) -> int:
        return self._an.n_bands + 1

    @property
    def buffered_samples(self) -> int:
        return self._buf.shape[1]

    def append(self, samples) -> None:
        samples = np.asarray(samples, dtype=np.float64)
        if samples.ndim != 2 or samples.shape[0] != N_SPEAKERS:
            raise ValueError(f"expected (2, n) samples, got shape {samples.shape}")
        self._buf = np.concatenate([self._buf, samples], axis=1)

    def ready(self) -> bool:
        end = int(frame_end(self.n_frames, self.sample_rate))
        return end <= self._buf_start + self._buf.shape[1]

    def next_frame(self) -> np.ndarray:
        """Features (2, D) of the next completed frame."""
        if not self.ready():
            raise RuntimeError("no complete frame buffered")
        win = self._an.win
        end = int(frame_end(self.n_frames, self.sample_rate))
        lo = end - win - self._buf_start
        feats = self._an(self._buf[:, lo:lo + win])
        self.n_frames += 1
        # drop samples no later window needs
        keep_from = int(frame_end(self.n_frames, self.sample_rate)) - win - self._buf_start
        if keep_from > 0:
            self._buf = self._buf[:, keep_from:]
            self._buf_start += keep_from
        return feats

    def push(self, samples) -> np.ndarray:
        """Append samples and return features of all newly completed frames, (n, 2, D)."""
        self.append(samples)
        out = []
        while self.ready():
            out.append(self.next_frame())
        if not out:
            return np.zeros((0, N_SPEAKERS, self.feature_dim))
        return np.stack(out)


# ---------------------------------------------------------------- VAD


def validate_intervals(intervals) -> list[list[tuple[float, float]]]:
    if len(intervals) != N_SPEAKERS:
        raise ValueError(f"expected intervals for {N_SPEAKERS} speakers, got {len(intervals)}")
    out = []
    for s, spk in enumerate(intervals):
        prev_end = -np.inf
        clean = []
        for start, end in spk:
            start, end = float(start), float(end)
            if not (0 <= start < end):
                raise ValueError(f"speaker {s}: invalid interval ({start}, {end})")
            if start < prev_end:
                raise ValueError(f"speaker {s}: intervals overlap or are unsorted at {start}")
            prev_end = end
            clean.append((start, end))
        out.append(clean)
    return out


def vad_frames(intervals, n_frames: int) -> np.ndarray:
    """Rasterize intervals to a (2, n_frames) 0/1 track.

    A frame is voiced when at least half of it (10 ms) lies inside an
    interval. Intervals running past the end are clipped with a warning.
    """
    intervals = validate_intervals(intervals)
    frame_s = FRAME_MS / 1000.0
    total = n_frames * frame_s
    track = np.zeros((N_SPEAKERS, n_frames), dtype=np.int8)
    lo = np.arange(n_frames) * frame_s
    hi = lo + frame_s
    clipped = False
    for s, spk in enumerate(intervals):
        overlap = np.zeros(n_frames)
        for start, end in spk:
            if end > total + 1e-9:
                clipped = True
                end = total
            if start >= end:
                continue
            overlap += np.clip(np.minimum(hi, end) - np.maximum(lo, start), 0.0, None)
        track[s] = overlap >= frame_s / 2 - 1e-9
    if clipped:
        warnings.warn(f"VAD intervals extend past {total:.2f} s and were clipped", stacklevel=2)
    return track


def intervals_from_frames(track) -> list[list[tuple[float, float]]]:
    """Inverse rasterization: maximal voiced runs as (start_s, end_s) per speaker."""
    v = np.asarray(track).astype(bool)
    out = []
    for s in range(v.shape[0]):
        padded = np.concatenate([[False], v[s], [False]])
        d = np.diff(padded.astype(np.int8))
        starts, ends = np.flatnonzero(d == 1), np.flatnonzero(d == -1)
        out.append([(a * FRAME_MS / 1000, b * FRAME_MS / 1000) for a, b in zip(starts, ends)])
    return out


# ---------------------------------------------------------------- file formats


def read_wav(path) -> DialogueRecording:
    """Read a 16-bit PCM stereo WAV; channel 0 is speaker 0."""
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 2:
            raise ValueError(f"{path}: expected 2 channels, got {w.getnchannels()}")
        if w.getsampwidth() != 2:
            raise ValueError(f"{path}: expected 16-bit samples, got {8 * w.getsampwidth()}-bit")
        if w.getcomptype() != "NONE":
            raise ValueError(f"{path}: compressed WAV not supported")
        sr = w.getframerate()
        raw = w.readframes(w.getnframes())
    pcm = np.frombuffer(raw, dtype="<i2").reshape(-1, 2)
    return DialogueRecording(sr, pcm.T.astype(np.float64) / 32768.0)


def to_pcm16(channels) -> np.ndarray:
    x = np.clip(np.round(np.asarray(channels) * 32768.0), -32768, 32767)
    return x.astype("<i2")


def write_wav(path, rec: DialogueRecording) -> None:
    pcm = to_pcm16(rec.channels).T  # interleave
    with wave.open(str(path), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(rec.sample_rate)
        w.writeframes(np.ascontiguousarray(pcm).tobytes())


def pcm_to_channels(raw: bytes) -> np.ndarray:
    """Interleaved little-endian 16-bit stereo bytes -> (2, n) floats."""
    if len(raw) % 4:
        raise ValueError(f"raw PCM length {len(raw)} is not a whole number of stereo frames")
    return np.frombuffer(raw, dtype="<i2").reshape(-1, 2).T.astype(np.float64) / 32768.0


VAD_HEADER = ["speaker", "start_s", "end_s"]


def read_vad_csv(path_or_text) -> list[list[tuple[float, float]]]:
    if isinstance(path_or_text, (str, Path)) and Path(path_or_text).exists():
        text = Path(path_or_text).read_text(encoding="utf-8")
    else:
        text = str(path_or_text)
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None or [h.strip() for h in header] != VAD_HEADER:
        raise ValueError(f"VAD CSV must start with header {','.join(VAD_HEADER)}")
    out: list[list[tuple[float, float]]] = [[], []]
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        try:
            spk, start, end = int(row[0]), float(row[1]), float(row[2])
        except (ValueError, IndexError) as exc:
            raise ValueError(f"VAD CSV line {lineno}: {row!r}") from exc
        if spk not in (0, 1):
            raise ValueError(f"VAD CSV line {lineno}: speaker must be 0 or 1")
        out[spk].append((start, end))
    for spk in out:
        spk.sort()
    return validate_intervals(out)


def write_vad_csv(path, intervals) -> None:
    intervals = validate_intervals(intervals)
    rows = sorted((start, s, end) for s, spk in enumerate(intervals) for start, end in spk)
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(VAD_HEADER)
        for start, s, end in rows:
            w.writerow([s, f"{start:.3f}", f"{end:.3f}"])
