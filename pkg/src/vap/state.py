"""Joint voice-activity state space: 2 speakers x 4 future bins = 256 classes.

Bit layout: speaker 0 occupies the high nibble, and within a nibble the
nearest bin (0-200 ms) is the most significant bit. ``0b11110000`` (240) is
therefore "speaker 0 voiced in every bin, speaker 1 silent".
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

FRAME_MS = 20
FRAME_RATE_HZ = 50
N_SPEAKERS = 2
N_BINS = 4
N_STATES = 2 ** (N_SPEAKERS * N_BINS)


@dataclass(frozen=True)
class BinBoundaries:
    edges_ms: tuple[int, ...] = (0, 200, 600, 1200, 2000)
    frame_rate_hz: int = FRAME_RATE_HZ

    def __post_init__(self):
        edges = tuple(int(e) for e in self.edges_ms)
        object.__setattr__(self, "edges_ms", edges)
        if len(edges) != N_BINS + 1:
            raise ValueError(f"expected {N_BINS + 1} edges, got {len(edges)}")
        if edges[0] != 0 or edges[-1] != 2000:
            raise ValueError("bin edges must start at 0 ms and end at 2000 ms")
        if any(b <= a for a, b in zip(edges, edges[1:])):
            raise ValueError("bin edges must be strictly increasing")
        if 1000 % self.frame_rate_hz:
            raise ValueError("frame rate must give an integer frame period in ms")
        period = self.frame_period_ms
        if any(e % period for e in edges):
            raise ValueError(f"every edge must be a multiple of the {period} ms frame period")

    @property
    def frame_period_ms(self) -> int:
        return 1000 // self.frame_rate_hz

    @property
    def window_frames(self) -> int:
        return self.edges_ms[-1] // self.frame_period_ms

    def spans(self) -> list[tuple[int, int]]:
        """Half-open frame spans ``[lo, hi)`` of each bin inside the projection window."""
        f = [e // self.frame_period_ms for e in self.edges_ms]
        return list(zip(f[:-1], f[1:]))


DEFAULT_BOUNDARIES = BinBoundaries()


def _bitpos(speaker: int, b: int) -> int:
    # b is 0-based here (bin 1 -> b=0)
    return (1 - speaker) * N_BINS + (N_BINS - 1 - b)


# (2, 4) table of bit positions, and (256, 2, 4) table of patterns
BIT_POSITIONS = np.array(
    [[_bitpos(s, b) for b in range(N_BINS)] for s in range(N_SPEAKERS)], dtype=np.int64
)
ALL_PATTERNS = ((np.arange(N_STATES)[:, None, None] >> BIT_POSITIONS[None]) & 1).astype(np.int8)


def _check_pattern(pattern) -> np.ndarray:
    p = np.asarray(pattern)
    if p.shape != (N_SPEAKERS, N_BINS):
        raise ValueError(f"bin pattern must have shape (2, 4), got {p.shape}")
    if not np.all((p == 0) | (p == 1)):
        raise ValueError("bin pattern entries must be 0 or 1")
    return p.astype(np.int64)


def state_from_pattern(pattern) -> int:
    p = _check_pattern(pattern)
    return int(np.sum(p << BIT_POSITIONS))


def pattern_from_state(state: int) -> np.ndarray:
    """Return the (2, 4) binary pattern for a state index in [0, 255]."""
    if isinstance(state, (bool, np.bool_)) or int(state) != state:
        raise ValueError(f"state must be an integer, got {state!r}")
    state = int(state)
    if not 0 <= state < N_STATES:
        raise ValueError(f"state index {state} outside [0, {N_STATES - 1}]")
    return ALL_PATTERNS[state].copy()


def swap_speakers(state):
    """Swap the two nibbles, i.e. relabel speaker 0 <-> speaker 1."""
    s = np.asarray(state)
    return ((s & 0x0F) << 4) | ((s >> 4) & 0x0F)


SPEAKER_SWAP = swap_speakers(np.arange(N_STATES))


def discretize_window(window, boundaries: BinBoundaries = DEFAULT_BOUNDARIES,
                      threshold: float = 0.5) -> np.ndarray:
    """Collapse a (2, 100) block of voiced flags into a (2, 4) bin pattern.

    A bin is voiced when its fraction of voiced frames is ``>= threshold``.
    """
    w = np.asarray(window)
    n = boundaries.window_frames
    if w.ndim != 2 or w.shape != (N_SPEAKERS, n):
        raise ValueError(f"window must have shape (2, {n}), got {w.shape}")
    out = np.zeros((N_SPEAKERS, N_BINS), dtype=np.int8)
    for b, (lo, hi) in enumerate(boundaries.spans()):
        ratio = w[:, lo:hi].sum(axis=1) / (hi - lo)
        out[:, b] = ratio >= threshold
    return out


def label_sequence(track, boundaries: BinBoundaries = DEFAULT_BOUNDARIES,
                   threshold: float = 0.5) -> np.ndarray:
    """Per-frame VAP targets from a (2, T) voiced-flag track.

    ``label[t]`` discretizes frames ``t+1 .. t+100``, so only the first
    ``T - 100`` frames get a label. Shorter tracks give an empty array and
    a ``UserWarning``.
    """
    v = np.asarray(track)
    if v.ndim != 2 or v.shape[0] != N_SPEAKERS:
        raise ValueError(f"track must have shape (2, T), got {v.shape}")
    n = boundaries.window_frames
    T = v.shape[1]
    n_labels = T - n
    if n_labels <= 0:
        warnings.warn(f"track of {T} frames is too short to label (needs > {n})", stacklevel=2)
        return np.zeros(0, dtype=np.int64)
    # cumulative counts give every bin ratio at every t in one shot
    csum = np.concatenate([np.zeros((N_SPEAKERS, 1)), np.cumsum(v, axis=1, dtype=np.float64)], axis=1)
    labels = np.zeros(n_labels, dtype=np.int64)
    t = np.arange(n_labels)
    for b, (lo, hi) in enumerate(boundaries.spans()):
        counts = csum[:, t + 1 + hi] - csum[:, t + 1 + lo]
        voiced = (counts / (hi - lo)) >= threshold
        for s in range(N_SPEAKERS):
            labels |= voiced[s].astype(np.int64) << int(BIT_POSITIONS[s, b])
    return labels
