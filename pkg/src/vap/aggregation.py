"""Collapse 256-way state distributions into per-speaker next-speaker probabilities."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from vap.state import ALL_PATTERNS, DEFAULT_BOUNDARIES, N_STATES

NORM_TOL = 1e-4

# duration weights per bin, used only when weighted=True
_DUR = np.diff(np.asarray(DEFAULT_BOUNDARIES.edges_ms, dtype=np.float64))
_NOW_WEIGHTS = _DUR[:2] / _DUR[:2].sum()
_FUTURE_WEIGHTS = _DUR[2:] / _DUR[2:].sum()


@dataclass(frozen=True)
class TurnProbs:
    p_now: np.ndarray
    p_future: np.ndarray


def _check_dist(dist) -> np.ndarray:
    p = np.asarray(dist, dtype=np.float64)
    if p.shape[-1] != N_STATES:
        raise ValueError(f"distribution must have {N_STATES} entries on the last axis, got {p.shape}")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError("distribution must be finite and non-negative")
    total = p.sum(axis=-1)
    if np.any(np.abs(total - 1.0) > NORM_TOL):
        raise ValueError(f"distribution not normalized (sum={np.max(np.abs(total - 1.0)) + 1:.6g})")
    return p


def bin_marginals(dist) -> np.ndarray:
    """Probability that each (speaker, bin) is voiced; shape ``(..., 2, 4)``.

    Accepts a single distribution or any leading batch shape.
    """
    p = _check_dist(dist)
    return np.tensordot(p, ALL_PATTERNS.astype(np.float64), axes=([-1], [0]))


def softmax2(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def region_scores(marginals: np.ndarray, weighted: bool = False) -> tuple[np.ndarray, np.ndarray]:
    m = np.asarray(marginals, dtype=np.float64)
    if weighted:
        return m[..., :2] @ _NOW_WEIGHTS, m[..., 2:] @ _FUTURE_WEIGHTS
    return m[..., 0] + m[..., 1], m[..., 2] + m[..., 3]


def turn_probs(dist, weighted: bool = False) -> TurnProbs:
    """p_now / p_future as a softmax over the two speakers' summed bin marginals.

    The near region is bins 1-2 (0-600 ms), the far region bins 3-4
    (600-2000 ms). ``weighted=True`` replaces the plain sum by a
    duration-weighted mean.
    """
    now, fut = region_scores(bin_marginals(dist), weighted)
    return TurnProbs(p_now=softmax2(now), p_future=softmax2(fut))


def predicted_speaker(p) -> np.ndarray | int:
    """Argmax over speakers; exact ties go to speaker 0."""
    p = np.asarray(p)
    out = np.where(p[..., 1] > p[..., 0], 1, 0)
    return int(out) if out.ndim == 0 else out
