"""Plain gradient descent with global-norm clipping."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from vap.model.network import FROZEN, ModelConfig, chunk_plan, loss_and_grads
from vap.state import label_sequence

log = logging.getLogger(__name__)

MIN_FRAMES = 101  # at least one labeled frame


class TrainingDiverged(RuntimeError):
    """Raised on a non-finite loss; carries the last finite weights."""

    def __init__(self, message, weights, history):
        super().__init__(message)
        self.weights = weights
        self.history = history


@dataclass
class TrainResult:
    weights: dict
    history: list[float]  # mean training loss per epoch
    step_losses: list[float] = field(default_factory=list)


def fit_input_norm(weights, corpus) -> dict:
    """Set the frozen feature normalization to corpus mean / inverse std."""
    feats = np.concatenate([np.asarray(f, dtype=np.float64).reshape(-1, np.shape(f)[-1]) for f, _ in corpus])
    std = feats.std(axis=0)
    out = dict(weights)
    out["in.mean"] = feats.mean(axis=0).astype(np.float32)
    out["in.scale"] = (1.0 / np.where(std > 1e-6, std, 1.0)).astype(np.float32)
    return out


def clip_by_global_norm(grads, max_norm: float, skip=FROZEN) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for k, g in grads.items() if k not in skip)))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] *= scale
    return norm


def train(weights, cfg: ModelConfig, corpus, epochs: int, learning_rate: float, *,
          batch_size: int = 1, crop_frames: int | None = None, chunk_frames: int = 100,
          clip: float = 1.0, fit_norm: bool = True, seed: int | None = None,
          on_epoch=None) -> TrainResult:
    """Fit ``weights`` on ``corpus``, a list of ``(features (T,2,D), vad (2,T))``.

    Each epoch visits the dialogues in a seeded random order, ``batch_size``
    at a time. With ``crop_frames`` every visit uses a random crop of that
    length (encoder restarted at the crop, shortened to the shortest
    dialogue in the batch when needed); otherwise whole dialogues,
    trimmed to the shortest in the batch. Attention runs over independent
    causal chunks of ``chunk_frames``. Frozen feature-normalization tensors
    are fitted once from the corpus when ``fit_norm`` is set.
    """
    if not corpus:
        raise ValueError("empty corpus")
    if epochs < 1 or learning_rate <= 0:
        raise ValueError("epochs must be >= 1 and learning_rate > 0")
    for i, (f, v) in enumerate(corpus):
        T = np.shape(f)[0]
        if T < MIN_FRAMES:
            raise ValueError(f"dialogue {i} has {T} frames; need >= {MIN_FRAMES} to derive labels")
        if np.shape(v) != (2, T):
            raise ValueError(f"dialogue {i}: VAD shape {np.shape(v)} does not match {T} frames")
    if crop_frames is not None and crop_frames < 1:
        raise ValueError("crop_frames must be >= 1")

    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    w = {k: np.asarray(v, dtype=np.float32).copy() for k, v in weights.items()}
    if fit_norm:
        w = fit_input_norm(w, corpus)
    feats = [np.asarray(f, dtype=np.float64) for f, _ in corpus]
    vads = [np.asarray(v, dtype=np.float64) for _, v in corpus]
    labels = [label_sequence(v) for v in vads]

    def plan(T):
        return chunk_plan(T, chunk_frames)

    history, step_losses = [], []
    for epoch in range(epochs):
        order = rng.permutation(len(corpus))
        ep_losses = []
        for b0 in range(0, len(order), batch_size):
            idx = order[b0:b0 + batch_size]
            if crop_frames is not None:
                L = min(crop_frames, min(feats[i].shape[0] for i in idx))
                starts = [int(rng.integers(0, feats[i].shape[0] - L + 1)) for i in idx]
            else:
                L = min(feats[i].shape[0] for i in idx)
                starts = [0] * len(idx)
            x = np.stack([feats[i][s:s + L] for i, s in zip(idx, starts)])
            tg = np.stack([vads[i][:, s:s + L] for i, s in zip(idx, starts)])
            lb = [labels[i][s:s + L] for i, s in zip(idx, starts)]
            terms, grads = loss_and_grads(w, cfg, x, lb, tg, cfg.vad_loss_weight, plan)
            if not np.isfinite(terms.total) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", w, history)
            clip_by_global_norm(grads, clip)
            for k, g in grads.items():
                if k in FROZEN:
                    continue
                w[k] = (w[k] - learning_rate * g).astype(np.float32)
            ep_losses.append(terms.total)
            step_losses.append(terms.total)
        history.append(float(np.mean(ep_losses)))
        log.info("epoch %d loss %.4f", epoch, history[-1])
        if on_epoch is not None:
            on_epoch(epoch, w, history)
    return TrainResult(w, history, step_losses)
