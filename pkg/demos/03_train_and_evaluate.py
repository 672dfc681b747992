"""
Train on a synthetic corpus and score hold/shift prediction
===========================================================

100 dialogues of 30 s, hidden size 64, 10 epochs: about four minutes on
one core.
"""

import time

import numpy as np

from vap.aggregation import turn_probs
from vap.evaluation import _summarize, extract_events, oracle_pnow, score_events
from vap.features import frame_audio, vad_frames
from vap.model import ModelConfig, forward, init_weights, train
from vap.synth import SynthConfig, generate, split_names

n, dur, d, epochs = 100, 30.0, 64, 10
dialogues = generate(SynthConfig(seed=0, n_dialogues=n, duration_s=dur))
data = []
for dlg in dialogues:
    f = frame_audio(dlg.recording)
    data.append((f, vad_frames(dlg.intervals, f.shape[0])))
splits = split_names(n)
train_set = [x for x, s in zip(data, splits) if s == "train"]
test_set = [x for x, s in zip(data, splits) if s != "train"]

cfg = ModelConfig(hidden_dim=d, n_heads=4)
t0 = time.perf_counter()


def show(epoch, _w, history):
    print(f"epoch {epoch}: loss {history[-1]:.3f}  ({time.perf_counter() - t0:.0f} s)")


res = train(init_weights(cfg), cfg, train_set, epochs, 0.1, batch_size=4, crop_frames=500, on_epoch=show)

model, chance = [], []
for f, v in test_set:
    events = extract_events(v)
    p_now = turn_probs(forward(res.weights, cfg, f, 50, dtype=np.float32).vap_probs.astype(np.float64)).p_now
    model += score_events(events, p_now).events
    chance += score_events(events, oracle_pnow(events, f.shape[0], lambda e: e.prev_speaker)).events

m, c = _summarize(model), _summarize(chance)
print(f"held-out: {m.n_shift} shifts, {m.n_hold} holds")
print(f"model    : shift {m.shift_accuracy:.3f}  hold {m.hold_accuracy:.3f}  balanced {m.balanced_accuracy:.3f}")
print(f"always-hold baseline balanced accuracy: {c.balanced_accuracy:.3f}")
