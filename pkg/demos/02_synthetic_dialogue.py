"""
A synthetic two-party dialogue, its features and its silences
=============================================================

Speakers are tones (440 Hz and 880 Hz). Before most turn changes the
outgoing speaker's pitch glides down, which is the cue the model can learn.
"""

import numpy as np

from vap.evaluation import extract_events, timeout_baseline
from vap.features import frame_audio, vad_frames
from vap.synth import SynthConfig, generate

cfg = SynthConfig(seed=1, n_dialogues=1, duration_s=30.0)
dlg = generate(cfg)[0]
rec = dlg.recording
print(f"{rec.duration_s:.1f} s of stereo audio at {rec.sample_rate} Hz")

feats = frame_audio(rec)
print("features:", feats.shape, "(frames, channels, 8 log band energies + zero-crossing rate)")

vad = vad_frames(dlg.intervals, feats.shape[0])
print("voiced fraction per speaker:", vad.mean(axis=1).round(2))

# mutual silences longer than 0.25 s are the hold/shift decision points
events = extract_events(vad)
for e in events[:8]:
    print(f"  {e.start_frame * 0.02:6.2f}-{e.end_frame * 0.02:6.2f} s  {e.label:5s}  "
          f"speaker {e.prev_speaker} -> {e.next_speaker}")
print(f"{sum(e.label == 'shift' for e in events)} shifts, {sum(e.label == 'hold' for e in events)} holds")

# how well does "take the turn after X seconds of silence" do?
for timeout in (0.3, 0.6, 1.0):
    s = timeout_baseline(vad, timeout)
    print(f"timeout {timeout:.1f} s: interrupts {s.n_interrupted}/{s.n_hold} holds, "
          f"answers {s.n_responded}/{s.n_shift} shifts")

# the loud band tells who is talking: band 0 peaks for 440 Hz, band 1 for 880 Hz
talking = vad[0].astype(bool) & ~vad[1].astype(bool)
print("mean band energies while only speaker 0 talks:", feats[talking, 0, :8].mean(axis=0).round(1))
