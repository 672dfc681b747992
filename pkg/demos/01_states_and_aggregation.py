"""
Voice activity states and next-speaker probabilities
====================================================

The model predicts one of 256 joint activity states for the next two
seconds. Each state is an 8-bit number: four future bins per speaker,
speaker 0 in the high nibble.
"""

import numpy as np

from vap.aggregation import bin_marginals, turn_probs
from vap.state import DEFAULT_BOUNDARIES, label_sequence, pattern_from_state, state_from_pattern

# the four bins, as frame spans inside the 100-frame (2 s) window
print("bin spans (frames):", DEFAULT_BOUNDARIES.spans())

# 240 = 0b11110000: speaker 0 voiced in every bin, speaker 1 silent
print("state 240 ->\n", pattern_from_state(240))
print("speaker 1 talks soon, speaker 0 later:", state_from_pattern([[0, 0, 1, 1], [1, 1, 0, 0]]))

# labels come from the frames *after* t, so a 300-frame track gives 200 labels
track = np.zeros((2, 300), dtype=int)
track[0, :120] = 1          # speaker 0 talks for 2.4 s
track[1, 140:300] = 1       # then speaker 1 takes over after a 0.4 s gap
labels = label_sequence(track)
for t in (0, 60, 100, 130, 199):
    print(f"frame {t:3d}: state {labels[t]:3d}", pattern_from_state(labels[t]).tolist())

# a distribution split between "speaker 0 keeps going" and "speaker 1 takes over"
dist = np.zeros(256)
dist[240] = 0.7
dist[state_from_pattern([[0, 0, 0, 0], [1, 1, 1, 1]])] = 0.3
print("bin marginals:\n", bin_marginals(dist))
tp = turn_probs(dist)
print("p_now =", tp.p_now.round(4), " p_future =", tp.p_future.round(4))
