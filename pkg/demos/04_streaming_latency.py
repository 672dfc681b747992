"""
Frame-by-frame streaming and the context/latency trade-off
==========================================================

Each 20 ms frame goes through the recurrent encoder once; the attention
stack then looks back over the last ``context`` seconds of encoder states.
Longer context means more attention work per frame.
"""

import numpy as np

from vap.model import ModelConfig, init_weights
from vap.streaming import ArraySource, StreamConfig, latency_table, run_stream, sweep_contexts
from vap.synth import SynthConfig, generate

dlg = generate(SynthConfig(seed=2, n_dialogues=1, duration_s=12.0))[0]
rec = dlg.recording
cfg = ModelConfig(hidden_dim=64)
weights = init_weights(cfg)  # untrained: timing does not depend on the values

res = run_stream(weights, cfg, ArraySource(rec.channels, rec.sample_rate), StreamConfig(context_seconds=1.0))
print(f"{len(res.traces)} trace records for {rec.duration_s:.0f} s of audio")
print(res.traces[100].to_json())

# one record per frame, so a 12 s file gives 600; the longest contexts only
# matter once that much audio has been seen, hence the modest ratios here
reports = sweep_contexts(weights, cfg, [10, 5, 3, 1, 0.5, 0.3], lambda: ArraySource(rec.channels, rec.sample_rate))
print(latency_table(reports))
rtf = {r.context_seconds: r.real_time_factor for r in reports}
print("faster than real time at 1 s context:", rtf[1.0] < 1.0)
