"""The nine acceptance criteria, each at its stated tolerance.

Every test records a one-line PASS/FAIL verdict, printed in the pytest
terminal summary under "acceptance criteria". Criteria 5 and 6 take
minutes on one CPU core and carry the ``slow`` marker.
"""

import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import finite_difference_errors, marginals_bruteforce, silences_runscanner, turn_probs_bruteforce
from vap.aggregation import bin_marginals, turn_probs
from vap.evaluation import _summarize, extract_events, oracle_pnow, score_events
from vap.features import frame_audio, vad_frames, write_wav
from vap.model import ModelConfig, backward, forward, init_weights, loss, train
from vap.state import DEFAULT_BOUNDARIES, pattern_from_state, state_from_pattern
from vap.streaming import ArraySource, StreamConfig, WavSource, latency_table, run_stream, sweep_contexts
from vap.synth import SynthConfig, generate, split_names

SWEEP_CONTEXTS = [20, 10, 5, 3, 1, 0.5, 0.3]


def verdict(n, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] #{n} {title}: {detail}"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line


def test_1_codec_exhaustive():
    t0 = time.perf_counter()
    roundtrip = all(state_from_pattern(pattern_from_state(s)) == s for s in range(256))
    patterns = {tuple(pattern_from_state(s).ravel()) for s in range(256)}
    inverse = all(np.array_equal(pattern_from_state(state_from_pattern(np.array(p).reshape(2, 4))),
                                 np.array(p).reshape(2, 4)) for p in patterns)
    spans = DEFAULT_BOUNDARIES.spans()
    covered = sorted(f for lo, hi in spans for f in range(lo, hi))
    partition = spans == [(0, 10), (10, 30), (30, 60), (60, 100)] and covered == list(range(100))
    dt = time.perf_counter() - t0
    ok = roundtrip and inverse and len(patterns) == 256 and partition and dt < 1.0
    verdict(1, "codec exhaustiveness", ok, f"256/256 roundtrips={roundtrip and inverse}, partition={partition}, "
                                           f"{dt * 1000:.1f} ms")


def test_2_aggregation_oracle():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        d = rng.random(256) ** rng.uniform(1, 6)
        d /= d.sum()
        now, fut = turn_probs_bruteforce(d)
        tp = turn_probs(d)
        worst = max(worst, np.abs(bin_marginals(d) - marginals_bruteforce(d)).max(),
                    np.abs(tp.p_now - now).max(), np.abs(tp.p_future - fut).max())
    u = turn_probs(np.full(256, 1 / 256))
    uerr = max(np.abs(u.p_now - 0.5).max(), np.abs(u.p_future - 0.5).max())
    verdict(2, "aggregation oracle", worst < 1e-9 and uerr < 1e-12,
            f"max |diff| over 100 distributions {worst:.1e} (< 1e-9), uniform error {uerr:.1e} (< 1e-12)")


def test_3_gradient_check():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    T = 12
    cfg = ModelConfig(feature_dim=4, hidden_dim=8, n_heads=2, n_self_layers=1, n_cross_layers=2,
                      max_context_frames=T, seed=3)
    w = {k: v.astype(np.float64) for k, v in init_weights(cfg).items()}
    for k in w:  # move biases and gains off their init values
        if not k.endswith(("W", "U", "w", "Wq", "Wk", "Wv", "Wo", "W1", "W2", "pos")):
            w[k] = w[k] + 0.1 * rng.standard_normal(w[k].shape)
    w["in.scale"] = np.abs(w["in.scale"]) + 0.5
    x = rng.standard_normal((T, 2, 4))
    labels = rng.integers(0, 256, T - 2)
    targets = rng.integers(0, 2, (2, T)).astype(float)
    grads = backward(w, cfg, x, labels, targets, 1.0, context_frames=T)

    def f(ww):
        return loss(forward(ww, cfg, x, T), labels, targets, 1.0).total

    errs = finite_difference_errors(f, w, grads, 250, rng)
    worst = max(errs)
    dt = time.perf_counter() - t0
    verdict(3, "gradient check", worst[0] < 1e-3 and len(errs) >= 200 and dt < 120,
            f"{len(errs)} parameters, max relative error {worst[0]:.2e} at {worst[1]}{list(worst[2])} "
            f"(< 1e-3), {dt:.1f} s")


def test_4_causality():
    rng = np.random.default_rng(4)
    cfg = ModelConfig(hidden_dim=32, n_heads=4, max_context_frames=64, seed=4)
    w = init_weights(cfg)
    failures = 0
    for i in range(20):
        T = int(rng.integers(20, 90))
        ctx = int(rng.choice([8, 30, 64]))
        x = rng.standard_normal((T, 2, 9))
        base = forward(w, cfg, x, ctx, dtype=np.float32 if i % 2 else np.float64)
        t = int(rng.integers(0, T - 1))
        y = x.copy()
        y[t + 1:] = rng.standard_normal(y[t + 1:].shape) * 5
        out = forward(w, cfg, y, ctx, dtype=np.float32 if i % 2 else np.float64)
        same = (out.vap_probs[:t + 1].tobytes() == base.vap_probs[:t + 1].tobytes()
                and out.vad_probs[:t + 1].tobytes() == base.vad_probs[:t + 1].tobytes())
        failures += not same
    verdict(4, "causality", failures == 0, f"{20 - failures}/20 inputs bit-identical up to the mutated frame")


def corpus_features(dialogues):
    out = []
    for d in dialogues:
        f = frame_audio(d.recording)
        out.append((f, vad_frames(d.intervals, f.shape[0])))
    return out


@pytest.mark.slow
def test_5_learnability():
    t0 = time.perf_counter()
    scfg = SynthConfig(seed=0, n_dialogues=100, duration_s=30.0)
    data = corpus_features(generate(scfg))
    splits = split_names(len(data))
    train_set = [x for x, s in zip(data, splits) if s == "train"]
    held_out = [x for x, s in zip(data, splits) if s == "test"]
    cfg = ModelConfig(hidden_dim=64, seed=0)
    res = train(init_weights(cfg), cfg, train_set, 10, 0.1, batch_size=4, crop_frames=500)
    scores, chance = [], []
    for f, v in held_out:
        events = extract_events(v)
        p = turn_probs(forward(res.weights, cfg, f, 50, dtype=np.float32).vap_probs.astype(np.float64)).p_now
        scores += score_events(events, p).events
        chance += score_events(events, oracle_pnow(events, f.shape[0], lambda e: e.prev_speaker)).events
    model, base = _summarize(scores), _summarize(chance)
    dt = time.perf_counter() - t0
    ok = model.balanced_accuracy >= 0.65 and base.balanced_accuracy == 0.5 and dt < 30 * 60
    verdict(5, "end-to-end learnability", ok,
            f"held-out BA {model.balanced_accuracy:.3f} (shift {model.shift_accuracy:.3f}, hold "
            f"{model.hold_accuracy:.3f}; {model.n_shift} shifts, {model.n_hold} holds) vs previous-speaker "
            f"baseline {base.balanced_accuracy:.3f}; loss {res.history[0]:.3f} -> {res.history[-1]:.3f}; "
            f"{dt / 60:.1f} min")


@pytest.mark.slow
def test_6_context_latency_trend(tmp_path):
    d = generate(SynthConfig(seed=6, n_dialogues=1, duration_s=60.0))[0]
    write_wav(tmp_path / "sixty.wav", d.recording)
    cfg = ModelConfig(hidden_dim=64)
    reports = sweep_contexts(init_weights(cfg), cfg, SWEEP_CONTEXTS, lambda: WavSource(tmp_path / "sixty.wav"))
    means = [r.mean_ms for r in reports]
    monotone = all(b <= a * 1.10 for a, b in zip(means, means[1:]))
    ratio = means[0] / means[SWEEP_CONTEXTS.index(1)]
    rtf_exact = all(r.real_time_factor == r.mean_ms / 20 for r in reports)
    frames = all(r.n_frames == 3000 - 50 for r in reports)
    print(latency_table(reports))
    verdict(6, "context/latency trend", monotone and ratio >= 3 and rtf_exact and frames,
            "mean ms " + " ".join(f"{c}s={m:.2f}" for c, m in zip(SWEEP_CONTEXTS, means))
            + f"; non-increasing within 10%={monotone}; 20s/1s ratio {ratio:.1f} (>= 3); RTF=mean/20 {rtf_exact}")


def test_7_realtime_factor():
    d = generate(SynthConfig(seed=7, n_dialogues=1, duration_s=20.0))[0]
    cfg = ModelConfig(hidden_dim=64)
    res = run_stream(init_weights(cfg), cfg, ArraySource(d.recording.channels, d.recording.sample_rate),
                     StreamConfig(context_seconds=1.0))
    r = res.report
    verdict(7, "real-time operation", res.error is None and r.real_time_factor < 1.0,
            f"context 1.0 s, d=64: mean {r.mean_ms:.2f} ms/frame, RTF {r.real_time_factor:.3f} (< 1.0) "
            f"over {r.n_frames} frames")


def test_8_streaming_equivalence():
    d = generate(SynthConfig(seed=8, n_dialogues=1, duration_s=12.0))[0]
    cfg = ModelConfig(hidden_dim=64, seed=8)
    w = init_weights(cfg)
    rng = np.random.default_rng(8)
    for k in w:  # a less uniform operating point than fresh init
        w[k] = (w[k] * rng.uniform(0.5, 2.0)).astype(np.float32) if k.endswith("W") else w[k]
    f = frame_audio(d.recording)
    worst = 0.0
    for ctx_s in (0.3, 1.0, 5.0):
        c = int(round(ctx_s * 50))
        out = forward(w, cfg, f, c)
        tp = turn_probs(out.vap_probs)
        res = run_stream(w, cfg, ArraySource(d.recording.channels, d.recording.sample_rate, 1000),
                         StreamConfig(context_seconds=ctx_s))
        assert len(res.traces) == f.shape[0]
        for name, ref in (("p_now", tp.p_now), ("p_future", tp.p_future), ("vad_probs", out.vad_probs)):
            worst = max(worst, np.abs(np.array([getattr(r, name) for r in res.traces]) - ref).max())
        top = np.array([r.top_state_prob for r in res.traces])
        worst = max(worst, np.abs(top - out.vap_probs.max(axis=1)).max())
    verdict(8, "streaming/batch equivalence", worst < 1e-5,
            f"max |stream - forward| over p_now, p_future, vad, top prob at contexts 0.3/1/5 s: {worst:.1e} (< 1e-5)")


def test_9_eval_fixtures():
    def track(*segments):
        v = np.zeros((2, sum(n for _, n in segments)), dtype=np.int8)
        t = 0
        for s, n in segments:
            if s is not None:
                v[s, t:t + n] = 1
            t += n
        return v

    fixtures = [
        (track((0, 50), (None, 20), (1, 50)), 1, 0, ["shift"]),
        (track((0, 50), (None, 10), (0, 50)), 0, 0, []),
        (track((0, 40), (None, 20), (1, 40), (None, 15), (1, 30), (None, 30), (0, 40), (None, 14), (0, 30),
               (None, 25), (0, 30)), 2, 3, ["shift", "hold", "shift", "hold", "hold"]),
        (track((None, 30), (0, 50), (None, 30)), 0, 0, []),
    ]
    exact = True
    for v, n_shift, n_hold, labels in fixtures:
        ev = extract_events(v)
        r = score_events(ev, np.full((v.shape[1], 2), 0.5))
        exact &= (r.n_shift, r.n_hold) == (n_shift, n_hold) and [e.label for e in ev] == labels
        exact &= [(e.start_frame, e.end_frame, e.prev_speaker, e.next_speaker) for e in ev] == \
            silences_runscanner(v.tolist())
    v = fixtures[2][0]
    ev = extract_events(v)
    constant = score_events(ev, oracle_pnow(ev, v.shape[1], lambda e: e.prev_speaker)).balanced_accuracy
    oracle = score_events(ev, oracle_pnow(ev, v.shape[1], lambda e: e.next_speaker)).balanced_accuracy
    rng = np.random.default_rng(9)
    p = rng.random((v.shape[1], 2))
    relabel = (score_events(ev, p).balanced_accuracy
               == score_events(extract_events(v[::-1]), p[:, ::-1]).balanced_accuracy)
    ok = exact and constant == 0.5 and oracle == 1.0 and relabel
    verdict(9, "eval protocol fixtures", ok,
            f"fixture counts/labels exact={exact}, constant predictor BA={constant}, oracle BA={oracle}, "
            f"relabel invariant={relabel}")
