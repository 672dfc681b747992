"""Frame-by-frame inference over a stereo stream, with trace records and latency stats.

An ingestion thread reads the audio source into a bounded queue; the
calling thread owns all model state and consumes it. In batch mode the
queue applies backpressure. In realtime mode the source is paced at wall
clock, and a frame whose audio has not arrived by its deadline is replaced
by silence and flagged as a gap.
"""

from __future__ import annotations

import json
import queue
import threading
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from vap.aggregation import turn_probs
from vap.features import StreamingFramer, pcm_to_channels, read_wav
from vap.model.network import ModelConfig, _cast, encoder_step, heads_fwd, stack_last
from vap.state import FRAME_MS, FRAME_RATE_HZ

FRAME_S = FRAME_MS / 1000.0
MIN_CONTEXT_S = 0.1
MAX_CONTEXT_S = 20.0


def context_frames(context_seconds: float) -> int:
    n = context_seconds * FRAME_RATE_HZ
    if abs(n - round(n)) > 1e-9 or round(n) < 1:
        raise ValueError(f"context {context_seconds} s is not a positive whole number of frames")
    return int(round(n))


@dataclass
class StreamConfig:
    context_seconds: float = 1.0
    realtime: bool = False
    warmup_frames: int = 50
    dtype: str = "float32"
    queue_chunks: int = 32
    gap_grace_s: float = 0.1
    trace_sink: object = None  # callable(TraceRecord) or writable text file

    def __post_init__(self):
        if not MIN_CONTEXT_S - 1e-9 <= self.context_seconds <= MAX_CONTEXT_S + 1e-9:
            raise ValueError(f"context_seconds must be within [{MIN_CONTEXT_S}, {MAX_CONTEXT_S}]")
        context_frames(self.context_seconds)

    @property
    def context_frames(self) -> int:
        return context_frames(self.context_seconds)


@dataclass
class TraceRecord:
    frame_index: int
    time_s: float
    p_now: tuple[float, float]
    p_future: tuple[float, float]
    vad_probs: tuple[float, float]
    top_state: int
    top_state_prob: float
    inference_ms: float
    gap: bool = False

    def to_dict(self) -> dict:
        d = {
            "frame_index": self.frame_index,
            "time_s": round(self.time_s, 6),
            "p_now": [float(x) for x in self.p_now],
            "p_future": [float(x) for x in self.p_future],
            "vad_probs": [float(x) for x in self.vad_probs],
            "top_state": self.top_state,
            "top_state_prob": float(self.top_state_prob),
            "inference_ms": float(self.inference_ms),
        }
        if self.gap:
            d["gap"] = True
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "TraceRecord":
        return cls(int(d["frame_index"]), float(d["time_s"]), tuple(d["p_now"]), tuple(d["p_future"]),
                   tuple(d["vad_probs"]), int(d["top_state"]), float(d["top_state_prob"]),
                   float(d["inference_ms"]), bool(d.get("gap", False)))


def read_traces(path) -> list[TraceRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if line.strip():
                try:
                    out.append(TraceRecord.from_dict(json.loads(line)))
                except (KeyError, ValueError, TypeError) as exc:
                    raise ValueError(f"{path}:{lineno}: bad trace record ({exc})") from exc
    return out


@dataclass
class LatencyReport:
    context_seconds: float
    mean_ms: float
    median_ms: float
    p95_ms: float
    real_time_factor: float
    n_frames: int
    warmup_frames: int

    @classmethod
    def from_timings(cls, context_seconds, timings_ms, warmup_frames) -> "LatencyReport":
        t = np.asarray(timings_ms[warmup_frames:], dtype=np.float64)
        if t.size == 0:
            nan = float("nan")
            return cls(context_seconds, nan, nan, nan, nan, 0, warmup_frames)
        mean = float(t.mean())
        return cls(context_seconds, mean, float(np.median(t)), float(np.percentile(t, 95)),
                   mean / FRAME_MS, int(t.size), warmup_frames)

    def csv_row(self) -> str:
        return (f"{self.context_seconds:g},{self.mean_ms:.4f},{self.median_ms:.4f},"
                f"{self.p95_ms:.4f},{self.real_time_factor:.4f},{self.n_frames}")


CSV_HEADER = "context_s,mean_ms,median_ms,p95_ms,rtf,n_frames"


def latency_csv(reports: Iterable[LatencyReport]) -> str:
    return "\n".join([CSV_HEADER] + [r.csv_row() for r in reports]) + "\n"


def latency_table(reports: Iterable[LatencyReport]) -> str:
    reports = list(reports)
    lines = [f"{'context [s]':>11}  {'mean [ms]':>10}  {'median [ms]':>11}  {'p95 [ms]':>9}  {'RTF':>7}  {'frames':>6}"]
    for r in reports:
        lines.append(f"{r.context_seconds:>11g}  {r.mean_ms:>10.2f}  {r.median_ms:>11.2f}  "
                     f"{r.p95_ms:>9.2f}  {r.real_time_factor:>7.3f}  {r.n_frames:>6d}")
    if reports:
        lines.append(f"(first {reports[0].warmup_frames} frames of each run excluded as warmup)")
    return "\n".join(lines)


# ------------------------------------------------------------------ sources


class ArraySource:
    """Feeds an in-memory (2, n) recording in fixed-size chunks."""

    def __init__(self, channels, sample_rate: int, chunk_samples: int | None = None):
        self.channels = np.asarray(channels, dtype=np.float64)
        self.sample_rate = sample_rate
        self.chunk_samples = chunk_samples or sample_rate // FRAME_RATE_HZ

    def __iter__(self) -> Iterator[np.ndarray]:
        n = self.channels.shape[1]
        for i in range(0, n, self.chunk_samples):
            yield self.channels[:, i:i + self.chunk_samples]


class WavSource(ArraySource):
    def __init__(self, path, chunk_samples: int | None = None):
        rec = read_wav(path)
        super().__init__(rec.channels, rec.sample_rate, chunk_samples)


class PcmSource:
    """Raw interleaved 16-bit little-endian stereo PCM from a binary stream (e.g. stdin)."""

    def __init__(self, stream, sample_rate: int, chunk_samples: int | None = None):
        self.stream = stream
        self.sample_rate = sample_rate
        self.chunk_samples = chunk_samples or sample_rate // FRAME_RATE_HZ

    def __iter__(self) -> Iterator[np.ndarray]:
        want = 4 * self.chunk_samples
        pending = b""
        while True:
            data = self.stream.read(want)
            if not data:
                break
            pending += data
            whole = len(pending) - len(pending) % 4
            if whole:
                yield pcm_to_channels(pending[:whole])
                pending = pending[whole:]
        if pending:
            raise ValueError(f"PCM stream ended mid-sample ({len(pending)} stray bytes)")


# ------------------------------------------------------------------ predictor


class StreamingPredictor:
    """Owns the incremental model state for one stream.

    Memory is bounded: the framer keeps one analysis window of samples, the
    encoder one state vector per channel, and the attention history at most
    ``context_frames`` encoder states.
    """

    def __init__(self, weights, model_cfg: ModelConfig, sample_rate: int, context_frames: int,
                 dtype="float32"):
        if not 1 <= context_frames <= model_cfg.max_context_frames:
            raise ValueError(f"context_frames must be in [1, {model_cfg.max_context_frames}]")
        self.cfg = model_cfg
        self.context_frames = context_frames
        self.dtype = np.dtype(dtype)
        self._p64 = _cast(weights)
        self._p = _cast(weights, self.dtype)
        self.framer = StreamingFramer(sample_rate)
        if self.framer.feature_dim != model_cfg.feature_dim:
            raise ValueError(f"model expects {model_cfg.feature_dim} features, framer makes {self.framer.feature_dim}")
        self.h = np.zeros((2, model_cfg.hidden_dim))
        self.history: deque = deque(maxlen=context_frames)
        self.frame_index = 0

    @property
    def samples_per_frame(self) -> int:
        return self.framer.sample_rate // FRAME_RATE_HZ

    def step(self, feats: np.ndarray, gap: bool = False, t_start: float | None = None) -> TraceRecord:
        """Advance by one frame of features (2, D)."""
        t0 = time.perf_counter() if t_start is None else t_start
        self.h = encoder_step(self._p64, feats, self.h)
        self.history.append(self.h.astype(self.dtype))
        win = np.stack(self.history, axis=1)[:, None]  # (2, 1, L, d)
        h0, h1 = stack_last(self._p, self.cfg, win[0], win[1])
        _, probs, vad, _ = heads_fwd(self._p, h0[0], h1[0])
        probs = probs.astype(np.float64)
        probs /= probs.sum()
        tp = turn_probs(probs)
        top = int(np.argmax(probs))
        elapsed = (time.perf_counter() - t0) * 1000.0
        rec = TraceRecord(self.frame_index, self.frame_index * FRAME_S, tuple(tp.p_now), tuple(tp.p_future),
                          tuple(float(x) for x in vad), top, float(probs[top]), elapsed, gap)
        self.frame_index += 1
        return rec

    def push(self, samples) -> list[TraceRecord]:
        """Append samples and emit one record per completed frame.

        Timing of each record covers that frame's feature extraction,
        encoder step, attention stack, heads and aggregation.
        """
        out = []
        self.framer.append(samples)
        while self.framer.ready():
            t0 = time.perf_counter()
            feats = self.framer.next_frame()
            out.append(self.step(feats, t_start=t0))
        return out

    def push_gap(self) -> list[TraceRecord]:
        """Emit one silent frame in place of audio that did not arrive in time."""
        recs = []
        self.framer.append(np.zeros((2, self.samples_per_frame)))
        while self.framer.ready():
            t0 = time.perf_counter()
            recs.append(self.step(self.framer.next_frame(), gap=True, t_start=t0))
        return recs


@dataclass
class StreamResult:
    traces: list[TraceRecord]
    report: LatencyReport
    error: str | None = None
    n_gaps: int = 0


_END = object()


def _emit(sink, rec: TraceRecord):
    if sink is None:
        return
    if callable(sink):
        sink(rec)
    else:
        sink.write(rec.to_json() + "\n")


def run_stream(weights, model_cfg: ModelConfig, source, config: StreamConfig | None = None) -> StreamResult:
    """Run the predictor over ``source`` (ArraySource, WavSource, PcmSource or
    any iterable of (2, n) chunks with a ``sample_rate`` attribute).

    A malformed source ends the stream early: the result carries the traces
    produced so far, the partial latency report and the error message.
    """
    config = config or StreamConfig()
    pred = StreamingPredictor(weights, model_cfg, source.sample_rate, config.context_frames, config.dtype)
    q: queue.Queue = queue.Queue(maxsize=config.queue_chunks)
    failure: list[BaseException] = []
    stop = threading.Event()
    t_begin = time.monotonic()

    def ingest():
        consumed = 0
        try:
            for chunk in source:
                if stop.is_set():
                    return
                chunk = np.asarray(chunk, dtype=np.float64)
                if chunk.ndim != 2 or chunk.shape[0] != 2:
                    raise ValueError(f"source produced a chunk of shape {chunk.shape}, expected (2, n)")
                consumed += chunk.shape[1]
                if config.realtime:
                    delay = t_begin + consumed / source.sample_rate - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
                while not stop.is_set():
                    try:
                        q.put(chunk, timeout=0.1)
                        break
                    except queue.Full:
                        continue
        except BaseException as exc:  # handed to the consumer
            failure.append(exc)
        finally:
            while not stop.is_set():
                try:
                    q.put(_END, timeout=0.1)
                    break
                except queue.Full:
                    continue

    worker = threading.Thread(target=ingest, name="vap-ingest", daemon=True)
    worker.start()
    traces: list[TraceRecord] = []
    n_gaps = 0
    grace = config.gap_grace_s
    try:
        while True:
            if config.realtime:
                deadline = t_begin + (pred.frame_index + 1) * FRAME_S + grace
                try:
                    item = q.get(timeout=max(0.0, deadline - time.monotonic()))
                except queue.Empty:
                    for rec in pred.push_gap():
                        n_gaps += 1
                        traces.append(rec)
                        _emit(config.trace_sink, rec)
                    continue
            else:
                item = q.get()
            if item is _END:
                break
            for rec in pred.push(item):
                traces.append(rec)
                _emit(config.trace_sink, rec)
    finally:
        stop.set()
        worker.join(timeout=1.0)
    report = LatencyReport.from_timings(config.context_seconds, [r.inference_ms for r in traces],
                                        config.warmup_frames)
    error = f"{type(failure[0]).__name__}: {failure[0]}" if failure else None
    return StreamResult(traces, report, error, n_gaps)


def sweep_contexts(weights, model_cfg: ModelConfig, contexts, source_factory, warmup_frames: int = 50,
                   dtype="float32", on_report=None) -> list[LatencyReport]:
    """One batch-mode run per context length over the same audio, in the order given.

    ``source_factory()`` must return a fresh source each call.
    """
    reports = []
    for c in contexts:
        cfg = StreamConfig(context_seconds=float(c), warmup_frames=warmup_frames, dtype=dtype)
        result = run_stream(weights, model_cfg, source_factory(), cfg)
        if result.error:
            raise RuntimeError(f"stream failed at context {c}: {result.error}")
        reports.append(result.report)
        if on_report is not None:
            on_report(result.report)
    return reports


def write_traces(path, traces: Iterable[TraceRecord]) -> None:
    with open(Path(path), "w", encoding="utf-8") as f:
        for r in traces:
            f.write(r.to_json() + "\n")
