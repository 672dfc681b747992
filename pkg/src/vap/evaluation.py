"""Hold/shift prediction at mutual silences, scored by balanced accuracy."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from vap.aggregation import predicted_speaker
from vap.state import FRAME_MS

MIN_SILENCE_FRAMES = 12  # events must be strictly longer: > 0.25 s at 50 Hz
FRAME_S = FRAME_MS / 1000.0


@dataclass(frozen=True)
class SilenceEvent:
    start_frame: int
    end_frame: int  # exclusive
    prev_speaker: int
    next_speaker: int

    @property
    def label(self) -> str:
        return "shift" if self.next_speaker != self.prev_speaker else "hold"

    @property
    def duration_s(self) -> float:
        return (self.end_frame - self.start_frame) * FRAME_S


@dataclass
class EventScore:
    event: SilenceEvent
    mean_p_now: tuple[float, float]
    predicted: int
    correct: bool


@dataclass
class EvalResult:
    n_shift: int
    n_hold: int
    shift_accuracy: float
    hold_accuracy: float
    balanced_accuracy: float
    events: list[EventScore] = field(default_factory=list)

    def summary(self) -> dict:
        d = asdict(self)
        d.pop("events")
        return d

    def to_json(self) -> str:
        return json.dumps(self.summary(), indent=2)

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as f:
            w = csv.writer(f)
            w.writerow(["start_s", "end_s", "label", "mean_p0", "mean_p1", "pred", "correct"])
            for r in self.events:
                e = r.event
                w.writerow([f"{e.start_frame * FRAME_S:.2f}", f"{e.end_frame * FRAME_S:.2f}", e.label,
                            f"{r.mean_p_now[0]:.6f}", f"{r.mean_p_now[1]:.6f}", r.predicted, int(r.correct)])


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(padded)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def extract_events(vad, min_frames: int = MIN_SILENCE_FRAMES) -> list[SilenceEvent]:
    """Maximal mutual silences strictly longer than ``min_frames`` frames.

    The speaker on each side is read from the single frame bordering the
    silence; the event is dropped when that frame has both speakers voiced
    or when the silence touches the start or end of the recording.
    """
    v = np.asarray(vad).astype(bool)
    if v.ndim != 2 or v.shape[0] != 2:
        raise ValueError(f"VAD track must have shape (2, T), got {v.shape}")
    T = v.shape[1]
    events = []
    for start, end in _runs(~v[0] & ~v[1]):
        if end - start <= min_frames or start == 0 or end == T:
            continue
        before, after = v[:, start - 1], v[:, end]
        if before.all() or after.all():
            continue
        events.append(SilenceEvent(int(start), int(end), int(np.argmax(before)), int(np.argmax(after))))
    return events


def _pnow_array(traces, n_needed: int) -> np.ndarray:
    """Accept a (T, 2) array or a sequence of TraceRecords (any order, indexed by frame)."""
    if isinstance(traces, np.ndarray):
        return traces
    out = np.full((n_needed, 2), np.nan)
    for r in traces:
        i = r.frame_index if hasattr(r, "frame_index") else r["frame_index"]
        p = r.p_now if hasattr(r, "p_now") else r["p_now"]
        if i < n_needed:
            out[i] = p
    return out


def score_events(events, traces) -> EvalResult:
    """Average p_now over each silence, predict the larger speaker (ties -> 0).

    ``traces`` is a (T, 2) array of p_now or a sequence of trace records.
    """
    need = max((e.end_frame for e in events), default=0)
    p = _pnow_array(traces, need)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ValueError(f"p_now must have shape (T, 2), got {p.shape}")
    scores = []
    for e in events:
        if e.end_frame > p.shape[0]:
            raise ValueError(f"traces end at frame {p.shape[0]}, event needs frames "
                             f"{e.start_frame}..{e.end_frame - 1}")
        seg = p[e.start_frame:e.end_frame]
        missing = np.flatnonzero(np.isnan(seg).any(axis=1))
        if missing.size:
            raise ValueError(f"no trace for frame {e.start_frame + missing[0]} "
                             f"(event {e.start_frame}..{e.end_frame - 1})")
        m = seg.mean(axis=0)
        pred = predicted_speaker(m)
        scores.append(EventScore(e, (float(m[0]), float(m[1])), pred, pred == e.next_speaker))
    return _summarize(scores)


def _summarize(scores: list[EventScore]) -> EvalResult:
    shifts = [s.correct for s in scores if s.event.label == "shift"]
    holds = [s.correct for s in scores if s.event.label == "hold"]
    sa = float(np.mean(shifts)) if shifts else float("nan")
    ha = float(np.mean(holds)) if holds else float("nan")
    # with one class missing, balanced accuracy falls back to the class present
    ba = float(np.nanmean([sa, ha])) if (shifts or holds) else float("nan")
    return EvalResult(len(shifts), len(holds), sa, ha, ba, scores)


def balanced_accuracy(y_true, y_pred) -> float:
    """Mean per-class recall over the classes present in ``y_true``."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    return float(np.mean([np.mean(y_pred[y_true == c] == c) for c in np.unique(y_true)]))


def oracle_pnow(events, n_frames: int, speaker_of) -> np.ndarray:
    """(T, 2) p_now that puts all mass on ``speaker_of(event)`` during each event, 0.5/0.5 elsewhere."""
    p = np.full((n_frames, 2), 0.5)
    for e in events:
        s = speaker_of(e)
        p[e.start_frame:e.end_frame] = 0.0
        p[e.start_frame:e.end_frame, s] = 1.0
    return p


@dataclass
class TimeoutSummary:
    timeout_s: float
    n_hold: int
    n_shift: int
    n_interrupted: int
    interruption_rate: float
    n_responded: int
    n_no_response: int
    mean_response_delay_s: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)


def timeout_baseline(vad, timeout_s: float, events=None) -> TimeoutSummary:
    """Simulate a system that takes the turn after ``timeout_s`` of silence.

    A hold is interrupted when its silence lasts at least the timeout. A
    shift gets a response (after exactly ``timeout_s``) under the same
    condition; otherwise the other speaker resumed first and it counts as a
    no-response.
    """
    if timeout_s < 0:
        raise ValueError("timeout must be >= 0")
    events = extract_events(vad) if events is None else events
    holds = [e for e in events if e.label == "hold"]
    shifts = [e for e in events if e.label == "shift"]
    eps = 1e-9
    interrupted = sum(e.duration_s >= timeout_s - eps for e in holds)
    responded = sum(e.duration_s >= timeout_s - eps for e in shifts)
    return TimeoutSummary(
        timeout_s=float(timeout_s), n_hold=len(holds), n_shift=len(shifts),
        n_interrupted=int(interrupted),
        interruption_rate=interrupted / len(holds) if holds else float("nan"),
        n_responded=int(responded), n_no_response=len(shifts) - int(responded),
        mean_response_delay_s=float(timeout_s) if responded else None,
    )
