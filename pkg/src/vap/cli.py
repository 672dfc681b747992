"""Command-line entry point: ``vap <subcommand> [flags]``.

Exit codes: 0 success, 1 usage error, 2 runtime error. Errors go to stderr
as one JSON line with ``code`` and ``error`` fields.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
HELP_WIDTH = 100
SUBCOMMANDS = ("synth", "train", "stream", "eval", "bench", "state", "baseline")

log = logging.getLogger("vap")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=HELP_WIDTH, max_help_position=32)


def default_seed() -> int:
    raw = os.environ.get("VAP_SEED")
    if raw is None:
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"VAP_SEED must be an integer, got {raw!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pair(text: str) -> tuple[float, float]:
    vals = _float_list(text)
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return vals[0], vals[1]


def build_parser() -> _Parser:
    p = _Parser(prog="vap", description="Real-time voice activity projection for two-party dialogue.",
                formatter_class=_formatter)
    sub = p.add_subparsers(dest="command", metavar="SUBCOMMAND", parser_class=_Parser)
    common = {"formatter_class": _formatter}

    def add(name, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text, **common)
        sp.add_argument("--config", type=Path, help="key=value file overriding flag defaults")
        sp.add_argument("--out-dir", type=Path, default=Path("."),
                        help="directory for relative output paths (default: .)")
        return sp

    s = add("synth", "Generate a synthetic dialogue corpus (WAV + VAD CSV + manifest).")
    s.add_argument("--out", type=Path, default=Path("corpus"), help="corpus directory (default: corpus)")
    s.add_argument("--n-dialogues", type=int, default=100, help="number of dialogues (default: 100)")
    s.add_argument("--duration", type=float, default=30.0, help="seconds per dialogue (default: 30)")
    s.add_argument("--sample-rate", type=int, default=8000, help="audio sample rate in Hz (default: 8000)")
    s.add_argument("--shift-prob", type=float, default=0.5, help="probability of a shift after each IPU")
    s.add_argument("--pause", type=_pair, default=(0.1, 0.6), help="within-turn pause bounds LO,HI in s")
    s.add_argument("--gap", type=_pair, default=(0.25, 1.2), help="between-turn gap bounds LO,HI in s")
    s.add_argument("--cue-reliability", type=float, default=0.9, help="how often the yield cue is truthful")
    s.add_argument("--seed", type=int, default=None, help="random seed (default: $VAP_SEED or 0)")

    t = add("train", "Fit model weights on the training split of a corpus manifest.")
    t.add_argument("--manifest", type=Path, required=True, help="corpus manifest.json")
    t.add_argument("--weights", type=Path, default=Path("weights.vapw"), help="output weights file")
    t.add_argument("--epochs", type=int, default=10, help="passes over the training split (default: 10)")
    t.add_argument("--lr", type=float, default=0.1, help="gradient descent step size (default: 0.1)")
    t.add_argument("--batch-size", type=int, default=4, help="dialogues per step (default: 4)")
    t.add_argument("--crop-frames", type=int, default=500, help="random crop length, 0 = whole dialogue")
    t.add_argument("--chunk-frames", type=int, default=100, help="attention chunk length (default: 100)")
    t.add_argument("--hidden-dim", type=int, default=64, help="model width (default: 64)")
    t.add_argument("--heads", type=int, default=4, help="attention heads (default: 4)")
    t.add_argument("--self-layers", type=int, default=1, help="per-channel self-attention layers")
    t.add_argument("--cross-layers", type=int, default=3, help="cross-channel layers")
    t.add_argument("--vad-weight", type=float, default=1.0, help="weight of the VAD loss term")
    t.add_argument("--history", type=Path, default=None, help="write per-epoch loss CSV here")
    t.add_argument("--seed", type=int, default=None, help="random seed (default: $VAP_SEED or 0)")

    st = add("stream", "Run frame-by-frame inference on a WAV file or raw PCM from stdin.")
    src = st.add_mutually_exclusive_group(required=True)
    src.add_argument("--wav", type=Path, help="16-bit stereo WAV input")
    src.add_argument("--stdin", action="store_true", help="read raw interleaved 16-bit stereo PCM from stdin")
    st.add_argument("--sample-rate", type=int, default=None, help="sample rate for --stdin input")
    st.add_argument("--weights", type=Path, required=True, help="weights file")
    st.add_argument("--context", type=float, default=1.0, help="attention context in seconds (default: 1.0)")
    st.add_argument("--realtime", action="store_true", help="pace input at wall-clock speed")
    st.add_argument("--traces", type=Path, default=None, help="JSON-lines trace output (default: stdout)")
    st.add_argument("--report", type=Path, default=None, help="latency report CSV output")
    st.add_argument("--warmup", type=int, default=50, help="frames excluded from timing (default: 50)")

    e = add("eval", "Score hold/shift predictions of a trace file against VAD annotations.")
    e.add_argument("--traces", type=Path, required=True, help="JSON-lines traces from 'stream'")
    e.add_argument("--vad", type=Path, required=True, help="VAD CSV (speaker,start_s,end_s)")
    e.add_argument("--json", type=Path, default=None, help="write the summary JSON here (default: stdout)")
    e.add_argument("--csv", type=Path, default=None, help="write per-event CSV here")

    b = add("bench", "Sweep attention context lengths and report per-frame latency.")
    b.add_argument("--contexts", type=_float_list, default=[20, 10, 5, 3, 1, 0.5, 0.3, 0.1],
                   help="comma-separated context lengths in s (default: 20,10,5,3,1,0.5,0.3,0.1)")
    b.add_argument("--wav", type=Path, required=True, help="16-bit stereo WAV input")
    b.add_argument("--weights", type=Path, required=True, help="weights file")
    b.add_argument("--csv", type=Path, default=None, help="latency CSV output (default: stdout)")
    b.add_argument("--warmup", type=int, default=50, help="frames excluded from timing (default: 50)")

    sc = add("state", "Encode or decode a 256-way voice activity state.")
    g = sc.add_mutually_exclusive_group(required=True)
    g.add_argument("--index", type=int, help="state index 0..255 to decode")
    g.add_argument("--pattern", type=str, help="bins as 'SPK0,SPK1', e.g. 1100,0011")

    bl = add("baseline", "Evaluate a fixed silence-timeout turn-taking policy.")
    bl.add_argument("--vad", type=Path, required=True, help="VAD CSV (speaker,start_s,end_s)")
    bl.add_argument("--timeout", type=float, default=1.0, help="silence timeout in s (default: 1.0)")
    bl.add_argument("--n-frames", type=int, default=None, help="track length (default: last interval end)")
    return p


def _subparser(parser, name):
    for action in parser._subparsers._group_actions:
        if name in action.choices:
            return action.choices[name]
    raise UsageError(f"unknown subcommand {name!r}")


def _read_config(path: Path, sp: argparse.ArgumentParser) -> dict:
    dests = {a.dest: a for a in sp._actions if a.dest not in ("help", "config")}
    out = {}
    try:
        lines = path.read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (x.strip() for x in line.split("=", 1))
        dest = key.replace("-", "_")
        if dest not in dests:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        action = dests[dest]
        if isinstance(action, argparse._StoreTrueAction):
            out[dest] = value.lower() in ("1", "true", "yes", "on")
        else:
            try:
                out[dest] = action.type(value) if action.type else value
            except (argparse.ArgumentTypeError, ValueError) as exc:
                raise UsageError(f"{path}:{lineno}: bad value for {key}: {exc}") from None
    return out


def parse_args(argv) -> argparse.Namespace:
    parser = build_parser()
    argv = list(argv)
    if not argv:
        raise UsageError("missing subcommand; choose one of " + ", ".join(SUBCOMMANDS))
    if argv[0] in SUBCOMMANDS and "--config" in argv:
        sp = _subparser(parser, argv[0])
        pre = _Parser(add_help=False)
        pre.add_argument("--config", type=Path)
        known, _ = pre.parse_known_args(argv[1:])
        sp.set_defaults(**_read_config(known.config, sp))
    args = parser.parse_args(argv)
    if args.command is None:
        raise UsageError("missing subcommand")
    return args


def _out(args, path: Path | None) -> Path | None:
    if path is None:
        return None
    path = path if path.is_absolute() else args.out_dir / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


# ------------------------------------------------------------------ subcommands


def cmd_synth(args) -> int:
    from vap.synth import SynthConfig, generate, write_corpus

    seed = default_seed() if args.seed is None else args.seed
    cfg = SynthConfig(seed=seed, n_dialogues=args.n_dialogues, duration_s=args.duration,
                      sample_rate=args.sample_rate, shift_prob=args.shift_prob, pause_s=args.pause,
                      gap_s=args.gap, cue_reliability=args.cue_reliability)
    path = write_corpus(_out(args, args.out), generate(cfg), cfg)
    print(json.dumps({"manifest": str(path), "n_dialogues": cfg.n_dialogues}))
    return EXIT_OK


def load_split(manifest_path, split: str | None):
    """(features, vad) pairs for one split (or all) of a manifest."""
    from vap.features import frame_audio, read_vad_csv, read_wav, vad_frames
    from vap.synth import read_manifest

    root, manifest = read_manifest(manifest_path)
    out = []
    for entry in manifest["dialogues"]:
        if split is not None and entry["split"] != split:
            continue
        feats = frame_audio(read_wav(root / entry["wav"]))
        out.append((feats, vad_frames(read_vad_csv(root / entry["vad"]), feats.shape[0])))
    return out


def cmd_train(args) -> int:
    from vap.model import ModelConfig, init_weights, save_weights, train

    seed = default_seed() if args.seed is None else args.seed
    corpus = load_split(args.manifest, "train")
    if not corpus:
        raise RuntimeError(f"{args.manifest}: no dialogues in the train split")
    cfg = ModelConfig(feature_dim=corpus[0][0].shape[-1], hidden_dim=args.hidden_dim, n_heads=args.heads,
                      n_self_layers=args.self_layers, n_cross_layers=args.cross_layers,
                      vad_loss_weight=args.vad_weight, seed=seed)

    def report(epoch, _w, history):
        print(json.dumps({"epoch": epoch, "loss": history[-1]}), flush=True)

    result = train(init_weights(cfg), cfg, corpus, args.epochs, args.lr, batch_size=args.batch_size,
                   crop_frames=args.crop_frames or None, chunk_frames=args.chunk_frames, on_epoch=report)
    save_weights(result.weights, _out(args, args.weights), cfg)
    if args.history:
        rows = ["epoch,loss"] + [f"{i},{v:.6f}" for i, v in enumerate(result.history)]
        _out(args, args.history).write_text("\n".join(rows) + "\n")
    return EXIT_OK


def cmd_stream(args) -> int:
    from vap.model import load_weights
    from vap.streaming import PcmSource, StreamConfig, WavSource, latency_csv, run_stream

    weights, cfg = load_weights(args.weights)
    if args.stdin:
        if args.sample_rate is None:
            raise UsageError("--stdin requires --sample-rate")
        source = PcmSource(sys.stdin.buffer, args.sample_rate)
    else:
        source = WavSource(args.wav)
    trace_path = _out(args, args.traces)
    sink = open(trace_path, "w", encoding="utf-8") if trace_path else sys.stdout
    try:
        result = run_stream(weights, cfg, source, StreamConfig(
            context_seconds=args.context, realtime=args.realtime, warmup_frames=args.warmup, trace_sink=sink))
    finally:
        if trace_path:
            sink.close()
    if args.report:
        _out(args, args.report).write_text(latency_csv([result.report]))
    if result.error:
        raise RuntimeError(f"stream aborted after {len(result.traces)} frames: {result.error}")
    return EXIT_OK


def cmd_eval(args) -> int:
    from vap.evaluation import extract_events, score_events
    from vap.features import read_vad_csv, vad_frames
    from vap.streaming import read_traces

    traces = read_traces(args.traces)
    if not traces:
        raise RuntimeError(f"{args.traces}: no trace records")
    n = max(r.frame_index for r in traces) + 1
    vad = vad_frames(read_vad_csv(args.vad), n)
    result = score_events(extract_events(vad), traces)
    text = result.to_json()
    if args.json:
        _out(args, args.json).write_text(text + "\n")
    else:
        print(text)
    if args.csv:
        result.write_csv(_out(args, args.csv))
    return EXIT_OK


def cmd_bench(args) -> int:
    from vap.model import load_weights
    from vap.streaming import WavSource, latency_csv, latency_table, sweep_contexts

    weights, cfg = load_weights(args.weights)
    reports = sweep_contexts(weights, cfg, args.contexts, lambda: WavSource(args.wav), args.warmup,
                             on_report=lambda r: log.info("context %g s: %.2f ms", r.context_seconds, r.mean_ms))
    csv_text = latency_csv(reports)
    if args.csv:
        _out(args, args.csv).write_text(csv_text)
        print(latency_table(reports))
    else:
        sys.stdout.write(csv_text)
    return EXIT_OK


def cmd_state(args) -> int:
    from vap.state import pattern_from_state, state_from_pattern

    if args.index is not None:
        try:
            pattern = pattern_from_state(args.index)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        index = args.index
    else:
        parts = args.pattern.split(",")
        if len(parts) != 2 or any(len(x) != 4 or set(x) - {"0", "1"} for x in parts):
            raise UsageError("--pattern must look like 1100,0011")
        pattern = np.array([[int(ch) for ch in x] for x in parts])
        index = state_from_pattern(pattern)
    rows = ["".join(str(int(b)) for b in row) for row in pattern]
    print(json.dumps({"index": index, "binary": f"{index:08b}", "speaker0": rows[0], "speaker1": rows[1],
                      "bins_ms": ["0-200", "200-600", "600-1200", "1200-2000"]}))
    return EXIT_OK


def cmd_baseline(args) -> int:
    from vap.evaluation import timeout_baseline
    from vap.features import read_vad_csv, vad_frames

    intervals = read_vad_csv(args.vad)
    n = args.n_frames
    if n is None:
        last = max((end for spk in intervals for _, end in spk), default=0.0)
        n = int(round(last * 50))
    print(timeout_baseline(vad_frames(intervals, n), args.timeout).to_json())
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "stream": cmd_stream, "eval": cmd_eval,
            "bench": cmd_bench, "state": cmd_state, "baseline": cmd_baseline}


def _fail(code: int, message: str) -> int:
    sys.stderr.write(json.dumps({"code": code, "error": message}) + "\n")
    return code


def main(argv=None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, str(exc))
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else _fail(EXIT_USAGE, str(exc))
    except Exception as exc:
        return _fail(EXIT_RUNTIME, f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
