"""Two-channel voice activity projection network.

Topology per channel: feature normalization -> GRU encoder -> learned
positional embedding -> self-attention blocks -> cross-channel blocks
(self-attention, attention to the other channel, feed-forward; pre-LN with
residuals) -> final layer norm. The two final states are concatenated for
the 256-way projection head; each channel also has its own VAD head.

Attention never sees more than ``context_frames`` trailing encoder states:
the output at frame ``t`` is the last position of the stack run over the
window ``(t - context_frames, t]``, with positions counted from the window's
left edge. The encoder itself carries state over the whole input.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from vap.model import layers as L
from vap.state import N_STATES

N_CH = 2
FROZEN = ("in.mean", "in.scale")
WINDOW_FRAMES_PER_BATCH = 40_000  # caps (n_windows * window_len) per attention batch


@dataclass
class ModelConfig:
    feature_dim: int = 9
    hidden_dim: int = 64
    n_heads: int = 4
    n_self_layers: int = 1
    n_cross_layers: int = 3
    ffn_mult: int = 4
    max_context_frames: int = 1000
    vad_loss_weight: float = 1.0
    seed: int = 0

    def __post_init__(self):
        for name in ("feature_dim", "hidden_dim", "n_heads", "n_self_layers",
                     "n_cross_layers", "ffn_mult", "max_context_frames"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ValueError(f"{name} must be a positive integer, got {v!r}")
        if self.hidden_dim % self.n_heads:
            raise ValueError(f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}")
        if self.vad_loss_weight < 0:
            raise ValueError("vad_loss_weight must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ForwardOutput:
    vap_probs: np.ndarray  # (T, 256)
    vad_probs: np.ndarray  # (T, 2)
    vap_logits: np.ndarray = field(repr=False, default=None)


# --------------------------------------------------------------- parameters


def _attn_shapes(prefix, d):
    return [(f"{prefix}.{w}", (d, d)) for w in ("Wq", "Wk", "Wv", "Wo")] + \
           [(f"{prefix}.{b}", (d,)) for b in ("bq", "bk", "bv", "bo")]


def _ln_shapes(prefix, d):
    return [(f"{prefix}.g", (d,)), (f"{prefix}.b", (d,))]


def _ffn_shapes(prefix, d, f):
    return [(f"{prefix}.W1", (d, f)), (f"{prefix}.b1", (f,)),
            (f"{prefix}.W2", (f, d)), (f"{prefix}.b2", (d,))]


def param_shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) table of every tensor in the model."""
    D, d, f = cfg.feature_dim, cfg.hidden_dim, cfg.hidden_dim * cfg.ffn_mult
    shapes = [("in.mean", (D,)), ("in.scale", (D,)), ("pos", (cfg.max_context_frames, d))]
    for c in range(N_CH):
        shapes += [(f"enc{c}.W", (D, 3 * d)), (f"enc{c}.U", (d, 3 * d)), (f"enc{c}.b", (3 * d,))]
        for i in range(cfg.n_self_layers):
            p = f"self{c}.{i}"
            shapes += _ln_shapes(p + ".ln1", d) + _attn_shapes(p + ".sa", d)
            shapes += _ln_shapes(p + ".ln2", d) + _ffn_shapes(p + ".ffn", d, f)
        for i in range(cfg.n_cross_layers):
            p = f"cross{c}.{i}"
            shapes += _ln_shapes(p + ".ln1", d) + _attn_shapes(p + ".sa", d)
            shapes += _ln_shapes(p + ".ln2", d) + _ln_shapes(p + ".lnm", d) + _attn_shapes(p + ".ca", d)
            shapes += _ln_shapes(p + ".ln3", d) + _ffn_shapes(p + ".ffn", d, f)
        shapes += _ln_shapes(f"out{c}.ln", d)
        shapes += [(f"vad{c}.w", (d, 1)), (f"vad{c}.b", (1,))]
    shapes += [("vap.W", (N_CH * d, N_STATES)), ("vap.b", (N_STATES,))]
    return shapes


def init_weights(cfg: ModelConfig) -> dict[str, np.ndarray]:
    """Deterministic float32 initialization from ``cfg.seed``.

    Matrices are uniform in +-1/sqrt(fan_in); biases start at zero, layer-norm
    gains at one, feature normalization at identity.
    """
    if not isinstance(cfg, ModelConfig):
        raise TypeError("init_weights expects a ModelConfig")
    rng = np.random.default_rng(cfg.seed)
    weights = {}
    for name, shape in param_shapes(cfg):
        leaf = name.rsplit(".", 1)[-1]
        if name == "in.scale" or leaf == "g":
            w = np.ones(shape)
        elif name == "in.mean" or len(shape) == 1:
            w = np.zeros(shape)
        else:
            fan_in = shape[-1] if name == "pos" else shape[0]
            bound = 1.0 / np.sqrt(fan_in)
            w = rng.uniform(-bound, bound, size=shape)
        weights[name] = w.astype(np.float32)
    return weights


def _cast(weights, dtype=np.float64) -> dict[str, np.ndarray]:
    return {k: np.asarray(v, dtype=dtype) for k, v in weights.items()}


def check_weights(weights, cfg: ModelConfig) -> None:
    expected = dict(param_shapes(cfg))
    missing = expected.keys() - weights.keys()
    if missing:
        raise ValueError(f"missing tensors: {sorted(missing)[:5]}")
    extra = weights.keys() - expected.keys()
    if extra:
        raise ValueError(f"unexpected tensors: {sorted(extra)[:5]}")
    for name, shape in expected.items():
        if tuple(np.shape(weights[name])) != shape:
            raise ValueError(f"tensor {name}: shape {np.shape(weights[name])} != expected {shape}")


def zeros_like_weights(weights) -> dict[str, np.ndarray]:
    return {k: np.zeros(np.shape(v)) for k, v in weights.items()}


# --------------------------------------------------------------- encoder


def _check_features(features, cfg) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[2] != N_CH:
        raise ValueError(f"features must have shape (T, 2, D) or (N, T, 2, D), got {np.shape(features)}")
    if x.shape[-1] != cfg.feature_dim:
        raise ValueError(f"feature_dim mismatch: got {x.shape[-1]}, model expects {cfg.feature_dim}")
    if x.shape[1] < 1:
        raise ValueError("need at least one frame")
    if not np.all(np.isfinite(x)):
        raise ValueError("features contain non-finite values")
    return x


def _enc_params(p):
    W = np.stack([p[f"enc{c}.W"] for c in range(N_CH)])
    U = np.stack([p[f"enc{c}.U"] for c in range(N_CH)])
    b = np.stack([p[f"enc{c}.b"] for c in range(N_CH)])
    return W, U, b


def normalize_features(p, x):
    return (x - p["in.mean"]) * p["in.scale"]


def encode(p, x):
    """x (N, T, 2, D) -> encoder states (2, N, T, d), cache."""
    xn = normalize_features(p, x).transpose(2, 0, 1, 3)
    W, U, b = _enc_params(p)
    hs, cache = L.gru_fwd(xn, W, U, b)
    return hs, (cache, x)


def encode_bwd(p, dE, cache, grads):
    gcache, x = cache
    W, U, b = _enc_params(p)
    dxn, dW, dU, db = L.gru_bwd(dE, gcache, W, U)
    for c in range(N_CH):
        grads[f"enc{c}.W"] += dW[c]
        grads[f"enc{c}.U"] += dU[c]
        grads[f"enc{c}.b"] += db[c]
    dxn = dxn.transpose(1, 2, 0, 3)  # (N, T, 2, D)
    xc = x - p["in.mean"]
    grads["in.scale"] += (dxn * xc).reshape(-1, x.shape[-1]).sum(axis=0)
    grads["in.mean"] -= (dxn * p["in.scale"]).reshape(-1, x.shape[-1]).sum(axis=0)


def encoder_step(p, x_t, h):
    """Single streaming step: x_t (2, D) features, h (2, d) state -> new state."""
    W, U, b = _enc_params(p)
    xn = normalize_features(p, x_t)
    xw = (xn[:, None, :] @ W)[:, 0] + b
    h_new, _ = L.gru_step(xw[:, None, :], h[:, None, :], U)
    return h_new[:, 0]


# --------------------------------------------------------------- attention stack


def stack_fwd(p, cfg, E0, E1):
    """Run both channels' attention stacks over windows.

    E0, E1: (B, Lw, d) encoder states; returns final states (h0, h1) and cache.
    """
    Lw = E0.shape[1]
    mask = L.causal_mask(Lw)
    H = cfg.n_heads
    pos = p["pos"][:Lw]
    xs = [E0 + pos, E1 + pos]
    tape = []
    for i in range(cfg.n_self_layers):
        for c in range(N_CH):
            pre = f"self{c}.{i}"
            x = xs[c]
            n1, cl1 = L.layernorm_fwd(x, p[pre + ".ln1.g"], p[pre + ".ln1.b"])
            sa, csa = L.mha_fwd(n1, n1, p, pre + ".sa", H, mask)
            x = x + sa
            n2, cl2 = L.layernorm_fwd(x, p[pre + ".ln2.g"], p[pre + ".ln2.b"])
            ff, cff = L.ffn_fwd(n2, p, pre + ".ffn")
            xs[c] = x + ff
            tape.append(("self", pre, c, (cl1, csa, cl2, cff)))
    for i in range(cfg.n_cross_layers):
        cache = {}
        a = [None, None]
        for c in range(N_CH):
            pre = f"cross{c}.{i}"
            n1, cl1 = L.layernorm_fwd(xs[c], p[pre + ".ln1.g"], p[pre + ".ln1.b"])
            sa, csa = L.mha_fwd(n1, n1, p, pre + ".sa", H, mask)
            a[c] = xs[c] + sa
            cache[c] = [cl1, csa]
        for c in range(N_CH):
            pre = f"cross{c}.{i}"
            o = 1 - c
            nq, cl2 = L.layernorm_fwd(a[c], p[pre + ".ln2.g"], p[pre + ".ln2.b"])
            nm, clm = L.layernorm_fwd(a[o], p[pre + ".lnm.g"], p[pre + ".lnm.b"])
            ca, cca = L.mha_fwd(nq, nm, p, pre + ".ca", H, mask)
            x = a[c] + ca
            n3, cl3 = L.layernorm_fwd(x, p[pre + ".ln3.g"], p[pre + ".ln3.b"])
            ff, cff = L.ffn_fwd(n3, p, pre + ".ffn")
            xs[c] = x + ff
            cache[c] += [cl2, clm, cca, cl3, cff]
        tape.append(("cross", i, cache))
    outs, lncaches = [], []
    for c in range(N_CH):
        h, cl = L.layernorm_fwd(xs[c], p[f"out{c}.ln.g"], p[f"out{c}.ln.b"])
        outs.append(h)
        lncaches.append(cl)
    return outs[0], outs[1], (tape, lncaches, Lw)


def stack_bwd(p, cfg, dh0, dh1, cache, grads):
    """Returns gradients w.r.t. the stack inputs (dE0, dE1)."""
    tape, lncaches, Lw = cache
    dx = [L.layernorm_bwd(dh, lncaches[c], grads, f"out{c}.ln.g", f"out{c}.ln.b")
          for c, dh in enumerate((dh0, dh1))]
    for entry in reversed(tape):
        if entry[0] == "cross":
            _, i, cache_c = entry
            da = [None, None]
            # feed-forward + cross attention, both channels
            for c in range(N_CH):
                pre = f"cross{c}.{i}"
                cl1, csa, cl2, clm, cca, cl3, cff = cache_c[c]
                dn3 = L.ffn_bwd(dx[c], cff, p, pre + ".ffn", grads)
                dxc = dx[c] + L.layernorm_bwd(dn3, cl3, grads, pre + ".ln3.g", pre + ".ln3.b")
                dnq, dnm = L.mha_bwd(dxc, cca, p, pre + ".ca", grads)
                da_c = dxc + L.layernorm_bwd(dnq, cl2, grads, pre + ".ln2.g", pre + ".ln2.b")
                da_o = L.layernorm_bwd(dnm, clm, grads, pre + ".lnm.g", pre + ".lnm.b")
                da[c] = da_c if da[c] is None else da[c] + da_c
                o = 1 - c
                da[o] = da_o if da[o] is None else da[o] + da_o
            for c in range(N_CH):
                pre = f"cross{c}.{i}"
                cl1, csa = cache_c[c][:2]
                dn1q, dn1kv = L.mha_bwd(da[c], csa, p, pre + ".sa", grads)
                dx[c] = da[c] + L.layernorm_bwd(dn1q + dn1kv, cl1, grads, pre + ".ln1.g", pre + ".ln1.b")
        else:
            _, pre, c, (cl1, csa, cl2, cff) = entry
            dn2 = L.ffn_bwd(dx[c], cff, p, pre + ".ffn", grads)
            dmid = dx[c] + L.layernorm_bwd(dn2, cl2, grads, pre + ".ln2.g", pre + ".ln2.b")
            dn1q, dn1kv = L.mha_bwd(dmid, csa, p, pre + ".sa", grads)
            dx[c] = dmid + L.layernorm_bwd(dn1q + dn1kv, cl1, grads, pre + ".ln1.g", pre + ".ln1.b")
    grads["pos"][:Lw] += (dx[0] + dx[1]).reshape(-1, Lw, dx[0].shape[-1]).sum(axis=0)
    return dx[0], dx[1]


def stack_last(p, cfg, E0, E1):
    """Inference-only stack returning the final states of the *last* window
    position, shape (B, d) per channel. Works in the dtype of its inputs.

    The last cross layer only needs its own query row after self-attention,
    so its cross-attention and feed-forward run on that row alone.
    """
    Lw = E0.shape[1]
    H = cfg.n_heads
    pos = p["pos"][:Lw]
    xs = [E0 + pos, E1 + pos]
    for i in range(cfg.n_self_layers):
        for c in range(N_CH):
            pre = f"self{c}.{i}"
            n1 = L.layernorm(xs[c], p[pre + ".ln1.g"], p[pre + ".ln1.b"])
            x = xs[c] + L.mha(n1, n1, p, pre + ".sa", H)
            xs[c] = x + L.ffn(L.layernorm(x, p[pre + ".ln2.g"], p[pre + ".ln2.b"]), p, pre + ".ffn")
    n_cross = cfg.n_cross_layers
    for i in range(n_cross):
        last = i == n_cross - 1
        a = []
        for c in range(N_CH):
            pre = f"cross{c}.{i}"
            n1 = L.layernorm(xs[c], p[pre + ".ln1.g"], p[pre + ".ln1.b"])
            a.append(xs[c] + L.mha(n1, n1, p, pre + ".sa", H))
        for c in range(N_CH):
            pre = f"cross{c}.{i}"
            q_in = a[c][:, -1:] if last else a[c]
            nq = L.layernorm(q_in, p[pre + ".ln2.g"], p[pre + ".ln2.b"])
            nm = L.layernorm(a[1 - c], p[pre + ".lnm.g"], p[pre + ".lnm.b"])
            x = q_in + L.mha(nq, nm, p, pre + ".ca", H)
            xs[c] = x + L.ffn(L.layernorm(x, p[pre + ".ln3.g"], p[pre + ".ln3.b"]), p, pre + ".ffn")
    if n_cross == 0:
        xs = [x[:, -1:] for x in xs]
    return tuple(L.layernorm(xs[c][:, -1], p[f"out{c}.ln.g"], p[f"out{c}.ln.b"]) for c in range(N_CH))


# --------------------------------------------------------------- heads


def heads_fwd(p, h0, h1):
    """Final states (..., d) -> (vap_logits, vap_probs, vad_probs), cache."""
    hc = np.concatenate([h0, h1], axis=-1)
    logits = hc @ p["vap.W"] + p["vap.b"]
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    probs = e / e.sum(axis=-1, keepdims=True)
    vad = np.stack([L.sigmoid((h @ p[f"vad{c}.w"])[..., 0] + p[f"vad{c}.b"][0])
                    for c, h in enumerate((h0, h1))], axis=-1)
    return logits, probs, vad, (hc, h0, h1)


def heads_bwd(p, dlogits, dvad_pre, cache, grads):
    """dvad_pre is the gradient w.r.t. the VAD *pre-sigmoid* activations."""
    hc, h0, h1 = cache
    d = h0.shape[-1]
    dhc = L.linear_bwd(dlogits, hc, p["vap.W"], grads, "vap.W", "vap.b")
    dh = [dhc[..., :d].copy(), dhc[..., d:].copy()]
    for c, h in enumerate((h0, h1)):
        g = dvad_pre[..., c:c + 1]
        dh[c] += L.linear_bwd(g, h, p[f"vad{c}.w"], grads, f"vad{c}.w", f"vad{c}.b")
    return dh[0], dh[1]


# --------------------------------------------------------------- window plans


@dataclass
class WindowGroup:
    starts: np.ndarray  # window start frames
    length: int
    take_last: bool  # True: only the last position is an output; else all positions

    def taken_frames(self) -> np.ndarray:
        if self.take_last:
            return self.starts + self.length - 1
        return (self.starts[:, None] + np.arange(self.length)[None, :]).ravel()


def sliding_plan(T: int, context: int) -> list[WindowGroup]:
    """Exact trailing-window plan: frame t sees frames (t - context, t]."""
    first = min(T, context)
    plan = [WindowGroup(np.array([0]), first, take_last=False)]
    if T > context:
        plan.append(WindowGroup(np.arange(1, T - context + 1), context, take_last=True))
    return plan


def chunk_plan(T: int, chunk: int) -> list[WindowGroup]:
    """Training plan: independent causal chunks, every position is an output.

    Frame ``t`` sees the frames from its chunk start to ``t``, so windows of
    every length 1..chunk appear in each pass.
    """
    n_full = T // chunk
    plan = []
    if n_full:
        plan.append(WindowGroup(np.arange(n_full) * chunk, chunk, take_last=False))
    if T % chunk:
        plan.append(WindowGroup(np.array([n_full * chunk]), T % chunk, take_last=False))
    return plan


def _batches(group: WindowGroup):
    per = max(1, WINDOW_FRAMES_PER_BATCH // group.length)
    for i in range(0, len(group.starts), per):
        yield group.starts[i:i + per]


def _gather(E, starts, length):
    # E: (N, T, d) -> (N * n_windows, length, d)
    idx = starts[:, None] + np.arange(length)[None, :]
    return E[:, idx].reshape(-1, length, E.shape[-1])


def run_plan(p, cfg, E, plan, keep_cache=False):
    """Apply the attention stack per the plan.

    E: (2, N, T, d). Returns final states H (2, N, T, d) and per-batch caches.
    """
    _, N, T, d = E.shape
    H = np.zeros_like(E)
    caches = []
    cache = None
    for g in plan:
        for starts in _batches(g):
            W0 = _gather(E[0], starts, g.length)
            W1 = _gather(E[1], starts, g.length)
            if g.take_last:
                if keep_cache:
                    h0, h1, cache = stack_fwd(p, cfg, W0, W1)
                    h0, h1 = h0[:, -1], h1[:, -1]
                else:
                    h0, h1 = stack_last(p, cfg, W0, W1)
                h0 = h0.reshape(N, len(starts), d)
                h1 = h1.reshape(N, len(starts), d)
                frames = starts + g.length - 1
            else:
                h0, h1, cache = stack_fwd(p, cfg, W0, W1)
                h0 = h0.reshape(N, -1, d)
                h1 = h1.reshape(N, -1, d)
                frames = (starts[:, None] + np.arange(g.length)[None, :]).ravel()
            H[0][:, frames] = h0
            H[1][:, frames] = h1
            if keep_cache:
                caches.append((g, starts, cache))
    return H, caches


def run_plan_bwd(p, cfg, dH, E_shape, caches, grads):
    _, N, T, d = E_shape
    dE = np.zeros(E_shape)
    for g, starts, cache in caches:
        nw = len(starts)
        idx = starts[:, None] + np.arange(g.length)[None, :]
        if g.take_last:
            frames = starts + g.length - 1
            dh = []
            for c in range(N_CH):
                full = np.zeros((N * nw, g.length, d))
                full[:, -1] = dH[c][:, frames].reshape(N * nw, d)
                dh.append(full)
        else:
            dh = [dH[c][:, idx].reshape(N * nw, g.length, d) for c in range(N_CH)]
        dW0, dW1 = stack_bwd(p, cfg, dh[0], dh[1], cache, grads)
        for c, dWc in enumerate((dW0, dW1)):
            dWc = dWc.reshape(N, nw, g.length, d)
            for j in range(g.length):
                dE[c][:, idx[:, j]] += dWc[:, :, j]
    return dE


# --------------------------------------------------------------- forward / loss / backward


def _check_context(context_frames, cfg):
    if int(context_frames) != context_frames or not 1 <= context_frames <= cfg.max_context_frames:
        raise ValueError(f"context_frames must be in [1, {cfg.max_context_frames}], got {context_frames}")
    return int(context_frames)


def forward_from_encoded(weights, cfg: ModelConfig, E, context_frames: int,
                         dtype=np.float64) -> ForwardOutput:
    """Attention stack + heads over precomputed encoder states E (2, T, d)."""
    p = _cast(weights, dtype)
    c = _check_context(context_frames, cfg)
    E = np.asarray(E, dtype=dtype)[:, None]
    H, _ = run_plan(p, cfg, E, sliding_plan(E.shape[2], c))
    logits, probs, vad, _ = heads_fwd(p, H[0][0], H[1][0])
    return ForwardOutput(probs, vad, logits)


def encode_features(weights, cfg: ModelConfig, features) -> np.ndarray:
    """Encoder states (2, T, d) for a single (T, 2, D) feature sequence."""
    p = _cast(weights)
    x = _check_features(features, cfg)
    E, _ = encode(p, x)
    return E[:, 0]


def forward(weights, cfg: ModelConfig, features, context_frames: int | None = None,
            dtype=np.float64) -> ForwardOutput:
    """Per-frame 256-way distributions and per-channel VAD probabilities.

    ``features`` is (T, 2, D). ``context_frames`` defaults to the model's
    ``max_context_frames``. The encoder always runs in float64; ``dtype``
    applies to the attention stack and heads.
    """
    if context_frames is None:
        context_frames = cfg.max_context_frames
    _check_context(context_frames, cfg)
    return forward_from_encoded(weights, cfg, encode_features(weights, cfg, features), context_frames, dtype)


@dataclass
class LossTerms:
    total: float
    vap: float
    vad: float


EPS = 1e-7


def _check_targets(T, vap_labels, vad_targets):
    labels = np.asarray(vap_labels, dtype=np.int64)
    targets = np.asarray(vad_targets, dtype=np.float64)
    if labels.ndim != 1 or len(labels) > T:
        raise ValueError(f"{len(labels)} VAP labels for {T} output frames")
    if len(labels) and (labels.min() < 0 or labels.max() >= N_STATES):
        raise ValueError("VAP labels outside [0, 255]")
    if targets.shape != (N_CH, T):
        raise ValueError(f"VAD targets must have shape (2, {T}), got {targets.shape}")
    return labels, targets


def loss(output: ForwardOutput, vap_labels, vad_targets, lam: float = 1.0) -> LossTerms:
    """Mean VAP cross-entropy over labeled frames + lam * mean VAD binary cross-entropy.

    Labels cover the leading frames (the unlabeled tail is excluded);
    probabilities are clamped at 1e-7 in both terms.
    """
    T = output.vap_probs.shape[0]
    labels, targets = _check_targets(T, vap_labels, vad_targets)
    n = len(labels)
    vap = float(-np.mean(np.log(np.clip(output.vap_probs[np.arange(n), labels], EPS, 1.0)))) if n else 0.0
    q = np.clip(output.vad_probs.T, EPS, 1.0 - EPS)
    vad = float(-np.mean(targets * np.log(q) + (1 - targets) * np.log(1 - q)))
    return LossTerms(vap + lam * vad, vap, vad)


def _loss_grads(probs, vad, labels_list, targets, lam):
    """Loss and gradients w.r.t. VAP logits and VAD pre-activations.

    probs (N, T, 256), vad (N, T, 2), labels_list: per-dialogue label arrays,
    targets (N, 2, T). Terms are averaged over all labeled/target frames.
    """
    N, T, _ = probs.shape
    dlogits = np.zeros_like(probs)
    n_lab = sum(len(l) for l in labels_list)
    vap = 0.0
    for i, labels in enumerate(labels_list):
        n = len(labels)
        if not n:
            continue
        py = probs[i, np.arange(n), labels]
        vap -= np.log(np.clip(py, EPS, 1.0)).sum()
        live = py > EPS
        g = probs[i, :n].copy()
        g[np.arange(n), labels] -= 1.0
        dlogits[i, :n] = g * live[:, None] / n_lab
    vap = vap / n_lab if n_lab else 0.0
    tgt = targets.transpose(0, 2, 1)
    q = np.clip(vad, EPS, 1.0 - EPS)
    vad_loss = -np.mean(tgt * np.log(q) + (1 - tgt) * np.log(1 - q))
    live = (vad > EPS) & (vad < 1.0 - EPS)
    dvad = lam * (vad - tgt) * live / vad.size
    return vap + lam * vad_loss, vap, vad_loss, dlogits, dvad


def loss_and_grads(weights, cfg: ModelConfig, features, labels_list, targets, lam, plan_fn):
    """Shared core of :func:`backward` and training.

    features (N, T, 2, D); ``plan_fn(T)`` picks the attention windows.
    Returns (LossTerms, grads as float64 dict).
    """
    p = _cast(weights)
    x = _check_features(features, cfg)
    N, T = x.shape[:2]
    targets = np.asarray(targets, dtype=np.float64).reshape(N, N_CH, T)
    grads = zeros_like_weights(p)
    E, ecache = encode(p, x)
    H, caches = run_plan(p, cfg, E, plan_fn(T), keep_cache=True)
    logits, probs, vad, hcache = heads_fwd(p, H[0], H[1])
    total, vap_l, vad_l, dlogits, dvad = _loss_grads(probs, vad, labels_list, targets, lam)
    dh0, dh1 = heads_bwd(p, dlogits, dvad, hcache, grads)
    dE = run_plan_bwd(p, cfg, np.stack([dh0, dh1]), E.shape, caches, grads)
    encode_bwd(p, dE, ecache, grads)
    return LossTerms(float(total), float(vap_l), float(vad_l)), grads


def backward(weights, cfg: ModelConfig, features, vap_labels, vad_targets, lam: float | None = None,
             context_frames: int | None = None) -> dict[str, np.ndarray]:
    """Exact gradients of :func:`loss` applied to :func:`forward`, for every tensor."""
    lam = cfg.vad_loss_weight if lam is None else lam
    context = cfg.max_context_frames if context_frames is None else _check_context(context_frames, cfg)
    x = _check_features(features, cfg)
    labels, targets = _check_targets(x.shape[1], vap_labels, vad_targets)
    _, grads = loss_and_grads(weights, cfg, x, [labels], targets[None], lam,
                              lambda T: sliding_plan(T, context))
    return grads
