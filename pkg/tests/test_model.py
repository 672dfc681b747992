import math

import numpy as np
import pytest

from oracles import finite_difference_errors, loss_straightline
from vap.model import (
    ForwardOutput,
    ModelConfig,
    TrainingDiverged,
    backward,
    encode_features,
    forward,
    forward_from_encoded,
    init_weights,
    loss,
    param_shapes,
    train,
)
from vap.model.network import FROZEN
from vap.state import SPEAKER_SWAP, label_sequence


def feats(rng, T, D=9):
    return rng.standard_normal((T, 2, D))


def test_desk_shape_table():
    cfg = ModelConfig(feature_dim=9, hidden_dim=64, n_heads=4)
    shapes = dict(param_shapes(cfg))
    assert shapes["enc0.W"] == (9, 192)
    assert shapes["enc1.U"] == (64, 192)
    assert shapes["pos"] == (1000, 64)
    assert shapes["self0.0.sa.Wq"] == (64, 64)
    assert shapes["cross1.2.ca.Wk"] == (64, 64)
    assert shapes["cross0.2.ffn.W1"] == (64, 256)
    assert shapes["vap.W"] == (128, 256)
    assert shapes["vad1.w"] == (64, 1)
    assert "cross0.3.sa.Wq" not in shapes and "self0.1.sa.Wq" not in shapes
    w = init_weights(cfg)
    assert {k: v.shape for k, v in w.items()} == shapes
    assert all(v.dtype == np.float32 for v in w.values())


@pytest.mark.parametrize("kw", [dict(hidden_dim=10, n_heads=4), dict(n_self_layers=0), dict(n_heads=0),
                                dict(max_context_frames=0), dict(vad_loss_weight=-1)])
def test_invalid_config(kw):
    with pytest.raises(ValueError):
        ModelConfig(**kw)


def test_init_determinism(tiny_cfg):
    a, b = init_weights(tiny_cfg), init_weights(tiny_cfg)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = init_weights(ModelConfig(**{**tiny_cfg.to_dict(), "seed": tiny_cfg.seed + 1}))
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_forward_shapes_and_normalization(tiny_cfg, tiny_weights, rng):
    out = forward(tiny_weights, tiny_cfg, feats(rng, 40), context_frames=16)
    assert out.vap_probs.shape == (40, 256) and out.vad_probs.shape == (40, 2)
    np.testing.assert_allclose(out.vap_probs.sum(-1), 1.0, atol=1e-6)
    assert np.all((out.vad_probs > 0) & (out.vad_probs < 1))
    out32 = forward(tiny_weights, tiny_cfg, feats(rng, 40), context_frames=16, dtype=np.float32)
    np.testing.assert_allclose(out32.vap_probs.sum(-1), 1.0, atol=1e-5)


def test_forward_errors(tiny_cfg, tiny_weights, rng):
    with pytest.raises(ValueError):
        forward(tiny_weights, tiny_cfg, feats(rng, 10, D=8))
    x = feats(rng, 10)
    x[3, 1, 2] = np.nan
    with pytest.raises(ValueError):
        forward(tiny_weights, tiny_cfg, x)
    with pytest.raises(ValueError):
        forward(tiny_weights, tiny_cfg, feats(rng, 10), context_frames=tiny_cfg.max_context_frames + 1)


def test_forward_deterministic(tiny_cfg, tiny_weights, rng):
    x = feats(rng, 30)
    a = forward(tiny_weights, tiny_cfg, x, 10)
    b = forward(tiny_weights, tiny_cfg, x, 10)
    assert a.vap_probs.tobytes() == b.vap_probs.tobytes()


def test_causality(tiny_cfg, tiny_weights, rng):
    x = feats(rng, 30)
    base = forward(tiny_weights, tiny_cfg, x, 12)
    for t in (0, 11, 20, 28):
        y = x.copy()
        y[t + 1:] = rng.standard_normal(y[t + 1:].shape) * 3
        out = forward(tiny_weights, tiny_cfg, y, 12)
        assert out.vap_probs[:t + 1].tobytes() == base.vap_probs[:t + 1].tobytes()
        assert out.vad_probs[:t + 1].tobytes() == base.vad_probs[:t + 1].tobytes()


def test_context_window_law(tiny_cfg, tiny_weights, rng):
    c = 8
    E = encode_features(tiny_weights, tiny_cfg, feats(rng, 30))
    base = forward_from_encoded(tiny_weights, tiny_cfg, E, c)
    t = 25
    E2 = E.copy()
    E2[:, :t - c + 1] = rng.standard_normal(E2[:, :t - c + 1].shape)  # frames <= t - c
    out = forward_from_encoded(tiny_weights, tiny_cfg, E2, c)
    assert out.vap_probs[t].tobytes() == base.vap_probs[t].tobytes()
    assert out.vad_probs[t:].tobytes() == base.vad_probs[t:].tobytes()
    # the frame inside the window does matter
    E3 = E.copy()
    E3[:, t - c + 1] += 1.0
    assert not np.array_equal(forward_from_encoded(tiny_weights, tiny_cfg, E3, c).vap_probs[t], base.vap_probs[t])


def test_context_reaches_through_encoder(tiny_cfg, tiny_weights, rng):
    # features outside the attention window still influence outputs through the recurrent state
    x = feats(rng, 30)
    y = x.copy()
    y[0] += 2.0
    a = forward(tiny_weights, tiny_cfg, x, 5).vap_probs[20]
    b = forward(tiny_weights, tiny_cfg, y, 5).vap_probs[20]
    assert not np.array_equal(a, b)


def symmetric_weights(w, d):
    s = {k: v.copy() for k, v in w.items()}
    for k in w:
        for prefix in ("enc", "self", "cross", "out", "vad"):
            if k.startswith(prefix + "1"):
                s[k] = w[prefix + "0" + k[len(prefix) + 1:]].copy()
    A = w["vap.W"][:d]
    s["vap.W"] = np.concatenate([A, A[:, SPEAKER_SWAP]])
    s["vap.b"] = (w["vap.b"] + w["vap.b"][SPEAKER_SWAP]) / 2
    return s


def test_channel_symmetry(tiny_cfg, tiny_weights, rng):
    w = symmetric_weights(tiny_weights, tiny_cfg.hidden_dim)
    x = feats(rng, 40)
    a = forward(w, tiny_cfg, x, 16)
    b = forward(w, tiny_cfg, x[:, ::-1], 16)
    np.testing.assert_allclose(b.vap_probs, a.vap_probs[:, SPEAKER_SWAP], atol=1e-5)
    np.testing.assert_allclose(b.vad_probs, a.vad_probs[:, ::-1], atol=1e-5)


def test_loss_reference_values():
    T = 150
    uniform = ForwardOutput(np.full((T, 256), 1 / 256), np.full((T, 2), 0.5))
    labels = np.arange(50) % 256
    terms = loss(uniform, labels, np.zeros((2, T)))
    assert terms.vap == pytest.approx(math.log(256), abs=1e-12)
    assert terms.vad == pytest.approx(math.log(2), abs=1e-12)
    onehot = np.zeros((T, 256))
    onehot[np.arange(50), labels] = 1
    onehot[50:, 0] = 1
    targets = (np.arange(T) % 3 == 0)[None].repeat(2, 0).astype(float)
    perfect = ForwardOutput(onehot, targets.T.copy())
    terms = loss(perfect, labels, targets)
    assert terms.vap <= 1e-6 and terms.vad <= 1e-6


def test_loss_matches_straightline(rng):
    T = 130
    p = rng.random((T, 256)) ** 4
    p /= p.sum(-1, keepdims=True)
    q = rng.random((T, 2))
    labels = rng.integers(0, 256, 30)
    targets = rng.integers(0, 2, (2, T))
    for lam in (0.0, 0.7):
        terms = loss(ForwardOutput(p, q), labels, targets, lam)
        total, ce, bce = loss_straightline(p, q, labels, targets, lam)
        assert terms.total == pytest.approx(total, rel=1e-12)
        assert terms.vap == pytest.approx(ce, rel=1e-12)
        assert terms.vad == pytest.approx(bce, rel=1e-12)


def test_loss_length_errors():
    out = ForwardOutput(np.full((20, 256), 1 / 256), np.full((20, 2), 0.5))
    with pytest.raises(ValueError):
        loss(out, np.zeros(21, int), np.zeros((2, 20)))
    with pytest.raises(ValueError):
        loss(out, np.zeros(5, int), np.zeros((2, 19)))


def small_problem(rng, T=12, ctx=12):
    cfg = ModelConfig(feature_dim=4, hidden_dim=8, n_heads=2, n_self_layers=1, n_cross_layers=2,
                      max_context_frames=ctx, seed=5)
    w = {k: v.astype(np.float64) for k, v in init_weights(cfg).items()}
    for k in w:
        if not k.endswith(("W", "U", "w", "Wq", "Wk", "Wv", "Wo", "W1", "W2", "pos")):
            w[k] = w[k] + 0.1 * rng.standard_normal(w[k].shape)
    w["in.scale"] = np.abs(w["in.scale"]) + 0.5
    x = rng.standard_normal((T, 2, 4))
    labels = rng.integers(0, 256, T - 2)
    targets = rng.integers(0, 2, (2, T)).astype(float)
    return cfg, w, x, labels, targets


@pytest.mark.parametrize("ctx", [12, 5])
def test_gradient_check_small(ctx, rng):
    cfg, w, x, labels, targets = small_problem(rng)
    grads = backward(w, cfg, x, labels, targets, 0.8, context_frames=ctx)
    assert set(grads) == set(w)

    def f(ww):
        return loss(forward(ww, cfg, x, ctx), labels, targets, 0.8).total

    errs = finite_difference_errors(f, w, grads, 60, rng)
    worst = max(errs)
    assert worst[0] < 1e-3, worst


def test_zero_lambda_vad_grads_exact(rng):
    cfg, w, x, labels, targets = small_problem(rng)
    grads = backward(w, cfg, x, labels, targets, 0.0)
    for k in ("vad0.w", "vad0.b", "vad1.w", "vad1.b"):
        assert np.all(grads[k] == 0.0)
    assert np.any(grads["vap.W"] != 0)


def tiny_corpus(seed=0, n=2, T=160):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        vad = np.zeros((2, T))
        t, s = 0, 0
        while t < T:
            L = int(rng.integers(10, 40))
            vad[s, t:t + L] = 1
            t += L + int(rng.integers(5, 20))
            s = int(rng.integers(2))
        f = rng.standard_normal((T, 2, 9)) * 0.1
        f[:, :, 0] += 2 * vad.T  # activity shows up in the first feature
        out.append((f, vad))
    return out


def test_train_overfits_single_dialogue(tiny_cfg):
    corpus = tiny_corpus(n=1)
    f, v = corpus[0]
    w0 = init_weights(tiny_cfg)
    res = train(w0, tiny_cfg, corpus, 200, 0.05)
    assert len(res.step_losses) == 200
    assert res.step_losses[-1] < res.step_losses[0]
    assert res.history[-1] < res.history[0]
    # the fitted weights also lower the exact full-context loss
    from vap.model.train import fit_input_norm
    before = loss(forward(fit_input_norm(w0, corpus), tiny_cfg, f, 100), label_sequence(v), v).total
    after = loss(forward(res.weights, tiny_cfg, f, 100), label_sequence(v), v).total
    assert after < before
    for k in FROZEN:
        np.testing.assert_array_equal(res.weights[k], fit_input_norm(w0, corpus)[k])


def test_train_deterministic(tiny_cfg):
    corpus = tiny_corpus(n=3)
    kw = dict(batch_size=2, crop_frames=120)
    a = train(init_weights(tiny_cfg), tiny_cfg, corpus, 3, 0.05, **kw)
    b = train(init_weights(tiny_cfg), tiny_cfg, corpus, 3, 0.05, **kw)
    assert a.step_losses == b.step_losses
    assert all(a.weights[k].tobytes() == b.weights[k].tobytes() for k in a.weights)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_train_divergence_carries_weights(tiny_cfg):
    w = init_weights(tiny_cfg)
    w["vap.b"][3] = np.inf
    with pytest.raises(TrainingDiverged) as info:
        train(w, tiny_cfg, tiny_corpus(n=1), 2, 0.05)
    assert set(info.value.weights) == set(w)


def test_train_input_errors(tiny_cfg):
    with pytest.raises(ValueError):
        train(init_weights(tiny_cfg), tiny_cfg, [], 1, 0.1)
    with pytest.raises(ValueError):
        train(init_weights(tiny_cfg), tiny_cfg, tiny_corpus(T=100), 1, 0.1)
    with pytest.raises(ValueError):
        train(init_weights(tiny_cfg), tiny_cfg, tiny_corpus(), 0, 0.1)
