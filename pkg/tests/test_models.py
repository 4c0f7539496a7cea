import numpy as np
import pytest

from fedsi.autodiff import Graph, ShapeError, finite_difference_check
from fedsi.data import Vocab
from fedsi.models import (
    ModelConfig, ModelVariant, TokenStats, attention, bind, cifg_step, init_params, lm_forward,
    lm_loss, loss_and_metrics, preset, transformer_block,
)

CIFG_VARIANTS = [ModelVariant.CIFG, ModelVariant.SI_CIFG]
ATTN_VARIANTS = [ModelVariant.TRANSFORMER, ModelVariant.SI_TRANSFORMER]


def cifg_params(rng, h=8, d=5, scale=1.0):
    p = {}
    for g in "foc":
        p[f"W_{g}"] = rng.normal(0, scale, (h, d))
        p[f"U_{g}"] = rng.normal(0, scale, (h, h))
        p[f"b_{g}"] = rng.normal(0, scale, h)
    return p


def attn_params(rng, d=6, ffn=10, zero=False):
    mk = (lambda *s: np.zeros(s)) if zero else (lambda *s: rng.normal(0, 1 / np.sqrt(s[-1]), s))
    return {
        "W_Q": mk(d, d), "W_K": mk(d, d), "W_V": mk(d, d), "W_O": mk(d, d),
        "ln1_gain": np.ones(d), "ln1_bias": np.zeros(d), "ln2_gain": np.ones(d), "ln2_bias": np.zeros(d),
        "W_1": mk(ffn, d), "b_1": np.zeros(ffn), "W_2": mk(d, ffn), "b_2": np.zeros(d),
    }


# --- CIFG -----------------------------------------------------------------


def test_cifg_zero_weights_example():
    h, d = 4, 3
    p = {k: np.zeros_like(v) for k, v in cifg_params(np.random.default_rng(0), h, d).items()}
    c = np.array([1.0, -2.0, 0.5, 3.0])
    h_t, c_t, gates = cifg_step(p, np.ones(d), np.ones(h), c, ModelVariant.CIFG, return_gates=True)
    np.testing.assert_array_equal(gates.forget, 0.5)
    np.testing.assert_array_equal(gates.input, 0.5)
    np.testing.assert_array_equal(gates.output, 0.5)
    np.testing.assert_array_equal(gates.candidate, 0.0)
    np.testing.assert_array_equal(c_t, 0.5 * c)
    np.testing.assert_allclose(h_t, 0.5 * np.tanh(0.5 * c), rtol=0, atol=1e-15)


@pytest.mark.parametrize("variant", CIFG_VARIANTS)
def test_cifg_gate_coupling_exact(variant):
    rng = np.random.default_rng(1)
    for _ in range(200):
        p = cifg_params(rng, scale=rng.uniform(0.1, 3))
        _, _, gates = cifg_step(p, rng.normal(size=5), rng.normal(size=8), rng.normal(size=8), variant,
                                return_gates=True)
        assert np.all(gates.forget + gates.input == 1.0)


def test_cifg_has_no_input_gate_params():
    p = init_params(ModelConfig(variant=ModelVariant.CIFG), 10)
    assert not any("_i" in k for k in p)


def test_si_cifg_forget_triple_scaling_invariant():
    rng = np.random.default_rng(2)
    for _ in range(20):
        p = cifg_params(rng)
        x, hp, cp = rng.normal(size=5), rng.normal(size=8), rng.normal(size=8)
        base = cifg_step(p, x, hp, cp, ModelVariant.SI_CIFG)
        for gate in "foc":
            q = dict(p)
            for k in ("W", "U", "b"):
                q[f"{k}_{gate}"] = 7.0 * p[f"{k}_{gate}"]
            got = cifg_step(q, x, hp, cp, ModelVariant.SI_CIFG)
            for a, b in zip(got, base):
                np.testing.assert_allclose(a, b, rtol=0, atol=1e-10)


def test_standard_cifg_not_scale_invariant():
    rng = np.random.default_rng(3)
    p = cifg_params(rng)
    x, hp, cp = rng.normal(size=5), rng.normal(size=8), rng.normal(size=8)
    h0, _ = cifg_step(p, x, hp, cp, ModelVariant.CIFG)
    q = dict(p, W_f=2 * p["W_f"], U_f=2 * p["U_f"], b_f=2 * p["b_f"])
    h1, _ = cifg_step(q, x, hp, cp, ModelVariant.CIFG)
    assert np.max(np.abs(h1 - h0)) > 1e-6


def test_cifg_shape_mismatch():
    p = cifg_params(np.random.default_rng(0))
    with pytest.raises(ShapeError):
        cifg_step(p, np.ones(5), np.ones(7), np.ones(8), ModelVariant.CIFG)
    with pytest.raises(ShapeError):
        cifg_step(p, np.ones(4), np.ones(8), np.ones(8), ModelVariant.CIFG)


@pytest.mark.parametrize("variant", CIFG_VARIANTS)
def test_cifg_step_gradient(variant):
    rng = np.random.default_rng(4)
    p0 = cifg_params(rng)
    x0, hp0, cp0 = rng.normal(size=5), rng.normal(size=8), rng.normal(size=8)
    wh, wc = rng.normal(size=8), rng.normal(size=8)
    g = Graph()
    p = bind(g, p0)
    h, c = cifg_step(p, g.input("x", x0), g.input("h", hp0), g.input("c", cp0), variant)
    g.output("loss", (h * wh).sum() + (c * wc).sum())
    rep = finite_difference_check(g, {**p0, "x": x0, "h": hp0, "c": cp0})
    assert rep.passed, rep


# --- attention ------------------------------------------------------------


def test_zero_query_standard_attention_uniform_causal():
    rng = np.random.default_rng(0)
    p = attn_params(rng)
    p["W_Q"] = np.zeros((6, 6))
    probs, _ = attention(rng.normal(size=(6, 4)), p, ModelVariant.TRANSFORMER, causal=True)
    for t in range(4):
        np.testing.assert_allclose(probs[t, : t + 1], 1.0 / (t + 1), rtol=0, atol=1e-15)
        np.testing.assert_array_equal(probs[t, t + 1:], 0.0)


@pytest.mark.parametrize("variant", ATTN_VARIANTS)
@pytest.mark.parametrize("causal", [True, False])
def test_attention_rows_sum_to_one_or_zero(variant, causal):
    rng = np.random.default_rng(1)
    for _ in range(30):
        probs, out = attention(rng.normal(size=(6, 7)), attn_params(rng), variant, causal=causal)
        sums = probs.sum(axis=1)
        assert np.all(np.isclose(sums, 1.0, atol=1e-12) | (sums == 0.0))
        assert out.shape == (6, 7)
        if causal:
            assert np.all(np.triu(probs, 1) == 0)


@pytest.mark.parametrize("weight", ["W_Q", "W_K"])
def test_si_attention_scaling_invariant(weight):
    rng = np.random.default_rng(2)
    for _ in range(20):
        X = rng.normal(size=(6, 5))
        p = attn_params(rng)
        base, _ = attention(X, p, ModelVariant.SI_TRANSFORMER)
        got, _ = attention(X, dict(p, **{weight: 10.0 * p[weight]}), ModelVariant.SI_TRANSFORMER)
        np.testing.assert_allclose(got, base, rtol=0, atol=1e-10)


def test_standard_attention_not_scaling_invariant():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(6, 5))
    p = attn_params(rng)
    base, _ = attention(X, p, ModelVariant.TRANSFORMER)
    got, _ = attention(X, dict(p, W_Q=10.0 * p["W_Q"]), ModelVariant.TRANSFORMER)
    assert np.max(np.abs(got - base)) > 1e-6


def test_multi_head_probs_shape():
    rng = np.random.default_rng(0)
    probs, out = attention(rng.normal(size=(6, 4)), attn_params(rng), ModelVariant.SI_TRANSFORMER, num_heads=2)
    assert probs.shape == (2, 4, 4) and out.shape == (6, 4)
    with pytest.raises(ShapeError):
        attention(rng.normal(size=(6, 4)), attn_params(rng), num_heads=4)


@pytest.mark.parametrize("variant", ATTN_VARIANTS)
def test_attention_gradient(variant):
    rng = np.random.default_rng(5)
    p0 = attn_params(rng)
    X0 = rng.normal(size=(6, 4))
    W = rng.normal(size=(6, 4))
    g = Graph()
    p = bind(g, p0)
    _, out = attention(g.input("X", X0), p, variant)
    g.output("loss", (out * W).sum())
    names = {"W_Q": p0["W_Q"], "W_K": p0["W_K"], "W_V": p0["W_V"], "W_O": p0["W_O"], "X": X0}
    rep = finite_difference_check(g, names)
    assert rep.passed, rep


# --- transformer block ----------------------------------------------------


@pytest.mark.parametrize("variant", ATTN_VARIANTS)
def test_block_zero_weights_is_identity(variant):
    X = np.random.default_rng(0).normal(size=(6, 5))
    np.testing.assert_array_equal(transformer_block(X, attn_params(None, zero=True), variant), X)


@pytest.mark.parametrize("variant", ATTN_VARIANTS)
@pytest.mark.parametrize("n", [1, 5, 20])
def test_block_preserves_shape(variant, n):
    rng = np.random.default_rng(n)
    assert transformer_block(rng.normal(size=(6, n)), attn_params(rng), variant).shape == (6, n)


def test_si_block_query_scaling_invariant():
    rng = np.random.default_rng(6)
    for _ in range(10):
        X = rng.normal(size=(6, 5))
        p = attn_params(rng)
        base = transformer_block(X, p, ModelVariant.SI_TRANSFORMER)
        got = transformer_block(X, dict(p, W_Q=3.5 * p["W_Q"]), ModelVariant.SI_TRANSFORMER)
        np.testing.assert_allclose(got, base, rtol=0, atol=1e-10)


# --- language model -------------------------------------------------------


def tiny_cfg(variant):
    return ModelConfig(variant=variant, embed_dim=8, hidden_dim=12, num_layers=2, num_heads=2, ffn_dim=16)


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_lm_forward_length_two(variant):
    p = init_params(tiny_cfg(variant), 11, np.random.default_rng(0))
    assert lm_forward(np.array([3, 4]), p, tiny_cfg(variant)).shape == (1, 11)
    assert lm_forward(np.array([[3, 4, 5], [1, 0, 0]]), p, tiny_cfg(variant)).shape == (2, 2, 11)


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_lm_forward_causal(variant):
    cfg = tiny_cfg(variant)
    rng = np.random.default_rng(1)
    p = init_params(cfg, 11, rng)
    for length in (2, 7, 20):
        toks = rng.integers(0, 11, size=length)
        base = lm_forward(toks, p, cfg)
        for cut in range(1, length):
            other = toks.copy()
            other[cut:] = rng.permutation(other[cut:]) if length - cut > 1 else (other[cut:] + 1) % 11
            got = lm_forward(other, p, cfg)
            # logits at position j see tokens 0..j
            np.testing.assert_array_equal(got[:cut], base[:cut])


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_lm_forward_zero_body_constant_logits(variant):
    cfg = tiny_cfg(variant)
    p = init_params(cfg, 11, np.random.default_rng(2))
    zeroed = {k: (v if k == "embedding" else np.zeros_like(v)) for k, v in p.items()}
    logits = lm_forward(np.array([5, 3, 9, 1, 4]), zeroed, cfg)
    for row in logits[1:]:
        np.testing.assert_array_equal(row, logits[0])


def test_lm_forward_rejects_bad_ids():
    cfg = tiny_cfg(ModelVariant.CIFG)
    p = init_params(cfg, 11)
    with pytest.raises(ValueError, match="out of range"):
        lm_forward(np.array([3, 11]), p, cfg)
    with pytest.raises(ValueError):
        lm_forward(np.array([3]), p, cfg)


def test_tied_embeddings():
    for variant in ModelVariant:
        p = init_params(tiny_cfg(variant), 11)
        assert sum(v.shape[0] == 11 for v in p.values()) == 1


@pytest.mark.parametrize("variant", list(ModelVariant))
def test_lm_loss_gradient(variant):
    cfg = tiny_cfg(variant)
    rng = np.random.default_rng(3)
    p0 = init_params(cfg, 9, rng)
    toks = np.array([[4, 5, 6, 1, 0], [3, 3, 7, 8, 1]])
    g = Graph()
    logits = lm_forward(toks, bind(g, p0), cfg)
    g.output("loss", lm_loss(logits, toks[:, 1:], 0))
    rep = finite_difference_check(g, p0, max_coords=4, rng=np.random.default_rng(0))
    assert rep.passed, rep


# --- loss and metrics -----------------------------------------------------


def vocab10():
    return Vocab(("<pad>", "<eos>", "<oov>") + tuple(f"t{i}" for i in range(7)))


def test_uniform_logits_perplexity_is_vocab_size():
    targets = np.array([3, 4, 5, 9, 2])
    xent, stats = loss_and_metrics(np.zeros((5, 10)), targets, vocab10())
    assert stats.perplexity == pytest.approx(10.0, rel=1e-12)
    assert xent == pytest.approx(np.log(10.0), rel=1e-12)


def test_all_eos_targets_count_zero():
    _, stats = loss_and_metrics(np.zeros((3, 10)), np.array([1, 1, 1]), vocab10())
    assert stats.counted == 0 and stats.accuracy == 0.0


def test_saturated_correct_logits():
    targets = np.array([3, 4, 5, 6])
    logits = 1e3 * np.eye(10)[targets]
    _, stats = loss_and_metrics(logits, targets, vocab10())
    assert stats.accuracy == 1.0
    assert stats.perplexity == pytest.approx(1.0, abs=1e-12)


def test_metric_discounting_modes():
    targets = np.array([3, 2, 1, 0, 0])
    logits = np.zeros((5, 10))
    xent, std = loss_and_metrics(logits, targets, vocab10(), "standard")
    _, inv = loss_and_metrics(logits, targets, vocab10(), "in_vocab")
    assert std.nonpad == 3 and std.counted == 2
    assert inv.counted == 1
    assert xent == pytest.approx(np.log(10.0))
    with pytest.raises(ValueError):
        loss_and_metrics(logits, targets, vocab10(), "bogus")


def test_lm_loss_matches_metric_xent():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(2, 4, 10))
    targets = np.array([[3, 4, 1, 0], [5, 2, 6, 1]])
    g = Graph()
    loss = lm_loss(g.input("z", logits), targets, 0)
    xent, _ = loss_and_metrics(logits, targets, vocab10())
    assert float(loss.value) == pytest.approx(xent, rel=1e-12)


def test_token_stats_add():
    a = TokenStats(2, 1, 1.0, 0.5, 1)
    b = TokenStats(3, 2, 2.0, 1.5, 0)
    s = a + b
    assert (s.nonpad, s.counted, s.correct) == (5, 3, 1)
    assert s.loss == pytest.approx(2.0 / 3.0)


def test_presets_validate():
    for name in ("cifg_19m", "si_transformer_21m", "si_cifg_6m"):
        preset(name).validate()
