"""CIFG / SI-CIFG recurrences, standard and scale-invariant attention,
Pre-LN transformer blocks, and tied-embedding language models.

Layouts follow the usual column conventions: a recurrent input is a row
vector (or a ``(batch, dim)`` stack of them) and weights are ``out x in``;
attention inputs are ``d x n`` (one column per position), optionally with a
leading batch axis.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace
from typing import Mapping

import numpy as np

from fedsi import autodiff as ad
from fedsi.activations import DEFAULT_EPS, log_softmax, row_normalize, si_sigmoid, si_tanh, softmax
from fedsi.autodiff import Graph, ParamTree, Tensor

# Finite stand-in for -inf in causal softmax masking; exp underflows to 0.
_MASK_FILL = -1e30


class ModelVariant(enum.Enum):
    CIFG = "cifg"
    SI_CIFG = "si_cifg"
    TRANSFORMER = "transformer"
    SI_TRANSFORMER = "si_transformer"

    @property
    def recurrent(self) -> bool:
        return self in (ModelVariant.CIFG, ModelVariant.SI_CIFG)

    @property
    def scale_invariant(self) -> bool:
        return self in (ModelVariant.SI_CIFG, ModelVariant.SI_TRANSFORMER)


@dataclass(frozen=True)
class ModelConfig:
    variant: ModelVariant = ModelVariant.SI_CIFG
    embed_dim: int = 32
    hidden_dim: int = 64  # CIFG only
    num_layers: int = 2  # transformer only
    num_heads: int = 2
    ffn_dim: int = 64
    max_len: int = 20
    eps: float = DEFAULT_EPS
    ln_eps: float = 1e-5
    init_seed: int = 0

    def validate(self) -> None:
        for name in ("embed_dim", "hidden_dim", "num_layers", "num_heads", "ffn_dim", "max_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"model.{name} must be >= 1")
        if not self.variant.recurrent and self.embed_dim % self.num_heads:
            raise ValueError("model.embed_dim must be divisible by model.num_heads")
        if self.eps < 0:
            raise ValueError("model.eps must be >= 0")


# Larger configurations used in the original experiments.  Accepted as
# presets; desk-scale defaults above are what the tests train.
PRESETS: dict[str, dict] = {
    "cifg_19m": dict(variant=ModelVariant.CIFG, hidden_dim=2048, embed_dim=1024),
    "si_cifg_19m": dict(variant=ModelVariant.SI_CIFG, hidden_dim=2048, embed_dim=1024),
    "transformer_21m": dict(variant=ModelVariant.TRANSFORMER, num_layers=6, num_heads=8, ffn_dim=2048, embed_dim=512),
    "si_transformer_21m": dict(variant=ModelVariant.SI_TRANSFORMER, num_layers=6, num_heads=8, ffn_dim=2048, embed_dim=512),
    "cifg_9m": dict(variant=ModelVariant.CIFG, hidden_dim=2048, embed_dim=512),
    "si_cifg_9m": dict(variant=ModelVariant.SI_CIFG, hidden_dim=2048, embed_dim=512),
    "transformer_11m": dict(variant=ModelVariant.TRANSFORMER, num_layers=3, num_heads=8, ffn_dim=2048, embed_dim=512),
    "si_transformer_11m": dict(variant=ModelVariant.SI_TRANSFORMER, num_layers=3, num_heads=8, ffn_dim=2048, embed_dim=512),
    "cifg_6m": dict(variant=ModelVariant.CIFG, hidden_dim=670, embed_dim=96, max_len=10),
    "si_cifg_6m": dict(variant=ModelVariant.SI_CIFG, hidden_dim=670, embed_dim=96, max_len=10),
}


def preset(name: str, **overrides) -> ModelConfig:
    return replace(ModelConfig(**PRESETS[name]), **overrides)


# --------------------------------------------------------------------------- #
# Parameters
# --------------------------------------------------------------------------- #

CIFG_GATES = ("f", "o", "c")


def init_params(cfg: ModelConfig, vocab_size: int, rng: np.random.Generator | None = None) -> ParamTree:
    """Random initial weights; names are stable and define the flat layout."""
    rng = rng if rng is not None else np.random.default_rng(cfg.init_seed)
    e = cfg.embed_dim

    def normal(shape, fan_in):
        return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=shape)

    p: dict[str, np.ndarray] = {"embedding": rng.normal(0.0, 0.1, size=(vocab_size, e))}
    if cfg.variant.recurrent:
        h = cfg.hidden_dim
        for g in CIFG_GATES:
            p[f"cifg/W_{g}"] = normal((h, e), e)
        for g in CIFG_GATES:
            p[f"cifg/U_{g}"] = normal((h, h), h)
        for g in CIFG_GATES:
            p[f"cifg/b_{g}"] = np.zeros(h)
        # hidden -> embedding width so the output can reuse the embedding
        p["cifg/proj"] = normal((e, h), h)
    else:
        p["pos_embedding"] = rng.normal(0.0, 0.1, size=(cfg.max_len, e))
        for layer in range(cfg.num_layers):
            pre = f"block{layer}/"
            p[pre + "ln1_gain"] = np.ones(e)
            p[pre + "ln1_bias"] = np.zeros(e)
            for name in ("W_Q", "W_K", "W_V", "W_O"):
                p[pre + name] = normal((e, e), e)
            p[pre + "ln2_gain"] = np.ones(e)
            p[pre + "ln2_bias"] = np.zeros(e)
            p[pre + "W_1"] = normal((cfg.ffn_dim, e), e)
            p[pre + "b_1"] = np.zeros(cfg.ffn_dim)
            p[pre + "W_2"] = normal((e, cfg.ffn_dim), cfg.ffn_dim)
            p[pre + "b_2"] = np.zeros(e)
        p["ln_f_gain"] = np.ones(e)
        p["ln_f_bias"] = np.zeros(e)
    return ParamTree(p)


def bind(graph: Graph, params: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
    """Register every parameter as a named graph input."""
    return {name: graph.input(name, value) for name, value in params.items()}


def _bind_all(*groups):
    """Lift raw arrays in ``groups`` onto one fresh graph.

    Each group is either a mapping or a single value; tensors pass through.
    Returns the lifted groups and whether the caller supplied raw arrays.
    """
    def has_tensor(g):
        vals = g.values() if isinstance(g, Mapping) else [g]
        return any(isinstance(v, Tensor) for v in vals)

    if any(has_tensor(g) for g in groups):
        graph = next(
            v.graph for g in groups
            for v in (g.values() if isinstance(g, Mapping) else [g]) if isinstance(v, Tensor)
        )
        raw = False
    else:
        graph, raw = Graph(), True

    out, n = [], 0
    for g in groups:
        if isinstance(g, Mapping):
            out.append({k: v if isinstance(v, Tensor) else graph.input(k, v) for k, v in g.items()})
        elif isinstance(g, Tensor) or g is None:
            out.append(g)
        else:
            out.append(graph.input(f"_arg{n}", g))
            n += 1
    return out, raw


# --------------------------------------------------------------------------- #
# CIFG
# --------------------------------------------------------------------------- #


@dataclass
class CifgGates:
    forget: np.ndarray
    input: np.ndarray
    output: np.ndarray
    candidate: np.ndarray


def _gate_weights(p: Mapping[str, Tensor], prefix: str = ""):
    w = ad.concat([p[f"{prefix}W_{g}"] for g in CIFG_GATES], axis=0)
    u = ad.concat([p[f"{prefix}U_{g}"] for g in CIFG_GATES], axis=0)
    b = ad.concat([p[f"{prefix}b_{g}"] for g in CIFG_GATES], axis=0)
    return w, u, b


def _cifg_cell(x_proj: Tensor, u_t: Tensor, h_prev, c_prev, hidden: int, variant: ModelVariant, eps: float):
    pre = x_proj if h_prev is None else x_proj + h_prev @ u_t
    f_pre = pre[..., :hidden]
    o_pre = pre[..., hidden:2 * hidden]
    c_pre = pre[..., 2 * hidden:]
    if variant is ModelVariant.SI_CIFG:
        f = si_sigmoid(f_pre, eps)
        o = si_sigmoid(o_pre, eps)
        cand = si_tanh(c_pre, eps)
    elif variant is ModelVariant.CIFG:
        f, o, cand = ad.sigmoid(f_pre), ad.sigmoid(o_pre), ad.tanh(c_pre)
    else:
        raise ValueError(f"{variant} is not a CIFG variant")
    i = 1.0 - f
    c = i * cand if c_prev is None else f * c_prev + i * cand
    squashed = si_tanh(c, eps) if variant is ModelVariant.SI_CIFG else ad.tanh(c)
    return o * squashed, c, (f, i, o, cand)


def cifg_step(p, x_t, h_prev, c_prev, variant: ModelVariant = ModelVariant.SI_CIFG,
              eps: float = DEFAULT_EPS, return_gates: bool = False):
    """One CIFG time step; returns ``(h_t, c_t)`` (plus gates if asked).

    ``p`` holds ``W_{f,o,c}`` (h x d), ``U_{f,o,c}`` (h x h) and ``b_{f,o,c}``.
    The input gate is ``1 - f_t``, so it has no parameters of its own.
    """
    (p, x_t, h_prev, c_prev), raw = _bind_all(p, x_t, h_prev, c_prev)
    hidden = p["W_f"].shape[0]
    for name, t in (("h_prev", h_prev), ("c_prev", c_prev)):
        if t.shape[-1] != hidden:
            raise ad.ShapeError(f"cifg_step: {name} has width {t.shape[-1]}, expected {hidden}")
    w, u, b = _gate_weights(p)
    x_proj = x_t @ w.T + b
    h, c, gates = _cifg_cell(x_proj, u.T, h_prev, c_prev, hidden, variant, eps)
    if raw:
        h, c = h.value, c.value
        gates = CifgGates(*(g.value for g in gates))
    else:
        gates = CifgGates(*gates)
    return (h, c, gates) if return_gates else (h, c)


def cifg_sequence(p: Mapping[str, Tensor], x: Tensor, variant: ModelVariant, eps: float, prefix: str = "cifg/") -> Tensor:
    """Run the recurrence over ``x`` of shape ``(batch, n, d)`` from a zero state."""
    w, u, b = _gate_weights(p, prefix)
    hidden = p[prefix + "W_f"].shape[0]
    x_proj = x @ w.T + b
    u_t = u.T
    h = c = None
    hs = []
    for t in range(x.shape[1]):
        h, c, _ = _cifg_cell(x_proj[:, t, :], u_t, h, c, hidden, variant, eps)
        hs.append(h)
    return ad.stack(hs, axis=1)


# --------------------------------------------------------------------------- #
# Attention and transformer blocks
# --------------------------------------------------------------------------- #


def causal_mask(n: int) -> np.ndarray:
    """``mask[i, j]`` is True when query ``i`` may attend to key ``j <= i``."""
    return np.tril(np.ones((n, n), dtype=bool))


def attention(X, p, variant: ModelVariant = ModelVariant.SI_TRANSFORMER, eps: float = DEFAULT_EPS,
              causal: bool = True, num_heads: int = 1, prefix: str = ""):
    """Self-attention over ``X`` (``d x n`` or ``batch x d x n``).

    Scores are ``(W_Q X)^T (W_K X)`` per head, without a 1/sqrt(d) rescale.
    The standard kernel applies a row softmax; the scale-invariant kernel
    applies ReLU then row-sum normalization.  Returns ``(probs, out)`` where
    ``probs`` is ``n x n`` for one head (``heads x n x n`` otherwise, after
    any batch axes) and ``out = W_O (W_V X) probs^T``.
    """
    (X, p), raw = _bind_all(X, p)
    unbatched = X.ndim == 2
    if unbatched:
        X = X.reshape(1, *X.shape)
    B, d, n = X.shape
    if d % num_heads:
        raise ad.ShapeError(f"attention: width {d} not divisible by {num_heads} heads")
    dh = d // num_heads

    def heads(t):
        return t.reshape(B, num_heads, dh, n)

    q = heads(p[prefix + "W_Q"] @ X)
    k = heads(p[prefix + "W_K"] @ X)
    v = heads(p[prefix + "W_V"] @ X)
    scores = q.swapaxes(-1, -2) @ k
    mask = causal_mask(n) if causal else np.ones((n, n), dtype=bool)
    if variant is ModelVariant.SI_TRANSFORMER:
        probs = row_normalize(ad.where(mask, ad.relu(scores), 0.0), eps)
    elif variant is ModelVariant.TRANSFORMER:
        probs = softmax(ad.where(mask, scores, _MASK_FILL) if causal else scores)
    else:
        raise ValueError(f"{variant} is not a transformer variant")
    mixed = (v @ probs.swapaxes(-1, -2)).reshape(B, d, n)
    out = p[prefix + "W_O"] @ mixed
    if unbatched:
        out = out.reshape(d, n)
        probs = probs.reshape(n, n) if num_heads == 1 else probs.reshape(num_heads, n, n)
    elif num_heads == 1:
        probs = probs.reshape(B, n, n)
    if raw:
        return probs.value, out.value
    return probs, out


def layer_norm(X: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each column (position) of a ``... x d x n`` input over ``d``."""
    d = X.shape[-2]
    mean = X.sum(axis=-2, keepdims=True) * (1.0 / d)
    xc = X - mean
    var = (xc * xc).sum(axis=-2, keepdims=True) * (1.0 / d)
    return xc / ad.sqrt(var + eps) * gain.reshape(d, 1) + bias.reshape(d, 1)


def transformer_block(X, p, variant: ModelVariant = ModelVariant.SI_TRANSFORMER, eps: float = DEFAULT_EPS,
                      num_heads: int = 1, causal: bool = True, ln_eps: float = 1e-5, prefix: str = ""):
    """Pre-LN residual block with a ReLU feedforward layer."""
    (X, p), raw = _bind_all(X, p)
    _, attn = attention(layer_norm(X, p[prefix + "ln1_gain"], p[prefix + "ln1_bias"], ln_eps),
                        p, variant, eps, causal, num_heads, prefix)
    X = X + attn
    z = layer_norm(X, p[prefix + "ln2_gain"], p[prefix + "ln2_bias"], ln_eps)
    ffn_dim = p[prefix + "W_1"].shape[0]
    hidden = ad.relu(p[prefix + "W_1"] @ z + p[prefix + "b_1"].reshape(ffn_dim, 1))
    out = X + (p[prefix + "W_2"] @ hidden + p[prefix + "b_2"].reshape(X.shape[-2], 1))
    return out.value if raw else out


# --------------------------------------------------------------------------- #
# Language model
# --------------------------------------------------------------------------- #


def lm_forward(tokens, params, cfg: ModelConfig):
    """Next-token logits for every position but the last.

    ``tokens`` is ``(L,)`` or ``(batch, L)``; logits are ``(L-1, V)`` or
    ``(batch, L-1, V)``.  The output projection is the transposed embedding.
    """
    tokens = np.asarray(tokens)
    unbatched = tokens.ndim == 1
    if unbatched:
        tokens = tokens[None, :]
    if tokens.shape[1] < 2:
        raise ValueError("lm_forward needs sequences of length >= 2")
    (p,), raw = _bind_all(params)
    vocab = p["embedding"].shape[0]
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise ValueError(f"token id out of range [0, {vocab})")
    inp = tokens[:, :-1]
    n = inp.shape[1]
    emb = ad.take(p["embedding"], inp)  # (B, n, e)
    if cfg.variant.recurrent:
        hs = cifg_sequence(p, emb, cfg.variant, cfg.eps)
        feats = hs @ p["cifg/proj"].T
    else:
        if n > p["pos_embedding"].shape[0]:
            raise ValueError(f"sequence of {n} positions exceeds max_len {p['pos_embedding'].shape[0]}")
        X = (emb + p["pos_embedding"][:n]).swapaxes(-1, -2)  # (B, e, n)
        for layer in range(cfg.num_layers):
            X = transformer_block(X, p, cfg.variant, cfg.eps, cfg.num_heads, True, cfg.ln_eps, f"block{layer}/")
        X = layer_norm(X, p["ln_f_gain"], p["ln_f_bias"], cfg.ln_eps)
        feats = X.swapaxes(-1, -2)
    logits = feats @ p["embedding"].T
    if unbatched:
        logits = logits.reshape(n, vocab)
    return logits.value if raw else logits


# --------------------------------------------------------------------------- #
# Loss and metrics
# --------------------------------------------------------------------------- #


def token_weights(targets: np.ndarray, pad_id: int) -> np.ndarray:
    return (np.asarray(targets) != pad_id).astype(np.float64)


def lm_loss(logits: Tensor, targets: np.ndarray, pad_id: int) -> Tensor:
    """Mean next-token cross-entropy over non-pad targets (differentiable)."""
    targets = np.asarray(targets)
    vocab = logits.shape[-1]
    flat = log_softmax(logits.reshape(-1, vocab))
    idx = targets.reshape(-1)
    picked = flat[np.arange(idx.size), idx]
    w = token_weights(idx, pad_id)
    return -(picked * w).sum() * (1.0 / max(w.sum(), 1.0))


@dataclass
class TokenStats:
    """Summed token statistics; add instances to merge batches."""

    nonpad: int = 0
    counted: int = 0
    xent_nonpad: float = 0.0
    xent_counted: float = 0.0
    correct: int = 0

    def __add__(self, other: "TokenStats") -> "TokenStats":
        return TokenStats(
            self.nonpad + other.nonpad,
            self.counted + other.counted,
            self.xent_nonpad + other.xent_nonpad,
            self.xent_counted + other.xent_counted,
            self.correct + other.correct,
        )

    @property
    def mean_xent(self) -> float:
        return self.xent_nonpad / self.nonpad if self.nonpad else 0.0

    @property
    def loss(self) -> float:
        """Mean cross-entropy over counted (metric-eligible) tokens."""
        return self.xent_counted / self.counted if self.counted else 0.0

    @property
    def perplexity(self) -> float:
        return float(np.exp(self.loss))

    @property
    def accuracy(self) -> float:
        return self.correct / self.counted if self.counted else 0.0


def loss_and_metrics(logits, targets, vocab, mode: str = "standard") -> tuple[float, TokenStats]:
    """Cross-entropy over non-pad targets plus discounted metric counts.

    ``standard`` discounts EOS targets from the metrics; ``in_vocab`` also
    discounts OOV targets.  Padding never counts.
    """
    if mode not in ("standard", "in_vocab"):
        raise ValueError(f"unknown metric mode {mode!r}")
    logits = logits.value if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets).reshape(-1)
    z = logits.reshape(-1, logits.shape[-1])
    z = z - z.max(axis=-1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    nll = -logp[np.arange(targets.size), targets]
    nonpad = targets != vocab.pad_id
    counted = nonpad & (targets != vocab.eos_id)
    if mode == "in_vocab":
        counted &= targets != vocab.oov_id
    correct = (z.argmax(axis=-1) == targets) & counted
    stats = TokenStats(
        nonpad=int(nonpad.sum()),
        counted=int(counted.sum()),
        xent_nonpad=float(nll[nonpad].sum()),
        xent_counted=float(nll[counted].sum()),
        correct=int(correct.sum()),
    )
    return stats.mean_xent, stats
