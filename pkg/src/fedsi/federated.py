"""Client sampling, local SGD, update clipping/quantization, aggregation and
server optimizers (FedAdam, SGD with momentum).

Deltas are ``final - initial`` client weights; server optimizers treat the
aggregated delta as an ascent direction and add it to the parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from fedsi.autodiff import Graph, ParamTree, gradient
from fedsi.data import PAD_ID
from fedsi.models import ModelConfig, TokenStats, bind, lm_forward, lm_loss, loss_and_metrics
from fedsi.rng import stream


class EmptyClientError(ValueError):
    pass


class EmptyRoundError(ValueError):
    pass


@dataclass(frozen=True)
class ClientConfig:
    learning_rate: float = 0.1
    batch_size: int = 10
    epochs: int = 1
    max_batches: int = 120
    max_seq_len: int = 20

    def validate(self) -> None:
        if self.learning_rate < 0:
            raise ValueError("client.learning_rate must be >= 0")
        for name in ("batch_size", "epochs", "max_batches", "max_seq_len"):
            if getattr(self, name) < 1:
                raise ValueError(f"client.{name} must be >= 1")
        if self.max_seq_len < 2:
            raise ValueError("client.max_seq_len must be >= 2")


@dataclass(frozen=True)
class QuantConfig:
    enabled: bool = False
    bits: int = 8

    def validate(self) -> None:
        if not 2 <= self.bits <= 16:
            raise ValueError("quant.bits must lie in [2, 16]")


@dataclass(frozen=True)
class ServerConfig:
    optimizer: str = "fedadam"  # or "sgdm"
    learning_rate: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    tau: float = 1e-8
    momentum: float = 0.9

    def validate(self) -> None:
        if self.optimizer not in ("fedadam", "sgdm"):
            raise ValueError("server.optimizer must be 'fedadam' or 'sgdm'")
        if self.learning_rate < 0:
            raise ValueError("server.learning_rate must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and 0 <= self.momentum < 1):
            raise ValueError("server.beta1, server.beta2, server.momentum must lie in [0, 1)")
        if self.tau <= 0:
            raise ValueError("server.tau must be > 0")


@dataclass
class ClientUpdate:
    delta: np.ndarray
    weight: float
    client_id: str = ""
    stats: TokenStats = field(default_factory=TokenStats)
    batches: int = 0


@dataclass
class ServerState:
    params: ParamTree
    optimizer: str = "fedadam"
    m: np.ndarray | None = None
    v: np.ndarray | None = None
    round: int = 0

    def __post_init__(self):
        n = self.params.size
        if self.m is None:
            self.m = np.zeros(n)
        if self.v is None and self.optimizer == "fedadam":
            self.v = np.zeros(n)

    @property
    def velocity(self) -> np.ndarray:
        return self.m


def sample_clients(pool: list[str], n: int, round: int, seed: int) -> list[str]:
    """Uniform sample without replacement, a pure function of (seed, round)."""
    if n > len(pool):
        raise ValueError(f"cannot sample {n} clients from a pool of {len(pool)}")
    idx = stream(seed, "sample", round).choice(len(pool), size=n, replace=False)
    return [pool[i] for i in idx]


def iterate_batches(n_examples: int, cfg: ClientConfig, rng: np.random.Generator):
    """Index arrays for at most ``max_batches`` batches, reshuffling per epoch."""
    done = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(n_examples)
        for start in range(0, n_examples, cfg.batch_size):
            if done == cfg.max_batches:
                return
            yield order[start:start + cfg.batch_size]
            done += 1


def sgd_step(params: ParamTree, batch: np.ndarray, lr: float, model_cfg: ModelConfig, vocab=None):
    """One plain SGD step on the batch's mean non-pad cross-entropy.

    Returns the new parameters and the batch's token statistics (computed
    at the pre-step weights).
    """
    g = Graph()
    p = bind(g, params)
    logits = lm_forward(batch, p, model_cfg)
    targets = batch[:, 1:]
    g.output("loss", lm_loss(logits, targets, PAD_ID))
    grads = gradient(g, "loss", params)
    stats = loss_and_metrics(logits, targets, vocab)[1] if vocab is not None else TokenStats()
    return ParamTree((k, v - lr * grads[k]) for k, v in params.items()), stats


def client_update(global_params: ParamTree, data: np.ndarray, cfg: ClientConfig, model_cfg: ModelConfig,
                  rng: np.random.Generator, vocab=None, client_id: str = "") -> ClientUpdate:
    """Local SGD from the global weights; ``weight`` counts examples consumed."""
    data = np.asarray(data)
    if data.ndim != 2 or len(data) == 0:
        raise EmptyClientError(f"client {client_id!r} has no encoded sequences")
    params = global_params
    stats = TokenStats()
    seen = batches = 0
    for idx in iterate_batches(len(data), cfg, rng):
        params, s = sgd_step(params, data[idx], cfg.learning_rate, model_cfg, vocab)
        stats = stats + s
        seen += len(idx)
        batches += 1
    delta = params.flatten() - global_params.flatten()
    return ClientUpdate(delta, float(seen), client_id, stats, batches)


def clip_update(delta: np.ndarray, clip_norm: float) -> np.ndarray:
    """Project onto the L2 ball of radius ``clip_norm`` (``inf`` disables)."""
    if clip_norm <= 0:
        raise ValueError("clip_norm must be > 0")
    delta = np.asarray(delta, dtype=np.float64)
    norm = float(np.linalg.norm(delta))
    if norm <= clip_norm or math.isinf(clip_norm):
        return delta
    factor = clip_norm / norm
    out = delta * factor
    # rounding can leave the norm a hair above the bound
    while np.linalg.norm(out) > clip_norm:
        factor = np.nextafter(factor, 0.0)
        out = delta * factor
    return out


def quantize_update(delta: np.ndarray, q: QuantConfig, rng: np.random.Generator,
                    segments: list[tuple[str, int, int]] | None = None) -> tuple[np.ndarray, int]:
    """Stochastic uniform quantization, one ``2**bits``-level grid per tensor.

    Each coordinate rounds to one of its two neighbouring levels, upward
    with probability equal to its fractional position, so the dequantized
    output is unbiased.  Returns the dequantized vector and the simulated
    upload size in bytes (packed levels plus a float64 min/max per tensor).
    """
    delta = np.asarray(delta, dtype=np.float64)
    if not q.enabled:
        return delta, 8 * delta.size
    if segments is None:
        segments = [("", 0, delta.size)]
    levels = (1 << q.bits) - 1
    out = np.empty_like(delta)
    wire = 0
    for _, a, b in segments:
        x = delta[a:b]
        wire += math.ceil((b - a) * q.bits / 8) + 16
        lo, hi = float(x.min()), float(x.max())
        if hi == lo:
            out[a:b] = x
            continue
        step = (hi - lo) / levels
        pos = (x - lo) / step
        base = np.clip(np.floor(pos), 0, levels - 1)
        below = lo + base * step
        up = rng.random(x.size) < (x - below) / step
        idx = base + up
        vals = lo + idx * step
        vals[idx == levels] = hi
        vals[idx == 0] = lo
        out[a:b] = vals
    return out, wire


def weighted_sum(deltas: list[np.ndarray], weights: list[float] | None = None) -> np.ndarray:
    if not deltas:
        raise EmptyRoundError("no client updates to aggregate")
    total = np.zeros_like(deltas[0])
    for i, d in enumerate(deltas):
        if d.shape != total.shape:
            raise ValueError(f"update {i} has length {d.size}, expected {total.size}")
        total = total + (d if weights is None else weights[i] * d)
    return total


def aggregate(updates: list[ClientUpdate], weighting: str = "example_weighted") -> np.ndarray:
    """Weighted mean of client deltas."""
    if not updates:
        raise EmptyRoundError("no client updates to aggregate")
    deltas = [u.delta for u in updates]
    if weighting == "uniform":
        return weighted_sum(deltas) / len(updates)
    if weighting == "example_weighted":
        weights = [u.weight for u in updates]
        return weighted_sum(deltas, weights) / float(sum(weights))
    raise ValueError(f"unknown weighting {weighting!r}")


def fedadam_step(s: ServerState, mean_delta: np.ndarray, lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, tau: float = 1e-8) -> ServerState:
    """Adam moments on the aggregated delta, without bias correction."""
    m = beta1 * s.m + (1 - beta1) * mean_delta
    v = beta2 * s.v + (1 - beta2) * mean_delta * mean_delta
    flat = s.params.flatten() + lr * m / (np.sqrt(v) + tau)
    return replace(s, params=s.params.unflatten(flat), m=m, v=v, round=s.round + 1)


def sgdm_step(s: ServerState, mean_delta: np.ndarray, lr: float, momentum: float = 0.9) -> ServerState:
    vel = momentum * s.m + mean_delta
    flat = s.params.flatten() + lr * vel
    return replace(s, params=s.params.unflatten(flat), m=vel, round=s.round + 1)


def server_step(s: ServerState, mean_delta: np.ndarray, cfg: ServerConfig) -> ServerState:
    if cfg.optimizer == "fedadam":
        return fedadam_step(s, mean_delta, cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.tau)
    return sgdm_step(s, mean_delta, cfg.learning_rate, cfg.momentum)
