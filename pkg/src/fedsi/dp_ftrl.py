"""Online tree aggregation for DP-FTRL.

Per-round sums of clipped client deltas are accumulated into an exact prefix
sum.  The release at round ``t`` adds one Gaussian noise vector for each
dyadic interval in the binary decomposition of ``t``; a node's noise is
drawn once (from a stream keyed by its level and index) and reused for as
long as the node stays open, so ``popcount(t)`` nodes contribute at round
``t``.  Privacy accounting is not computed here; the configured values are
carried as run metadata.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from fedsi.federated import clip_update, weighted_sum
from fedsi.rng import stream


@dataclass(frozen=True)
class DpConfig:
    clip_norm: float = 5.0
    noise_multiplier: float = 7.0
    clients_per_round: int = 6500
    reported_zcdp: float | None = None

    def validate(self) -> None:
        if not self.clip_norm > 0:
            raise ValueError("dp.clip_norm must be > 0")
        if self.noise_multiplier < 0:
            raise ValueError("dp.noise_multiplier must be >= 0")
        if self.clients_per_round < 1:
            raise ValueError("dp.clients_per_round must be >= 1")

    @property
    def node_std(self) -> float:
        return self.noise_multiplier * self.clip_norm if self.noise_multiplier else 0.0


@dataclass
class TreeNode:
    level: int
    index: int
    noise: np.ndarray


@dataclass
class TreeAggState:
    dim: int
    cfg: DpConfig
    seed: int
    t: int = 0
    prefix_sum: np.ndarray = None
    nodes: list[TreeNode] = field(default_factory=list)
    max_nodes_seen: int = 0

    def __post_init__(self):
        if self.prefix_sum is None:
            self.prefix_sum = np.zeros(self.dim)

    @property
    def noise(self) -> np.ndarray:
        total = np.zeros(self.dim)
        for node in self.nodes:
            total = total + node.noise
        return total


@dataclass(frozen=True)
class TreeRelease:
    """Noisy prefix sum at round ``t`` and the pieces it was built from."""

    t: int
    value: np.ndarray
    noise: np.ndarray
    round_sum: np.ndarray
    contributing_nodes: int


def tree_init(dim: int, cfg: DpConfig, seed: int) -> TreeAggState:
    if dim < 1:
        raise ValueError("dim must be >= 1")
    cfg.validate()
    return TreeAggState(dim=dim, cfg=cfg, seed=seed)


def node_noise(state: TreeAggState, level: int, index: int) -> np.ndarray:
    std = state.cfg.node_std
    if std == 0:
        return np.zeros(state.dim)
    return stream(state.seed, "tree", level, index).normal(0.0, std, size=state.dim)


def tree_step(state: TreeAggState, clipped_sum: np.ndarray) -> tuple[TreeRelease, TreeAggState]:
    """Advance one round and release the noisy prefix sum.

    ``state`` is updated in place and also returned.
    """
    clipped_sum = np.asarray(clipped_sum, dtype=np.float64)
    if clipped_sum.shape != (state.dim,):
        raise ValueError(f"round sum has shape {clipped_sum.shape}, tree dimension is {state.dim}")
    state.t += 1
    state.prefix_sum = state.prefix_sum + clipped_sum
    # the new leaf closes every complete sibling pair below it
    level = 0
    while state.nodes and state.nodes[-1].level == level:
        state.nodes.pop()
        level += 1
    index = (state.t >> level) - 1
    state.nodes.append(TreeNode(level, index, node_noise(state, level, index)))
    state.max_nodes_seen = max(state.max_nodes_seen, len(state.nodes))
    noise = state.noise
    release = TreeRelease(state.t, state.prefix_sum + noise, noise, clipped_sum, len(state.nodes))
    return release, state


def dp_round_delta(prev_release, new_release, n: int) -> np.ndarray:
    """Per-round mean update recovered from consecutive releases.

    Accepts :class:`TreeRelease` objects or plain vectors (``None`` for the
    round before the first).  For releases the difference is formed as
    ``round_sum + (noise_t - noise_{t-1})``, which equals the difference of
    the released prefix sums but avoids cancellation in the large prefix.
    """
    if n <= 0:
        raise ValueError("clients_per_round must be > 0")
    if isinstance(new_release, TreeRelease):
        prev_noise = 0.0 if prev_release is None else prev_release.noise
        return (new_release.round_sum + (new_release.noise - prev_noise)) / n
    new = np.asarray(new_release, dtype=np.float64)
    prev = np.zeros_like(new) if prev_release is None else np.asarray(prev_release, dtype=np.float64)
    return (new - prev) / n


def clipped_round_sum(deltas: list[np.ndarray], clip_norm: float) -> np.ndarray:
    """Sum of per-client deltas, each clipped to ``clip_norm`` (uniform weights)."""
    return weighted_sum([clip_update(d, clip_norm) for d in deltas])
