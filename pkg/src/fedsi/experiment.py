"""Outer training loop: rounds, evaluation cadence, metrics and checkpoints."""

from __future__ import annotations

import logging
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from fedsi.autodiff import NonFiniteError, ParamTree
from fedsi.checkpoint import CheckpointShapeError, load_checkpoint, save_checkpoint
from fedsi.config import ExperimentConfig, dump_config
from fedsi.data import FederatedDataset, federated_from_raw, generate_synthetic, load_partitioned
from fedsi.dp_ftrl import TreeAggState, TreeRelease, clipped_round_sum, dp_round_delta, tree_init, tree_step
from fedsi.federated import (
    ClientUpdate, ServerState, aggregate, clip_update, client_update, quantize_update,
    sample_clients, server_step,
)
from fedsi.metrics import MetricsRecord, MetricsSink
from fedsi.models import TokenStats, init_params, lm_forward, loss_and_metrics
from fedsi.rng import stream

log = logging.getLogger(__name__)

WORKERS_ENV = "FEDSI_WORKERS"
EVAL_BATCH = 100


@dataclass
class TrainState:
    server: ServerState
    tree: TreeAggState | None = None
    initial_eval_loss: float | None = None


@dataclass
class RoundInfo:
    clients: list[str]
    stats: TokenStats
    upload_bytes: int


@dataclass
class RunResult:
    state: TrainState
    records: list[MetricsRecord] = field(default_factory=list)
    diverged: bool = False

    @property
    def final(self) -> MetricsRecord:
        evals = [r for r in self.records if r.split == "eval"]
        return (evals or self.records)[-1]


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def prepare_data(cfg: ExperimentConfig) -> FederatedDataset:
    d = cfg.data
    if d.source == "synthetic":
        raw = generate_synthetic(d.n_clients, cfg.synthetic, d.seed)
    else:
        raw = load_partitioned(d.source)
    return federated_from_raw(raw, d.vocab_size, cfg.client.max_seq_len, d.tokenizer, d.eval_fraction, d.seed)


def init_state(cfg: ExperimentConfig, dataset: FederatedDataset) -> TrainState:
    params = init_params(cfg.model, len(dataset.vocab))
    server = ServerState(params, optimizer=cfg.server.optimizer)
    tree = tree_init(params.size, cfg.dp, cfg.seed) if cfg.dp is not None else None
    return TrainState(server, tree)


def evaluate(params: ParamTree, dataset: FederatedDataset, cfg: ExperimentConfig) -> TokenStats:
    seqs = dataset.eval_sequences(cfg.eval.max_sequences)
    stats = TokenStats()
    for start in range(0, len(seqs), EVAL_BATCH):
        batch = seqs[start:start + EVAL_BATCH]
        logits = lm_forward(batch, params, cfg.model)
        stats = stats + loss_and_metrics(logits, batch[:, 1:], dataset.vocab, cfg.eval.metric_mode)[1]
    return stats


def _local_work(state: TrainState, dataset: FederatedDataset, cfg: ExperimentConfig,
                round: int, cid: str) -> tuple[ClientUpdate, int]:
    upd = client_update(
        state.server.params, dataset.clients[cid], cfg.client, cfg.model,
        stream(cfg.seed, "client", round, cid), dataset.vocab, cid,
    )
    delta, wire = quantize_update(
        upd.delta, cfg.quant, stream(cfg.seed, "quant", round, cid), state.server.params.segments()
    )
    upd.delta = delta
    return upd, wire


def _current_release(tree: TreeAggState) -> TreeRelease | None:
    if tree.t == 0:
        return None
    noise = tree.noise
    return TreeRelease(tree.t, tree.prefix_sum + noise, noise, np.zeros(tree.dim), len(tree.nodes))


def run_round(state: TrainState, dataset: FederatedDataset, cfg: ExperimentConfig,
              workers: int = 1) -> tuple[TrainState, RoundInfo]:
    """Sample, train locally, compress, aggregate (or DP tree path), server step.

    Client results are collected in sampling order, so the outcome does not
    depend on ``workers``.
    """
    rnd = state.server.round
    ids = sample_clients(dataset.train_ids, cfg.clients_per_round, rnd, cfg.seed)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(lambda c: _local_work(state, dataset, cfg, rnd, c), ids))
    else:
        results = [_local_work(state, dataset, cfg, rnd, c) for c in ids]
    updates = [u for u, _ in results]
    upload = sum(w for _, w in results)
    stats = TokenStats()
    for u in updates:
        stats = stats + u.stats

    if cfg.dp is not None:
        prev = _current_release(state.tree)
        release, tree = tree_step(state.tree, clipped_round_sum([u.delta for u in updates], cfg.dp.clip_norm))
        mean_delta = dp_round_delta(prev, release, cfg.dp.clients_per_round)
        state.tree = tree
    else:
        if not math.isinf(cfg.clip_norm):
            for u in updates:
                u.delta = clip_update(u.delta, cfg.clip_norm)
        mean_delta = aggregate(updates, cfg.weighting)
    state.server = server_step(state.server, mean_delta, cfg.server)
    return state, RoundInfo(ids, stats, upload)


# --------------------------------------------------------------------------- #
# Checkpoints of the full training state
# --------------------------------------------------------------------------- #


def save_state(path: Path, state: TrainState, cfg: ExperimentConfig) -> None:
    tensors = {f"param/{k}": v for k, v in state.server.params.items()}
    tensors["opt/m"] = state.server.m
    if state.server.v is not None:
        tensors["opt/v"] = state.server.v
    meta = {"optimizer": state.server.optimizer, "initial_eval_loss": state.initial_eval_loss}
    if state.tree is not None:
        tensors["tree/prefix_sum"] = state.tree.prefix_sum
        meta["tree_t"] = state.tree.t
    save_checkpoint(path, tensors, cfg.digest(), state.server.round, meta)


def restore_state(path: Path, cfg: ExperimentConfig, template: ParamTree) -> TrainState:
    tensors, manifest = load_checkpoint(path)
    params = {}
    for name, expected in template.items():
        got = tensors.get(f"param/{name}")
        if got is None or got.shape != expected.shape:
            shape = None if got is None else got.shape
            raise CheckpointShapeError(f"tensor {name!r}: checkpoint shape {shape}, expected {expected.shape}")
        params[name] = got
    if manifest["config_hash"] != cfg.digest():
        raise CheckpointShapeError(f"{path}: checkpoint was written under a different configuration")
    meta = manifest["meta"]
    server = ServerState(ParamTree(params), meta["optimizer"], tensors["opt/m"], tensors.get("opt/v"),
                         manifest["round"])
    tree = None
    if cfg.dp is not None:
        tree = tree_init(template.size, cfg.dp, cfg.seed)
        for _ in range(meta["tree_t"]):
            tree_step(tree, np.zeros(tree.dim))
        tree.prefix_sum = tensors["tree/prefix_sum"]
    return TrainState(server, tree, meta["initial_eval_loss"])


# --------------------------------------------------------------------------- #
# Driver
# --------------------------------------------------------------------------- #


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, resume_from: str | Path | None = None,
                   workers: int | None = None, dataset: FederatedDataset | None = None) -> RunResult:
    """Train for ``cfg.rounds`` rounds (counting from a resumed round).

    Writes ``metrics.<fmt>``, ``config.txt`` and ``checkpoints/`` under
    ``out_dir`` when given.  A non-finite client loss, a non-finite eval
    loss, or an eval loss above ``divergence_factor`` times the initial one
    stops the run with a final record flagged ``diverged``.
    """
    workers = workers or default_workers()
    dataset = dataset or prepare_data(cfg)
    state = init_state(cfg, dataset)
    if resume_from is not None:
        state = restore_state(Path(resume_from), cfg, state.server.params)

    sink = ckpt_dir = None
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.txt").write_text(dump_config(cfg), encoding="utf-8")
        sink = MetricsSink(out / f"metrics.{cfg.output.metrics_format}", cfg.output.metrics_format)
        ckpt_dir = out / "checkpoints"
    result = RunResult(state)
    t0 = time.perf_counter()

    def emit(rec: MetricsRecord) -> None:
        result.records.append(rec)
        if sink is not None:
            sink.write(rec)

    def wall() -> float:
        return round(time.perf_counter() - t0, 3) if cfg.output.record_wall_time else 0.0

    def eval_record(rnd: int) -> MetricsRecord:
        return MetricsRecord.from_stats(rnd, "eval", evaluate(state.server.params, dataset, cfg), wall_seconds=wall())

    if state.initial_eval_loss is None:
        rec = eval_record(state.server.round)
        state.initial_eval_loss = rec.loss
        emit(rec)

    while state.server.round < cfg.rounds:
        rnd = state.server.round + 1
        try:
            state, info = run_round(state, dataset, cfg, workers)
        except NonFiniteError as exc:
            log.warning("round %d: %s", rnd, exc)
            emit(MetricsRecord(rnd, "train_sample", math.inf, math.inf, 0.0, 0, wall(), 0, True))
            result.diverged = True
            break
        emit(MetricsRecord.from_stats(rnd, "train_sample", info.stats, wall_seconds=wall(),
                                      upload_bytes=info.upload_bytes))
        if rnd % cfg.eval.every == 0 or rnd == cfg.rounds:
            try:
                rec = eval_record(rnd)
            except NonFiniteError:
                rec = MetricsRecord(rnd, "eval", math.inf, math.inf, 0.0, 0, wall())
            if not math.isfinite(rec.loss) or rec.loss > cfg.divergence_factor * state.initial_eval_loss:
                emit(MetricsRecord(**{**rec.to_dict(), "diverged": True}))
                result.diverged = True
                break
            emit(rec)
        if ckpt_dir is not None and cfg.output.checkpoint_every and rnd % cfg.output.checkpoint_every == 0:
            save_state(ckpt_dir / f"round_{rnd:06d}.ckpt", state, cfg)

    if ckpt_dir is not None:
        save_state(ckpt_dir / "final.ckpt", state, cfg)
    result.state = state
    return result
