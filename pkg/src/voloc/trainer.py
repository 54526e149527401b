"""Training orchestration: epochs, mining, loss, optimizer, metrics.

Tuple assembly runs on a worker pool feeding a bounded, order-preserving
queue; because mining is a pure function of (dataset, cache snapshot,
config, anchor), consuming results in submission order makes the run
bit-identical to a sequential one regardless of worker count. A cache
refresh invalidates any tuples prefetched against the old snapshot; they
are re-submitted against the new one.
"""

from __future__ import annotations

import os
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .embedder import Adam, Embedder, EmbedderSpec
from .errors import ConfigurationError, MiningStarved, NoPositives, TrainingStalled
from .geodata import Dataset
from .losses import LossSpec, compute_loss, with_geo_scale
from .mining import FeatureCache, Miner, MiningConfig, TrainTuple, apply_ablations, refresh_cache

_EPOCH_SALT = 101
_LOCATION_SALT = 103


@dataclass(frozen=True)
class TrainConfig:
    loss: LossSpec
    mining: MiningConfig
    embedder: EmbedderSpec
    epochs: int = 10
    lr: float = 1e-3
    batch_anchors: int = 2
    epoch_mode: str = "per_image"  # or "per_location"
    hp_on: bool = True
    pn_on: bool = True
    seed: int = 0
    checkpoint_every: int = 0  # epochs between checkpoints; 0 = final only
    queue_depth: int = 32
    workers: int | None = None  # None -> VOLOC_THREADS env var, else 1

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs must be >= 0")
        if self.lr <= 0:
            raise ConfigurationError("lr must be > 0")
        if self.batch_anchors < 1:
            raise ConfigurationError("batch_anchors must be >= 1")
        if self.epoch_mode not in ("per_image", "per_location"):
            raise ConfigurationError(f"unknown epoch_mode {self.epoch_mode!r}")
        if self.queue_depth < 1:
            raise ConfigurationError("queue_depth must be >= 1")


@dataclass
class MetricsRow:
    epoch: int
    iteration: int
    loss: float
    skips: int
    cache_age: int


@dataclass
class TrainResult:
    embedder: Embedder
    metrics: list[MetricsRow]
    skip_counts: dict[str, int]
    iterations: int
    aborted_steps: int
    mined_tuples: list[TrainTuple] = field(default_factory=list)


def resolve_workers(configured: int | None) -> int:
    if configured is not None:
        return max(1, configured)
    env = os.environ.get("VOLOC_THREADS", "")
    if env.strip():
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigurationError(f"VOLOC_THREADS must be an integer, got {env!r}")
    return 1


def tuple_skip_reason(spec: LossSpec, n_pos: int, n_neg: int, s: int) -> str | None:
    """Why a mined tuple cannot feed the configured loss, if it cannot."""
    if spec.kind == "volume" and not (spec.r < min(s, n_pos, n_neg)):
        return "tuple_too_small_for_r"
    if spec.kind in ("quadruplet", "lazy_quadruplet") and n_neg < 2:
        return "needs_two_negatives"
    return None


class _OrderedPrefetcher:
    """Submit anchor mining up to `depth` ahead; yield results in order."""

    def __init__(self, miner: Miner, anchors, executor, depth: int):
        self.miner = miner
        self.anchors = anchors
        self.executor = executor
        self.depth = depth
        self.cache: FeatureCache | None = None
        self.next_submit = 0
        self.next_consume = 0
        self.pending: deque = deque()

    def _job(self, anchor_id: int, cache: FeatureCache):
        try:
            return self.miner.assemble(anchor_id, cache)
        except (NoPositives, MiningStarved) as signal:
            return signal

    def _top_up(self):
        while len(self.pending) < self.depth and self.next_submit < len(self.anchors):
            aid = self.anchors[self.next_submit]
            self.pending.append(self.executor.submit(self._job, int(aid), self.cache))
            self.next_submit += 1

    def set_cache(self, cache: FeatureCache):
        """Swap snapshots; tuples mined against the old one are discarded."""
        self.cache = cache
        for fut in self.pending:
            fut.cancel()
        self.pending.clear()
        self.next_submit = self.next_consume

    def __iter__(self):
        return self

    def __next__(self):
        if self.next_consume >= len(self.anchors):
            raise StopIteration
        self._top_up()
        result = self.pending.popleft().result()
        self.next_consume += 1
        return result


def _per_location_groups(dataset: Dataset) -> list[np.ndarray]:
    """Sample ids grouped by their nearest route location.

    Datasets without explicit route locations use the distinct sample
    locations, in first-appearance order, as the route.
    """
    if dataset.route_locations is not None:
        route = dataset.route_locations
    else:
        seen: dict[bytes, int] = {}
        rows = []
        for i in range(len(dataset)):
            key = dataset.locations[i].tobytes()
            if key not in seen:
                seen[key] = len(rows)
                rows.append(i)
        route = dataset.locations[rows]
    d2 = ((dataset.locations[:, None, :] - route[None, :, :]) ** 2).sum(axis=2)
    assignment = d2.argmin(axis=1)
    groups = [dataset.ids[assignment == k] for k in range(len(route))]
    return [g for g in groups if g.size]


def _epoch_anchors(dataset: Dataset, cfg: TrainConfig, epoch: int,
                   groups: list[np.ndarray] | None) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, _EPOCH_SALT, epoch])
    if cfg.epoch_mode == "per_image":
        return rng.permutation(dataset.ids)
    order = rng.permutation(len(groups))
    rng_pick = np.random.default_rng([cfg.seed, _LOCATION_SALT, epoch])
    return np.array([int(rng_pick.choice(groups[k])) for k in order], dtype=int)


def train(dataset: Dataset, cfg: TrainConfig, *, checkpoint_dir=None) -> TrainResult:
    """Run the full loop and return the trained embedder plus metrics.

    Anchors whose mining signals (no positives, starved negatives) or whose
    tuple cannot feed the loss are skipped and counted; an epoch in which
    every anchor is skipped raises TrainingStalled.
    """
    if dataset.descriptor_dim != cfg.embedder.d_in:
        raise ConfigurationError(
            f"embedder d_in={cfg.embedder.d_in} but dataset descriptors have "
            f"dim {dataset.descriptor_dim}"
        )
    mining_cfg = apply_ablations(cfg.mining, hp_on=cfg.hp_on, pn_on=cfg.pn_on)
    loss_spec = with_geo_scale(cfg.loss, mining_cfg.r1)
    needs_geo = loss_spec.kind in ("triplet_distance", "triplet_huber")

    embedder = Embedder.initialize(cfg.embedder)
    adam = Adam(lr=cfg.lr)
    miner = Miner(dataset, mining_cfg)
    groups = _per_location_groups(dataset) if cfg.epoch_mode == "per_location" else None

    metrics: list[MetricsRow] = []
    skip_counts: dict[str, int] = {}
    mined: list[TrainTuple] = []
    iteration = 0
    aborted = 0
    cache = refresh_cache(dataset, embedder.embed, 0)

    def run_tuple(tup: TrainTuple):
        rows = [dataset.id_to_row[tup.anchor_id]]
        rows += [dataset.id_to_row[i] for i in tup.positive_ids]
        rows += [dataset.id_to_row[i] for i in tup.negative_ids]
        feats, fw_cache = embedder.forward(dataset.descriptors[rows])
        n_pos = len(tup.positive_ids)
        kwargs = {}
        if needs_geo:
            kwargs = dict(
                anchor_location=dataset.locations[rows[0]],
                positive_locations=dataset.locations[rows[1 : 1 + n_pos]],
            )
        out = compute_loss(
            loss_spec,
            feats[0],
            feats[1 : 1 + n_pos].T,
            feats[1 + n_pos :].T,
            **kwargs,
        )
        grad_feats = np.vstack(
            [out.grad_anchor[None, :], out.grad_positives.T, out.grad_negatives.T]
        )
        return out.value, embedder.backward(fw_cache, grad_feats)

    workers = resolve_workers(cfg.workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for epoch in range(cfg.epochs):
            anchors = _epoch_anchors(dataset, cfg, epoch, groups)
            prefetch = _OrderedPrefetcher(miner, anchors, pool, cfg.queue_depth)
            prefetch.set_cache(cache)
            epoch_skips = 0
            epoch_used = 0
            consumed = 0
            while consumed < len(anchors):
                if iteration - cache.built_at_iteration >= mining_cfg.cache_refresh_every:
                    cache = refresh_cache(dataset, embedder.embed, iteration)
                    prefetch.set_cache(cache)
                batch = [
                    next(prefetch)
                    for _ in range(min(cfg.batch_anchors, len(anchors) - consumed))
                ]
                consumed += len(batch)
                grads_sum = None
                loss_sum = 0.0
                used = 0
                for item in batch:
                    if isinstance(item, NoPositives):
                        epoch_skips += 1
                        skip_counts["no_positives"] = skip_counts.get("no_positives", 0) + 1
                        continue
                    if isinstance(item, MiningStarved):
                        epoch_skips += 1
                        skip_counts["mining_starved"] = skip_counts.get("mining_starved", 0) + 1
                        continue
                    reason = tuple_skip_reason(
                        loss_spec, len(item.positive_ids), len(item.negative_ids),
                        cfg.embedder.s,
                    )
                    if reason is not None:
                        epoch_skips += 1
                        skip_counts[reason] = skip_counts.get(reason, 0) + 1
                        continue
                    mined.append(item)
                    value, grads = run_tuple(item)
                    loss_sum += value
                    if grads_sum is None:
                        grads_sum = grads
                    else:
                        for k in grads_sum:
                            grads_sum[k] = grads_sum[k] + grads[k]
                    used += 1
                if used == 0:
                    continue
                for k in grads_sum:
                    grads_sum[k] = grads_sum[k] / used
                if not adam.step(embedder.params, grads_sum):
                    aborted += 1
                    continue
                iteration += 1
                epoch_used += used
                metrics.append(
                    MetricsRow(
                        epoch=epoch,
                        iteration=iteration,
                        loss=loss_sum / used,
                        skips=epoch_skips,
                        cache_age=iteration - cache.built_at_iteration,
                    )
                )
            if epoch_used == 0:
                raise TrainingStalled(f"every anchor skipped in epoch {epoch}")
            if checkpoint_dir is not None and cfg.checkpoint_every > 0:
                if (epoch + 1) % cfg.checkpoint_every == 0:
                    embedder.save(os.path.join(checkpoint_dir, f"epoch_{epoch + 1}.json"))

    return TrainResult(
        embedder=embedder,
        metrics=metrics,
        skip_counts=skip_counts,
        iterations=iteration,
        aborted_steps=aborted,
        mined_tuples=mined,
    )


def write_metrics_csv(metrics: list[MetricsRow], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("epoch,iteration,loss,skips,cache_age\n")
        for row in metrics:
            fh.write(
                f"{row.epoch},{row.iteration},{row.loss!r},{row.skips},{row.cache_age}\n"
            )
