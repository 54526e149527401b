"""Hard-positive and pairwise-negative mining over a cached feature snapshot.

Positive candidates are the samples geometrically within r1 of the anchor
(and inside the yaw window); the hard ones are those FARTHEST from the
anchor in cached feature space, since those are the pairs the embedding
currently fails on. Negative candidates are the samples at least r2 away;
hard negatives are picked greedily as the feature-space closest remaining
candidate, and each pick removes its own geographic neighbourhood so the
final negative set is pairwise separated.

Geo queries go through a uniform grid (cell size r2) so no pairwise
distance matrix is ever materialized; mining cost stays local even for
very large datasets.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, ContractViolation, MiningStarved, NoPositives
from .geodata import Dataset, geo_distance, yaw_difference

# Distinct per-operation seed-stream salts.
_POS_SALT = 11
_NEG_SALT = 13


@dataclass(frozen=True)
class MiningConfig:
    """Radii, quotas, and sampling parameters for tuple assembly."""

    r1: float  # positive radius, meters
    r2: float  # negative exclusion radius, meters
    yaw_max: float = math.pi  # widest allowed yaw difference for positives
    n_easy_pos: int = 3
    n_hard_pos: int = 3
    n_easy_neg: int = 3
    n_hard_neg: int = 3
    top_n: int = 25  # hard-positive candidate pool size
    neighbor_radius: float | None = None  # pairwise separation; defaults to r2
    cache_refresh_every: int = 400  # optimizer iterations between refreshes
    seed: int = 0

    def __post_init__(self):
        if not (0 < self.r1 < self.r2):
            raise ConfigurationError(
                f"positive radius r1 must satisfy 0 < r1 < r2 (got r1={self.r1}, r2={self.r2})"
            )
        if not (0 <= self.yaw_max <= math.pi):
            raise ConfigurationError("yaw_max must lie in [0, pi]")
        for name in ("n_easy_pos", "n_hard_pos", "n_easy_neg", "n_hard_neg", "top_n"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"{name} must be >= 0")
        if self.n_easy_pos + self.n_hard_pos < 1:
            raise ConfigurationError("need at least one positive per tuple")
        if self.n_easy_neg + self.n_hard_neg < 1:
            raise ConfigurationError("need at least one negative per tuple")
        if self.neighbor_radius is not None and self.neighbor_radius < 0:
            raise ConfigurationError("neighbor_radius must be >= 0")
        if self.cache_refresh_every < 1:
            raise ConfigurationError("cache_refresh_every must be >= 1")

    @property
    def effective_neighbor_radius(self) -> float:
        return self.r2 if self.neighbor_radius is None else self.neighbor_radius


@dataclass(eq=False)
class FeatureCache:
    """Snapshot of embedded features aligned to dataset row order.

    Immutable once built; refreshes swap in a whole new instance, so miners
    can keep reading an old snapshot while a new one is prepared.
    """

    features: np.ndarray  # (n, s) unit rows
    covered: np.ndarray  # (n,) bool, False for rows without a feature
    built_at_iteration: int

    def coverage_ids(self, dataset: Dataset) -> set[int]:
        return {int(dataset.ids[i]) for i in np.flatnonzero(self.covered)}


def refresh_cache(dataset: Dataset, embed, iteration: int) -> FeatureCache:
    """Embed every sample with `embed(descriptors) -> (n, s)` and stamp it."""
    feats = np.asarray(embed(dataset.descriptors), dtype=float)
    if feats.shape[0] != len(dataset):
        raise ContractViolation("embedding did not return one feature per sample")
    return FeatureCache(
        features=feats,
        covered=np.ones(len(dataset), dtype=bool),
        built_at_iteration=int(iteration),
    )


class SpatialGrid:
    """Uniform-cell index over planar points for radius queries."""

    def __init__(self, locations: np.ndarray, cell: float):
        if cell <= 0:
            raise ConfigurationError("grid cell size must be positive")
        self.locations = np.asarray(locations, dtype=float)
        self.cell = float(cell)
        self._cells: dict[tuple[int, int], list[int]] = {}
        keys = np.floor(self.locations / self.cell).astype(int)
        for row, (i, j) in enumerate(map(tuple, keys)):
            self._cells.setdefault((i, j), []).append(row)

    def _candidates(self, center: np.ndarray, radius: float) -> np.ndarray:
        lo = np.floor((center - radius) / self.cell).astype(int)
        hi = np.floor((center + radius) / self.cell).astype(int)
        rows: list[int] = []
        for i in range(lo[0], hi[0] + 1):
            for j in range(lo[1], hi[1] + 1):
                rows.extend(self._cells.get((i, j), ()))
        return np.array(sorted(rows), dtype=int)

    def within(self, center, radius: float, *, strict: bool = False) -> np.ndarray:
        """Sorted row indices with distance <= radius (or < radius if strict)."""
        center = np.asarray(center, dtype=float)
        rows = self._candidates(center, radius)
        if rows.size == 0:
            return rows
        d2 = ((self.locations[rows] - center) ** 2).sum(axis=1)
        keep = d2 < radius * radius if strict else d2 <= radius * radius
        return rows[keep]


@dataclass(frozen=True)
class TrainTuple:
    """Anchor with mined positives/negatives and per-id provenance flags."""

    anchor_id: int
    positive_ids: tuple[int, ...]
    positive_is_hard: tuple[bool, ...]
    negative_ids: tuple[int, ...]
    negative_is_hard: tuple[bool, ...]
    cache_iteration: int

    def to_json(self) -> str:
        return json.dumps(
            {
                "anchor": self.anchor_id,
                "positives": [
                    [pid, "hard" if h else "easy"]
                    for pid, h in zip(self.positive_ids, self.positive_is_hard)
                ],
                "negatives": [
                    [nid, "hard" if h else "easy"]
                    for nid, h in zip(self.negative_ids, self.negative_is_hard)
                ],
                "cache_iteration": self.cache_iteration,
            }
        )

    @classmethod
    def from_json(cls, line: str) -> "TrainTuple":
        obj = json.loads(line)
        return cls(
            anchor_id=int(obj["anchor"]),
            positive_ids=tuple(int(p) for p, _ in obj["positives"]),
            positive_is_hard=tuple(flag == "hard" for _, flag in obj["positives"]),
            negative_ids=tuple(int(n) for n, _ in obj["negatives"]),
            negative_is_hard=tuple(flag == "hard" for _, flag in obj["negatives"]),
            cache_iteration=int(obj["cache_iteration"]),
        )


class Miner:
    """Mining engine bound to one dataset and config.

    Precomputes the spatial grid and id maps once; all per-anchor work is
    pure and deterministic, so instances are safe to share across worker
    threads together with an immutable cache snapshot.
    """

    def __init__(self, dataset: Dataset, cfg: MiningConfig):
        self.dataset = dataset
        self.cfg = cfg
        self.grid = SpatialGrid(dataset.locations, cell=cfg.r2)

    def _rng(self, anchor_id: int, cache: FeatureCache, salt: int) -> np.random.Generator:
        return np.random.default_rng(
            [self.cfg.seed, cache.built_at_iteration, anchor_id, salt]
        )

    def _anchor_row(self, anchor_id: int) -> int:
        try:
            return self.dataset.id_to_row[anchor_id]
        except KeyError:
            raise ContractViolation(f"anchor id {anchor_id} not in dataset") from None

    def positive_candidates(self, anchor_id: int) -> np.ndarray:
        """Rows within r1 of the anchor passing the yaw filter, anchor excluded."""
        row = self._anchor_row(anchor_id)
        loc = self.dataset.locations[row]
        rows = self.grid.within(loc, self.cfg.r1)
        rows = rows[rows != row]
        if rows.size and self.cfg.yaw_max < math.pi:
            yaw_a = self.dataset.yaws[row]
            keep = [
                yaw_difference(yaw_a, self.dataset.yaws[r]) <= self.cfg.yaw_max
                for r in rows
            ]
            rows = rows[np.array(keep, dtype=bool)]
        return rows

    def hard_pos(self, anchor_id: int, cache: FeatureCache) -> tuple[tuple[int, ...], tuple[bool, ...]]:
        """Positive set P = easy uniform picks plus hard picks from the top-N
        candidates ranked by DESCENDING cached feature distance."""
        cfg = self.cfg
        row = self._anchor_row(anchor_id)
        cand = self.positive_candidates(anchor_id)
        if cand.size == 0:
            raise NoPositives(anchor_id)
        rng = self._rng(anchor_id, cache, _POS_SALT)

        easy: list[int] = []
        if cfg.n_easy_pos > 0:
            take = min(cfg.n_easy_pos, cand.size)
            easy = [int(r) for r in rng.choice(cand, size=take, replace=False)]

        hard: list[int] = []
        if cfg.n_hard_pos > 0 and cache.covered[row]:
            covered = cand[cache.covered[cand]]
            if covered.size:
                fd = np.linalg.norm(
                    cache.features[covered] - cache.features[row], axis=1
                )
                # farthest-in-feature-space first; ties to the lowest row
                order = np.lexsort((covered, -fd))
                pool = covered[order][: cfg.top_n]
                take = min(cfg.n_hard_pos, pool.size)
                hard = [int(r) for r in rng.choice(pool, size=take, replace=False)]

        hard_set = set(hard)
        rows_out, flags = [], []
        for r in sorted(hard_set):
            rows_out.append(r)
            flags.append(True)
        for r in sorted(set(easy) - hard_set):
            rows_out.append(r)
            flags.append(False)
        if not rows_out:
            # candidates existed but none usable (cold cache with easy quota 0)
            raise NoPositives(anchor_id)
        ids = tuple(int(self.dataset.ids[r]) for r in rows_out)
        return ids, tuple(flags)

    def negative_candidates(self, anchor_id: int) -> np.ndarray:
        """Boolean row mask of samples at least r2 away from the anchor."""
        row = self._anchor_row(anchor_id)
        loc = self.dataset.locations[row]
        mask = np.ones(len(self.dataset), dtype=bool)
        mask[self.grid.within(loc, self.cfg.r2, strict=True)] = False
        return mask

    def pair_neg(self, anchor_id: int, cache: FeatureCache) -> tuple[tuple[int, ...], tuple[bool, ...]]:
        """Greedy pairwise-negative mining.

        Hard picks first: among the remaining cached candidates, take the one
        CLOSEST to the anchor in feature space, then drop it and everything
        within the neighbor radius. Easy picks repeat the same removal with
        uniform sampling. Raises MiningStarved if either quota cannot be met.
        """
        cfg = self.cfg
        row = self._anchor_row(anchor_id)
        avail = self.negative_candidates(anchor_id)
        rng = self._rng(anchor_id, cache, _NEG_SALT)
        nr = cfg.effective_neighbor_radius

        chosen_rows: list[int] = []
        chosen_hard: list[bool] = []

        def remove_neighborhood(r: int):
            avail[r] = False
            if nr > 0:
                avail[self.grid.within(self.dataset.locations[r], nr, strict=True)] = False

        def starve():
            ids = tuple(int(self.dataset.ids[r]) for r in chosen_rows)
            raise MiningStarved(anchor_id, ids, tuple(chosen_hard))

        anchor_covered = bool(cache.covered[row])
        for _ in range(cfg.n_hard_neg):
            cand = np.flatnonzero(avail & cache.covered) if anchor_covered else np.array([], int)
            if cand.size == 0:
                starve()
            fd = np.linalg.norm(cache.features[cand] - cache.features[row], axis=1)
            pick = int(cand[np.lexsort((cand, fd))[0]])
            chosen_rows.append(pick)
            chosen_hard.append(True)
            remove_neighborhood(pick)

        for _ in range(cfg.n_easy_neg):
            cand = np.flatnonzero(avail)
            if cand.size == 0:
                starve()
            pick = int(rng.choice(cand))
            chosen_rows.append(pick)
            chosen_hard.append(False)
            remove_neighborhood(pick)

        ids = tuple(int(self.dataset.ids[r]) for r in chosen_rows)
        return ids, tuple(chosen_hard)

    def assemble(
        self, anchor_id: int, cache: FeatureCache, *, iteration: int | None = None
    ) -> TrainTuple:
        """Mine positives and negatives into one TrainTuple.

        When `iteration` is supplied, the cache must still be fresh
        (age < cache_refresh_every).
        """
        if iteration is not None:
            age = iteration - cache.built_at_iteration
            if age >= self.cfg.cache_refresh_every:
                raise ContractViolation(
                    f"stale cache: age {age} >= {self.cfg.cache_refresh_every}"
                )
        pos_ids, pos_hard = self.hard_pos(anchor_id, cache)
        neg_ids, neg_hard = self.pair_neg(anchor_id, cache)
        return TrainTuple(
            anchor_id=anchor_id,
            positive_ids=pos_ids,
            positive_is_hard=pos_hard,
            negative_ids=neg_ids,
            negative_is_hard=neg_hard,
            cache_iteration=cache.built_at_iteration,
        )


def apply_ablations(cfg: MiningConfig, *, hp_on: bool = True, pn_on: bool = True) -> MiningConfig:
    """HP off converts the hard-positive quota into easy picks (same tuple
    budget); PN off degrades pairwise-negative mining to plain hard-negative
    mining by zeroing the removal radius."""
    out = cfg
    if not hp_on:
        out = replace(out, n_hard_pos=0, n_easy_pos=cfg.n_easy_pos + cfg.n_hard_pos)
    if not pn_on:
        out = replace(out, neighbor_radius=0.0)
    return out


def hard_pos(anchor_id: int, dataset: Dataset, cache: FeatureCache, cfg: MiningConfig):
    return Miner(dataset, cfg).hard_pos(anchor_id, cache)


def pair_neg(anchor_id: int, dataset: Dataset, cache: FeatureCache, cfg: MiningConfig):
    return Miner(dataset, cfg).pair_neg(anchor_id, cache)


def assemble_tuple(
    anchor_id: int,
    dataset: Dataset,
    cache: FeatureCache,
    cfg: MiningConfig,
    *,
    iteration: int | None = None,
) -> TrainTuple:
    return Miner(dataset, cfg).assemble(anchor_id, cache, iteration=iteration)


def write_mining_log(tuples, path) -> None:
    """Append-style JSONL audit log of assembled tuples."""
    with open(path, "w", encoding="utf-8") as fh:
        for t in tuples:
            fh.write(t.to_json())
            fh.write("\n")


def read_mining_log(path) -> list[TrainTuple]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(TrainTuple.from_json(line))
    return out


def audit_tuple_geometry(t: TrainTuple, dataset: Dataset, cfg: MiningConfig) -> list[str]:
    """Check the geometric tuple invariants; returns human-readable violations.

    Covers the r1/yaw constraints on positives, the r2 constraint on
    negatives, and pairwise negative separation. Feature-space checks need
    the live cache and are exercised by the test suite instead.
    """
    problems = []
    row = dataset.id_to_row.get(t.anchor_id)
    if row is None:
        return [f"anchor {t.anchor_id} missing from dataset"]
    loc = dataset.locations[row]
    yaw = dataset.yaws[row]
    tol = 1e-9
    for pid in t.positive_ids:
        prow = dataset.id_to_row.get(pid)
        if prow is None:
            problems.append(f"positive {pid} missing from dataset")
            continue
        d = geo_distance(loc, dataset.locations[prow])
        if d > cfg.r1 + tol:
            problems.append(f"positive {pid} at {d:.3f} m > r1={cfg.r1}")
        if yaw_difference(yaw, dataset.yaws[prow]) > cfg.yaw_max + tol:
            problems.append(f"positive {pid} fails the yaw filter")
    neg_rows = []
    for nid in t.negative_ids:
        nrow = dataset.id_to_row.get(nid)
        if nrow is None:
            problems.append(f"negative {nid} missing from dataset")
            continue
        neg_rows.append(nrow)
        d = geo_distance(loc, dataset.locations[nrow])
        if d < cfg.r2 - tol:
            problems.append(f"negative {nid} at {d:.3f} m < r2={cfg.r2}")
    nr = cfg.effective_neighbor_radius
    for i in range(len(neg_rows)):
        for j in range(i + 1, len(neg_rows)):
            d = geo_distance(dataset.locations[neg_rows[i]], dataset.locations[neg_rows[j]])
            if d < nr - tol:
                problems.append(
                    f"negatives {t.negative_ids[i]} and {t.negative_ids[j]} are "
                    f"{d:.3f} m apart < neighbor_radius={nr}"
                )
    return problems
