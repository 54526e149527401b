"""Geo-tagged sample model, JSONL ingestion, and a synthetic world generator.

A "world" is a set of locations along a parametric route. Every location
yields one sample per condition; a condition is a fixed smooth distortion
(rotation + per-coordinate gain + bias + noise) of a base descriptor that
varies smoothly with location. This stands in for large real datasets while
keeping condition invariance learnable in principle.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Sequence

import numpy as np
from scipy.linalg import expm

from .errors import ConfigurationError, ParseError, ValidationError

TWO_PI = 2.0 * math.pi

# Seed-stream salts so adding conditions never shifts unrelated draws.
_BASE_SALT = 0
_CONDITION_SALT = 1000
_NOISE_SALT = 2000


def wrap_angle(a: float) -> float:
    """Wrap an angle to [-pi, pi)."""
    return (a + math.pi) % TWO_PI - math.pi


def geo_distance(x_a, x_b) -> float:
    """Euclidean distance in meters between two planar locations."""
    x_a = np.asarray(x_a, dtype=float)
    x_b = np.asarray(x_b, dtype=float)
    return float(np.hypot(x_a[0] - x_b[0], x_a[1] - x_b[1]))


def yaw_difference(a: float, b: float) -> float:
    """Smallest absolute angular difference on the circle, in [0, pi]."""
    return abs(wrap_angle(a - b))


@dataclass(eq=False)
class GeoSample:
    """One geo-tagged descriptor.

    The descriptor stands in for an image; yaw carries the heading used by
    the positive-candidate filter.
    """

    id: int
    location: np.ndarray  # (2,) meters
    yaw: float  # radians in [-pi, pi)
    condition: str
    descriptor: np.ndarray  # (d_in,)

    def __post_init__(self):
        self.location = np.asarray(self.location, dtype=float)
        self.descriptor = np.asarray(self.descriptor, dtype=float)
        if self.location.shape != (2,) or not np.all(np.isfinite(self.location)):
            raise ValidationError(f"sample {self.id}: location must be a finite 2-vector")
        if not (-math.pi <= self.yaw < math.pi):
            raise ValidationError(f"sample {self.id}: yaw {self.yaw} outside [-pi, pi)")
        if self.descriptor.ndim != 1 or not np.all(np.isfinite(self.descriptor)):
            raise ValidationError(f"sample {self.id}: descriptor must be a finite vector")


@dataclass(eq=False)
class Dataset:
    """An ordered, immutable-after-load collection of samples for one split."""

    samples: list[GeoSample]
    split: str = "train"
    route_locations: np.ndarray | None = None  # (k, 2) canonical route points

    def __post_init__(self):
        ids = [s.id for s in self.samples]
        if len(set(ids)) != len(ids):
            raise ValidationError("duplicate sample ids")
        dims = {s.descriptor.shape[0] for s in self.samples}
        if len(dims) > 1:
            raise ValidationError(f"inconsistent descriptor dimensions: {sorted(dims)}")
        if self.route_locations is not None:
            self.route_locations = np.asarray(self.route_locations, dtype=float)

    def __len__(self) -> int:
        return len(self.samples)

    @cached_property
    def ids(self) -> np.ndarray:
        return np.array([s.id for s in self.samples], dtype=int)

    @cached_property
    def locations(self) -> np.ndarray:
        return np.array([s.location for s in self.samples], dtype=float)

    @cached_property
    def yaws(self) -> np.ndarray:
        return np.array([s.yaw for s in self.samples], dtype=float)

    @cached_property
    def descriptors(self) -> np.ndarray:
        return np.array([s.descriptor for s in self.samples], dtype=float)

    @cached_property
    def conditions(self) -> list[str]:
        return [s.condition for s in self.samples]

    @cached_property
    def id_to_row(self) -> dict[int, int]:
        return {s.id: i for i, s in enumerate(self.samples)}

    @property
    def descriptor_dim(self) -> int:
        return self.samples[0].descriptor.shape[0] if self.samples else 0


@dataclass(frozen=True)
class RouteSpec:
    """Circular route segment: `n` locations spread over an arc fraction range."""

    radius: float = 100.0
    center: tuple[float, float] = (0.0, 0.0)
    arc_start: float = 0.0
    arc_end: float = 1.0

    def validate(self):
        if not (self.radius > 0 and math.isfinite(self.radius)):
            raise ConfigurationError("route radius must be positive and finite")
        if not (0.0 <= self.arc_start < self.arc_end <= 1.0):
            raise ConfigurationError("route arc range must satisfy 0 <= start < end <= 1")

    def points(self, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Locations (n, 2) and tangent yaws (n,) along the arc."""
        t = self.arc_start + (self.arc_end - self.arc_start) * np.arange(n) / n
        theta = TWO_PI * t
        cx, cy = self.center
        locs = np.stack(
            [cx + self.radius * np.cos(theta), cy + self.radius * np.sin(theta)], axis=1
        )
        yaws = np.array([wrap_angle(th + math.pi / 2.0) for th in theta])
        return locs, yaws


@dataclass(frozen=True)
class ConditionSpec:
    """A fixed smooth descriptor distortion.

    The distortion acts on the trailing `subspace_fraction` of coordinates:
    a random rotation of angle scale `rotation`, a multiplicative `gain`,
    and an additive `bias`, plus isotropic noise of `noise_sigma` on all
    coordinates. `gain`/`bias` may also be full per-coordinate sequences.
    """

    name: str
    rotation: float = 0.0
    gain: float | Sequence[float] = 1.0
    bias: float | Sequence[float] = 0.0
    noise_sigma: float = 0.0
    subspace_fraction: float = 1.0

    def validate(self, d_in: int):
        if not self.name:
            raise ConfigurationError("condition name must be non-empty")
        if not math.isfinite(self.rotation):
            raise ConfigurationError(f"condition {self.name}: non-finite rotation")
        if self.noise_sigma < 0 or not math.isfinite(self.noise_sigma):
            raise ConfigurationError(f"condition {self.name}: noise_sigma must be >= 0")
        if not (0.0 <= self.subspace_fraction <= 1.0):
            raise ConfigurationError(f"condition {self.name}: subspace_fraction outside [0, 1]")
        for label, v in (("gain", self.gain), ("bias", self.bias)):
            arr = np.atleast_1d(np.asarray(v, dtype=float))
            if arr.ndim != 1 or arr.shape[0] not in (1, d_in) or not np.all(np.isfinite(arr)):
                raise ConfigurationError(
                    f"condition {self.name}: {label} must be a finite scalar or length-{d_in} vector"
                )


IDENTITY_CONDITION = ConditionSpec(name="base")


@dataclass(frozen=True)
class SyntheticWorldConfig:
    """Deterministic generator settings; `seed` fully determines the output.

    The base descriptor is a random Fourier feature map of location, so
    geometric closeness implies base-descriptor closeness. `lengthscale` may
    be a single bandwidth or a per-coordinate sequence, which allows some
    descriptor coordinates to vary sharply with location and others slowly.
    Worlds generated from the same seed share the base map and condition
    transforms even when routes or location counts differ.
    """

    n_locations: int
    conditions: tuple[ConditionSpec, ...] = (IDENTITY_CONDITION,)
    d_in: int = 16
    seed: int = 0
    route: RouteSpec = field(default_factory=RouteSpec)
    lengthscale: float | Sequence[float] = 25.0
    split: str = "train"
    id_offset: int = 0

    def lengthscales(self) -> np.ndarray:
        arr = np.atleast_1d(np.asarray(self.lengthscale, dtype=float))
        if arr.shape[0] == 1:
            arr = np.full(self.d_in, arr[0])
        return arr

    def validate(self):
        if self.n_locations < 2:
            raise ConfigurationError("n_locations must be >= 2")
        if self.d_in < 1:
            raise ConfigurationError("d_in must be >= 1")
        if not self.conditions:
            raise ConfigurationError("at least one condition is required")
        ls = self.lengthscales()
        if ls.shape[0] != self.d_in or not np.all(np.isfinite(ls)) or np.any(ls <= 0):
            raise ConfigurationError(
                "lengthscale must be a positive scalar or a positive length-d_in vector"
            )
        self.route.validate()
        for c in self.conditions:
            c.validate(self.d_in)


def _condition_transform(cond: ConditionSpec, d_in: int, seed: int, index: int):
    """Materialize (rotation matrix, gain vector, bias vector) for one condition."""
    rng = np.random.default_rng([seed, _CONDITION_SALT + index])
    m = int(round(cond.subspace_fraction * d_in))
    rot = np.eye(d_in)
    if cond.rotation != 0.0 and m >= 2:
        g = rng.normal(size=(m, m))
        anti = g - g.T
        # normalize so `rotation` is an angle scale in the invariant planes
        scale = np.max(np.abs(np.linalg.eigvalsh(1j * anti)).real)
        if scale > 0:
            anti = anti / scale
        rot[d_in - m :, d_in - m :] = expm(cond.rotation * anti)

    def expand(v, neutral: float) -> np.ndarray:
        arr = np.atleast_1d(np.asarray(v, dtype=float))
        if arr.shape[0] == d_in:
            return arr.copy()
        out = np.full(d_in, neutral)
        out[d_in - m :] = arr[0]
        return out

    return rot, expand(cond.gain, 1.0), expand(cond.bias, 0.0)


def generate_world(cfg: SyntheticWorldConfig) -> Dataset:
    """Generate one GeoSample per (route location, condition).

    Sample ids are sequential from `cfg.id_offset`, location-major. The base
    descriptor map and condition transforms depend only on `cfg.seed` and the
    condition index, never on the route, so worlds on disjoint arcs of the
    same seed are drawn from one underlying environment.
    """
    cfg.validate()
    locs, yaws = cfg.route.points(cfg.n_locations)

    rng_base = np.random.default_rng([cfg.seed, _BASE_SALT])
    omega = rng_base.normal(size=(cfg.d_in, 2)) / cfg.lengthscales()[:, None]
    phase = rng_base.uniform(0.0, TWO_PI, size=cfg.d_in)
    base = math.sqrt(2.0 / cfg.d_in) * np.cos(locs @ omega.T + phase)  # (n, d_in)

    samples: list[GeoSample] = []
    next_id = cfg.id_offset
    per_condition = []
    for idx, cond in enumerate(cfg.conditions):
        rot, gain, bias = _condition_transform(cond, cfg.d_in, cfg.seed, idx)
        desc = base * gain @ rot.T + bias
        if cond.noise_sigma > 0:
            rng_noise = np.random.default_rng([cfg.seed, _NOISE_SALT + idx])
            desc = desc + cond.noise_sigma * rng_noise.normal(size=desc.shape)
        per_condition.append(desc)
    for k in range(cfg.n_locations):
        for idx, cond in enumerate(cfg.conditions):
            samples.append(
                GeoSample(
                    id=next_id,
                    location=locs[k],
                    yaw=float(yaws[k]),
                    condition=cond.name,
                    descriptor=per_condition[idx][k],
                )
            )
            next_id += 1
    return Dataset(samples=samples, split=cfg.split, route_locations=locs)


_SCHEMA_KEYS = ("id", "x", "yaw", "condition", "descriptor")


def save_dataset(dataset: Dataset, path) -> None:
    """Write the JSONL representation (one object per line, UTF-8)."""
    with open(path, "w", encoding="utf-8") as fh:
        for s in dataset.samples:
            fh.write(
                json.dumps(
                    {
                        "id": int(s.id),
                        "x": [float(s.location[0]), float(s.location[1])],
                        "yaw": float(s.yaw),
                        "condition": s.condition,
                        "descriptor": [float(v) for v in s.descriptor],
                    }
                )
            )
            fh.write("\n")


def load_dataset(path, split: str, *, check_against: Dataset | None = None,
                 separation: float | None = None) -> Dataset:
    """Parse a JSONL dataset file.

    Raises ParseError with the offending line number on malformed input.
    When `check_against` is given (typically the train split for a reference
    or query split), geographic disjointness at `separation` meters is
    verified immediately.
    """
    samples = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                sample = GeoSample(
                    id=int(obj["id"]),
                    location=np.asarray(obj["x"], dtype=float),
                    yaw=float(obj["yaw"]),
                    condition=str(obj["condition"]),
                    descriptor=np.asarray(obj["descriptor"], dtype=float),
                )
            except (KeyError, TypeError, ValueError, ValidationError) as exc:
                raise ParseError(f"{path}: line {lineno}: {exc}") from exc
            samples.append(sample)
    dataset = Dataset(samples=samples, split=split)
    if check_against is not None:
        if separation is None:
            raise ConfigurationError("separation required when checking disjointness")
        check_disjoint(check_against, dataset, separation)
    return dataset


def check_disjoint(train: Dataset, other: Dataset, separation: float) -> None:
    """Require every train/other location pair to be at least `separation` apart."""
    a = train.locations
    b = other.locations
    if len(a) == 0 or len(b) == 0:
        return
    block = 1024
    for start in range(0, len(a), block):
        chunk = a[start : start + block]
        d2 = ((chunk[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        if d2.min() < separation**2:
            i, j = np.unravel_index(int(d2.argmin()), d2.shape)
            raise ValidationError(
                f"splits '{train.split}' and '{other.split}' overlap: samples "
                f"{train.samples[start + i].id} and {other.samples[j].id} are "
                f"{math.sqrt(d2.min()):.3f} m apart (< {separation} m)"
            )
