"""Loss zoo: volume objective plus triplet-family baselines, with gradients.

All functions take the anchor feature (s,), positives (s, |P|) and negatives
(s, |N|) as columns, and return the loss value together with analytic
gradients w.r.t. every input feature. Features are expected to follow the
unit-norm convention enforced by the embedder; the losses themselves do not
renormalize.

Hinge subgradients are zero at exactly-zero hinges, and min/max ties are
broken by the lowest index, so every loss is a deterministic function of its
inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .volume import grad_squared_volume, squared_volume

LOSS_KINDS = (
    "volume",
    "triplet",
    "quadruplet",
    "lazy_triplet",
    "lazy_quadruplet",
    "triplet_distance",
    "triplet_huber",
)


@dataclass(frozen=True)
class LossSpec:
    """Which loss to run and its parameters.

    `margin2` only matters for the quadruplet family, `huber_delta` and
    `distance_weight` for the distance-regularized variants, and `r` for the
    volume loss. `geo_scale` converts meters to squared feature distance in
    the distance regularizer; trainers default it to margin / r1 so the
    positive radius maps onto the margin.
    """

    kind: str = "volume"
    margin: float = 0.5
    margin2: float = 0.25
    huber_delta: float = 1.0
    use_hausdorff_positive: bool = False
    r: int = 4
    distance_weight: float = 1.0
    geo_scale: float | None = None

    def __post_init__(self):
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"unknown loss kind {self.kind!r}")
        if self.margin < 0 or self.margin2 < 0:
            raise ConfigurationError("margins must be >= 0")
        if self.huber_delta <= 0:
            raise ConfigurationError("huber_delta must be > 0")
        if self.distance_weight < 0:
            raise ConfigurationError("distance_weight must be >= 0")
        if self.r < 1:
            raise ConfigurationError("r must be >= 1")


@dataclass
class LossOutput:
    value: float
    grad_anchor: np.ndarray
    grad_positives: np.ndarray
    grad_negatives: np.ndarray
    active: bool


def _check_tuple(anchor, positives, negatives, min_negatives: int = 1):
    anchor = np.asarray(anchor, dtype=float)
    positives = np.asarray(positives, dtype=float)
    negatives = np.asarray(negatives, dtype=float)
    if positives.ndim == 1:
        positives = positives[:, None]
    if negatives.ndim == 1:
        negatives = negatives[:, None]
    if positives.shape[1] < 1:
        raise ContractViolation("at least one positive required")
    if negatives.shape[1] < min_negatives:
        raise ContractViolation(f"at least {min_negatives} negatives required")
    if positives.shape[0] != anchor.shape[0] or negatives.shape[0] != anchor.shape[0]:
        raise ContractViolation("feature dimension mismatch within tuple")
    return anchor, positives, negatives


def _anchor_sq_dists(anchor: np.ndarray, vecs: np.ndarray) -> np.ndarray:
    diff = anchor[:, None] - vecs
    return (diff * diff).sum(axis=0)


def _positive_reference(anchor, positives, spec) -> tuple[int, float]:
    """Index and squared distance of the loss-defining positive.

    Point-to-set uses the closest positive; the Hausdorff toggle switches to
    the farthest one so hard positives keep contributing.
    """
    d2 = _anchor_sq_dists(anchor, positives)
    j = int(np.argmax(d2)) if spec.use_hausdorff_positive else int(np.argmin(d2))
    return j, float(d2[j])


def volume_loss(anchor, positives, negatives, spec: LossSpec) -> LossOutput:
    """Positive squared volume minus negative squared volume, reduced to r dims."""
    anchor, positives, negatives = _check_tuple(anchor, positives, negatives)
    s = anchor.shape[0]
    r = spec.r
    if not (r < min(s, positives.shape[1], negatives.shape[1])):
        raise ContractViolation(
            f"volume loss needs r < min(s, |P|, |N|); got r={r}, s={s}, "
            f"|P|={positives.shape[1]}, |N|={negatives.shape[1]}"
        )
    vol_pos = squared_volume(anchor, positives, r)
    vol_neg = squared_volume(anchor, negatives, r)
    ga_pos, gm_pos = grad_squared_volume(anchor, positives, r)
    ga_neg, gm_neg = grad_squared_volume(anchor, negatives, r)
    return LossOutput(
        value=vol_pos.squared_volume - vol_neg.squared_volume,
        grad_anchor=ga_pos - ga_neg,
        grad_positives=gm_pos,
        grad_negatives=-gm_neg,
        active=True,
    )


def _triplet_terms(anchor, positives, negatives, spec):
    """Shared hinge machinery for the triplet family."""
    j, d_pos = _positive_reference(anchor, positives, spec)
    d_neg = _anchor_sq_dists(anchor, negatives)
    hinges = d_pos - d_neg + spec.margin
    return j, d_pos, hinges


def triplet_loss(anchor, positives, negatives, spec: LossSpec) -> LossOutput:
    """Sum over negatives of hinge(d_pos^2 - d(a,n)^2 + margin)."""
    anchor, positives, negatives = _check_tuple(anchor, positives, negatives)
    j, _, hinges = _triplet_terms(anchor, positives, negatives, spec)
    active = hinges > 0.0
    value = float(hinges[active].sum())
    grad_a = np.zeros_like(anchor)
    grad_p = np.zeros_like(positives)
    grad_n = np.zeros_like(negatives)
    n_active = int(active.sum())
    if n_active:
        ap = anchor - positives[:, j]
        grad_a += 2.0 * n_active * ap
        grad_p[:, j] -= 2.0 * n_active * ap
        an = anchor[:, None] - negatives[:, active]
        grad_a -= 2.0 * an.sum(axis=1)
        grad_n[:, active] = 2.0 * an
    return LossOutput(value, grad_a, grad_p, grad_n, active=n_active > 0)


def lazy_triplet_loss(anchor, positives, negatives, spec: LossSpec) -> LossOutput:
    """Triplet with the sum over negatives replaced by the max; gradient flows
    to the single argmax negative."""
    anchor, positives, negatives = _check_tuple(anchor, positives, negatives)
    j, _, hinges = _triplet_terms(anchor, positives, negatives, spec)
    k = int(np.argmax(hinges))
    value = float(hinges[k])
    grad_a = np.zeros_like(anchor)
    grad_p = np.zeros_like(positives)
    grad_n = np.zeros_like(negatives)
    if value > 0.0:
        ap = anchor - positives[:, j]
        an = anchor - negatives[:, k]
        grad_a = 2.0 * ap - 2.0 * an
        grad_p[:, j] = -2.0 * ap
        grad_n[:, k] = 2.0 * an
        return LossOutput(value, grad_a, grad_p, grad_n, active=True)
    return LossOutput(0.0, grad_a, grad_p, grad_n, active=False)


def _negative_pairs(n: int):
    return [(i, k) for i in range(n) for k in range(i + 1, n)]


def quadruplet_loss(anchor, positives, negatives, spec: LossSpec) -> LossOutput:
    """Triplet term plus hinges pushing mined negative pairs apart.

    Each unordered pair (n_i, n_j) contributes hinge(d_pos^2 - d(n_i,n_j)^2
    + margin2) once.
    """
    anchor, positives, negatives = _check_tuple(anchor, positives, negatives, min_negatives=2)
    base = triplet_loss(anchor, positives, negatives, spec)
    j, d_pos = _positive_reference(anchor, positives, spec)
    value = base.value
    grad_a = base.grad_anchor.copy()
    grad_p = base.grad_positives.copy()
    grad_n = base.grad_negatives.copy()
    ap = anchor - positives[:, j]
    for i, k in _negative_pairs(negatives.shape[1]):
        dn = negatives[:, i] - negatives[:, k]
        hinge = d_pos - float(dn @ dn) + spec.margin2
        if hinge > 0.0:
            value += hinge
            grad_a += 2.0 * ap
            grad_p[:, j] -= 2.0 * ap
            grad_n[:, i] -= 2.0 * dn
            grad_n[:, k] += 2.0 * dn
    return LossOutput(value, grad_a, grad_p, grad_n, active=value > 0.0)


def lazy_quadruplet_loss(anchor, positives, negatives, spec: LossSpec) -> LossOutput:
    """Lazy triplet term plus the max over negative-pair hinges."""
    anchor, positives, negatives = _check_tuple(anchor, positives, negatives, min_negatives=2)
    base = lazy_triplet_loss(anchor, positives, negatives, spec)
    j, d_pos = _positive_reference(anchor, positives, spec)
    pairs = _negative_pairs(negatives.shape[1])
    hinges = []
    for i, k in pairs:
        dn = negatives[:, i] - negatives[:, k]
        hinges.append(d_pos - float(dn @ dn) + spec.margin2)
    best = int(np.argmax(hinges))
    value = base.value
    grad_a = base.grad_anchor.copy()
    grad_p = base.grad_positives.copy()
    grad_n = base.grad_negatives.copy()
    if hinges[best] > 0.0:
        i, k = pairs[best]
        dn = negatives[:, i] - negatives[:, k]
        ap = anchor - positives[:, j]
        value += hinges[best]
        grad_a += 2.0 * ap
        grad_p[:, j] -= 2.0 * ap
        grad_n[:, i] -= 2.0 * dn
        grad_n[:, k] += 2.0 * dn
    return LossOutput(value, grad_a, grad_p, grad_n, active=value > 0.0)


def _huber_slope(t: float, delta: float) -> float:
    return float(np.clip(t, -delta, delta))


def _huber_value(t: float, delta: float) -> float:
    a = abs(t)
    return 0.5 * t * t if a <= delta else delta * (a - 0.5 * delta)


def triplet_distance_loss(
    anchor,
    positives,
    negatives,
    spec: LossSpec,
    anchor_location,
    positive_locations,
) -> LossOutput:
    """Triplet term plus a geometric-distance regularizer on every positive.

    The residual per positive is d(a,p)^2 - geo_scale * geo_distance, passed
    through either the identity (kind "triplet_distance") or a Huber curve
    (kind "triplet_huber") and weighted by `distance_weight`.
    """
    anchor, positives, negatives = _check_tuple(anchor, positives, negatives)
    if anchor_location is None or positive_locations is None:
        raise ContractViolation("locations required for the distance-regularized losses")
    if spec.geo_scale is None:
        raise ContractViolation("geo_scale must be set for the distance-regularized losses")
    positive_locations = np.asarray(positive_locations, dtype=float)
    if positive_locations.shape != (positives.shape[1], 2):
        raise ContractViolation("need one 2-d location per positive")

    out = triplet_loss(anchor, positives, negatives, spec)
    lam = spec.distance_weight
    if lam == 0.0:
        return out
    huber = spec.kind == "triplet_huber"
    anchor_location = np.asarray(anchor_location, dtype=float)
    geo = np.sqrt(((positive_locations - anchor_location) ** 2).sum(axis=1))
    value = out.value
    grad_a = out.grad_anchor.copy()
    grad_p = out.grad_positives.copy()
    for idx in range(positives.shape[1]):
        ap = anchor - positives[:, idx]
        t = float(ap @ ap) - spec.geo_scale * float(geo[idx])
        if huber:
            value += lam * _huber_value(t, spec.huber_delta)
            slope = lam * _huber_slope(t, spec.huber_delta)
        else:
            value += lam * t
            slope = lam
        grad_a += slope * 2.0 * ap
        grad_p[:, idx] -= slope * 2.0 * ap
    return LossOutput(value, grad_a, grad_p, out.grad_negatives, active=value != 0.0)


def compute_loss(
    spec: LossSpec,
    anchor,
    positives,
    negatives,
    anchor_location=None,
    positive_locations=None,
) -> LossOutput:
    """Dispatch on `spec.kind`."""
    if spec.kind == "volume":
        return volume_loss(anchor, positives, negatives, spec)
    if spec.kind == "triplet":
        return triplet_loss(anchor, positives, negatives, spec)
    if spec.kind == "quadruplet":
        return quadruplet_loss(anchor, positives, negatives, spec)
    if spec.kind == "lazy_triplet":
        return lazy_triplet_loss(anchor, positives, negatives, spec)
    if spec.kind == "lazy_quadruplet":
        return lazy_quadruplet_loss(anchor, positives, negatives, spec)
    if spec.kind in ("triplet_distance", "triplet_huber"):
        return triplet_distance_loss(
            anchor, positives, negatives, spec, anchor_location, positive_locations
        )
    raise ConfigurationError(f"unknown loss kind {spec.kind!r}")


def with_geo_scale(spec: LossSpec, r1: float) -> LossSpec:
    """Fill in the default geo scale so radius r1 maps onto the margin."""
    if spec.geo_scale is not None or spec.kind not in ("triplet_distance", "triplet_huber"):
        return spec
    return replace(spec, geo_scale=spec.margin / r1)
