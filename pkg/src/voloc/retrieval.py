"""Reference map construction and top-1 nearest-neighbor localization.

The map stores (feature, location, id) entries for the kept reference
samples, optionally after PCA with whitening fitted on those reference
features only (queries are unseen at map-build time and are projected with
the reference statistics). Search is an exact blocked linear scan; at desk
scale this is both fast enough and bit-deterministic.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation
from .geodata import Dataset


@dataclass
class PCAModel:
    mean: np.ndarray  # (s,)
    components: np.ndarray  # (dim, s) orthonormal rows
    scales: np.ndarray  # (dim,) whitening multipliers
    dim: int

    def apply(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        squeeze = features.ndim == 1
        if squeeze:
            features = features[None, :]
        if features.shape[1] != self.mean.shape[0]:
            raise ContractViolation(
                f"PCA expects dim {self.mean.shape[0]}, got {features.shape[1]}"
            )
        out = (features - self.mean) @ self.components.T * self.scales
        return out[0] if squeeze else out


def fit_pca(features, dim: int) -> PCAModel:
    """Mean-centering, top-`dim` principal directions, unit-variance scaling.

    Projected training features have covariance equal to the identity (ddof
    1). Component signs are fixed so the largest-magnitude entry of each
    direction is positive, which keeps fitted models reproducible.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise ContractViolation("PCA expects a 2-d feature matrix")
    n, s = features.shape
    if not (1 <= dim <= min(n - 1, s)):
        raise ContractViolation(
            f"PCA dim {dim} outside [1, min(n-1={n - 1}, s={s})]"
        )
    mean = features.mean(axis=0)
    centered = features - mean
    _, svals, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:dim]
    flip = np.sign(components[np.arange(dim), np.abs(components).argmax(axis=1)])
    flip[flip == 0] = 1.0
    components = components * flip[:, None]
    variances = (svals[:dim] ** 2) / (n - 1)
    if np.any(variances < 1e-30):
        raise ContractViolation("requested PCA dim exceeds the data rank")
    return PCAModel(mean=mean, components=components, scales=1.0 / np.sqrt(variances), dim=dim)


def subsample_references(dataset: Dataset, spacing: float) -> list[int]:
    """Greedy sequence walk: keep a sample only if it is at least `spacing`
    meters from the last kept one. spacing 0 keeps everything."""
    if spacing < 0:
        raise ConfigurationError("spacing must be >= 0")
    kept: list[int] = []
    last = None
    for i in range(len(dataset)):
        loc = dataset.locations[i]
        if last is None or float(np.hypot(*(loc - last))) >= spacing:
            kept.append(i)
            last = loc
    return kept


@dataclass
class ReferenceMap:
    features: np.ndarray  # (m, k), post-PCA when pca is set
    locations: np.ndarray  # (m, 2)
    ids: np.ndarray  # (m,)
    spacing: float
    pca: PCAModel | None = None

    def __post_init__(self):
        if len(self.features) < 1:
            raise ContractViolation("a reference map needs at least one entry")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def project(self, features) -> np.ndarray:
        """Bring raw features into map space (identity when no PCA)."""
        return self.pca.apply(features) if self.pca is not None else np.asarray(features, float)

    def save(self, path) -> None:
        payload = {
            "format": "voloc-map",
            "version": 1,
            "spacing": self.spacing,
            "ids": self.ids.tolist(),
            "locations": self.locations.tolist(),
            "features": self.features.tolist(),
            "pca": None
            if self.pca is None
            else {
                "mean": self.pca.mean.tolist(),
                "components": self.pca.components.tolist(),
                "scales": self.pca.scales.tolist(),
                "dim": self.pca.dim,
            },
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "ReferenceMap":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != "voloc-map":
            raise ConfigurationError(f"{path}: not a reference map file")
        pca = payload["pca"]
        model = None
        if pca is not None:
            model = PCAModel(
                mean=np.asarray(pca["mean"], float),
                components=np.asarray(pca["components"], float),
                scales=np.asarray(pca["scales"], float),
                dim=int(pca["dim"]),
            )
        return cls(
            features=np.asarray(payload["features"], float),
            locations=np.asarray(payload["locations"], float),
            ids=np.asarray(payload["ids"], int),
            spacing=float(payload["spacing"]),
            pca=model,
        )


def build_reference_map(
    references: Dataset,
    embed,
    *,
    dim: int | None = None,
    spacing: float = 0.0,
) -> ReferenceMap:
    """Subsample the reference split, embed it, and optionally whiten.

    `embed` maps (n, d_in) descriptors to (n, s) features. `dim` None skips
    PCA entirely; otherwise it is capped to the feature dimension.
    """
    kept = subsample_references(references, spacing)
    feats = np.asarray(embed(references.descriptors[kept]), dtype=float)
    pca = None
    if dim is not None:
        pca = fit_pca(feats, min(int(dim), feats.shape[1]))
        feats = pca.apply(feats)
    return ReferenceMap(
        features=feats,
        locations=references.locations[kept],
        ids=references.ids[kept],
        spacing=float(spacing),
        pca=pca,
    )


def localize_many(query_features, ref_map: ReferenceMap, *, block: int = 256):
    """Exact nearest neighbor for each query row.

    Returns (locations (q, 2), ids (q,), distances (q,)). Ties on distance go
    to the lowest reference id.
    """
    queries = np.asarray(query_features, dtype=float)
    if queries.ndim == 1:
        queries = queries[None, :]
    if queries.shape[1] != ref_map.dim:
        raise ContractViolation(
            f"query dim {queries.shape[1]} does not match map dim {ref_map.dim}"
        )
    # reorder once so argmin's first-hit tie break is lowest id
    order = np.argsort(ref_map.ids, kind="stable")
    refs = ref_map.features[order]
    out_idx = np.empty(len(queries), dtype=int)
    out_dist = np.empty(len(queries), dtype=float)
    for start in range(0, len(queries), block):
        chunk = queries[start : start + block]
        diff = chunk[:, None, :] - refs[None, :, :]
        d2 = (diff * diff).sum(axis=2)
        best = d2.argmin(axis=1)
        out_idx[start : start + len(chunk)] = order[best]
        out_dist[start : start + len(chunk)] = np.sqrt(d2[np.arange(len(chunk)), best])
    return ref_map.locations[out_idx], ref_map.ids[out_idx], out_dist


def localize(query_feature, ref_map: ReferenceMap):
    """Single-query convenience wrapper around `localize_many`."""
    locs, ids, dists = localize_many(np.asarray(query_feature, float)[None, :], ref_map)
    return locs[0], int(ids[0]), float(dists[0])
