"""Parallelotope squared volumes of feature sets and their gradients.

Given an anchor a and member vectors s_1..s_p (columns of `members`), the
difference matrix D = S - a 1^T spans a p-parallelotope whose squared volume
is det(D^T D), the product of the Gram eigenvalues. The reduced form keeps
only the r largest eigenvalues; it equals the maximum squared volume over
all r-dimensional orthogonal projections of the difference set, so it is the
natural low-dimensional surrogate. The nonzero spectrum of D^T D (p x p) and
D D^T (s x s) coincides, so either side may be diagonalized; the smaller one
is cheap even when p or s is large.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, NumericError

EPS_RANK = 1e-10
DEGENERATE_GAP = 1e-8


@dataclass
class VolumeResult:
    """Squared volume plus the (descending) eigenvalues it was built from."""

    squared_volume: float
    eigenvalues: np.ndarray
    rank_deficient: bool


def _as_columns(anchor, members) -> tuple[np.ndarray, np.ndarray]:
    anchor = np.asarray(anchor, dtype=float)
    members = np.asarray(members, dtype=float)
    if members.ndim == 1:
        members = members[:, None]
    if anchor.ndim != 1 or members.ndim != 2 or members.shape[0] != anchor.shape[0]:
        raise ContractViolation(
            f"shape mismatch: anchor {anchor.shape}, members {members.shape}"
        )
    if members.shape[1] < 1:
        raise ContractViolation("need at least one member vector")
    if not (np.all(np.isfinite(anchor)) and np.all(np.isfinite(members))):
        raise NumericError("non-finite anchor or member values")
    return anchor, members


def gram(anchor, members) -> np.ndarray:
    """Gram matrix (S - a)^T (S - a) of the anchor-relative member vectors."""
    anchor, members = _as_columns(anchor, members)
    diff = members - anchor[:, None]
    return diff.T @ diff


def _check_r(r: int, p: int, s: int) -> int:
    r = int(r)
    if not (1 <= r <= min(p, s)):
        raise ContractViolation(f"r={r} outside [1, min(p={p}, s={s})]")
    return r


def _descending_clamped_eigs(mat: np.ndarray) -> np.ndarray:
    # Gram matrices are PSD up to roundoff; clamp stray negatives.
    vals = np.linalg.eigvalsh(mat)[::-1]
    return np.maximum(vals, 0.0)


def squared_volume(anchor, members, r: int | None = None) -> VolumeResult:
    """Squared parallelotope volume of `members` relative to `anchor`.

    With `r` absent this is det of the Gram matrix (product of all p
    eigenvalues); with `r` given, the product of the r largest eigenvalues.
    """
    anchor, members = _as_columns(anchor, members)
    p = members.shape[1]
    diff = members - anchor[:, None]
    eigs = _descending_clamped_eigs(diff.T @ diff)
    used = eigs if r is None else eigs[: _check_r(r, p, anchor.shape[0])]
    return VolumeResult(
        squared_volume=float(np.prod(used)),
        eigenvalues=used.copy(),
        rank_deficient=bool(np.any(used < EPS_RANK)),
    )


def squared_volume_small_side(anchor, members, r: int) -> VolumeResult:
    """Same value as `squared_volume`, via the smaller of D^T D and D D^T."""
    anchor, members = _as_columns(anchor, members)
    s, p = members.shape
    r = _check_r(r, p, s)
    diff = members - anchor[:, None]
    small = diff @ diff.T if s < p else diff.T @ diff
    eigs = _descending_clamped_eigs(small)[: min(p, s)]
    used = eigs[:r]
    return VolumeResult(
        squared_volume=float(np.prod(used)),
        eigenvalues=used.copy(),
        rank_deficient=bool(np.any(used < EPS_RANK)),
    )


def grad_squared_volume(
    anchor, members, r: int | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of the squared volume w.r.t. the anchor and each member.

    Full-determinant case: d det(G) = det(G) tr(G^-1 dG), assembled through
    the eigendecomposition so the det * G^-1 product stays finite. Top-r
    case: eigenvalue perturbation d lambda_i = u_i^T dG u_i gives the adjoint
    M = sum_i (V^2 / lambda_i) u_i u_i^T over the r kept eigenpairs; the
    projector form is well defined for repeated eigenvalues inside the kept
    block. If the kept/dropped boundary is degenerate (lambda_r within
    DEGENERATE_GAP of lambda_{r+1}) the Gram diagonal is jittered once to
    pick a branch. A rank-deficient spectrum (used eigenvalue below
    EPS_RANK) returns zero gradients: in the clamped model the volume sits
    at zero and is treated as stationary.
    """
    anchor, members = _as_columns(anchor, members)
    s, p = members.shape
    diff = members - anchor[:, None]
    g = diff.T @ diff

    vals, vecs = np.linalg.eigh(g)
    vals = np.maximum(vals[::-1], 0.0)
    vecs = vecs[:, ::-1]

    if r is None:
        used = vals
        basis = vecs
    else:
        r = _check_r(r, p, s)
        if r < p and (vals[r - 1] - vals[r]) < DEGENERATE_GAP:
            jitter = DEGENERATE_GAP * np.arange(p, 0, -1)
            vals, vecs = np.linalg.eigh(g + np.diag(jitter))
            vals = np.maximum(vals[::-1], 0.0)
            vecs = vecs[:, ::-1]
        used = vals[:r]
        basis = vecs[:, :r]

    if np.any(used < EPS_RANK):
        return np.zeros(s), np.zeros((s, p))

    vol2 = float(np.prod(used))
    adjoint = (basis * (vol2 / used)) @ basis.T
    grad_members = 2.0 * diff @ adjoint
    grad_anchor = -grad_members.sum(axis=1)
    return grad_anchor, grad_members
