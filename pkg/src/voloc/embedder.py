"""Learnable descriptor-to-feature embedding with manual backpropagation.

Two desk-scale architectures stand in for a convolutional backbone: a plain
linear map and a one-hidden-layer tanh MLP (the architecture toggle mirrors
the pooled-vs-flattened contrast at toy scale). Outputs are always projected
to the unit sphere; the normalization Jacobian (I - f f^T)/||u|| is part of
the backward pass, so gradient flow in the radial direction vanishes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .errors import ConfigurationError, ContractViolation, DegenerateEmbedding

_MIN_NORM = 1e-12
CHECKPOINT_FORMAT = "voloc-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class EmbedderSpec:
    architecture: str = "linear"  # "linear" or "mlp"
    d_in: int = 16
    s: int = 8
    hidden: int = 32
    seed: int = 0
    normalize_output: bool = True

    def __post_init__(self):
        if self.architecture not in ("linear", "mlp"):
            raise ConfigurationError(f"unknown architecture {self.architecture!r}")
        if self.s < 2:
            raise ConfigurationError("output dimension s must be >= 2")
        if self.d_in < 1:
            raise ConfigurationError("d_in must be >= 1")
        if self.hidden < 1:
            raise ConfigurationError("hidden width must be >= 1")
        if not self.normalize_output:
            raise ConfigurationError("normalize_output is always true for this embedder")


class Embedder:
    """Feature map with explicit forward/backward passes.

    Parameters live in `self.params` (name -> array) so optimizers, finite
    difference checks, and checkpoints can treat them uniformly.
    """

    def __init__(self, spec: EmbedderSpec, params: dict[str, np.ndarray]):
        self.spec = spec
        self.params = params

    @classmethod
    def initialize(cls, spec: EmbedderSpec) -> "Embedder":
        rng = np.random.default_rng(spec.seed)

        def glorot(rows, cols):
            limit = 1.0 / np.sqrt(cols)
            return rng.uniform(-limit, limit, size=(rows, cols))

        if spec.architecture == "linear":
            params = {"W": glorot(spec.s, spec.d_in), "b": np.zeros(spec.s)}
        else:
            params = {
                "W1": glorot(spec.hidden, spec.d_in),
                "b1": np.zeros(spec.hidden),
                "W2": glorot(spec.s, spec.hidden),
                "b2": np.zeros(spec.s),
            }
        return cls(spec, params)

    def _pre_norm(self, x: np.ndarray) -> tuple[np.ndarray, dict]:
        if self.spec.architecture == "linear":
            u = x @ self.params["W"].T + self.params["b"]
            return u, {"x": x}
        z1 = x @ self.params["W1"].T + self.params["b1"]
        h = np.tanh(z1)
        u = h @ self.params["W2"].T + self.params["b2"]
        return u, {"x": x, "h": h}

    def forward(self, x) -> tuple[np.ndarray, dict]:
        """Map (n, d_in) descriptors to (n, s) unit features; keep activations."""
        x = np.asarray(x, dtype=float)
        squeeze = x.ndim == 1
        if squeeze:
            x = x[None, :]
        if x.shape[1] != self.spec.d_in:
            raise ContractViolation(f"expected descriptors of dim {self.spec.d_in}")
        u, cache = self._pre_norm(x)
        norms = np.linalg.norm(u, axis=1)
        if np.any(norms < _MIN_NORM):
            raise DegenerateEmbedding("pre-normalization output collapsed to zero norm")
        f = u / norms[:, None]
        cache.update({"f": f, "norms": norms, "squeeze": squeeze})
        return (f[0] if squeeze else f), cache

    def embed(self, x) -> np.ndarray:
        """Forward pass without retaining activations."""
        f, _ = self.forward(x)
        return f

    def backward(self, cache: dict, grad_f) -> dict[str, np.ndarray]:
        """Gradients of a scalar loss w.r.t. parameters given dL/d(features)."""
        grad_f = np.asarray(grad_f, dtype=float)
        if cache.get("squeeze") and grad_f.ndim == 1:
            grad_f = grad_f[None, :]
        f, norms, x = cache["f"], cache["norms"], cache["x"]
        if grad_f.shape != f.shape:
            raise ContractViolation("stale activations: gradient shape mismatch")
        radial = (grad_f * f).sum(axis=1, keepdims=True)
        du = (grad_f - f * radial) / norms[:, None]
        if self.spec.architecture == "linear":
            return {"W": du.T @ x, "b": du.sum(axis=0)}
        h = cache["h"]
        dW2 = du.T @ h
        db2 = du.sum(axis=0)
        dh = du @ self.params["W2"]
        dz1 = dh * (1.0 - h * h)
        return {"W1": dz1.T @ x, "b1": dz1.sum(axis=0), "W2": dW2, "b2": db2}

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # flat views for finite-difference tests and hashing
    def get_vector(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in sorted(self.params)])

    def set_vector(self, vec: np.ndarray) -> None:
        i = 0
        for k in sorted(self.params):
            n = self.params[k].size
            self.params[k] = np.asarray(vec[i : i + n], dtype=float).reshape(
                self.params[k].shape
            )
            i += n

    def save(self, path) -> None:
        payload = {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "spec": asdict(self.spec),
            "params": {k: self.params[k].tolist() for k in sorted(self.params)},
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)

    @classmethod
    def load(cls, path) -> "Embedder":
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ConfigurationError(f"{path}: not a checkpoint file")
        if payload.get("version") != CHECKPOINT_VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version")
        spec = EmbedderSpec(**payload["spec"])
        params = {k: np.asarray(v, dtype=float) for k, v in payload["params"].items()}
        return cls(spec, params)


class Adam:
    """Standard Adam with bias correction; steps are skipped (and reported)
    when a gradient is non-finite."""

    def __init__(self, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> bool:
        """Apply one update in place; returns False if the step was aborted."""
        for g in grads.values():
            if not np.all(np.isfinite(g)):
                return False
        self.t += 1
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = self.beta1 * self.m[k] + (1 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1 - self.beta2) * g * g
            m_hat = self.m[k] / (1 - self.beta1**self.t)
            v_hat = self.v[k] / (1 - self.beta2**self.t)
            params[k] = params[k] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)
        return True
