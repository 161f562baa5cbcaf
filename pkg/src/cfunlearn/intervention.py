"""Gradient masks and the feature-level approximation of ``P(Y | do(z))``.

An instance is split into a causal part ``z`` (large loss-gradient
coordinates) and a background part ``v`` (the smaller half).  Interventional
predictions replace the instance's own background with a pooled average
``v_bar`` and add a damped average of sibling-class causal parts.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .model import ModelParams, forward, input_gradient

logger = logging.getLogger(__name__)

__all__ = [
    "MaskedInstance",
    "InterventionContext",
    "mask_from_gradient",
    "compute_mask",
    "compute_masks",
    "build_intervention_context",
    "interventional_input",
    "interventional_inputs",
    "interventional_distribution",
]


@dataclass
class MaskedInstance:
    x: np.ndarray
    y: int
    mask: np.ndarray  # 1 marks a background coordinate
    v: np.ndarray
    z: np.ndarray

    @classmethod
    def from_mask(cls, x, y, mask) -> "MaskedInstance":
        x = np.asarray(x, dtype=float)
        mask = np.asarray(mask, dtype=np.int8)
        v = np.where(mask == 1, x, 0.0)
        return cls(x, int(y), mask, v, x - v)


def mask_from_gradient(delta, sensitive=None) -> np.ndarray:
    """Background mask from gradient coordinates.

    The ``ceil(n/2)`` smallest ``|delta|`` coordinates are background, ties
    going to the lower index.  Coordinates flagged in ``sensitive`` are
    always background and push out the largest-magnitude picks.  Accepts a
    vector or a matrix of row-wise gradients.
    """
    d = np.abs(np.asarray(delta, dtype=float))
    single = d.ndim == 1
    D = np.atleast_2d(d)
    n = D.shape[1]
    k = math.ceil(n / 2)
    forced = np.zeros(n, dtype=bool) if sensitive is None else np.asarray(sensitive, dtype=bool)
    if forced.shape != (n,):
        raise ValueError(f"sensitive flags must have length {n}")
    n_forced = int(forced.sum())
    if n_forced > k:
        raise ValueError(f"{n_forced} sensitive coordinates exceed the background budget {k}")
    # stable argsort keeps ascending index among equal magnitudes
    ranked = np.argsort(D, axis=1, kind="stable")
    out = np.zeros(D.shape, dtype=np.int8)
    out[:, forced] = 1
    free = ~forced[ranked]
    need = k - n_forced
    for r in range(D.shape[0]):
        picks = ranked[r][free[r]][:need]
        out[r, picks] = 1
    return out[0] if single else out


def _sensitive_flags(feature_roles, n: int) -> np.ndarray:
    if feature_roles is None:
        return np.zeros(n, dtype=bool)
    if len(feature_roles) != n:
        raise ValueError(f"feature_roles has {len(feature_roles)} tags for {n} features")
    return np.array([r == "sensitive" for r in feature_roles])


def compute_mask(model: ModelParams, x, y, feature_roles=None) -> MaskedInstance:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1 or x.shape[0] != model.input_dim:
        raise ValueError(f"expected a vector of {model.input_dim} features, got shape {x.shape}")
    delta = input_gradient(model, x, int(y))
    mask = mask_from_gradient(delta, _sensitive_flags(feature_roles, x.shape[0]))
    return MaskedInstance.from_mask(x, y, mask)


def compute_masks(model: ModelParams, X, y, feature_roles=None) -> np.ndarray:
    """Row-wise masks for a batch, same rule as :func:`compute_mask`."""
    X = np.asarray(X, dtype=float)
    delta = input_gradient(model, X, np.asarray(y, dtype=int))
    return mask_from_gradient(delta, _sensitive_flags(feature_roles, X.shape[1]))


@dataclass
class InterventionContext:
    v_bar: np.ndarray
    z_bar_by_class: dict[int, np.ndarray]
    pool_size: int
    gamma_mix: float = 0.2
    seed: int = 0
    pool_indices: dict[str, list[int]] = field(default_factory=dict)

    def z_bar_matrix(self, num_classes: int) -> np.ndarray:
        return np.vstack([self.z_bar_by_class.get(c, np.zeros_like(self.v_bar)) for c in range(num_classes)])

    def to_json(self) -> dict:
        return {
            "v_bar": self.v_bar.tolist(),
            "z_bar_by_class": {str(c): v.tolist() for c, v in sorted(self.z_bar_by_class.items())},
            "pool_size": self.pool_size,
            "gamma_mix": self.gamma_mix,
            "seed": self.seed,
            "pool_indices": self.pool_indices,
        }

    @classmethod
    def from_json(cls, d: dict) -> "InterventionContext":
        return cls(
            v_bar=np.asarray(d["v_bar"], dtype=float),
            z_bar_by_class={int(c): np.asarray(v, dtype=float) for c, v in d["z_bar_by_class"].items()},
            pool_size=int(d["pool_size"]),
            gamma_mix=float(d["gamma_mix"]),
            seed=int(d["seed"]),
            pool_indices={k: list(v) for k, v in d.get("pool_indices", {}).items()},
        )

    def dump(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path


def _draw(rng: np.random.Generator, rows: np.ndarray, size: int) -> np.ndarray:
    return rng.choice(rows, size=size, replace=len(rows) < size)


def build_intervention_context(
    model: ModelParams,
    dataset,
    retain_indices,
    gamma_mix: float = 0.2,
    pool_size: int = 32,
    seed: int = 0,
) -> InterventionContext:
    """Pool averages of masked parts, drawn uniformly from the retain set.

    Masks come from ``model`` (the teacher).  ``v_bar`` averages the
    zero-padded background parts of ``pool_size`` retained rows; for each
    class, ``z_bar`` averages the causal parts of ``pool_size`` retained rows
    from its sibling classes, or is zero when there are none.
    """
    if pool_size < 1:
        raise ValueError("pool_size must be at least 1")
    rng = np.random.default_rng(seed)
    retain = np.asarray(retain_indices, dtype=int)
    if not len(retain):
        raise ValueError("retain set is empty")
    X, y = dataset.features, dataset.labels
    roles = dataset.feature_roles

    pool = _draw(rng, retain, pool_size)
    masks = compute_masks(model, X[pool], y[pool], roles)
    v_bar = np.where(masks == 1, X[pool], 0.0).mean(axis=0)
    pools = {"v": pool.tolist()}

    z_bar = {}
    retain_labels = y[retain]
    for c in range(dataset.num_classes):
        sibs = dataset.siblings(c) if c in dataset.concept_of_class else []
        rows = retain[np.isin(retain_labels, sibs)] if sibs else retain[:0]
        if not len(rows):
            if sibs:
                logger.info("class %d: no retained sibling rows, using a zero z_bar", c)
            z_bar[c] = np.zeros(dataset.num_features)
            continue
        picked = _draw(rng, rows, pool_size)
        m = compute_masks(model, X[picked], y[picked], roles)
        z_bar[c] = np.where(m == 0, X[picked], 0.0).mean(axis=0)
        pools[f"z{c}"] = picked.tolist()
    return InterventionContext(v_bar, z_bar, pool_size, float(gamma_mix), int(seed), pools)


def interventional_input(masked: MaskedInstance, ctx: InterventionContext) -> np.ndarray:
    if masked.z.shape != ctx.v_bar.shape:
        raise ValueError(f"instance has {masked.z.shape[0]} features, context {ctx.v_bar.shape[0]}")
    z_bar = ctx.z_bar_by_class.get(masked.y, np.zeros_like(ctx.v_bar))
    return masked.z + ctx.v_bar + ctx.gamma_mix * z_bar


def interventional_inputs(Z: np.ndarray, y: np.ndarray, ctx: InterventionContext, num_classes: int) -> np.ndarray:
    """Batch form: ``Z + v_bar + gamma_mix * z_bar[y]`` row by row."""
    Z = np.asarray(Z, dtype=float)
    if Z.shape[1] != ctx.v_bar.shape[0]:
        raise ValueError(f"rows have {Z.shape[1]} features, context {ctx.v_bar.shape[0]}")
    return Z + ctx.v_bar + ctx.gamma_mix * ctx.z_bar_matrix(num_classes)[np.asarray(y, dtype=int)]


def interventional_distribution(model: ModelParams, masked: MaskedInstance, ctx: InterventionContext) -> np.ndarray:
    return forward(model, interventional_input(masked, ctx))[1]
