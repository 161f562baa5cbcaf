"""Counterfactual search restricted to causal coordinates.

A growing-sphere search: a fixed bundle of random rays, supported only on
the causal (mask 0) coordinates, is walked outward radius by radius until
some ray crosses into a permitted target class.  The crossing is then
tightened by bisection along each successful ray.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .intervention import MaskedInstance
from .model import ModelParams, predict

__all__ = [
    "Counterfactual",
    "CfSearchConfig",
    "CounterfactualNotFound",
    "allowed_targets",
    "find_counterfactual",
    "find_counterfactuals",
    "validate_counterfactual",
    "nearest_sibling_counterfactual",
    "save_cf_cache",
    "load_cf_cache",
]

BISECTION_STEPS = 10


class CounterfactualNotFound(LookupError):
    def __init__(self, index, reason: str = "no flip within max_radius"):
        super().__init__(f"sample {index}: {reason}")
        self.index = index
        self.reason = reason


@dataclass
class CfSearchConfig:
    max_radius: float = 6.0
    radius_steps: int = 60
    samples_per_radius: int = 256
    seed: int = 0

    def __post_init__(self):
        if not self.max_radius > 0:
            raise ValueError("max_radius must be positive")
        if self.radius_steps < 1 or self.samples_per_radius < 1:
            raise ValueError("radius_steps and samples_per_radius must be at least 1")


@dataclass
class Counterfactual:
    x_cf: np.ndarray
    delta: np.ndarray
    source_class: int
    cf_class: int
    l2_cost: float
    degenerate: bool = False
    fallback: bool = False
    index: int | None = None
    stats: dict = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "index": self.index,
            "delta": self.delta.tolist(),
            "source_class": self.source_class,
            "cf_class": self.cf_class,
            "l2_cost": self.l2_cost,
            "degenerate": self.degenerate,
            "fallback": self.fallback,
            "stats": self.stats,
        }


def allowed_targets(source_class: int, concept_of_class: dict) -> list[int]:
    """Same-concept siblings, or every other class when the concept is a singleton."""
    u = concept_of_class[source_class]
    sibs = [c for c, v in sorted(concept_of_class.items()) if v == u and c != source_class]
    if sibs:
        return sibs
    return [c for c in sorted(concept_of_class) if c != source_class]


def find_counterfactual(
    teacher: ModelParams,
    masked: MaskedInstance,
    concept_of_class: dict,
    cfg: CfSearchConfig,
    index=None,
) -> Counterfactual:
    """Smallest causal-only perturbation that moves the teacher to a sibling class.

    Raises :class:`CounterfactualNotFound` when no ray flips within
    ``cfg.max_radius``.  A sample the teacher already misclassifies gets a
    degenerate counterfactual with zero delta.
    """
    x = masked.x
    pred = int(predict(teacher, x))
    if pred != masked.y:
        return Counterfactual(x.copy(), np.zeros_like(x), masked.y, pred, 0.0, degenerate=True, index=index)
    targets = np.array(allowed_targets(masked.y, concept_of_class))
    causal = np.flatnonzero(masked.mask == 0)
    if not len(causal):
        raise CounterfactualNotFound(index, "no causal coordinates to perturb")

    rng = np.random.default_rng(cfg.seed)
    rays = rng.standard_normal((cfg.samples_per_radius, len(causal)))
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    dirs = np.zeros((cfg.samples_per_radius, x.shape[0]))
    dirs[:, causal] = rays

    radii = cfg.max_radius * np.arange(1, cfg.radius_steps + 1) / cfg.radius_steps
    evaluations = 0
    for step, r in enumerate(radii):
        hit = np.isin(predict(teacher, x + r * dirs), targets)
        evaluations += len(dirs)
        if hit.any():
            break
    else:
        raise CounterfactualNotFound(index)

    u = dirs[hit]
    lo = np.zeros(len(u))
    hi = np.full(len(u), r)
    for _ in range(BISECTION_STEPS):
        mid = 0.5 * (lo + hi)
        ok = np.isin(predict(teacher, x + mid[:, None] * u), targets)
        evaluations += len(u)
        hi = np.where(ok, mid, hi)
        lo = np.where(ok, lo, mid)
    best = int(np.argmin(hi))
    delta = hi[best] * u[best]
    x_cf = x + delta
    return Counterfactual(
        x_cf=x_cf,
        delta=delta,
        source_class=masked.y,
        cf_class=int(predict(teacher, x_cf)),
        l2_cost=float(np.linalg.norm(delta)),
        index=index,
        stats={"radius": float(r), "radius_step": step, "rays_hit": int(hit.sum()), "evaluations": evaluations},
    )


def find_counterfactuals(
    teacher: ModelParams,
    masked: list[MaskedInstance],
    concept_of_class: dict,
    cfg: CfSearchConfig,
    indices=None,
    search: Callable = find_counterfactual,
) -> tuple[list[Counterfactual | None], list[int]]:
    """Run ``search`` per instance; seeds are offset by position so results
    do not depend on processing order.  Returns the counterfactuals (``None``
    where none was found) and the indices that failed."""
    indices = list(range(len(masked))) if indices is None else list(indices)
    out, missing = [], []
    for pos, (m, idx) in enumerate(zip(masked, indices)):
        sub = CfSearchConfig(cfg.max_radius, cfg.radius_steps, cfg.samples_per_radius, cfg.seed + int(idx))
        try:
            out.append(search(teacher, m, concept_of_class, sub, index=int(idx)))
        except CounterfactualNotFound:
            out.append(None)
            missing.append(int(idx))
    return out, missing


def validate_counterfactual(teacher: ModelParams, cf: Counterfactual, masked: MaskedInstance, concept_of_class: dict):
    """Check support, flip and concept constraints; returns ``(ok, violations)``."""
    violations = []
    if np.any(cf.delta[masked.mask == 1] != 0):
        violations.append("delta-outside-causal-support")
    if not np.allclose(masked.x + cf.delta, cf.x_cf, rtol=0, atol=1e-12):
        violations.append("x_cf-inconsistent-with-delta")
    before = int(predict(teacher, masked.x))
    after = int(predict(teacher, cf.x_cf))
    if after == before:
        violations.append("no-flip")
    if after != cf.cf_class:
        violations.append("cf-class-mismatch")
    if after != before and after not in allowed_targets(cf.source_class, concept_of_class):
        violations.append("cross-concept-target")
    return not violations, violations


def nearest_sibling_counterfactual(dataset, index: int, candidate_rows, mask=None) -> Counterfactual:
    """Fallback: the closest retained row from an allowed target class.

    Distance is measured on the causal coordinates when ``mask`` is given.
    """
    x = dataset.features[index]
    y = int(dataset.labels[index])
    targets = allowed_targets(y, dataset.concept_of_class)
    rows = np.asarray(candidate_rows, dtype=int)
    rows = rows[np.isin(dataset.labels[rows], targets)]
    if not len(rows):
        raise CounterfactualNotFound(index, "no candidate rows from a target class")
    diff = dataset.features[rows] - x
    if mask is not None:
        diff = diff[:, np.asarray(mask) == 0]
    j = rows[int(np.argmin(np.einsum("ij,ij->i", diff, diff)))]
    x_cf = dataset.features[j].copy()
    delta = x_cf - x
    return Counterfactual(
        x_cf, delta, y, int(dataset.labels[j]), float(np.linalg.norm(delta)),
        fallback=True, index=int(index), stats={"neighbor": int(j)},
    )


def save_cf_cache(cfs, path) -> Path:
    """One JSON object per line; ``None`` entries are skipped."""
    path = Path(path)
    with path.open("w") as fh:
        for cf in cfs:
            if cf is not None:
                fh.write(json.dumps(cf.to_record()) + "\n")
    return path


def load_cf_cache(path, dataset) -> dict[int, Counterfactual]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if not line.strip():
            continue
        rec = json.loads(line)
        idx = int(rec["index"])
        delta = np.asarray(rec["delta"], dtype=float)
        out[idx] = Counterfactual(
            x_cf=dataset.features[idx] + delta,
            delta=delta,
            source_class=int(rec["source_class"]),
            cf_class=int(rec["cf_class"]),
            l2_cost=float(rec["l2_cost"]),
            degenerate=bool(rec.get("degenerate", False)),
            fallback=bool(rec.get("fallback", False)),
            index=idx,
            stats=rec.get("stats", {}),
        )
    return out
