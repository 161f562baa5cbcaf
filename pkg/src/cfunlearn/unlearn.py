"""Teacher-student unlearning with interventional distillation.

The student starts as a copy of the teacher and minimises

    remember + alpha * forget + beta * contrastive + gamma_loss * cross_entropy

where ``remember`` distils the teacher's interventional predictions on the
retain set, ``forget`` pulls the student's interventional prediction on each
forget sample toward the teacher's prediction at its counterfactual, and
``contrastive`` pulls the sample's embedding toward its counterfactual's
embedding and away from retained samples the teacher labels differently.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .counterfactual import (
    CfSearchConfig,
    Counterfactual,
    CounterfactualNotFound,
    find_counterfactual,
    nearest_sibling_counterfactual,
)
from .intervention import InterventionContext, MaskedInstance, build_intervention_context, compute_masks
from .model import (
    ModelParams,
    backward,
    cross_entropy,
    forward_cache,
    kl_divergence,
    make_optimizer,
    predict,
    softmax,
)

logger = logging.getLogger(__name__)

__all__ = [
    "UnlearnConfig",
    "RetainBatch",
    "ForgetBatch",
    "LossBreakdown",
    "UnlearnResult",
    "remember_loss",
    "forget_loss",
    "contrastive_boundary_loss",
    "contrastive_from_embeddings",
    "retain_ce_loss",
    "total_loss",
    "prepare_forget_set",
    "unlearn",
]

FALLBACKS = ("skip", "nearest-sibling-sample")


@dataclass
class UnlearnConfig:
    alpha: float = 0.6
    beta: float = 0.2
    gamma_loss: float = 0.2
    tau: float = 0.5
    n_neg: int = 16
    learning_rate: float = 1e-4
    epochs: int = 5
    batch_size: int = 64
    seed: int = 0
    cf_fallback: str = "nearest-sibling-sample"
    gamma_mix: float = 0.2
    pool_size: int = 32
    optimizer: str = "adam"
    contrastive_reduction: str = "mean"
    resample_pool: bool = False

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ValueError("invalid UnlearnConfig: " + "; ".join(problems))

    def problems(self) -> list[str]:
        out = []
        for name in ("alpha", "beta", "gamma_loss", "gamma_mix"):
            if getattr(self, name) < 0:
                out.append(f"{name} must be non-negative")
        if not self.tau > 0:
            out.append("tau must be positive")
        if self.n_neg < 1 or self.batch_size < 1 or self.pool_size < 1:
            out.append("n_neg, batch_size and pool_size must be positive")
        if self.epochs < 0:
            out.append("epochs must be non-negative")
        if not 0 < self.learning_rate < 1:
            out.append("learning_rate must lie in (0, 1)")
        if self.cf_fallback not in FALLBACKS:
            out.append(f"cf_fallback must be one of {FALLBACKS}")
        if self.contrastive_reduction not in ("mean", "sum"):
            out.append("contrastive_reduction must be 'mean' or 'sum'")
        if self.optimizer not in ("adam", "sgd"):
            out.append("optimizer must be 'adam' or 'sgd'")
        return out

    def replace(self, **changes) -> "UnlearnConfig":
        return UnlearnConfig(**{**asdict(self), **changes})


@dataclass
class RetainBatch:
    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray  # teacher masks, 1 = background

    def __len__(self):
        return len(self.y)


@dataclass
class ForgetBatch:
    """Forget samples with their counterfactuals and negative rows.

    ``negatives`` holds raw feature rows, shape ``(B, n_neg, n)``.
    ``in_forget`` is False for samples excluded from the alignment term.
    """

    x: np.ndarray
    y: np.ndarray
    mask: np.ndarray
    x_cf: np.ndarray
    negatives: np.ndarray
    in_forget: np.ndarray | None = None
    negative_indices: np.ndarray | None = None

    def __post_init__(self):
        if self.in_forget is None:
            self.in_forget = np.ones(len(self.y), dtype=bool)

    def __len__(self):
        return len(self.y)

    @classmethod
    def from_entries(cls, entries: list[tuple[MaskedInstance, Counterfactual, np.ndarray]]) -> "ForgetBatch":
        """Build from ``(masked, counterfactual, negative_rows)`` triples."""
        return cls(
            x=np.vstack([m.x for m, _, _ in entries]),
            y=np.array([m.y for m, _, _ in entries]),
            mask=np.vstack([m.mask for m, _, _ in entries]),
            x_cf=np.vstack([c.x_cf for _, c, _ in entries]),
            negatives=np.stack([np.asarray(n, dtype=float) for _, _, n in entries]),
        )


@dataclass
class LossBreakdown:
    remember: float
    forget: float
    contrastive: float
    ce: float
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


def _add(acc, grads, scale: float = 1.0):
    if acc is None:
        return [g * scale for g in grads]
    for a, g in zip(acc, grads):
        a += g * scale
    return acc


def _interventional(Z_source: np.ndarray, mask: np.ndarray, y, ctx: InterventionContext, k: int) -> np.ndarray:
    z = np.where(mask == 0, Z_source, 0.0)
    return z + ctx.v_bar + ctx.gamma_mix * ctx.z_bar_matrix(k)[np.asarray(y, dtype=int)]


def _remember(teacher, student, batch: RetainBatch, ctx, need_grad: bool):
    k = teacher.num_classes
    x_int = _interventional(batch.x, batch.mask, batch.y, ctx, k)
    p_t = softmax(forward_cache(teacher, x_int).logits)
    cache = forward_cache(student, x_int)
    p_s = softmax(cache.logits)
    value = float(np.mean(kl_divergence(p_t, p_s)))
    if not need_grad:
        return value, None
    grads, _ = backward(student, cache, grad_logits=(p_s - p_t) / len(batch))
    return value, grads


def _forget(teacher, student, batch: ForgetBatch, ctx, need_grad: bool):
    sel = np.flatnonzero(batch.in_forget)
    if not len(sel):
        return 0.0, None
    k = teacher.num_classes
    y = batch.y[sel]
    teacher_in = _interventional(batch.x_cf[sel], batch.mask[sel], y, ctx, k)
    student_in = _interventional(batch.x[sel], batch.mask[sel], y, ctx, k)
    p_t = softmax(forward_cache(teacher, teacher_in).logits)
    cache = forward_cache(student, student_in)
    p_s = softmax(cache.logits)
    value = float(np.mean(kl_divergence(p_t, p_s)))
    if not need_grad:
        return value, None
    grads, _ = backward(student, cache, grad_logits=(p_s - p_t) / len(sel))
    return value, grads


def contrastive_from_embeddings(xi, xi_cf, xi_neg, tau: float, reduction: str = "sum"):
    """Contrastive boundary loss on raw embeddings, with its gradients.

    ``xi`` and ``xi_cf`` are ``(B, d)``, ``xi_neg`` is ``(B, k, d)``.  Each
    sample contributes ``-(1/k) log softmax([xi.xi_cf, xi.xi_neg_1, ...] / tau)[0]``.
    Returns ``(loss, d_xi, d_xi_cf, d_xi_neg)``.
    """
    xi = np.atleast_2d(np.asarray(xi, dtype=float))
    xi_cf = np.atleast_2d(np.asarray(xi_cf, dtype=float))
    xi_neg = np.asarray(xi_neg, dtype=float)
    if xi_neg.ndim == 2:
        xi_neg = xi_neg[None]
    b, k = xi_neg.shape[:2]
    if k < 1:
        raise ValueError("every forget sample needs at least one negative")
    pos = np.einsum("bd,bd->b", xi, xi_cf) / tau
    neg = np.einsum("bkd,bd->bk", xi_neg, xi) / tau
    logits = np.concatenate([pos[:, None], neg], axis=1)
    top = logits.max(axis=1, keepdims=True)
    lse = top[:, 0] + np.log(np.exp(logits - top).sum(axis=1))
    per_sample = (lse - pos) / k
    scale = 1.0 if reduction == "sum" else 1.0 / b
    loss = float(per_sample.sum() * scale)
    w = np.exp(logits - lse[:, None])
    d_pos = (w[:, 0] - 1.0) / k * scale
    d_neg = w[:, 1:] / k * scale
    d_xi = (d_pos[:, None] * xi_cf + np.einsum("bk,bkd->bd", d_neg, xi_neg)) / tau
    d_xi_cf = d_pos[:, None] * xi / tau
    d_xi_neg = d_neg[:, :, None] * xi[:, None, :] / tau
    return loss, d_xi, d_xi_cf, d_xi_neg


def _contrastive(student, batch: ForgetBatch, tau: float, reduction: str, need_grad: bool):
    if not len(batch):
        return 0.0, None
    b, k, n = batch.negatives.shape
    c_x = forward_cache(student, batch.x)
    c_cf = forward_cache(student, batch.x_cf)
    c_neg = forward_cache(student, batch.negatives.reshape(b * k, n))
    xi_neg = c_neg.embedding.reshape(b, k, -1)
    loss, d_xi, d_cf, d_neg = contrastive_from_embeddings(c_x.embedding, c_cf.embedding, xi_neg, tau, reduction)
    if not need_grad:
        return loss, None
    acc = None
    for cache, g in ((c_x, d_xi), (c_cf, d_cf), (c_neg, d_neg.reshape(b * k, -1))):
        grads, _ = backward(student, cache, grad_embedding=g)
        acc = _add(acc, grads)
    return loss, acc


def _ce(student, batch: RetainBatch, need_grad: bool):
    cache = forward_cache(student, batch.x)
    value = float(np.mean(cross_entropy(cache.logits, batch.y)))
    if not need_grad:
        return value, None
    onehot = np.zeros_like(cache.logits)
    onehot[np.arange(len(batch)), batch.y] = 1.0
    grads, _ = backward(student, cache, grad_logits=(softmax(cache.logits) - onehot) / len(batch))
    return value, grads


def remember_loss(teacher, student, retain_batch: RetainBatch, ctx) -> float:
    """Mean KL between teacher and student interventional predictions."""
    if not len(retain_batch):
        raise ValueError("retain batch is empty")
    return _remember(teacher, student, retain_batch, ctx, False)[0]


def forget_loss(teacher, student, forget_batch: ForgetBatch, ctx) -> float:
    """Mean KL(teacher at do(z + delta) || student at do(z)) over the batch."""
    return _forget(teacher, student, forget_batch, ctx, False)[0]


def contrastive_boundary_loss(student, forget_batch: ForgetBatch, tau: float, reduction: str = "sum") -> float:
    return _contrastive(student, forget_batch, tau, reduction, False)[0]


def retain_ce_loss(student, retain_batch: RetainBatch) -> float:
    if not len(retain_batch):
        raise ValueError("retain batch is empty")
    return _ce(student, retain_batch, False)[0]


def total_loss(teacher, student, retain_batch, forget_batch, ctx, config: UnlearnConfig, need_grad: bool = False):
    """Weighted objective and its per-term breakdown.

    Terms whose weight is zero are not evaluated.  With ``need_grad`` the
    student parameter gradients are returned as a second value.
    """
    weights = {"forget": config.alpha, "contrastive": config.beta, "ce": config.gamma_loss}
    values = {"remember": 0.0, "forget": 0.0, "contrastive": 0.0, "ce": 0.0}
    acc = None
    has_forget = forget_batch is not None and len(forget_batch) > 0
    if retain_batch is not None and len(retain_batch):
        values["remember"], g = _remember(teacher, student, retain_batch, ctx, need_grad)
        acc = _add(acc, g) if g is not None else acc
        if weights["ce"]:
            values["ce"], g = _ce(student, retain_batch, need_grad)
            acc = _add(acc, g, weights["ce"]) if g is not None else acc
    if has_forget and weights["forget"]:
        values["forget"], g = _forget(teacher, student, forget_batch, ctx, need_grad)
        acc = _add(acc, g, weights["forget"]) if g is not None else acc
    if has_forget and weights["contrastive"]:
        values["contrastive"], g = _contrastive(
            student, forget_batch, config.tau, config.contrastive_reduction, need_grad
        )
        acc = _add(acc, g, weights["contrastive"]) if g is not None else acc
    total = values["remember"] + sum(weights[k] * values[k] for k in weights)
    out = LossBreakdown(values["remember"], values["forget"], values["contrastive"], values["ce"], total)
    if need_grad:
        if acc is None:
            acc = [np.zeros_like(p) for p in student.params()]
        return out, acc
    return out


@dataclass
class ForgetSet:
    """Forget rows with masks and counterfactual anchors, fixed for a run."""

    indices: np.ndarray
    mask: np.ndarray
    x_cf: np.ndarray
    in_forget: np.ndarray
    counterfactuals: list[Counterfactual]
    not_found: list[int] = field(default_factory=list)


def prepare_forget_set(
    teacher: ModelParams,
    dataset,
    partition,
    config: UnlearnConfig,
    cf_config: CfSearchConfig | None = None,
    cf_cache: dict | None = None,
    search=find_counterfactual,
) -> ForgetSet:
    """Masks and counterfactuals for every forget row, reusing ``cf_cache``."""
    cf_config = cf_config or CfSearchConfig(seed=config.seed)
    forget = np.asarray(partition.forget_indices, dtype=int)
    retain = np.asarray(partition.retain_indices, dtype=int)
    n = dataset.num_features
    if not len(forget):
        return ForgetSet(forget, np.zeros((0, n), np.int8), np.zeros((0, n)), np.zeros(0, bool), [])
    X, y = dataset.features, dataset.labels
    masks = compute_masks(teacher, X[forget], y[forget], dataset.feature_roles)
    cfs, x_cf, use, missing = [], np.empty((len(forget), n)), np.ones(len(forget), bool), []
    for pos, idx in enumerate(forget):
        cf = None if cf_cache is None else cf_cache.get(int(idx))
        if cf is None:
            mi = MaskedInstance.from_mask(X[idx], y[idx], masks[pos])
            sub = CfSearchConfig(cf_config.max_radius, cf_config.radius_steps, cf_config.samples_per_radius,
                                 cf_config.seed + int(idx))
            try:
                cf = search(teacher, mi, dataset.concept_of_class, sub, index=int(idx))
            except CounterfactualNotFound:
                missing.append(int(idx))
                cf = nearest_sibling_counterfactual(dataset, int(idx), retain, masks[pos])
                if config.cf_fallback == "skip":
                    use[pos] = False
        elif cf.fallback and config.cf_fallback == "skip":
            use[pos] = False
        cfs.append(cf)
        x_cf[pos] = cf.x_cf
    if missing:
        logger.info("%d forget samples had no counterfactual; fallback=%s", len(missing), config.cf_fallback)
    return ForgetSet(forget, masks, x_cf, use, cfs, missing)


@dataclass
class UnlearnResult:
    student: ModelParams
    rte_seconds: float
    log: list[dict]
    context: InterventionContext
    forget_set: ForgetSet

    def __iter__(self):
        # allows ``student, rte, log = unlearn(...)``
        return iter((self.student, self.rte_seconds, self.log))


def _negative_sampler(teacher, dataset, retain: np.ndarray):
    preds = predict(teacher, dataset.features[retain]) if len(retain) else np.zeros(0, int)
    pools = {c: retain[preds != c] for c in range(teacher.num_classes)}

    def sample(rng, forget_rows: np.ndarray, k: int) -> np.ndarray:
        own = predict(teacher, dataset.features[forget_rows])
        out = np.empty((len(forget_rows), k), dtype=int)
        for i, c in enumerate(own):
            pool = pools[int(c)]
            if not len(pool):
                raise ValueError("no retained sample is predicted differently from a forget sample")
            out[i] = rng.choice(pool, size=k, replace=len(pool) < k)
        return out

    return sample


def unlearn(
    teacher: ModelParams,
    dataset,
    partition,
    config: UnlearnConfig | None = None,
    cf_cache: dict | None = None,
    cf_config: CfSearchConfig | None = None,
    log_path=None,
    search=find_counterfactual,
) -> UnlearnResult:
    """Produce the unlearned student; the teacher is never modified.

    Counterfactuals are computed once before training (or read from
    ``cf_cache``); the intervention pool is drawn once unless
    ``config.resample_pool``.  Timing covers the whole procedure.
    """
    config = config or UnlearnConfig()
    t0 = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    retain = np.asarray(partition.retain_indices, dtype=int)
    if not len(retain):
        raise ValueError("retain set is empty")
    k = teacher.num_classes
    X, y = dataset.features, dataset.labels

    ctx = build_intervention_context(teacher, dataset, retain, config.gamma_mix, config.pool_size, config.seed)
    retain_masks = compute_masks(teacher, X[retain], y[retain], dataset.feature_roles)
    fs = prepare_forget_set(teacher, dataset, partition, config, cf_config, cf_cache, search)
    sample_negatives = _negative_sampler(teacher, dataset, retain) if len(fs.indices) else None

    student = teacher.copy()
    opt = make_optimizer(config.optimizer, student.params(), config.learning_rate)
    bs = min(config.batch_size, len(retain))
    steps = math.ceil(len(retain) / bs)
    fb = max(1, math.ceil(len(fs.indices) / steps)) if len(fs.indices) else 0
    log = []
    for epoch in range(config.epochs):
        if config.resample_pool and epoch:
            ctx = build_intervention_context(
                teacher, dataset, retain, config.gamma_mix, config.pool_size, config.seed + epoch
            )
        r_order = rng.permutation(len(retain))
        if fb:
            reps = math.ceil(steps * fb / len(fs.indices))
            f_order = np.concatenate([rng.permutation(len(fs.indices)) for _ in range(reps)])
        sums = np.zeros(5)
        for s in range(steps):
            rp = r_order[s * bs:(s + 1) * bs]
            rb = RetainBatch(X[retain[rp]], y[retain[rp]], retain_masks[rp])
            fbatch = None
            if fb:
                fp = f_order[s * fb:(s + 1) * fb]
                rows = fs.indices[fp]
                neg = sample_negatives(rng, rows, config.n_neg)
                fbatch = ForgetBatch(X[rows], y[rows], fs.mask[fp], fs.x_cf[fp], X[neg], fs.in_forget[fp], neg)
            terms, grads = total_loss(teacher, student, rb, fbatch, ctx, config, need_grad=True)
            if not np.isfinite(terms.total):
                raise FloatingPointError(f"unlearning loss became non-finite at epoch {epoch}")
            opt.step(grads)
            sums += [terms.remember, terms.forget, terms.contrastive, terms.ce, terms.total]
        mean = sums / steps
        log.append({
            "epoch": epoch,
            "L_r": float(mean[0]),
            "L_f": float(mean[1]),
            "L_cb": float(mean[2]),
            "ce": float(mean[3]),
            "total": float(mean[4]),
            "elapsed": round(time.perf_counter() - t0, 3),
        })
    rte = round(time.perf_counter() - t0, 3)
    if log_path is not None:
        with Path(log_path).open("w") as fh:
            for row in log:
                fh.write(json.dumps(row) + "\n")
    return UnlearnResult(student, rte, log, ctx, fs)
