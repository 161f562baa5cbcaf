"""Utility, forgetting, privacy and fairness metrics, plus experiment suites."""

from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .counterfactual import CfSearchConfig
from .datagen import (
    Dataset,
    ScmSpec,
    generate_scm_dataset,
    load_tabular_csv,
    make_deletion,
    scenario_from_dict,
    scenario_tag,
    split_train_test,
)
from .model import ModelParams, TrainConfig, forward_batch, init_model, predict, train_baseline
from .unlearn import UnlearnConfig, unlearn

logger = logging.getLogger(__name__)

__all__ = [
    "MiaAttacker",
    "MetricsReport",
    "ExperimentConfig",
    "remaining_accuracy",
    "forgetting_accuracy",
    "train_mia_attacker",
    "mia_score",
    "disparate_impact",
    "equal_opportunity_difference",
    "semantic_redistribution",
    "retrain_baseline",
    "naive_finetune",
    "random_relabel",
    "ablation_grid",
    "derive_seed",
    "run_experiment",
    "evaluate_model",
    "validate_config",
    "load_dataset",
    "prepare_repetition",
    "load_split",
    "train_teacher",
    "summarize",
    "write_reports",
    "read_reports",
    "plot_data",
    "REPORT_SCHEMA_VERSION",
]

REPORT_SCHEMA_VERSION = 1
FAVORABLE = 1


def _accuracy(model: ModelParams, dataset: Dataset, indices) -> float:
    idx = np.asarray(indices, dtype=int)
    if not len(idx):
        raise ValueError("cannot measure accuracy on an empty index set")
    return float(np.mean(predict(model, dataset.features[idx]) == dataset.labels[idx]))


def remaining_accuracy(model, dataset, retain_indices) -> float:
    return _accuracy(model, dataset, retain_indices)


def forgetting_accuracy(model, dataset, forget_indices) -> float:
    return _accuracy(model, dataset, forget_indices)


def max_confidence(model, X) -> np.ndarray:
    return forward_batch(model, X)[1].max(axis=1)


@dataclass
class MiaAttacker:
    """Flags a row as a training member when max-softmax confidence reaches ``threshold``."""

    threshold: float
    balanced_accuracy: float
    trained_on: tuple[int, int]
    low_power: bool = False

    def predict_member(self, confidences) -> np.ndarray:
        return np.asarray(confidences) >= self.threshold


def _balanced_accuracy(member_conf, nonmember_conf, t) -> float:
    return 0.5 * (np.mean(member_conf >= t) + np.mean(nonmember_conf < t))


def train_mia_attacker(model, member_X, nonmember_X) -> MiaAttacker:
    """Threshold on confidence maximising balanced accuracy (ties: lowest)."""
    member = max_confidence(model, member_X)
    non = max_confidence(model, nonmember_X)
    if not len(member) or not len(non):
        raise ValueError("attacker calibration needs members and non-members")
    cands = np.unique(np.concatenate([member, non]))
    m_sorted, n_sorted = np.sort(member), np.sort(non)
    tpr = 1.0 - np.searchsorted(m_sorted, cands, side="left") / len(member)
    tnr = np.searchsorted(n_sorted, cands, side="left") / len(non)
    bacc = 0.5 * (tpr + tnr)
    best = int(np.argmax(bacc))  # first maximiser = lowest threshold
    low_power = bool(np.isclose(bacc[best], 0.5, atol=1e-12))
    if low_power:
        t = float(np.median(np.concatenate([member, non])))
        return MiaAttacker(t, _balanced_accuracy(member, non, t), (len(member), len(non)), True)
    # keep the threshold inside (0, 1]
    t = float(min(max(cands[best], np.nextafter(0.0, 1.0)), 1.0))
    return MiaAttacker(t, float(bacc[best]), (len(member), len(non)), False)


def mia_score(attacker: MiaAttacker, model, dataset, forget_indices) -> float:
    """Fraction of the forget set the attacker still calls members."""
    idx = np.asarray(forget_indices, dtype=int)
    if not len(idx):
        raise ValueError("forget set is empty")
    return float(np.mean(attacker.predict_member(max_confidence(model, dataset.features[idx]))))


def _groups(model, dataset, eval_indices):
    if dataset.sensitive is None:
        raise ValueError("dataset has no sensitive attribute")
    idx = np.asarray(eval_indices, dtype=int)
    pred = predict(model, dataset.features[idx]) == FAVORABLE
    return pred, dataset.sensitive[idx], dataset.labels[idx]


def disparate_impact_from_predictions(pred, group) -> float | None:
    pred, group = np.asarray(pred, bool), np.asarray(group)
    if not np.any(group == 0) or not np.any(group == 1):
        return None
    priv = pred[group == 1].mean()
    if priv == 0:
        return None
    return float(pred[group == 0].mean() / priv)


def eod_from_predictions(pred, group, labels) -> float | None:
    pred, group, labels = np.asarray(pred, bool), np.asarray(group), np.asarray(labels)
    un = (group == 0) & (labels == FAVORABLE)
    pr = (group == 1) & (labels == FAVORABLE)
    if not un.any() or not pr.any():
        return None
    return float(pred[un].mean() - pred[pr].mean())


def disparate_impact(model, dataset, eval_indices) -> float | None:
    """P(yhat=1 | unprivileged) / P(yhat=1 | privileged); ``None`` when undefined."""
    pred, group, _ = _groups(model, dataset, eval_indices)
    return disparate_impact_from_predictions(pred, group)


def equal_opportunity_difference(model, dataset, eval_indices) -> float | None:
    """TPR(unprivileged) - TPR(privileged); ``None`` when a cell is empty."""
    pred, group, labels = _groups(model, dataset, eval_indices)
    return eod_from_predictions(pred, group, labels)


def semantic_redistribution(model, dataset, forget_indices, concept_of_class=None) -> float:
    """Share of forget rows predicted as a same-concept sibling of their label."""
    concept = dataset.concept_of_class if concept_of_class is None else concept_of_class
    idx = np.asarray(forget_indices, dtype=int)
    if not len(idx):
        raise ValueError("forget set is empty")
    pred = predict(model, dataset.features[idx])
    true = dataset.labels[idx]
    hit = [p != t and concept.get(int(p)) == concept[int(t)] for p, t in zip(pred, true)]
    return float(np.mean(hit))


# -- reference baselines -------------------------------------------------------


def retrain_baseline(dataset, partition, hidden, train_config: TrainConfig, seed: int) -> ModelParams:
    fresh = init_model(dataset.num_features, hidden, dataset.num_classes, seed)
    cfg = TrainConfig(**{**asdict(train_config), "seed": seed})
    return train_baseline(fresh, dataset, cfg, indices=partition.retain_indices)


def naive_finetune(teacher, dataset, partition, config: UnlearnConfig) -> ModelParams:
    cfg = TrainConfig(config.learning_rate, config.epochs, config.batch_size, config.seed, config.optimizer)
    return train_baseline(teacher, dataset, cfg, indices=partition.retain_indices)


def random_relabel(teacher, dataset, partition, config: UnlearnConfig) -> ModelParams:
    """Fine-tune on the retain set plus forget rows carrying random wrong labels."""
    rng = np.random.default_rng(config.seed)
    k = dataset.num_classes
    forget = np.asarray(partition.forget_indices, dtype=int)
    wrong = (dataset.labels[forget] + rng.integers(1, k, size=len(forget))) % k
    idx = np.concatenate([partition.retain_indices, forget])
    labels = np.concatenate([dataset.labels[partition.retain_indices], wrong])
    cfg = TrainConfig(config.learning_rate, config.epochs, config.batch_size, config.seed, config.optimizer)
    return train_baseline(teacher, dataset, cfg, indices=idx, labels=labels)


def ablation_grid() -> dict[str, dict]:
    """The seven loss-term configurations of the ablation table."""
    return {
        "alpha=0": {"alpha": 0.0},
        "beta=0": {"beta": 0.0},
        "gamma=0": {"gamma_loss": 0.0},
        "alpha=0,beta=0": {"alpha": 0.0, "beta": 0.0},
        "alpha=0,gamma=0": {"alpha": 0.0, "gamma_loss": 0.0},
        "beta=0,gamma=0": {"beta": 0.0, "gamma_loss": 0.0},
        "full": {},
    }


# -- reports ----------------------------------------------------------------------


@dataclass
class MetricsReport:
    method: str
    scenario: str
    seed: int
    repetition: int = 0
    ra: float | None = None
    fa: float | None = None
    mia: float | None = None
    rte_seconds: float | None = None
    di: float | None = None
    eod: float | None = None
    redistribution: float | None = None
    test_accuracy: float | None = None
    mia_threshold: float | None = None
    mia_low_power: bool = False
    di_undefined: bool = False
    eod_undefined: bool = False
    cf_not_found: int = 0
    status: str = "ok"

    FIELDS = (
        "method", "scenario", "seed", "repetition", "ra", "fa", "mia", "rte_seconds", "di", "eod",
        "redistribution", "test_accuracy", "mia_threshold", "mia_low_power", "di_undefined",
        "eod_undefined", "cf_not_found", "status",
    )

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in self.FIELDS}

    def comparable(self) -> dict:
        """Every field except wall-clock timing."""
        d = self.as_dict()
        d.pop("rte_seconds")
        return d


def evaluate_model(model, dataset, test, partition, *, method, scenario, seed, repetition=0,
                   rte=None, fairness_on="test", cf_not_found=0) -> MetricsReport:
    forget, retain = partition.forget_indices, partition.retain_indices
    non = test.features
    attacker = train_mia_attacker(model, dataset.features[retain], non)
    rep = MetricsReport(method, scenario, seed, repetition)
    rep.ra = remaining_accuracy(model, dataset, retain)
    rep.fa = forgetting_accuracy(model, dataset, forget)
    rep.mia = mia_score(attacker, model, dataset, forget)
    rep.mia_threshold = attacker.threshold
    rep.mia_low_power = attacker.low_power
    rep.rte_seconds = rte
    rep.redistribution = semantic_redistribution(model, dataset, forget)
    rep.test_accuracy = _accuracy(model, test, np.arange(len(test)))
    rep.cf_not_found = cf_not_found
    if dataset.sensitive is not None and dataset.num_classes == 2:
        ds, idx = (test, np.arange(len(test))) if fairness_on == "test" else (dataset, retain)
        rep.di = disparate_impact(model, ds, idx)
        rep.eod = equal_opportunity_difference(model, ds, idx)
        rep.di_undefined, rep.eod_undefined = rep.di is None, rep.eod is None
    return rep


def write_reports(reports, out_dir, stem: str = "reports") -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = [r.as_dict() for r in reports]
    jpath = out_dir / f"{stem}.json"
    jpath.write_text(json.dumps({"schema_version": REPORT_SCHEMA_VERSION, "reports": rows}, indent=2))
    cpath = out_dir / f"{stem}.csv"
    with cpath.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=MetricsReport.FIELDS)
        w.writeheader()
        w.writerows(rows)
    return jpath, cpath


def read_reports(path) -> list[MetricsReport]:
    blob = json.loads(Path(path).read_text())
    if blob.get("schema_version") != REPORT_SCHEMA_VERSION:
        raise ValueError(f"{path}: unsupported report schema {blob.get('schema_version')!r}")
    return [MetricsReport(**row) for row in blob["reports"]]


def plot_data(reports) -> dict[str, list[tuple]]:
    """``(x, y, series)`` triples for RA versus deletion fraction and DI bars."""
    ra, di = {}, {}
    for r in reports:
        if r.status != "ok":
            continue
        frac = _fraction_of(r.scenario)
        if frac is not None and r.ra is not None:
            ra.setdefault((frac, r.method), []).append(r.ra)
        if r.di is not None:
            di.setdefault((r.scenario, r.method), []).append(r.di)
    return {
        "ra_vs_fraction": [(x, float(np.mean(v)), m) for (x, m), v in sorted(ra.items())],
        "di_bars": [(m, float(np.mean(v)), s) for (s, m), v in sorted(di.items())],
    }


def _fraction_of(tag: str) -> float | None:
    for part in tag[tag.find("(") + 1:-1].split(","):
        if part.startswith("p="):
            return float(part[2:])
    return None


# -- experiment suites -------------------------------------------------------------


METHODS = ("ours", "retrain", "naive-finetune", "random-relabel")


def derive_seed(master: int, *keys: int) -> int:
    """Per-row seed: ``SeedSequence(master, spawn_key=keys)`` squeezed to 31 bits."""
    ss = np.random.SeedSequence(int(master), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint32)[0] >> 1)


@dataclass
class ExperimentConfig:
    """Declarative suite description; see the README for the JSON layout."""

    dataset: dict
    scenarios: list[dict]
    methods: list[str] = field(default_factory=lambda: ["ours", "retrain"])
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    train: dict = field(default_factory=dict)
    retrain: dict | None = None
    unlearn: dict = field(default_factory=dict)
    baseline: dict | None = None
    variants: dict = field(default_factory=dict)
    cf_search: dict = field(default_factory=dict)
    test_fraction: float = 0.2
    repetitions: int = 5
    seed: int = 0
    fairness_on: str = "test"
    output_dir: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        errors = validate_config(d)
        if errors:
            raise ValueError("invalid experiment config:\n  " + "\n  ".join(errors))
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def to_dict(self) -> dict:
        return asdict(self)


def validate_config(d: dict, need_scenarios: bool = True) -> list[str]:
    """Every problem found in a raw config, without doing any work."""
    errors = []
    if not isinstance(d, dict):
        return ["config must be a JSON object"]
    known = set(ExperimentConfig.__dataclass_fields__)
    for k in d:
        if k not in known and not k.startswith("_"):
            errors.append(f"unknown field {k!r}")
    ds = d.get("dataset")
    if ds is None:
        errors.append("missing field 'dataset'")
    elif "scm" in ds:
        try:
            ScmSpec(**ds["scm"]).validate()
        except (TypeError, ValueError) as exc:
            errors.append(f"dataset.scm: {exc}")
    elif "csv" in ds:
        if "path" not in ds["csv"] or "schema" not in ds["csv"]:
            errors.append("dataset.csv needs 'path' and 'schema'")
    else:
        errors.append("dataset needs an 'scm' or 'csv' block")
    if "scenarios" not in d:
        if need_scenarios:
            errors.append("missing field 'scenarios'")
    else:
        for i, s in enumerate(d["scenarios"] or []):
            try:
                scenario_from_dict(s)
            except (ValueError, TypeError) as exc:
                errors.append(f"scenarios[{i}]: {exc}")
        if not d["scenarios"]:
            errors.append("scenarios must not be empty")
    variants = d.get("variants", {}) or {}
    for m in d.get("methods", ["ours", "retrain"]):
        if m not in METHODS and m not in variants:
            errors.append(f"unknown method {m!r}")
    for block in ("train", "retrain"):
        if d.get(block):
            try:
                TrainConfig(**d[block])
            except (TypeError, ValueError) as exc:
                errors.append(f"{block}: {exc}")
    for block in ("unlearn", "baseline"):
        if d.get(block):
            try:
                UnlearnConfig(**d[block])
            except (TypeError, ValueError) as exc:
                errors.append(f"{block}: {exc}")
    for name, over in variants.items():
        try:
            UnlearnConfig(**{**(d.get("unlearn") or {}), **over})
        except (TypeError, ValueError) as exc:
            errors.append(f"variants.{name}: {exc}")
    if d.get("cf_search"):
        try:
            CfSearchConfig(**d["cf_search"])
        except (TypeError, ValueError) as exc:
            errors.append(f"cf_search: {exc}")
    if not 0 < d.get("test_fraction", 0.2) < 1:
        errors.append("test_fraction must lie in (0, 1)")
    if int(d.get("repetitions", 5)) < 1:
        errors.append("repetitions must be at least 1")
    if d.get("fairness_on", "test") not in ("test", "retain"):
        errors.append("fairness_on must be 'test' or 'retain'")
    return errors


def load_dataset(block: dict, seed: int) -> Dataset:
    if "scm" in block:
        return generate_scm_dataset(ScmSpec(**block["scm"]), seed)
    return load_tabular_csv(block["csv"]["path"], block["csv"]["schema"])


def load_split(cfg: ExperimentConfig, rep: int) -> tuple[Dataset, Dataset]:
    """Train/test split of the dataset for one repetition."""
    full = load_dataset(cfg.dataset, derive_seed(cfg.seed, rep, 0))
    return split_train_test(full, cfg.test_fraction, derive_seed(cfg.seed, rep, 1))


def train_teacher(cfg: ExperimentConfig, rep: int, train: Dataset) -> ModelParams:
    teacher_seed = derive_seed(cfg.seed, rep, 2)
    tcfg = TrainConfig(**{**cfg.train, "seed": teacher_seed})
    return train_baseline(init_model(train.num_features, cfg.hidden, train.num_classes, teacher_seed), train, tcfg)


def prepare_repetition(cfg: ExperimentConfig, rep: int):
    """Dataset split and trained teacher for one repetition."""
    train, test = load_split(cfg, rep)
    return train, test, train_teacher(cfg, rep, train)


def run_method(method, cfg, teacher, train, partition, rep, si):
    """Run one method; returns ``(model, rte_seconds, cf_not_found)``."""
    ucfg = UnlearnConfig(**{**cfg.unlearn, "seed": derive_seed(cfg.seed, rep, 3, si)})
    bcfg = UnlearnConfig(**{**cfg.unlearn, **(cfg.baseline or {}), "seed": ucfg.seed})
    cf_cfg = CfSearchConfig(**{**cfg.cf_search, "seed": derive_seed(cfg.seed, rep, 4, si)})
    t0 = time.perf_counter()
    if method == "retrain":
        rcfg = TrainConfig(**(cfg.retrain or cfg.train))
        model = retrain_baseline(train, partition, cfg.hidden, rcfg, derive_seed(cfg.seed, rep, 5, si))
        return model, round(time.perf_counter() - t0, 3), 0
    if method == "naive-finetune":
        model = naive_finetune(teacher, train, partition, bcfg)
        return model, round(time.perf_counter() - t0, 3), 0
    if method == "random-relabel":
        model = random_relabel(teacher, train, partition, bcfg)
        return model, round(time.perf_counter() - t0, 3), 0
    over = {} if method == "ours" else cfg.variants[method]
    res = unlearn(teacher, train, partition, ucfg.replace(**over), cf_config=cf_cfg)
    return res.student, res.rte_seconds, len(res.forget_set.not_found)


def run_experiment(config) -> list[MetricsReport]:
    """Every (repetition, scenario, method) row; failures become tagged rows."""
    cfg = config if isinstance(config, ExperimentConfig) else ExperimentConfig.from_dict(config)
    reports = []
    for rep in range(cfg.repetitions):
        try:
            train, test, teacher = prepare_repetition(cfg, rep)
        except Exception as exc:  # noqa: BLE001 - a broken repetition must not stop the suite
            logger.exception("repetition %d setup failed", rep)
            for sd in cfg.scenarios:
                for m in cfg.methods:
                    reports.append(MetricsReport(m, scenario_tag(scenario_from_dict(sd)), cfg.seed, rep,
                                                 status=f"failed: {type(exc).__name__}: {exc}"))
            continue
        for si, sd in enumerate(cfg.scenarios):
            scenario = scenario_from_dict(sd)
            tag = scenario_tag(scenario)
            try:
                partition = make_deletion(train, scenario, derive_seed(cfg.seed, rep, 6, si))
            except Exception as exc:  # noqa: BLE001
                for m in cfg.methods:
                    reports.append(MetricsReport(m, tag, cfg.seed, rep, status=f"failed: {exc}"))
                continue
            for m in cfg.methods:
                try:
                    model, rte, missing = run_method(m, cfg, teacher, train, partition, rep, si)
                    reports.append(evaluate_model(
                        model, train, test, partition, method=m, scenario=tag, seed=cfg.seed,
                        repetition=rep, rte=rte, fairness_on=cfg.fairness_on, cf_not_found=missing,
                    ))
                except Exception as exc:  # noqa: BLE001
                    logger.exception("%s on %s failed", m, tag)
                    reports.append(MetricsReport(m, tag, cfg.seed, rep, status=f"failed: {type(exc).__name__}: {exc}"))
    reports.sort(key=lambda r: (r.repetition, r.scenario, r.method))
    return reports


def summarize(reports, metric: str) -> dict[tuple[str, str], float]:
    """Mean of ``metric`` per ``(scenario, method)`` over successful rows."""
    acc = {}
    for r in reports:
        v = getattr(r, metric)
        if r.status == "ok" and v is not None:
            acc.setdefault((r.scenario, r.method), []).append(v)
    return {k: float(np.mean(v)) for k, v in acc.items()}
