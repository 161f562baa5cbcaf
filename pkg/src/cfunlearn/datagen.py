"""Synthetic causal datasets, CSV ingestion and deletion partitions.

The generator draws each row from a small structural model: a class ``Y``, its
concept ``U``, a background domain ``B`` whose distribution may depend on
``Y`` (the shortcut), causal coordinates built from the class mean, the
concept offset and a leak of a sibling class mean, and background
coordinates built from the background mean.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Union

import numpy as np
import pandas as pd

__all__ = [
    "ScmSpec",
    "Dataset",
    "Partition",
    "Uniform",
    "FullClass",
    "SelectiveClass",
    "SelectiveGroup",
    "Scenario",
    "DataError",
    "generate_scm_dataset",
    "load_tabular_csv",
    "save_dataset_csv",
    "make_deletion",
    "split_train_test",
    "scenario_from_dict",
    "scenario_to_dict",
]

ROLES = ("causal", "background", "sensitive")
OTHER = "__other__"


class DataError(ValueError):
    pass


@dataclass
class ScmSpec:
    """Knobs of the synthetic generator.

    ``privileged_rate`` switches on a binary sensitive attribute stored in the
    last background coordinate as ``2s - 1``; ``sensitive_shortcut`` is the
    probability that it is copied from ``Y == K-1`` instead of drawn
    independently.
    """

    num_concepts: int = 2
    classes_per_concept: list[int] = field(default_factory=lambda: [3, 3])
    causal_dim: int = 4
    background_dim: int = 4
    num_backgrounds: int = 4
    shortcut_strength: float = 0.0
    class_priors: list[float] | None = None
    sibling_mix: float = 0.3
    noise_std: float = 1.0
    samples: int = 3000
    class_separation: float = 2.0
    concept_separation: float = 3.0
    background_separation: float = 2.0
    privileged_rate: float | None = None
    sensitive_shortcut: float = 0.0

    def __post_init__(self):
        self.classes_per_concept = [int(c) for c in self.classes_per_concept]
        if self.class_priors is None:
            k = self.num_classes if self.classes_per_concept else 0
            self.class_priors = [1.0 / k] * k if k else []
        self.class_priors = [float(p) for p in self.class_priors]

    @property
    def num_classes(self) -> int:
        return sum(self.classes_per_concept)

    def validate(self) -> None:
        problems = []
        if self.num_concepts < 1:
            problems.append("num_concepts must be positive")
        if len(self.classes_per_concept) != self.num_concepts:
            problems.append(
                f"classes_per_concept has {len(self.classes_per_concept)} entries "
                f"for {self.num_concepts} concepts"
            )
        if any(c < 1 for c in self.classes_per_concept):
            problems.append("every concept needs at least one class")
        for name in ("causal_dim", "background_dim", "num_backgrounds", "samples"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be positive")
        if not 0.0 <= self.shortcut_strength <= 1.0:
            problems.append("shortcut_strength must lie in [0, 1]")
        if not 0.0 <= self.sibling_mix <= 1.0:
            problems.append("sibling_mix must lie in [0, 1]")
        if not self.noise_std > 0:
            problems.append("noise_std must be positive")
        priors = np.asarray(self.class_priors, dtype=float)
        if len(priors) != self.num_classes:
            problems.append(f"class_priors has {len(priors)} entries for {self.num_classes} classes")
        elif np.any(priors < 0) or abs(priors.sum() - 1.0) > 1e-9:
            problems.append("class_priors must be non-negative and sum to 1")
        if self.privileged_rate is not None and not 0.0 < self.privileged_rate < 1.0:
            problems.append("privileged_rate must lie in (0, 1)")
        if not 0.0 <= self.sensitive_shortcut <= 1.0:
            problems.append("sensitive_shortcut must lie in [0, 1]")
        if problems:
            raise DataError("invalid ScmSpec: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    concept_of_class: dict[int, int]
    sensitive: np.ndarray | None = None
    background_id: np.ndarray | None = None
    feature_roles: list[str] | None = None
    feature_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=float)
        self.labels = np.asarray(self.labels, dtype=int)
        self.concept_of_class = {int(k): int(v) for k, v in self.concept_of_class.items()}
        if self.features.ndim != 2 or len(self.features) != len(self.labels):
            raise DataError("features must be an N x n matrix with one label per row")
        if len(self.labels) and self.labels.min() < 0:
            raise DataError("labels must be non-negative class indices")
        missing = set(np.unique(self.labels).tolist()) - set(self.concept_of_class)
        if missing:
            raise DataError(f"concept_of_class does not cover labels {sorted(missing)}")
        if self.sensitive is not None:
            self.sensitive = np.asarray(self.sensitive, dtype=int)
            if self.sensitive.shape != self.labels.shape or not np.isin(self.sensitive, (0, 1)).all():
                raise DataError("sensitive must be a binary vector aligned with the rows")
        if self.background_id is not None:
            self.background_id = np.asarray(self.background_id, dtype=int)
        if self.feature_roles is not None:
            if len(self.feature_roles) != self.num_features or set(self.feature_roles) - set(ROLES):
                raise DataError(f"feature_roles must tag each of {self.num_features} columns with {ROLES}")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def num_features(self) -> int:
        return self.features.shape[1]

    @property
    def num_classes(self) -> int:
        return max(self.concept_of_class) + 1

    def siblings(self, cls: int) -> list[int]:
        """Other classes sharing ``cls``'s concept."""
        u = self.concept_of_class[int(cls)]
        return [c for c, v in sorted(self.concept_of_class.items()) if v == u and c != cls]

    def sensitive_mask(self) -> np.ndarray:
        if self.feature_roles is None:
            return np.zeros(self.num_features, dtype=bool)
        return np.array([r == "sensitive" for r in self.feature_roles])

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=int)
        return Dataset(
            features=self.features[idx],
            labels=self.labels[idx],
            concept_of_class=dict(self.concept_of_class),
            sensitive=None if self.sensitive is None else self.sensitive[idx],
            background_id=None if self.background_id is None else self.background_id[idx],
            feature_roles=None if self.feature_roles is None else list(self.feature_roles),
            feature_names=None if self.feature_names is None else list(self.feature_names),
        )


# -- scenarios ---------------------------------------------------------------


def _check_fraction(p: float) -> None:
    if not 0.0 < p <= 1.0:
        raise DataError(f"deletion fraction must lie in (0, 1], got {p}")


@dataclass(frozen=True)
class Uniform:
    p: float

    def __post_init__(self):
        _check_fraction(self.p)


@dataclass(frozen=True)
class FullClass:
    classes: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "classes", tuple(int(c) for c in self.classes))
        if not self.classes:
            raise DataError("FullClass needs at least one class")


@dataclass(frozen=True)
class SelectiveClass:
    cls: int
    p: float

    def __post_init__(self):
        _check_fraction(self.p)


@dataclass(frozen=True)
class SelectiveGroup:
    value: int
    p: float

    def __post_init__(self):
        _check_fraction(self.p)
        if self.value not in (0, 1):
            raise DataError("SelectiveGroup value must be 0 (unprivileged) or 1 (privileged)")


Scenario = Union[Uniform, FullClass, SelectiveClass, SelectiveGroup]


def scenario_to_dict(s: Scenario) -> dict:
    if isinstance(s, Uniform):
        return {"kind": "uniform", "p": s.p}
    if isinstance(s, FullClass):
        return {"kind": "full_class", "classes": list(s.classes)}
    if isinstance(s, SelectiveClass):
        return {"kind": "selective_class", "class": s.cls, "p": s.p}
    if isinstance(s, SelectiveGroup):
        return {"kind": "selective_group", "value": s.value, "p": s.p}
    raise TypeError(f"not a scenario: {s!r}")


def scenario_from_dict(d: dict) -> Scenario:
    kind = d.get("kind")
    try:
        if kind == "uniform":
            return Uniform(float(d["p"]))
        if kind == "full_class":
            return FullClass(tuple(d["classes"]))
        if kind == "selective_class":
            return SelectiveClass(int(d["class"]), float(d["p"]))
        if kind == "selective_group":
            return SelectiveGroup(int(d.get("value", 0)), float(d["p"]))
    except KeyError as exc:
        raise DataError(f"scenario {kind!r} is missing field {exc.args[0]!r}") from None
    raise DataError(f"unknown scenario kind {kind!r}")


def scenario_tag(s: Scenario) -> str:
    d = scenario_to_dict(s)
    rest = ",".join(f"{k}={v}" for k, v in d.items() if k != "kind")
    return f"{d['kind']}({rest})"


@dataclass
class Partition:
    forget_indices: np.ndarray
    retain_indices: np.ndarray
    scenario: Scenario | None = None

    def __post_init__(self):
        self.forget_indices = np.asarray(self.forget_indices, dtype=int)
        self.retain_indices = np.asarray(self.retain_indices, dtype=int)
        if np.intersect1d(self.forget_indices, self.retain_indices).size:
            raise DataError("forget and retain sets overlap")

    def to_dict(self) -> dict:
        return {
            "forget_indices": self.forget_indices.tolist(),
            "retain_indices": self.retain_indices.tolist(),
            "scenario": None if self.scenario is None else scenario_to_dict(self.scenario),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Partition":
        sc = d.get("scenario")
        return cls(d["forget_indices"], d["retain_indices"], None if sc is None else scenario_from_dict(sc))


def make_deletion(dataset: Dataset, scenario: Scenario, seed: int = 0) -> Partition:
    """Choose the rows to forget under ``scenario``; the rest are retained."""
    rng = np.random.default_rng(seed)
    n = len(dataset)
    if isinstance(scenario, Uniform):
        pool = np.arange(n)
        count = math.floor(scenario.p * n)
    elif isinstance(scenario, FullClass):
        absent = [c for c in scenario.classes if not np.any(dataset.labels == c)]
        if absent:
            raise DataError(f"classes {absent} do not occur in the dataset")
        pool = np.flatnonzero(np.isin(dataset.labels, scenario.classes))
        count = len(pool)
    elif isinstance(scenario, SelectiveClass):
        pool = np.flatnonzero(dataset.labels == scenario.cls)
        if not len(pool):
            raise DataError(f"class {scenario.cls} does not occur in the dataset")
        count = math.floor(scenario.p * len(pool))
    elif isinstance(scenario, SelectiveGroup):
        if dataset.sensitive is None:
            raise DataError("SelectiveGroup needs a dataset with a sensitive attribute")
        pool = np.flatnonzero(dataset.sensitive == scenario.value)
        if not len(pool):
            raise DataError(f"no rows with sensitive={scenario.value}")
        count = math.floor(scenario.p * len(pool))
    else:
        raise TypeError(f"not a scenario: {scenario!r}")
    if count == len(pool):
        forget = pool
    else:
        forget = np.sort(rng.choice(pool, size=count, replace=False))
    retain = np.setdiff1d(np.arange(n), forget)
    if not len(forget):
        raise DataError(f"{scenario_tag(scenario)} selects no rows to forget")
    if not len(retain):
        raise DataError(f"{scenario_tag(scenario)} leaves nothing to retain")
    return Partition(forget, retain, scenario)


def split_train_test(dataset: Dataset, test_fraction: float, seed: int = 0) -> tuple[Dataset, Dataset]:
    """Stratified split; every class keeps at least one row on each side."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(dataset.labels):
        rows = np.flatnonzero(dataset.labels == c)
        if len(rows) < 2:
            raise DataError(f"class {c} has {len(rows)} row(s); stratified split needs at least 2")
        k = min(max(int(round(test_fraction * len(rows))), 1), len(rows) - 1)
        rows = rng.permutation(rows)
        test.append(rows[:k])
        train.append(rows[k:])
    tr, te = np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
    return dataset.subset(tr), dataset.subset(te)


# -- generation ----------------------------------------------------------------


def generate_scm_dataset(spec: ScmSpec, seed: int = 0) -> Dataset:
    spec.validate()
    rng = np.random.default_rng(seed)
    k, dc, db = spec.num_classes, spec.causal_dim, spec.background_dim
    concept_of_class = {}
    c = 0
    for u, count in enumerate(spec.classes_per_concept):
        for _ in range(count):
            concept_of_class[c] = u
            c += 1
    parent = np.array([concept_of_class[i] for i in range(k)])

    concept_offset = spec.concept_separation * rng.standard_normal((spec.num_concepts, dc))
    class_mean = spec.class_separation * rng.standard_normal((k, dc))
    bg_mean = spec.background_separation * rng.standard_normal((spec.num_backgrounds, db))

    n = spec.samples
    y = rng.choice(k, size=n, p=np.asarray(spec.class_priors))
    # P(B | Y): uniform mixed with a point mass on the background tied to Y
    tied = y % spec.num_backgrounds
    use_tied = rng.random(n) < spec.shortcut_strength
    b = np.where(use_tied, tied, rng.integers(0, spec.num_backgrounds, size=n))

    sib = np.empty(n, dtype=int)
    has_sib = np.zeros(n, dtype=bool)
    for cls in range(k):
        rows = np.flatnonzero(y == cls)
        options = [j for j in range(k) if parent[j] == parent[cls] and j != cls]
        if options and len(rows):
            sib[rows] = rng.choice(options, size=len(rows))
            has_sib[rows] = True
        else:
            sib[rows] = cls
    leak = np.where(has_sib[:, None], class_mean[sib], 0.0)
    causal = (
        class_mean[y]
        + concept_offset[parent[y]]
        + spec.sibling_mix * leak
        + spec.noise_std * rng.standard_normal((n, dc))
    )
    background = bg_mean[b] + spec.noise_std * rng.standard_normal((n, db))
    roles = ["causal"] * dc + ["background"] * db
    sensitive = None
    if spec.privileged_rate is not None:
        s = (rng.random(n) < spec.privileged_rate).astype(int)
        copy = rng.random(n) < spec.sensitive_shortcut
        sensitive = np.where(copy, (y == k - 1).astype(int), s)
        background[:, -1] = 2.0 * sensitive - 1.0
        roles[-1] = "sensitive"
    X = np.hstack([causal, background])
    names = [f"z{i}" for i in range(dc)] + [f"v{i}" for i in range(db)]
    if sensitive is not None:
        names[-1] = "sensitive"
    return Dataset(X, y, concept_of_class, sensitive, b, roles, names)


# -- CSV ingestion / export ----------------------------------------------------


def _read_schema(schema) -> dict:
    if isinstance(schema, (str, Path)):
        return json.loads(Path(schema).read_text())
    return dict(schema)


def load_tabular_csv(path, schema) -> Dataset:
    """Read a CSV whose columns are described by ``schema``.

    Schema keys: ``label`` (column name, or ``{"column", "favorable"}`` for a
    binary label), ``sensitive`` (``{"column", "privileged"}``), ``numeric``,
    ``categorical`` (names, or ``{"name", "categories"}`` to pin the
    vocabulary), optional ``background`` column list, ``standardize``
    (default true), ``sensitive_as_feature`` (default true) and
    ``concept_of_class``.  Categorical values outside the vocabulary land in
    a reserved ``other`` slot.
    """
    schema = _read_schema(schema)
    path = Path(path)
    if not path.exists():
        raise DataError(f"{path}: file not found")
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skipinitialspace=True)
    except pd.errors.EmptyDataError:
        raise DataError(f"{path}: file is empty") from None
    if df.empty:
        raise DataError(f"{path}: no data rows")

    label_spec = schema.get("label")
    if label_spec is None:
        raise DataError("schema must name a label column")
    if isinstance(label_spec, str):
        label_spec = {"column": label_spec}
    sens_spec = schema.get("sensitive")
    if isinstance(sens_spec, str):
        sens_spec = {"column": sens_spec}
    numeric = list(schema.get("numeric", []))
    categorical = [c if isinstance(c, dict) else {"name": c} for c in schema.get("categorical", [])]
    wanted = [label_spec["column"], *numeric, *(c["name"] for c in categorical)]
    if sens_spec:
        wanted.append(sens_spec["column"])
    missing = [c for c in wanted if c not in df.columns]
    if missing:
        raise DataError(f"{path}: missing columns {missing}")

    raw_label = df[label_spec["column"]].str.strip()
    if "favorable" in label_spec:
        labels = (raw_label == str(label_spec["favorable"])).astype(int).to_numpy()
    else:
        num = pd.to_numeric(raw_label, errors="coerce")
        if num.isna().any() or (num % 1 != 0).any() or (num < 0).any():
            bad = int(np.flatnonzero(num.isna().to_numpy() | (num % 1 != 0).to_numpy())[0])
            raise DataError(f"{path}: label column needs non-negative integers (row {bad}: {raw_label.iloc[bad]!r})")
        labels = num.astype(int).to_numpy()

    standardize = schema.get("standardize", True)
    background = set(schema.get("background", []))
    cols, roles, names = [], [], []
    for name in numeric:
        vals = pd.to_numeric(df[name].str.strip(), errors="coerce")
        if vals.isna().any():
            bad = int(np.flatnonzero(vals.isna().to_numpy())[0])
            raise DataError(f"{path}: column {name!r} row {bad} is not numeric: {df[name].iloc[bad]!r}")
        v = vals.to_numpy(dtype=float)
        if standardize:
            sd = v.std()
            v = (v - v.mean()) / (sd if sd > 0 else 1.0)
        cols.append(v)
        roles.append("background" if name in background else "causal")
        names.append(name)
    for spec in categorical:
        name = spec["name"]
        values = df[name].str.strip()
        vocab = [str(c) for c in spec.get("categories", sorted(values.unique()))]
        for cat in [*vocab, OTHER]:
            hit = values.isin(vocab) if cat == OTHER else values == cat
            col = (~hit if cat == OTHER else hit).to_numpy(dtype=float)
            cols.append(col)
            roles.append("background" if name in background else "causal")
            names.append(f"{name}={cat}")

    sensitive = None
    if sens_spec:
        raw = df[sens_spec["column"]].str.strip()
        if "privileged" in sens_spec:
            sensitive = (raw == str(sens_spec["privileged"])).astype(int).to_numpy()
        else:
            num = pd.to_numeric(raw, errors="coerce")
            if num.isna().any() or not num.isin([0, 1]).all():
                raise DataError(f"{path}: sensitive column {sens_spec['column']!r} must be 0/1 or name a privileged value")
            sensitive = num.astype(int).to_numpy()
        if schema.get("sensitive_as_feature", True):
            cols.append(2.0 * sensitive - 1.0)
            roles.append("sensitive")
            names.append(sens_spec["column"])
    if not cols:
        raise DataError("schema selects no feature columns")

    if "concept_of_class" in schema:
        concept = {int(k): int(v) for k, v in schema["concept_of_class"].items()}
    else:
        # no class-level concepts for plain tabular labels
        concept = {int(c): int(c) for c in range(int(labels.max()) + 1)}
    bg_id = None
    if "background_id" in schema:
        bg_id = pd.to_numeric(df[schema["background_id"]]).to_numpy(dtype=int)
    if "feature_roles" in schema:
        roles = list(schema["feature_roles"])
    return Dataset(np.column_stack(cols), labels, concept, sensitive, bg_id, roles, names)


def save_dataset_csv(dataset: Dataset, path) -> tuple[Path, Path]:
    """Write ``path`` plus a ``.schema.json`` sidecar that reloads it exactly."""
    path = Path(path)
    names = dataset.feature_names or [f"x{i}" for i in range(dataset.num_features)]
    roles = dataset.feature_roles or ["causal"] * dataset.num_features
    df = pd.DataFrame({nm: dataset.features[:, i] for i, nm in enumerate(names)})
    df["label"] = dataset.labels
    schema = {
        "label": "label",
        "numeric": list(names),
        "standardize": False,
        "sensitive_as_feature": False,
        "feature_roles": list(roles),
        "concept_of_class": {str(k): v for k, v in dataset.concept_of_class.items()},
    }
    if dataset.sensitive is not None:
        df["group"] = dataset.sensitive
        schema["sensitive"] = {"column": "group"}
    if dataset.background_id is not None:
        df["background_id"] = dataset.background_id
        schema["background_id"] = "background_id"
    df.to_csv(path, index=False, float_format="%.17g")
    sidecar = path.with_suffix(".schema.json")
    sidecar.write_text(json.dumps(schema, indent=2))
    return path, sidecar
