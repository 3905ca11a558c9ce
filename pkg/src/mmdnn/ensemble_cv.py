"""Subject-level cross-validation, probability-sum ensembles, metrics, experiments."""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .featurize import GROUPS, PROGRESSIVE
from .network import (
    MODALITY_ORDER,
    ConfigurationError,
    Dataset,
    MmdnnParams,
    TrainConfig,
    branch_specs,
    predict_proba,
    train_mmdnn,
)

# Reference values reported for the real cohort; shown beside synthetic results only.
PUBLISHED_REFERENCE = {
    "reproduced": False,
    "note": "real-cohort values, not reproducible on synthetic data",
    "smci_vs_pmci": {
        "MRI": {"accuracy": 75.44, "sensitivity": 77.27, "specificity": 76.19},
        "PET": {"accuracy": 81.53, "sensitivity": 78.20, "specificity": 82.47},
        "PET+MRI": {"accuracy": 82.93, "sensitivity": 79.69, "specificity": 83.84},
    },
    "scale_accuracy": {
        "l1": {"PET": [84.29, 83.76, 83.89, 84.46], "MRI": [81.27, 81.58, 81.01, 81.89]},
        "l2": {"PET": [85.34, 84.80, 84.87, 85.46], "MRI": [82.18, 82.69, 82.10, 82.77]},
        "l3": {"PET": [85.43, 85.28, 84.93, 85.89], "MRI": [81.69, 82.04, 81.64, 82.45]},
        "columns": ["500", "1000", "2000", "multiscale"],
    },
    "composition": {
        "l1": {"PET": [84.46, 79.89, 91.90], "MRI": [81.89, 75.49, 92.30], "PET+MRI": [84.59, 80.17, 91.77]},
        "l2": {"PET": [85.46, 85.01, 86.19], "MRI": [82.77, 79.76, 87.65], "PET+MRI": [85.96, 85.65, 86.45]},
        "l3": {"PET": [85.89, 85.62, 86.32], "MRI": [82.45, 80.23, 86.06], "PET+MRI": [86.44, 86.52, 86.32]},
        "columns": ["accuracy", "sensitivity", "specificity"],
    },
    "horizon_accuracy": {"years": [1, 2, 3], "accuracy": [90.08, 85.61, 81.20]},
}


@dataclass(frozen=True)
class Task:
    negatives: tuple
    positives: tuple
    always_test: tuple = ()

    @property
    def training_groups(self) -> tuple:
        return self.negatives + self.positives


TASKS = {
    "smci-pmci": Task(("sMCI",), ("pMCI",)),
    "l1": Task(("sNC",), ("sAD",), ("pNC", "pMCI")),
    "l2": Task(("sNC",), ("sAD", "pMCI"), ("pNC",)),
    "l3": Task(("sNC",), ("sAD", "pMCI", "pNC")),
}


@dataclass
class ExperimentSpec:
    task: str = "l1"
    modalities: tuple = MODALITY_ORDER
    scales: tuple = (0, 1, 2)
    ensemble_size: int = 10
    n_folds: int = 10
    cfg: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task!r}; choose from {sorted(TASKS)}")
        self.modalities = tuple(m for m in MODALITY_ORDER if m in self.modalities)
        self.scales = tuple(sorted(set(int(s) for s in self.scales)))
        if not self.modalities or not self.scales:
            raise ConfigurationError("modality and scale masks must be non-empty")
        if self.ensemble_size < 1 or self.n_folds < 2:
            raise ConfigurationError("ensemble_size must be >= 1 and n_folds >= 2")
        if isinstance(self.cfg, dict):
            self.cfg = TrainConfig(**self.cfg)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modalities"] = list(self.modalities)
        d["scales"] = list(self.scales)
        return d


# --------------------------------------------------------------------------
# folds


@dataclass
class FoldPlan:
    n_folds: int
    assignment: dict
    seed: int

    def fold_of(self, subject_id: str) -> int:
        return self.assignment[subject_id]

    def fold_sizes(self) -> list[int]:
        return np.bincount(list(self.assignment.values()), minlength=self.n_folds).tolist()


def split_subject_folds(subjects, n_folds: int, seed: int) -> FoldPlan:
    """Group-stratified round-robin over a seeded permutation of subjects.

    ``subjects`` maps subject id to diagnostic group (or is an iterable of
    ids, treated as one group). The round-robin counter carries over
    between groups, so fold sizes differ by at most one overall and within
    every group.
    """
    if not isinstance(subjects, dict):
        subjects = {s: "all" for s in subjects}
    if n_folds < 1 or n_folds > len(subjects):
        raise ValueError(f"n_folds={n_folds} must be in [1, {len(subjects)}]")
    rng = np.random.default_rng(np.random.SeedSequence([seed & (2**64 - 1), 7]))
    order = {g: i for i, g in enumerate(GROUPS)}
    groups = sorted(set(subjects.values()), key=lambda g: (order.get(g, len(order)), g))
    assignment, counter = {}, 0
    for g in groups:
        ids = sorted(s for s, gg in subjects.items() if gg == g)
        for j in rng.permutation(len(ids)):
            assignment[ids[j]] = counter % n_folds
            counter += 1
    return FoldPlan(n_folds, assignment, seed)


def subject_groups(data: Dataset) -> dict:
    return {s: g for s, g in zip(data.subject_ids.tolist(), data.groups.tolist())}


# --------------------------------------------------------------------------
# ensembles


def member_seed(seed: int, *keys) -> int:
    ss = np.random.SeedSequence([seed & (2**64 - 1), *keys])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)


@dataclass
class Member:
    params: MmdnnParams
    val_subjects: list
    val_accuracy: float
    log: dict


def ensemble_partition(train: Dataset, ensemble_size: int, seed: int) -> list[list[str]]:
    """Validation subject subsets, one per member (10% random for a single member)."""
    groups = subject_groups(train)
    if ensemble_size == 1:
        plan = split_subject_folds(groups, min(10, len(groups)), seed)
        return [sorted(s for s, f in plan.assignment.items() if f == 0)]
    plan = split_subject_folds(groups, ensemble_size, seed)
    return [sorted(s for s, f in plan.assignment.items() if f == i) for i in range(ensemble_size)]


def _train_member(args):
    train, i, val_subjects, specs, cfg, seed = args
    is_val = np.isin(train.subject_ids, val_subjects)
    tr, va = train.subset(np.flatnonzero(~is_val)), train.subset(np.flatnonzero(is_val))
    if len(set(tr.labels.tolist())) < 2:
        raise ConfigurationError(f"member {i}: a class is absent from the training portion")
    params, log = train_mmdnn(tr, va, specs, cfg, seed=member_seed(seed, i))
    acc = float(np.mean(predict_proba(params, va.blocks).argmax(axis=1) == va.labels))
    return Member(params, list(val_subjects), acc, log)


def train_ensemble(train: Dataset, spec: ExperimentSpec, specs=None, seed: int | None = None,
                   jobs: int = 1) -> list[Member]:
    """Member ``i`` early-stops on validation subset ``i`` and trains on the rest."""
    seed = spec.seed if seed is None else seed
    if len(set(train.labels.tolist())) < 2:
        raise ConfigurationError("training pool must contain both classes")
    if specs is None:
        n_scales = len(train.blocks) // len(MODALITY_ORDER)
        specs = branch_specs([b.shape[1] for b in train.blocks[:n_scales]])
    subsets = ensemble_partition(train, spec.ensemble_size, seed)
    args = [(train, i, v, specs, spec.cfg, seed) for i, v in enumerate(subsets)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_train_member, args))
    return [_train_member(a) for a in args]


def ensemble_predict(members, blocks):
    """Sum member probability rows; label is the argmax of the sum (ties -> class 0)."""
    if not members:
        raise ConfigurationError("ensemble has no members")
    total = None
    for m in members:
        params = m.params if isinstance(m, Member) else m
        p = predict_proba(params, blocks) if not isinstance(params, np.ndarray) else params
        if total is not None and p.shape != total.shape:
            raise ConfigurationError(f"member output shape {p.shape} != {total.shape}")
        total = p.copy() if total is None else total + p
    return np.argmax(total, axis=1), total


# --------------------------------------------------------------------------
# metrics


@dataclass
class Metrics:
    tp: int
    fp: int
    tn: int
    fn: int
    accuracy: float
    sensitivity: float
    specificity: float

    @property
    def n(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def to_dict(self) -> dict:
        return {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in asdict(self).items()}


def _rate(num, den):
    return num / den if den else float("nan")


def compute_metrics(predictions, truths) -> Metrics:
    """Confusion counts and rates with class 1 as the disease class; undefined rates are NaN."""
    p = np.asarray(predictions).astype(int)
    t = np.asarray(truths).astype(int)
    if p.shape != t.shape:
        raise ValueError(f"predictions {p.shape} and truths {t.shape} differ in length")
    tp = int(np.sum((p == 1) & (t == 1)))
    fp = int(np.sum((p == 1) & (t == 0)))
    tn = int(np.sum((p == 0) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    return Metrics(tp, fp, tn, fn, _rate(tp + tn, tp + tn + fp + fn), _rate(tp, tp + fn), _rate(tn, tn + fp))


HORIZON_BUCKETS = (("0", 0, 0), ("(0,12]", 1, 12), ("(12,24]", 13, 24), ("(24,36]", 25, 36), (">36", 37, None))


def conversion_report(predictions, truths, months_to_conversion) -> list[dict]:
    """Per-bucket detection rate of progressive scans by months to conversion.

    Bucket "0" holds scans at or after conversion; the others are
    right-closed 12-month bands. ``accuracy`` and ``sensitivity`` coincide
    because every progressive scan is a disease-class truth.
    """
    months = np.asarray(months_to_conversion, dtype=float)
    if np.any(np.isnan(months)) or np.any(months < 0):
        raise ValueError("every progressive scan needs a non-negative months_to_conversion")
    p = np.asarray(predictions).astype(int)
    t = np.asarray(truths).astype(int)
    rows = []
    for name, lo, hi in HORIZON_BUCKETS:
        sel = (months >= lo) & ((months <= hi) if hi is not None else True)
        n = int(sel.sum())
        acc = float(np.mean(p[sel] == t[sel])) if n else float("nan")
        sens = float(np.mean(p[sel][t[sel] == 1] == 1)) if np.any(t[sel] == 1) else float("nan")
        rows.append({"bucket": name, "min_months": lo, "max_months": hi, "count": n,
                     "accuracy": None if math.isnan(acc) else acc,
                     "sensitivity": None if math.isnan(sens) else sens})
    return rows


# --------------------------------------------------------------------------
# experiments


def task_labels(groups, task: Task) -> np.ndarray:
    disease = set(task.positives) | set(task.always_test)
    return np.array([g in disease for g in groups], dtype=np.int64)


def select_task_rows(data: Dataset, task: Task) -> Dataset:
    keep = np.flatnonzero(np.isin(data.groups, task.training_groups + task.always_test))
    sub = data.subset(keep)
    sub.labels = task_labels(sub.groups, task)
    return sub


def _subject_metrics(preds: list[dict]) -> Metrics:
    by_subject: dict = {}
    for r in preds:
        by_subject.setdefault(r["subject_id"], []).append(r)
    p, t = [], []
    for rows in by_subject.values():
        p1 = np.mean([r["prob_disease"] for r in rows])
        p.append(int(p1 > 0.5))
        t.append(rows[0]["truth"])
    return compute_metrics(p, t)


def fold_split(data: Dataset, plan: FoldPlan, fold: int, task: Task) -> tuple[Dataset, Dataset]:
    """Training rows: other folds' training-group subjects. Test rows: this fold plus always-test groups."""
    cv_mask = np.isin(data.groups, task.training_groups)
    always_mask = np.isin(data.groups, task.always_test)
    subj_fold = np.array([plan.assignment.get(s, -1) for s in data.subject_ids])
    train_rows = np.flatnonzero(cv_mask & (subj_fold != fold))
    test_rows = np.flatnonzero((cv_mask & (subj_fold == fold)) | always_mask)
    return data.subset(train_rows), data.subset(test_rows)


def fold_log(fold: int, train: Dataset, test: Dataset, members: list, task: Task) -> dict:
    """Predictions and bookkeeping for one fold; the unit the leakage audit reads."""
    labels, summed = ensemble_predict(members, test.blocks)
    probs = summed / len(members)
    preds = []
    for k in range(len(test)):
        preds.append({
            "fold": fold, "subject_id": str(test.subject_ids[k]), "scan_id": str(test.scan_ids[k]),
            "group": str(test.groups[k]),
            "months_to_conversion": None if test.months[k] < 0 else int(test.months[k]),
            "truth": int(test.labels[k]), "prediction": int(labels[k]),
            "prob_disease": float(probs[k, 1]),
            "cross_validated": bool(test.groups[k] in task.training_groups),
        })
    cv = [r for r in preds if r["cross_validated"]]
    return {
        "fold": fold,
        "train_subjects": sorted(set(train.subject_ids.tolist())),
        "test_subjects": sorted(set(test.subject_ids.tolist())),
        "train_scans": sorted(zip(train.scan_ids.tolist(), train.subject_ids.tolist())),
        "test_scans": sorted(zip(test.scan_ids.tolist(), test.subject_ids.tolist())),
        "member_val_accuracy": [m.val_accuracy for m in members],
        "member_val_subjects": [m.val_subjects for m in members],
        "confusion": compute_metrics([r["prediction"] for r in cv], [r["truth"] for r in cv]).to_dict(),
        "predictions": preds,
    }


def prepare_task_data(data: Dataset, spec: ExperimentSpec) -> tuple[Dataset, list]:
    """Restrict to the task's groups and masked blocks; returns the data and its branch specs."""
    task = TASKS[spec.task]
    present = set(data.groups.tolist())
    missing = [g for g in task.training_groups + task.always_test if g not in present]
    if missing:
        raise ConfigurationError(f"task {spec.task} needs groups absent from the cohort: {missing}")
    data = select_task_rows(data, task)
    specs = _specs_for(data, spec)
    data = Dataset([data.blocks[i] for i in _block_index(data, spec)], data.labels, data.subject_ids,
                   data.scan_ids, data.groups, data.months)
    return data, specs


def task_fold_plan(data: Dataset, spec: ExperimentSpec) -> FoldPlan:
    cv_mask = np.isin(data.groups, TASKS[spec.task].training_groups)
    cv_subjects = {s: g for s, g, m in zip(data.subject_ids, data.groups, cv_mask) if m}
    return split_subject_folds(cv_subjects, spec.n_folds, spec.seed)


def fold_members_seed(spec: ExperimentSpec, fold: int) -> int:
    return member_seed(spec.seed, 100, fold)


@dataclass
class ExperimentReport:
    spec: dict
    folds: list
    metrics: dict
    subject_metrics: dict
    progressive: dict
    horizon: list
    published_reference: dict = field(default_factory=lambda: PUBLISHED_REFERENCE)

    def to_dict(self) -> dict:
        return asdict(self)

    def predictions(self) -> list[dict]:
        return [p for f in self.folds for p in f["predictions"]]


def run_experiment(data: Dataset, spec: ExperimentSpec, plan: FoldPlan | None = None,
                   jobs: int = 1, progress=None) -> ExperimentReport:
    """Cross-validate an ensemble on the task's training groups.

    Each fold trains on the other folds' training-group subjects and tests
    on its own held-out subjects plus every always-test subject. Headline
    metrics pool the cross-validated scans (each tested exactly once);
    always-test scans are pooled across folds in their own block.
    """
    task = TASKS[spec.task]
    data, specs = prepare_task_data(data, spec)
    plan = plan or task_fold_plan(data, spec)
    folds = []
    for fold in range(plan.n_folds):
        train, test = fold_split(data, plan, fold, task)
        members = train_ensemble(train, spec, specs, seed=fold_members_seed(spec, fold), jobs=jobs)
        folds.append(fold_log(fold, train, test, members, task))
        if progress:
            progress(fold, folds[-1])
    return summarize(spec, folds)


# Feature blocks arrive in full canonical order (volume s0..s2, pet s0..s2);
# masks pick the subset in the same order.
def _block_index(data: Dataset, spec: ExperimentSpec) -> list[int]:
    n_scales = len(data.blocks) // len(MODALITY_ORDER)
    return [mi * n_scales + s for mi, m in enumerate(MODALITY_ORDER) if m in spec.modalities
            for s in spec.scales]


def _specs_for(data: Dataset, spec: ExperimentSpec):
    n_scales = len(data.blocks) // len(MODALITY_ORDER)
    if max(spec.scales) >= n_scales:
        raise ConfigurationError(f"scale mask {spec.scales} exceeds the {n_scales} available scales")
    n_patches = [data.blocks[s].shape[1] for s in range(n_scales)]
    return branch_specs(n_patches, spec.modalities, spec.scales)


def summarize(spec: ExperimentSpec, folds: list) -> ExperimentReport:
    preds = [p for f in folds for p in f["predictions"]]
    cv = [p for p in preds if p["cross_validated"]]
    always = [p for p in preds if not p["cross_validated"]]

    def m(rows):
        return compute_metrics([r["prediction"] for r in rows], [r["truth"] for r in rows]).to_dict()

    prog = [p for p in preds if p["group"] in PROGRESSIVE]
    metrics = {"cross_validated": m(cv), "always_test": m(always), "all_test": m(preds)}
    progressive = m(prog)
    horizon = conversion_report([p["prediction"] for p in prog], [p["truth"] for p in prog],
                                [p["months_to_conversion"] for p in prog]) if prog else []
    return ExperimentReport(
        spec=spec.to_dict(), folds=folds, metrics=metrics,
        subject_metrics={"cross_validated": _subject_metrics(cv).to_dict()},
        progressive=progressive, horizon=horizon,
    )


def audit_leakage(report) -> list[str]:
    """Problems found in fold logs; empty when no subject or scan crosses sides."""
    folds = report.folds if isinstance(report, ExperimentReport) else report["folds"]
    problems = []
    for f in folds:
        overlap = set(f["train_subjects"]) & set(f["test_subjects"])
        if overlap:
            problems.append(f"fold {f['fold']}: subjects on both sides: {sorted(overlap)[:5]}")
        train_subj = {subj for _, subj in f["train_scans"]}
        test_subj = {subj for _, subj in f["test_scans"]}
        if train_subj & test_subj:
            problems.append(f"fold {f['fold']}: scans of one subject on both sides")
        for p in f["predictions"]:
            if p["subject_id"] in f["train_subjects"]:
                problems.append(f"fold {f['fold']}: tested scan {p['scan_id']} belongs to a training subject")
    return problems
