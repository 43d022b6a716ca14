"""Teacher/student training loops.

All loops use plain mini-batch gradient descent with two independent random
streams: one for the teacher warm-up and one for the joint mini-batch order.
A step on batch ``B`` minimises the weighted batch mean
``(1/|B|) sum_{i in B} w_i L_i``; unweighted training runs the same code with
``w = 1`` so that forcing unit weights is bit-identical to the unweighted loop.

Influence weights are refreshed once per outer iteration (``repeats`` times
per run), each followed by ``max_steps`` joint steps.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import LabeledSet
from .errors import DivergenceError, InputError, SolverError
from .influence import InfluenceReport, IhvpSolverConfig, complete_report, influence_scores, normalize_scores
from .model import Net, Objective, batch_metrics, forward, loss_ce, mixed_targets, one_hot, student_objective

log = logging.getLogger(__name__)

DIVERGENCE_LOSS = 1e6

KD_BASELINE = "KD_BASELINE"
M1_STUDENT_ONLY = "M1_STUDENT_ONLY"
M2_TEACHER_ONLY = "M2_TEACHER_ONLY"
M3_BOTH = "M3_BOTH"
M4_BOTH_HISTORY = "M4_BOTH_HISTORY"
MECHANISMS = (KD_BASELINE, M1_STUDENT_ONLY, M2_TEACHER_ONLY, M3_BOTH, M4_BOTH_HISTORY)
SHORT_NAMES = {"baseline": KD_BASELINE, "m1": M1_STUDENT_ONLY, "m2": M2_TEACHER_ONLY, "m3": M3_BOTH, "m4": M4_BOTH_HISTORY}


@dataclass
class TrainConfig:
    alpha: float = 0.6
    lr_teacher: float = 0.1
    lr_student: float = 0.1
    max_steps: int = 100
    batch_size: int = 64
    damping: float = 1e-3
    seed: int = 0
    l2_reg: float = 1e-3
    repeats: int = 5
    warm_steps: int | None = None
    solver: str = "dense_solve"
    cg_max_iters: int = 2000
    cg_tol: float = 1e-10

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise InputError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.lr_teacher < 0 or self.lr_student < 0:
            raise InputError("learning rates must be nonnegative")
        if self.max_steps < 1 or self.batch_size < 1 or self.repeats < 1:
            raise InputError("max_steps, batch_size and repeats must be positive")
        if self.damping < 0 or self.l2_reg < 0:
            raise InputError("damping and l2_reg must be nonnegative")

    @property
    def warmup(self) -> int:
        return self.max_steps // 2 if self.warm_steps is None else self.warm_steps

    def solver_config(self) -> IhvpSolverConfig:
        return IhvpSolverConfig(self.solver, self.cg_max_iters, self.cg_tol, self.damping)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Mechanism:
    kind: str = M3_BOTH
    repeats: int | None = None
    history_decay: float = 0.5

    def __post_init__(self):
        self.kind = SHORT_NAMES.get(self.kind, self.kind)
        if self.kind not in MECHANISMS:
            raise InputError(f"unknown mechanism {self.kind!r}")
        if self.repeats is not None and self.repeats < 1:
            raise InputError("repeats must be at least 1")
        if not 0.0 < self.history_decay <= 1.0:
            raise InputError("history_decay must lie in (0, 1]")

    @property
    def weights_teacher(self) -> bool:
        return self.kind in (M2_TEACHER_ONLY, M3_BOTH, M4_BOTH_HISTORY)

    @property
    def weights_student(self) -> bool:
        return self.kind in (M1_STUDENT_ONLY, M3_BOTH, M4_BOTH_HISTORY)

    @property
    def freezes_teacher(self) -> bool:
        return self.kind == M1_STUDENT_ONLY


@dataclass
class DistillationRun:
    mode: str
    teacher: Net
    student: Net
    config: dict
    mechanism: str | None = None
    teacher_trajectory: list = field(default_factory=list)
    student_trajectory: list = field(default_factory=list)
    reports: list = field(default_factory=list)
    metrics: list = field(default_factory=list)

    def final_metric(self, key: str) -> float:
        return self.metrics[-1][key]


class BatchSampler:
    """Epoch-wise shuffled mini-batches from a seeded generator."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise InputError("cannot sample batches from an empty set")
        self.n = n
        self.batch_size = min(batch_size, n)
        self.rng = rng
        self._perm = np.empty(0, dtype=np.int64)
        self._pos = 0

    def next(self) -> np.ndarray:
        if self._pos + self.batch_size > self._perm.size:
            self._perm = self.rng.permutation(self.n)
            self._pos = 0
        idx = self._perm[self._pos : self._pos + self.batch_size]
        self._pos += self.batch_size
        return idx


def _streams(seed: int):
    return np.random.default_rng([seed, 0]), np.random.default_rng([seed, 1])


def _step(net: Net, X, targets, weights, lr: float, l2_reg: float, who: str, step: int):
    obj = Objective(net.spec, X, targets, weights, l2_reg)
    value = obj.value(net.params)
    if not np.isfinite(value) or value > DIVERGENCE_LOSS:
        raise DivergenceError(
            f"{who} loss {value:.3g} diverged at step {step}",
            {"model": who, "step": step, "loss": float(value), "lr": lr},
        )
    net.params = net.params - lr * obj.grad(net.params)


def train_supervised(net: Net, data: LabeledSet, steps: int, lr: float, batch_size: int,
                     rng: np.random.Generator, l2_reg: float = 0.0, weights=None) -> Net:
    """Plain cross-entropy mini-batch training (in place); returns ``net``."""
    if steps <= 0:
        return net
    w = np.ones(len(data)) if weights is None else np.asarray(weights, dtype=np.float64)
    targets = one_hot(data.y, net.spec.n_classes)
    sampler = BatchSampler(len(data), batch_size, rng)
    for s in range(steps):
        idx = sampler.next()
        _step(net, data.X[idx], targets[idx], w[idx], lr, l2_reg, "supervised", s)
    return net


def _evaluate(teacher: Net, student: Net, splits: dict, iteration: int, step: int) -> dict:
    row = {"iteration": iteration, "step": step}
    for name, split in splits.items():
        if split is None or len(split) == 0:
            continue
        for who, net in (("teacher", teacher), ("student", student)):
            acc, loss = batch_metrics(net.spec, net.params, split.X, split.y)
            row[f"{who}_{name}_acc"] = acc
            row[f"{who}_{name}_loss"] = loss
    train = splits["train"]
    row["kd_train"] = loss_ce(forward(teacher.spec, teacher.params, train.X), forward(student.spec, student.params, train.X))
    for k, v in row.items():
        if not np.isfinite(v):
            raise DivergenceError(f"metric {k} is not finite", {"iteration": iteration})
    return row


def _record(run: DistillationRun, splits, iteration, step):
    run.teacher_trajectory.append(run.teacher.params.copy())
    run.student_trajectory.append(run.student.params.copy())
    run.metrics.append(_evaluate(run.teacher, run.student, splits, iteration, step))


def _prepare(teacher: Net, student: Net, config: TrainConfig, train: LabeledSet):
    if teacher.spec.n_classes != student.spec.n_classes:
        raise InputError("teacher and student class counts differ")
    teacher, student = teacher.copy(), student.copy()
    warm_rng, batch_rng = _streams(config.seed)
    train_supervised(teacher, train, config.warmup, config.lr_teacher, config.batch_size, warm_rng, config.l2_reg)
    return teacher, student, BatchSampler(len(train), config.batch_size, batch_rng)


def _joint_steps(teacher: Net, student: Net, train: LabeledSet, sampler: BatchSampler, config: TrainConfig,
                 w_teacher, w_student, update_teacher: bool, step0: int):
    K = student.spec.n_classes
    for s in range(config.max_steps):
        idx = sampler.next()
        X, y = train.X[idx], train.y[idx]
        if update_teacher:
            t_targets = mixed_targets(y, forward(student.spec, student.params, X), config.alpha, K)
            _step(teacher, X, t_targets, w_teacher[idx], config.lr_teacher, config.l2_reg, "teacher", step0 + s)
        # student always sees the freshly updated teacher
        s_targets = mixed_targets(y, forward(teacher.spec, teacher.params, X), config.alpha, K)
        _step(student, X, s_targets, w_student[idx], config.lr_student, config.l2_reg, "student", step0 + s)
    return step0 + config.max_steps


def _splits(train, val, test):
    return {"train": train, "val": val, "test": test}


def train_vanilla_kd(teacher: Net, student: Net, train: LabeledSet, config: TrainConfig,
                     val: LabeledSet | None = None, test: LabeledSet | None = None) -> DistillationRun:
    """Frozen (warmed-up) teacher, student trained on the mixed KD loss."""
    teacher, student, sampler = _prepare(teacher, student, config, train)
    run = DistillationRun("kd", teacher, student, config.to_dict())
    splits = _splits(train, val, test)
    ones = np.ones(len(train))
    _record(run, splits, 0, 0)
    step = 0
    for t in range(config.repeats):
        step = _joint_steps(teacher, student, train, sampler, config, ones, ones, False, step)
        _record(run, splits, t + 1, step)
    return run


def train_online_kd(teacher: Net, student: Net, train: LabeledSet, config: TrainConfig,
                    val: LabeledSet | None = None, test: LabeledSet | None = None) -> DistillationRun:
    """Alternating teacher then student steps on the same mini-batch."""
    teacher, student, sampler = _prepare(teacher, student, config, train)
    run = DistillationRun("online", teacher, student, config.to_dict())
    splits = _splits(train, val, test)
    ones = np.ones(len(train))
    _record(run, splits, 0, 0)
    step = 0
    for t in range(config.repeats):
        step = _joint_steps(teacher, student, train, sampler, config, ones, ones, True, step)
        _record(run, splits, t + 1, step)
    return run


def _row_keys(split: LabeledSet) -> set:
    return {x.tobytes() + int(y).to_bytes(8, "little") for x, y in zip(np.ascontiguousarray(split.X), split.y)}


def check_disjoint(train: LabeledSet, val: LabeledSet):
    if _row_keys(train) & _row_keys(val):
        raise InputError("validation set overlaps the training set")


def student_influence(student: Net, teacher: Net | None, train: LabeledSet, val: LabeledSet,
                      config: TrainConfig) -> InfluenceReport:
    """Raw influence scores of the training points on the student's validation loss."""
    train_obj = student_objective(student.spec, train.X, train.y, teacher, config.alpha, l2_reg=config.l2_reg)
    val_obj = student_objective(student.spec, val.X, val.y, teacher, config.alpha)
    return influence_scores(train_obj, val_obj, student.params, config.solver_config())


def train_kdaif(teacher: Net, student: Net, train: LabeledSet, val: LabeledSet, config: TrainConfig,
                mechanism: Mechanism | str = M3_BOTH, test: LabeledSet | None = None,
                force_unit_weights: bool = False) -> DistillationRun:
    """Influence-weighted joint distillation.

    Each outer iteration scores the training set at the current student,
    maps normalised scores to weights and runs ``max_steps`` joint steps.
    Where the weights go depends on ``mechanism``; M4 smooths normalised
    scores across iterations with ``history_decay * old + (1 - decay) * new``.
    """
    if not isinstance(mechanism, Mechanism):
        mechanism = Mechanism(mechanism)
    check_disjoint(train, val)
    repeats = mechanism.repeats or config.repeats
    teacher, student, sampler = _prepare(teacher, student, config, train)
    run = DistillationRun("kdaif", teacher, student, config.to_dict(), mechanism=mechanism.kind)
    run.config["repeats"] = repeats
    run.config["history_decay"] = mechanism.history_decay
    splits = _splits(train, val, test)
    ones = np.ones(len(train))
    history = None
    _record(run, splits, 0, 0)
    step = 0
    for t in range(repeats):
        weights = ones
        if mechanism.kind != KD_BASELINE:
            try:
                raw = student_influence(student, teacher, train, val, config)
            except SolverError as exc:
                exc.outer_iteration = t
                raise
            pn = normalize_scores(raw.phi)
            if mechanism.kind == M4_BOTH_HISTORY and history is not None:
                beta = mechanism.history_decay
                pn = beta * history + (1.0 - beta) * pn
            history = pn
            report = complete_report(raw, pn)
            report.meta["iteration"] = t
            run.reports.append(report)
            if not force_unit_weights:
                weights = report.weights
        w_teacher = weights if mechanism.weights_teacher else ones
        w_student = weights if mechanism.weights_student else ones
        step = _joint_steps(teacher, student, train, sampler, config, w_teacher, w_student,
                            not mechanism.freezes_teacher, step)
        _record(run, splits, t + 1, step)
    return run


@dataclass
class SemiSupervisedPools:
    labeled: LabeledSet
    unlabeled: np.ndarray
    pseudo_labels: np.ndarray | None = None

    def __post_init__(self):
        self.unlabeled = np.asarray(self.unlabeled, dtype=np.float64).reshape(-1, self.labeled.X.shape[1])
        if self.pseudo_labels is not None and len(self.pseudo_labels) != len(self.unlabeled):
            raise InputError("pseudo_labels must align 1:1 with the unlabeled pool")


def pseudo_label(teacher: Net, X_unlabeled) -> np.ndarray:
    """Soft pseudo-labels: the teacher's full class distribution per point."""
    X = np.asarray(X_unlabeled, dtype=np.float64)
    if X.shape[0] == 0:
        return np.zeros((0, teacher.spec.n_classes))
    return forward(teacher.spec, teacher.params, X)


def train_semi_supervised(teacher: Net, student: Net, pools: SemiSupervisedPools, val: LabeledSet,
                          config: TrainConfig, test: LabeledSet | None = None,
                          force_unit_weights: bool = False) -> DistillationRun:
    """Pseudo-labelling loop with influence weights on both pools.

    Per outer iteration: (1) teacher CE on the ``w_l``-weighted labeled pool,
    (2) soft pseudo-labels for the unlabeled pool, (3) student on
    ``w_l``-weighted labeled CE plus ``alpha * w_u``-weighted KD on pseudo
    labels, (4) ``w_l, w_u`` recomputed from the student's validation
    influence. The teacher only ever sees labeled data, so with unit weights
    its trajectory is that of labeled-only training.
    """
    lab = pools.labeled
    if len(lab) == 0:
        raise InputError("labeled pool is empty")
    check_disjoint(lab, val)
    if teacher.spec.n_classes != student.spec.n_classes:
        raise InputError("teacher and student class counts differ")
    teacher, student = teacher.copy(), student.copy()
    K = student.spec.n_classes
    X_u = pools.unlabeled
    n_l, n_u = len(lab), X_u.shape[0]
    t_rng, s_rng = _streams(config.seed)
    t_sampler = BatchSampler(n_l, config.batch_size, t_rng)
    s_sampler = BatchSampler(n_l + n_u, config.batch_size, s_rng)
    X_all = np.concatenate([lab.X, X_u])
    hard = one_hot(lab.y, K)
    base = np.concatenate([np.ones(n_l), np.full(n_u, config.alpha)])
    w_l, w_u = np.ones(n_l), np.ones(n_u)
    run = DistillationRun("semi", teacher, student, config.to_dict())
    splits = _splits(lab, val, test)
    _record(run, splits, 0, 0)
    step = 0
    for t in range(config.repeats):
        for s in range(config.max_steps):
            idx = t_sampler.next()
            _step(teacher, lab.X[idx], hard[idx], w_l[idx], config.lr_teacher, config.l2_reg, "teacher", step + s)
        pseudo = pseudo_label(teacher, X_u)
        pools.pseudo_labels = pseudo
        targets = np.concatenate([hard, pseudo])
        w_all = base * np.concatenate([w_l, w_u])
        for s in range(config.max_steps):
            idx = s_sampler.next()
            _step(student, X_all[idx], targets[idx], w_all[idx], config.lr_student, config.l2_reg, "student", step + s)
        step += config.max_steps
        train_obj = Objective(student.spec, X_all, targets, base, config.l2_reg)
        val_obj = student_objective(student.spec, val.X, val.y)
        raw = influence_scores(train_obj, val_obj, student.params, config.solver_config())
        report = complete_report(raw)
        report.meta["iteration"] = t
        report.meta["n_labeled"] = n_l
        run.reports.append(report)
        if not force_unit_weights:
            w_l, w_u = report.weights[:n_l], report.weights[n_l:]
        _record(run, splits, t + 1, step)
    return run
