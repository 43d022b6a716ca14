"""Dense MLP classifiers with closed-form backpropagation.

Parameters of a model live in one flat float64 vector. Layer ``l`` occupies a
``fan_in * fan_out`` row-major weight block followed by ``fan_out`` biases.

Every training loss in the package is a cross-entropy against a *target
distribution*: the supervised term uses a one-hot label, the distillation
term uses the partner model's (frozen) output, and the mixed teacher/student
losses are cross-entropies against the convex combination of the two.
:class:`Objective` wraps one such batch and exposes value, gradient and
per-example gradients; curvature is obtained from finite differences of the
analytic gradient (:func:`hvp`, :func:`dense_hessian`).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import optimize

from .errors import CapacityError, InputError, NumericError

ACTIVATIONS = ("tanh", "relu")
PROB_FLOOR = 1e-12
HESSIAN_CAP = 2500


@dataclass(frozen=True)
class MlpSpec:
    layer_sizes: tuple
    activation: str = "tanh"

    def __post_init__(self):
        sizes = tuple(int(s) for s in self.layer_sizes)
        object.__setattr__(self, "layer_sizes", sizes)
        if len(sizes) < 2:
            raise InputError("layer_sizes needs an input and an output entry")
        if any(s < 1 for s in sizes):
            raise InputError(f"layer sizes must be positive, got {sizes}")
        if sizes[-1] < 2:
            raise InputError("a classifier needs at least 2 classes")
        if self.activation not in ACTIVATIONS:
            raise InputError(f"unknown activation {self.activation!r}")

    @property
    def n_inputs(self) -> int:
        return self.layer_sizes[0]

    @property
    def n_classes(self) -> int:
        return self.layer_sizes[-1]

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return list(zip(self.layer_sizes[:-1], self.layer_sizes[1:]))

    @property
    def n_params(self) -> int:
        return sum(i * o + o for i, o in self.shapes)

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "activation": self.activation}

    def spec_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class Net:
    """A model spec together with its flat parameter vector."""

    spec: MlpSpec
    params: np.ndarray

    def __post_init__(self):
        self.params = check_params(self.spec, self.params)

    def copy(self) -> "Net":
        return Net(self.spec, self.params.copy())

    def predict_proba(self, X) -> np.ndarray:
        return forward(self.spec, self.params, X)


def check_params(spec: MlpSpec, params) -> np.ndarray:
    params = np.asarray(params, dtype=np.float64)
    if params.ndim != 1 or params.size != spec.n_params:
        raise InputError(f"expected {spec.n_params} parameters, got shape {params.shape}")
    if not np.all(np.isfinite(params)):
        raise NumericError("parameter vector contains non-finite values")
    return params


def init_params(spec: MlpSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases, drawn from a seeded generator."""
    rng = np.random.default_rng(seed)
    chunks = []
    for fan_in, fan_out in spec.shapes:
        s = np.sqrt(6.0 / (fan_in + fan_out))
        chunks.append(rng.uniform(-s, s, size=fan_in * fan_out))
        chunks.append(np.zeros(fan_out))
    return np.concatenate(chunks)


def unpack(spec: MlpSpec, params: np.ndarray) -> list[tuple[np.ndarray, np.ndarray]]:
    layers = []
    pos = 0
    for fan_in, fan_out in spec.shapes:
        W = params[pos : pos + fan_in * fan_out].reshape(fan_in, fan_out)
        pos += fan_in * fan_out
        b = params[pos : pos + fan_out]
        pos += fan_out
        layers.append((W, b))
    return layers


def _as_batch(spec: MlpSpec, X) -> tuple[np.ndarray, bool]:
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 1
    if single:
        X = X[None, :]
    if X.ndim != 2 or X.shape[1] != spec.n_inputs:
        raise InputError(f"input dimension {X.shape[-1]} does not match model input {spec.n_inputs}")
    return X, single


def _activate(name: str, z: np.ndarray) -> np.ndarray:
    if name == "tanh":
        return np.tanh(z)
    return np.maximum(z, 0.0)


def _activation_grad(name: str, a: np.ndarray) -> np.ndarray:
    # expressed in terms of the post-activation value
    if name == "tanh":
        return 1.0 - a * a
    return (a > 0.0).astype(np.float64)


def _run_layers(spec: MlpSpec, params: np.ndarray, X: np.ndarray):
    layers = unpack(spec, params)
    acts = [X]
    h = X
    for W, b in layers[:-1]:
        h = _activate(spec.activation, h @ W + b)
        acts.append(h)
    W, b = layers[-1]
    return layers, acts, h @ W + b


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def forward(spec: MlpSpec, params, X) -> np.ndarray:
    """Class probabilities for one input (shape ``(d,)``) or a batch ``(n, d)``."""
    X, single = _as_batch(spec, X)
    _, _, logits = _run_layers(spec, check_params(spec, params), X)
    p = softmax(logits)
    return p[0] if single else p


def one_hot(y, n_classes: int) -> np.ndarray:
    y = np.asarray(y, dtype=np.int64)
    if y.size and (y.min() < 0 or y.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes})")
    out = np.zeros(y.shape + (n_classes,))
    np.put_along_axis(out, y[..., None], 1.0, axis=-1)
    return out


def _cross_entropy_rows(q: np.ndarray, p: np.ndarray) -> np.ndarray:
    return -(q * np.log(np.clip(p, PROB_FLOOR, 1.0))).sum(axis=-1)


def loss_ce(q, p) -> float:
    """Cross-entropy ``-sum q log p``, averaged over a batch.

    ``q`` may be a distribution (same shape as ``p``) or integer class
    indices, which are treated as one-hot distributions.
    """
    p = np.asarray(p, dtype=np.float64)
    q_arr = np.asarray(q)
    if np.issubdtype(q_arr.dtype, np.integer):
        q_arr = one_hot(q_arr, p.shape[-1])
    q_arr = q_arr.astype(np.float64)
    if q_arr.shape != p.shape:
        raise InputError(f"target shape {q_arr.shape} does not match prediction shape {p.shape}")
    return float(np.mean(_cross_entropy_rows(q_arr, p)))


def _check_pair(a: Net, b: Net):
    if a.spec.n_classes != b.spec.n_classes:
        raise InputError(
            f"class count mismatch: {a.spec.n_classes} vs {b.spec.n_classes}"
        )


def loss_kd(X, teacher: Net, student: Net) -> float:
    _check_pair(teacher, student)
    return loss_ce(teacher.predict_proba(X), student.predict_proba(X))


def _check_alpha(alpha: float):
    if not 0.0 <= alpha <= 1.0:
        raise InputError(f"alpha must lie in [0, 1], got {alpha}")


def loss_student(X, y, student: Net, teacher: Net, alpha: float) -> float:
    """``(1 - alpha) * L_kd + alpha * L_ce(y, S(x))``."""
    _check_alpha(alpha)
    kd = loss_kd(X, teacher, student)
    ce = loss_ce(np.asarray(y), student.predict_proba(X))
    if alpha == 1.0:
        return ce
    if alpha == 0.0:
        return kd
    return (1.0 - alpha) * kd + alpha * ce


def loss_teacher(X, y, teacher: Net, student: Net, alpha: float) -> float:
    """``(1 - alpha) * CE(S(x), T(x)) + alpha * L_ce(y, T(x))``.

    Mirrors :func:`loss_student`: the partner's output is the target of the
    alignment term, so this is exactly what teacher updates minimise.
    """
    _check_alpha(alpha)
    kd = loss_kd(X, student, teacher)
    ce = loss_ce(np.asarray(y), teacher.predict_proba(X))
    if alpha == 1.0:
        return ce
    if alpha == 0.0:
        return kd
    return (1.0 - alpha) * kd + alpha * ce


def mixed_targets(y, partner_probs, alpha: float, n_classes: int) -> np.ndarray:
    """Target distribution whose cross-entropy equals the mixed KD loss.

    ``(1-a) CE(q, p) + a CE(e_y, p) = CE((1-a) q + a e_y, p)``; the partner's
    output ``q`` enters as a constant.
    """
    _check_alpha(alpha)
    hard = one_hot(y, n_classes)
    if partner_probs is None or alpha == 1.0:
        return hard
    partner_probs = np.asarray(partner_probs, dtype=np.float64)
    if alpha == 0.0:
        return partner_probs.copy()
    return (1.0 - alpha) * partner_probs + alpha * hard


@dataclass
class Objective:
    """Weighted mean cross-entropy of one model against fixed targets.

    ``value(theta) = (1/n) sum_i w_i CE(t_i, p_i(theta)) + l2_reg/2 ||theta||^2``
    """

    spec: MlpSpec
    X: np.ndarray
    targets: np.ndarray
    weights: np.ndarray | None = None
    l2_reg: float = 0.0
    _ones: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.X, _ = _as_batch(self.spec, self.X)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.targets.shape != (self.X.shape[0], self.spec.n_classes):
            raise InputError(f"targets shape {self.targets.shape} does not match batch")
        if self.weights is None:
            self.weights = np.ones(self.X.shape[0])
        else:
            self.weights = np.asarray(self.weights, dtype=np.float64)
            if self.weights.shape != (self.X.shape[0],):
                raise InputError("weights must align 1:1 with the batch")

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.spec.n_params

    def subset(self, idx) -> "Objective":
        return Objective(self.spec, self.X[idx], self.targets[idx], self.weights[idx], self.l2_reg)

    def with_weights(self, weights) -> "Objective":
        return Objective(self.spec, self.X, self.targets, weights, self.l2_reg)

    def example_losses(self, theta) -> np.ndarray:
        p = forward(self.spec, theta, self.X)
        return _cross_entropy_rows(self.targets, p)

    def mean_loss(self, theta) -> float:
        return float(np.mean(self.weights * self.example_losses(theta)))

    def value(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return self.mean_loss(theta) + 0.5 * self.l2_reg * float(theta @ theta)

    def _deltas(self, theta, coef):
        layers, acts, logits = _run_layers(self.spec, theta, self.X)
        p = softmax(logits)
        t = self.targets
        delta = coef[:, None] * (p * t.sum(axis=1, keepdims=True) - t)
        return layers, acts, delta

    def grad(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        layers, acts, delta = self._deltas(theta, self.weights / self.n)
        parts = []
        for l in range(len(layers) - 1, -1, -1):
            W, _ = layers[l]
            dW = acts[l].T @ delta
            db = delta.sum(axis=0)
            if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
                raise NumericError(f"non-finite gradient in layer {l}", layer=l)
            parts.append((dW.ravel(), db))
            if l > 0:
                delta = (delta @ W.T) * _activation_grad(self.spec.activation, acts[l])
        g = np.concatenate([c for pair in reversed(parts) for c in pair])
        if self.l2_reg:
            g = g + self.l2_reg * theta
        return g

    def example_grads(self, theta) -> np.ndarray:
        """Rows ``w_i * grad CE_i``; the regulariser is excluded."""
        theta = np.asarray(theta, dtype=np.float64)
        layers, acts, delta = self._deltas(theta, self.weights)
        n = self.n
        parts = []
        for l in range(len(layers) - 1, -1, -1):
            W, _ = layers[l]
            dW = np.einsum("ni,nj->nij", acts[l], delta).reshape(n, -1)
            if not np.all(np.isfinite(dW)):
                raise NumericError(f"non-finite gradient in layer {l}", layer=l)
            parts.append((dW, delta.copy()))
            if l > 0:
                delta = (delta @ W.T) * _activation_grad(self.spec.activation, acts[l])
        return np.concatenate([c for pair in reversed(parts) for c in pair], axis=1)


def student_objective(
    student_spec: MlpSpec,
    X,
    y,
    teacher: Net | None = None,
    alpha: float = 1.0,
    weights=None,
    l2_reg: float = 0.0,
) -> Objective:
    """Objective of the student loss with the teacher output held constant.

    Without a teacher the KD term is absent and the loss is plain CE.
    """
    partner = None if teacher is None else teacher.predict_proba(X)
    if teacher is not None and teacher.spec.n_classes != student_spec.n_classes:
        raise InputError("teacher and student class counts differ")
    targets = mixed_targets(y, partner, alpha if teacher is not None else 1.0, student_spec.n_classes)
    return Objective(student_spec, X, targets, weights, l2_reg)


def teacher_objective(
    teacher_spec: MlpSpec,
    X,
    y,
    student: Net | None = None,
    alpha: float = 1.0,
    weights=None,
    l2_reg: float = 0.0,
) -> Objective:
    """Teacher loss with the student's output held constant."""
    return student_objective(teacher_spec, X, y, student, alpha, weights, l2_reg)


def _fd_step(theta: np.ndarray) -> float:
    return 1e-4 * (1.0 + (np.max(np.abs(theta)) if theta.size else 0.0))


def hvp(grad_fn: Callable[[np.ndarray], np.ndarray], theta, v, damping: float = 0.0) -> np.ndarray:
    """``(H + damping I) v`` from a central difference of ``grad_fn`` along ``v``."""
    theta = np.asarray(theta, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != theta.shape:
        raise InputError("v and theta dimensions differ")
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        return np.zeros_like(theta)
    h = _fd_step(theta)
    u = v / norm
    hv = (grad_fn(theta + h * u) - grad_fn(theta - h * u)) * (norm / (2.0 * h))
    out = hv + damping * v
    if not np.all(np.isfinite(out)):
        raise NumericError("Hessian-vector product is not finite")
    return out


def dense_hessian(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    theta,
    damping: float = 0.0,
    cap: int = HESSIAN_CAP,
    symmetrize: bool = True,
) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    P = theta.size
    if P > cap:
        raise CapacityError(f"dense Hessian of dimension {P} exceeds cap {cap}")
    h = _fd_step(theta)
    A = np.empty((P, P))
    step = np.zeros(P)
    for j in range(P):
        step[j] = h
        A[:, j] = (grad_fn(theta + step) - grad_fn(theta - step)) / (2.0 * h)
        step[j] = 0.0
    if symmetrize:
        A = 0.5 * (A + A.T)
    if damping:
        A[np.diag_indices(P)] += damping
    if not np.all(np.isfinite(A)):
        raise NumericError("Hessian is not finite")
    return A


@dataclass
class FitResult:
    params: np.ndarray
    grad_norm: float
    converged: bool
    iterations: int


def fit_convex(
    objective,
    theta0,
    gtol: float = 1e-9,
    max_iter: int = 5000,
    newton_steps: int = 5,
) -> FitResult:
    """Minimise a smooth objective to high precision.

    L-BFGS gets close, then a few Newton steps on the finite-difference
    Hessian polish the iterate (skipped above the dense cap).
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    res = optimize.minimize(
        objective.value,
        theta0,
        jac=objective.grad,
        method="L-BFGS-B",
        options={"maxiter": max_iter, "gtol": gtol * 1e-2, "ftol": 1e-15, "maxcor": 30},
    )
    theta = res.x
    iters = int(res.nit)
    g = objective.grad(theta)
    if theta.size <= HESSIAN_CAP:
        for _ in range(newton_steps):
            if np.linalg.norm(g) < gtol * 1e-2:
                break
            H = dense_hessian(objective.grad, theta)
            try:
                step = np.linalg.solve(H, g)
            except np.linalg.LinAlgError:
                break
            trial = theta - step
            g_trial = objective.grad(trial)
            if np.linalg.norm(g_trial) >= np.linalg.norm(g):
                break
            theta, g = trial, g_trial
            iters += 1
    gn = float(np.linalg.norm(g))
    return FitResult(theta, gn, gn < gtol, iters)


@dataclass
class QuadraticObjective:
    """``L(z; theta) = ||theta - z||^2 / 2`` averaged over points ``z``.

    A closed-form toy exposing the same interface as :class:`Objective`.
    """

    points: np.ndarray
    weights: np.ndarray | None = None
    l2_reg: float = 0.0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        self.points = pts[:, None] if pts.ndim == 1 else pts
        if self.weights is None:
            self.weights = np.ones(self.points.shape[0])
        self.weights = np.asarray(self.weights, dtype=np.float64)

    @property
    def n(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    def subset(self, idx) -> "QuadraticObjective":
        return QuadraticObjective(self.points[idx], self.weights[idx], self.l2_reg)

    def with_weights(self, weights) -> "QuadraticObjective":
        return QuadraticObjective(self.points, weights, self.l2_reg)

    def example_losses(self, theta) -> np.ndarray:
        return 0.5 * ((np.asarray(theta) - self.points) ** 2).sum(axis=1)

    def mean_loss(self, theta) -> float:
        return float(np.mean(self.weights * self.example_losses(theta)))

    def value(self, theta) -> float:
        theta = np.asarray(theta, dtype=np.float64)
        return self.mean_loss(theta) + 0.5 * self.l2_reg * float(theta @ theta)

    def example_grads(self, theta) -> np.ndarray:
        return self.weights[:, None] * (np.asarray(theta, dtype=np.float64) - self.points)

    def grad(self, theta) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        return self.example_grads(theta).mean(axis=0) + self.l2_reg * theta


def batch_metrics(spec: MlpSpec, params, X, y) -> tuple[float, float]:
    """Accuracy and mean cross-entropy on a labelled batch."""
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] == 0:
        raise InputError("cannot score an empty split")
    p = forward(spec, params, X)
    y = np.asarray(y, dtype=np.int64)
    acc = float(np.mean(np.argmax(p, axis=1) == y))
    return acc, loss_ce(y, p)


def concat_objectives(parts: Sequence[Objective]) -> Objective:
    spec = parts[0].spec
    return Objective(
        spec,
        np.concatenate([p.X for p in parts]),
        np.concatenate([p.targets for p in parts]),
        np.concatenate([p.weights for p in parts]),
        parts[0].l2_reg,
    )
