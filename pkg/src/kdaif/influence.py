"""Influence scores, influence weights and the leave-one-out oracle.

Scores are computed against any objective exposing ``grad``,
``example_grads``, ``mean_loss``, ``value`` and ``subset`` (see
:class:`kdaif.model.Objective` and :class:`kdaif.model.QuadraticObjective`).
The training objective supplies the Hessian (with its regulariser), the
validation objective supplies the gradient being propagated.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg, special

from .errors import InputError, SolverError
from .model import HESSIAN_CAP, dense_hessian, fit_convex, hvp

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
METHODS = ("dense_solve", "conjugate_gradient")


@dataclass
class IhvpSolverConfig:
    method: str = "dense_solve"
    cg_max_iters: int = 2000
    cg_tol: float = 1e-10
    damping: float = 1e-3

    def __post_init__(self):
        if self.method not in METHODS:
            raise InputError(f"unknown iHVP method {self.method!r}")
        if self.cg_tol <= 0:
            raise InputError("cg_tol must be positive")
        if self.cg_max_iters < 1:
            raise InputError("cg_max_iters must be positive")
        if self.damping < 0:
            raise InputError("damping must be nonnegative")


def conjugate_gradient(matvec, b, tol=1e-10, max_iters=2000):
    """Solve ``A x = b`` for symmetric positive definite ``A``.

    ``tol`` is relative to ``||b||``. Returns ``(x, iterations, residual_norm)``.
    """
    b = np.asarray(b, dtype=np.float64)
    x = np.zeros_like(b)
    b_norm = float(np.linalg.norm(b))
    if b_norm == 0.0:
        return x, 0, 0.0
    r = b.copy()
    p = r.copy()
    rs = float(r @ r)
    for it in range(1, max_iters + 1):
        Ap = matvec(p)
        curv = float(p @ Ap)
        if curv <= 0.0:
            raise SolverError(
                "conjugate gradient met non-positive curvature; increase damping",
                residual_norm=np.sqrt(rs),
                iteration=it,
            )
        step = rs / curv
        x += step * p
        r -= step * Ap
        rs_new = float(r @ r)
        if np.sqrt(rs_new) <= tol * b_norm:
            return x, it, float(np.sqrt(rs_new))
        p = r + (rs_new / rs) * p
        rs = rs_new
    raise SolverError(
        f"conjugate gradient did not converge in {max_iters} iterations",
        residual_norm=float(np.sqrt(rs)),
        iteration=max_iters,
    )


def solve_ihvp(train_obj, theta, rhs, solver: IhvpSolverConfig):
    """``(H + damping I)^{-1} rhs`` with ``H`` the Hessian of ``train_obj``."""
    theta = np.asarray(theta, dtype=np.float64)
    info = {"method": solver.method, "damping": solver.damping}
    if solver.method == "dense_solve":
        H = dense_hessian(train_obj.grad, theta, damping=solver.damping, cap=HESSIAN_CAP)
        try:
            x = linalg.cho_solve(linalg.cho_factor(H), rhs)
            info["factorization"] = "cholesky"
        except linalg.LinAlgError:
            # indefinite at non-convex iterates
            x = linalg.solve(H, rhs, assume_a="sym")
            info["factorization"] = "ldl"
        return x, info
    x, iters, resid = conjugate_gradient(
        lambda v: hvp(train_obj.grad, theta, v, solver.damping),
        rhs,
        tol=solver.cg_tol,
        max_iters=solver.cg_max_iters,
    )
    info.update(cg_iterations=iters, cg_residual=resid)
    return x, info


def influence_pair(train_obj, val_obj, theta, i: int, j: int, solver: IhvpSolverConfig) -> float:
    """Influence of upweighting training point ``i`` on the loss of validation point ``j``."""
    theta = np.asarray(theta, dtype=np.float64)
    g_val = val_obj.example_grads(theta)[j]
    g_train = train_obj.example_grads(theta)[i]
    x, _ = solve_ihvp(train_obj, theta, g_val, solver)
    return float(-(x @ g_train))


def influence_scores_pairwise(train_obj, val_obj, theta, solver: IhvpSolverConfig) -> np.ndarray:
    """Average influence by one solve per validation point; reference path for tests."""
    theta = np.asarray(theta, dtype=np.float64)
    G_train = train_obj.example_grads(theta)
    G_val = val_obj.example_grads(theta)
    total = np.zeros(G_train.shape[0])
    for g_val in G_val:
        x, _ = solve_ihvp(train_obj, theta, g_val, solver)
        total += -(G_train @ x)
    return total / G_val.shape[0]


def fingerprint(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode())
        h.update(str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()[:16]


@dataclass
class InfluenceReport:
    phi: np.ndarray
    phi_norm: np.ndarray | None = None
    weights: np.ndarray | None = None
    epsilon: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_train(self) -> int:
        return self.phi.size

    def to_dict(self) -> dict:
        def listify(a):
            return None if a is None else [float(v) for v in a]

        return {
            "schema_version": SCHEMA_VERSION,
            "indices": list(range(self.n_train)),
            "phi": listify(self.phi),
            "phi_norm": listify(self.phi_norm),
            "weights": listify(self.weights),
            "epsilon": listify(self.epsilon),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InfluenceReport":
        def arr(k):
            return None if d.get(k) is None else np.asarray(d[k], dtype=np.float64)

        return cls(arr("phi"), arr("phi_norm"), arr("weights"), arr("epsilon"), d.get("meta", {}))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["index", "phi", "phi_norm", "weight", "epsilon"])
        cols = [self.phi, self.phi_norm, self.weights, self.epsilon]
        for i in range(self.n_train):
            w.writerow([i] + ["" if c is None else repr(float(c[i])) for c in cols])
        return buf.getvalue()


def influence_scores(train_obj, val_obj, theta, solver: IhvpSolverConfig) -> InfluenceReport:
    """Average influence of each training point over the validation set.

    One solve against the mean validation gradient replaces the
    ``N_train * N_val`` pairwise products; exact by linearity.
    """
    if val_obj.n == 0:
        raise InputError("validation set is empty")
    theta = np.asarray(theta, dtype=np.float64)
    g_val = val_obj.example_grads(theta).mean(axis=0)
    x, info = solve_ihvp(train_obj, theta, g_val, solver)
    phi = -(train_obj.example_grads(theta) @ x)
    meta = dict(info)
    meta["grad_norm"] = float(np.linalg.norm(train_obj.grad(theta)))
    meta["n_train"] = int(train_obj.n)
    meta["n_val"] = int(val_obj.n)
    if hasattr(val_obj, "X"):
        meta["val_fingerprint"] = fingerprint(val_obj.X, val_obj.targets)
    else:
        meta["val_fingerprint"] = fingerprint(val_obj.points)
    return InfluenceReport(phi=phi, meta=meta)


def normalize_scores(phi) -> np.ndarray:
    """Scale by the population standard deviation; no centring, so signs and zeros survive."""
    phi = np.asarray(phi, dtype=np.float64)
    if phi.size == 0:
        raise InputError("need at least one score")
    return phi / (np.std(phi) + 1e-12)


def weight_fn(phi_norm):
    """``2 / (1 + exp(phi_norm))``: decreasing, image (0, 2), equal to 1 at 0."""
    return 2.0 * special.expit(-np.asarray(phi_norm, dtype=np.float64))


def weights_to_epsilon(weights, n_train: int) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w < 0.0) or np.any(w > 2.0) or not np.all(np.isfinite(w)):
        raise InputError("weights must lie in [0, 2]")
    if n_train < 1:
        raise InputError("n_train must be positive")
    return (w - 1.0) / n_train


def epsilon_to_weights(epsilon, n_train: int) -> np.ndarray:
    return n_train * np.asarray(epsilon, dtype=np.float64) + 1.0


def complete_report(report: InfluenceReport, phi_norm=None) -> InfluenceReport:
    """Fill normalised scores, weights and perturbations from ``phi``.

    ``phi_norm`` overrides the normalised scores (used for score histories).
    """
    pn = normalize_scores(report.phi) if phi_norm is None else np.asarray(phi_norm, dtype=np.float64)
    w = weight_fn(pn)
    if np.any(w < 0.0) or np.any(w > 2.0) or not np.all(np.isfinite(w)):
        raise InputError("weights must lie in [0, 2]")
    # w - 1 = -tanh(pn / 2) exactly; tanh keeps the sign of tiny scores that
    # would round w to 1
    eps = -np.tanh(0.5 * pn) / report.n_train
    return InfluenceReport(report.phi, pn, w, eps, dict(report.meta))


@dataclass
class LooResult:
    index: int
    delta: float
    converged: bool
    grad_norm: float


def _loo_worker(args):
    train_obj, val_obj, theta0, index, base_val, gtol = args
    # zero weight keeps the 1/N normalisation, so the regulariser's relative
    # strength matches the full fit (plain removal when l2_reg = 0)
    w = np.array(train_obj.weights, dtype=np.float64)
    w[index] = 0.0
    fit = fit_convex(train_obj.with_weights(w), theta0, gtol=gtol)
    if not fit.converged:
        log.warning("LOO retrain for index %d ended with grad norm %.3g", index, fit.grad_norm)
    return LooResult(index, val_obj.mean_loss(fit.params) - base_val, fit.converged, fit.grad_norm)


def loo_sweep(train_obj, val_obj, theta0, indices=None, gtol: float = 1e-9, jobs: int = 1, full_fit=None):
    """Exact leave-one-out validation-loss changes.

    Point ``i`` is dropped by giving it weight zero in the training objective.

    ``delta_i = val_loss(theta_{-i}) - val_loss(theta_hat)``; positive means
    removing ``i`` hurts, which to first order equals ``-phi_i / N_train``.
    Every retrain starts from ``theta0``.
    """
    theta0 = np.asarray(theta0, dtype=np.float64)
    if full_fit is None:
        full_fit = fit_convex(train_obj, theta0, gtol=gtol)
    base_val = val_obj.mean_loss(full_fit.params)
    if indices is None:
        indices = range(train_obj.n)
    tasks = [(train_obj, val_obj, theta0, int(i), base_val, gtol) for i in indices]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_loo_worker, tasks))
    return [_loo_worker(t) for t in tasks]


def loo_oracle(train_obj, val_obj, theta0, index: int, gtol: float = 1e-9) -> LooResult:
    """Single leave-one-out retrain; see :func:`loo_sweep`."""
    return loo_sweep(train_obj, val_obj, theta0, [index], gtol=gtol)[0]
