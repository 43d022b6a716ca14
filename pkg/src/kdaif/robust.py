"""Worst-case risk over a chi-square ball and weight-map diagnostics.

The chi-square divergence uses ``f(t) = (t - 1)^2 / 2``, for which

    sup_{D(Q||P) <= delta} E_Q[L] = inf_eta sqrt(2 delta + 1) E_P[(L - eta)_+^2]^(1/2) + eta.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np

from .errors import InputError

SCHEMA_VERSION = 1
INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass
class DualRiskConfig:
    delta: float = 0.0
    eta_range_factor: float = 20.0
    tol: float = 1e-8

    def __post_init__(self):
        if self.delta < 0:
            raise InputError("delta must be nonnegative")
        if self.eta_range_factor <= 0 or self.tol <= 0:
            raise InputError("eta_range_factor and tol must be positive")


@dataclass
class RobustRiskReport:
    dual_value: float
    eta_star: float
    delta: float
    mean_loss: float
    at_lower_boundary: bool
    sigma: float = 0.5
    lipschitz_bound: float | None = None

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def golden_section(f: Callable[[float], float], a: float, b: float, tol: float) -> float:
    """Minimiser of a unimodal ``f`` on ``[a, b]`` to within ``tol``."""
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc <= fd:
            b, d, fd = d, c, fc
            c = b - INV_PHI * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + INV_PHI * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def dual_objective(losses, eta: float, delta: float, weights=None) -> float:
    losses = np.asarray(losses, dtype=np.float64)
    excess = np.maximum(losses - eta, 0.0) ** 2
    m = np.average(excess, weights=weights)
    return math.sqrt(2.0 * delta + 1.0) * math.sqrt(m) + eta


def lipschitz_bound(sigma: float, delta: float, phi) -> float:
    """``sigma * sqrt(2 delta + 1) / N_train * ||phi||``."""
    phi = np.asarray(phi, dtype=np.float64)
    return float(sigma * math.sqrt(2.0 * delta + 1.0) / phi.size * np.linalg.norm(phi))


def dual_worst_case_risk(
    losses,
    config: DualRiskConfig | None = None,
    weights=None,
    phi=None,
    sigma: float = 0.5,
) -> RobustRiskReport:
    """Worst-case expected loss over the chi-square ball via the convex dual.

    ``weights`` (optional) reweights the empirical distribution ``P``;
    unweighted by default. ``phi`` enables the Lipschitz bound estimate.
    """
    config = config or DualRiskConfig()
    losses = np.asarray(losses, dtype=np.float64)
    if losses.ndim != 1 or losses.size == 0:
        raise InputError("losses must be a nonempty 1-D sequence")
    if not np.all(np.isfinite(losses)):
        raise InputError("losses must be finite")
    if weights is not None:
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != losses.shape or np.any(weights < 0) or weights.sum() <= 0:
            raise InputError("weights must be nonnegative, nonzero and align with losses")
    lo, hi = float(losses.min()), float(losses.max())
    R = config.eta_range_factor * (hi - lo + 1.0)
    a = lo - R
    obj = lambda eta: dual_objective(losses, eta, config.delta, weights)  # noqa: E731
    eta = golden_section(obj, a, hi, config.tol)
    value = obj(eta)
    # the objective equals `hi` at eta = hi; keep whichever end is smaller
    if obj(hi) <= value:
        eta, value = hi, obj(hi)
    mean = float(np.average(losses, weights=weights))
    report = RobustRiskReport(
        dual_value=float(value),
        eta_star=float(eta),
        delta=float(config.delta),
        mean_loss=mean,
        at_lower_boundary=bool(eta - a <= 10 * config.tol),
        sigma=float(sigma),
    )
    if phi is not None:
        report.lipschitz_bound = lipschitz_bound(sigma, config.delta, phi)
    return report


@dataclass
class Theorem1Check:
    passed: bool
    witness: int | None
    inner_product: float


def check_theorem1(phi, epsilon_fn: Callable) -> Theorem1Check:
    """Check that perturbations from a decreasing map lower the first-order risk.

    Requires ``eps_i * phi_i <= 0`` for every ``i`` (strictly when
    ``phi_i != 0``) and ``sum eps_i phi_i < 0`` unless ``phi`` is zero.
    ``witness`` is the first violating index.
    """
    phi = np.asarray(phi, dtype=np.float64)
    eps = np.asarray(epsilon_fn(phi), dtype=np.float64)
    prod = eps * phi
    total = float(prod.sum())
    bad = (prod > 0) | ((phi != 0) & (prod >= 0)) | ((phi == 0) & (eps != 0))
    if np.any(bad):
        return Theorem1Check(False, int(np.flatnonzero(bad)[0]), total)
    if np.any(phi != 0) and not total < 0:
        return Theorem1Check(False, 0, total)
    return Theorem1Check(True, None, total)


def _max_central_slope(f: Callable, grid: np.ndarray) -> float:
    vals = np.asarray(f(grid), dtype=np.float64)
    h = np.diff(grid)
    slopes = (vals[2:] - vals[:-2]) / (h[1:] + h[:-1])
    return float(np.max(np.abs(slopes))) if slopes.size else 0.0


def weight_gradient_bound(weight_map: Callable, grid=None, refine: int = 10) -> float:
    """Largest ``|f'|`` by central differences; ``inf`` if it grows under refinement.

    ``weight_map`` must accept numpy arrays. The default grid spans
    ``[-10, 10]`` with step ``1e-3``.
    """
    if grid is None:
        grid = np.linspace(-10.0, 10.0, 20001)
    grid = np.asarray(grid, dtype=np.float64)
    if grid.min() > -10 or grid.max() < 10 or np.max(np.diff(grid)) > 1e-3 + 1e-12:
        raise InputError("grid must cover [-10, 10] with step at most 1e-3")
    sigma = _max_central_slope(weight_map, grid)
    fine = np.linspace(grid[0], grid[-1], (grid.size - 1) * refine + 1)
    sigma_fine = _max_central_slope(weight_map, fine)
    # a jump of size J gives slope J/(2h): refinement multiplies it by `refine`
    if sigma_fine > 2.0 * sigma + 1e-9:
        return math.inf
    return max(sigma, sigma_fine)
