"""Command-line front end: ``kdaif <command> [flags]``.

Every command is deterministic under ``--seed``. Failures print a JSON error
object on stderr and exit nonzero (2 for usage errors, 1 otherwise).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
from scipy import stats

from . import __version__
from .data import (
    LabeledSet,
    NoiseSpec,
    bundle_from_csv,
    gen_blobs,
    gen_two_moons,
    inject_noise,
    load_bundle,
    save_bundle,
    shift_validation,
    split_labeled,
)
from .distill import (
    Mechanism,
    SemiSupervisedPools,
    TrainConfig,
    train_kdaif,
    train_online_kd,
    train_semi_supervised,
    train_vanilla_kd,
)
from .errors import InputError, KdaifError
from .influence import (
    IhvpSolverConfig,
    complete_report,
    fingerprint,
    influence_scores,
    loo_sweep,
)
from .io import dump_json, influence_files, load_json, load_params, read_metrics_csv, save_params, save_run
from .model import MlpSpec, Net, QuadraticObjective, fit_convex, init_params, student_objective
from .robust import DualRiskConfig, dual_worst_case_risk

log = logging.getLogger("kdaif")

SCHEMA_VERSION = 1
SOLVERS = {"dense": "dense_solve", "cg": "conjugate_gradient"}


class UsageError(KdaifError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _hidden(text: str) -> tuple[int, ...]:
    text = text.strip()
    if not text:
        return ()
    try:
        return tuple(int(t) for t in text.split(","))
    except ValueError as exc:
        raise UsageError(f"--hidden expects comma-separated integers, got {text!r}") from exc


def _floats(text: str) -> np.ndarray:
    try:
        return np.array([float(t) for t in text.split(",")])
    except ValueError as exc:
        raise UsageError(f"expected comma-separated numbers, got {text!r}") from exc


def _jobs_default() -> int:
    try:
        return max(1, int(os.environ.get("KDAIF_JOBS", "1")))
    except ValueError:
        return 1


def _data_fingerprint(bundle) -> str:
    return fingerprint(bundle.train.X, bundle.train.y, bundle.val.X, bundle.val.y, bundle.test.X, bundle.test.y)


def _write_text(path: Path, text: str):
    path.write_text(text, encoding="utf-8")


# ---------------------------------------------------------------- gen-data


def cmd_gen_data(args):
    if args.noise_rate < 0 or args.noise_rate >= 1:
        raise UsageError("--noise-rate must lie in [0, 1)")
    if args.generator == "blobs":
        bundle = gen_blobs(args.classes, args.per_class, args.dim, args.separation, args.seed)
    elif args.generator == "moons":
        if args.classes not in (None, 2):
            raise UsageError("--generator moons always has 2 classes")
        bundle = gen_two_moons(args.n, args.noise_std, args.seed)
    else:
        if not args.csv:
            raise UsageError("--generator csv requires --csv FILE")
        bundle = bundle_from_csv(args.csv, args.seed)
    if args.noise_rate > 0:
        bundle = inject_noise(bundle, NoiseSpec(args.noise_rate, args.seed))
    if args.shift:
        shift = _floats(args.shift)
        if shift.size != bundle.dim:
            raise UsageError(f"--shift needs {bundle.dim} components, got {shift.size}")
        bundle = shift_validation(bundle, shift)
    save_bundle(bundle, args.out)
    print(json.dumps({"out": str(args.out), "n_train": len(bundle.train), "n_val": len(bundle.val),
                      "n_test": len(bundle.test), "flipped": int(bundle.noise_mask.sum())}))


# ---------------------------------------------------------------- train


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        alpha=args.alpha,
        lr_teacher=args.lr_teacher,
        lr_student=args.lr_student,
        max_steps=args.steps,
        batch_size=args.batch_size,
        damping=args.damping,
        seed=args.seed,
        l2_reg=args.l2_reg,
        repeats=args.repeats,
        warm_steps=args.warm_steps,
        solver=SOLVERS[args.solver],
    )


def cmd_train(args):
    if args.mechanism is not None and args.mode != "kdaif":
        raise UsageError(f"--mechanism only applies to --mode kdaif, not {args.mode}")
    if not args.data or not Path(args.data).is_dir():
        raise UsageError(f"--data directory {args.data!r} does not exist")
    bundle = load_bundle(args.data)
    config = _train_config(args)
    K, d = bundle.n_classes, bundle.dim
    t_spec = MlpSpec((d, *_hidden(args.teacher_hidden), K), args.activation)
    s_spec = MlpSpec((d, *_hidden(args.student_hidden), K), args.activation)
    teacher = Net(t_spec, init_params(t_spec, 1000 + args.seed))
    student = Net(s_spec, init_params(s_spec, 2000 + args.seed))
    if args.mode == "kd":
        run = train_vanilla_kd(teacher, student, bundle.train, config, bundle.val, bundle.test)
    elif args.mode == "online":
        run = train_online_kd(teacher, student, bundle.train, config, bundle.val, bundle.test)
    elif args.mode == "kdaif":
        mech = Mechanism(args.mechanism or "m3", history_decay=args.history_decay)
        run = train_kdaif(teacher, student, bundle.train, bundle.val, config, mech, bundle.test)
    else:
        n_lab = args.labeled
        n_unl = len(bundle.train) - n_lab if args.unlabeled is None else args.unlabeled
        lab, X_u = split_labeled(bundle.train, n_lab, n_unl, K, args.seed)
        run = train_semi_supervised(teacher, student, SemiSupervisedPools(lab, X_u), bundle.val, config, bundle.test)
    for rep in run.reports:
        if np.any(rep.weights < 0) or np.any(rep.weights > 2):
            raise KdaifError("influence weights left [0, 2]")
    mask = bundle.noise_mask if args.mode != "semi" else None
    extra = {"data_dir": str(args.data), "data_fingerprint": _data_fingerprint(bundle), "n_train": len(bundle.train)}
    if args.mode == "semi":
        extra["n_labeled"] = args.labeled
    out = save_run(run, args.out, extra, mask)
    last = run.metrics[-1]
    print(json.dumps({"out": str(out), "student_test_acc": last.get("student_test_acc"),
                      "teacher_test_acc": last.get("teacher_test_acc")}))


# ---------------------------------------------------------------- fit / influence


def _model_spec(args, bundle) -> MlpSpec:
    return MlpSpec((bundle.dim, *_hidden(args.hidden), bundle.n_classes), args.activation)


def cmd_fit(args):
    bundle = load_bundle(args.data)
    spec = _model_spec(args, bundle)
    obj = student_objective(spec, bundle.train.X, bundle.train.y, l2_reg=args.l2_reg)
    fit = fit_convex(obj, init_params(spec, args.seed))
    save_params(args.out, spec, fit.params, {"role": "fit", "grad_norm": fit.grad_norm})
    print(json.dumps({"out": str(args.out), "grad_norm": fit.grad_norm, "converged": fit.converged}))


def cmd_influence(args):
    bundle = load_bundle(args.data)
    spec = _model_spec(args, bundle)
    _, params, _ = load_params(args.params, expect=spec)
    teacher = None
    if args.teacher_params:
        t_spec, t_params, _ = load_params(args.teacher_params)
        teacher = Net(t_spec, t_params)
    train_obj = student_objective(spec, bundle.train.X, bundle.train.y, teacher, args.alpha, l2_reg=args.l2_reg)
    val_obj = student_objective(spec, bundle.val.X, bundle.val.y, teacher, args.alpha)
    solver = IhvpSolverConfig(SOLVERS[args.solver], damping=args.damping)
    report = complete_report(influence_scores(train_obj, val_obj, params, solver))
    if np.any(report.weights < 0) or np.any(report.weights > 2):
        raise KdaifError("influence weights left [0, 2]")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_text(out / "influence.json", report.to_json() + "\n")
    _write_text(out / "influence.csv", report.to_csv())
    print(json.dumps({"out": str(out), "grad_norm": report.meta["grad_norm"], "solver": report.meta["method"]}))


# ---------------------------------------------------------------- loo


def _loo_rows(phi, predicted, actual):
    rank_pred = stats.rankdata(predicted)
    rank_act = stats.rankdata(actual)
    return [
        {"index": i, "phi": float(phi[i]), "predicted_delta": float(predicted[i]), "actual_delta": float(actual[i]),
         "rank_predicted": float(rank_pred[i]), "rank_actual": float(rank_act[i])}
        for i in range(len(phi))
    ]


def cmd_loo(args):
    solver = IhvpSolverConfig(SOLVERS[args.solver], damping=args.damping)
    if args.toy == "quadratic":
        train_obj = QuadraticObjective(np.array([0.0, 2.0]))
        val_obj = QuadraticObjective(np.array([3.0]))
        theta0 = np.zeros(1)
        solver = IhvpSolverConfig(SOLVERS[args.solver], damping=0.0)
    else:
        if not args.data:
            raise UsageError("--data is required unless --toy is given")
        bundle = load_bundle(args.data)
        spec = _model_spec(args, bundle)
        train_obj = student_objective(spec, bundle.train.X, bundle.train.y, l2_reg=args.l2_reg)
        val_obj = student_objective(spec, bundle.val.X, bundle.val.y)
        theta0 = init_params(spec, args.seed)
    n_points = min(train_obj.n, args.max_points) if args.max_points else train_obj.n
    t0 = time.perf_counter()
    full = fit_convex(train_obj, theta0)
    per_fit = time.perf_counter() - t0
    estimate = per_fit * n_points / max(args.jobs, 1)
    if estimate > args.budget_seconds:
        print(json.dumps({"warning": "estimated LOO runtime exceeds budget",
                          "estimate_seconds": round(estimate, 1), "budget_seconds": args.budget_seconds}),
              file=sys.stderr)
    report = influence_scores(train_obj, val_obj, full.params, solver)
    idx = list(range(n_points))
    loo = loo_sweep(train_obj, val_obj, theta0, idx, jobs=args.jobs, full_fit=full)
    phi = report.phi[idx]
    predicted = -phi / train_obj.n
    actual = np.array([r.delta for r in loo])
    rho = float(stats.spearmanr(predicted, actual).statistic) if n_points > 1 else float("nan")
    sign_agree = float(np.mean(np.sign(predicted) == np.sign(actual)))
    rows = _loo_rows(phi, predicted, actual)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "loo.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    summary = {
        "schema_version": SCHEMA_VERSION,
        "n_points": n_points,
        "spearman_rho": None if math.isnan(rho) else rho,
        "sign_agreement": sign_agree,
        "all_converged": bool(all(r.converged for r in loo)),
        "full_fit_grad_norm": full.grad_norm,
    }
    dump_json(summary, out / "loo.json")
    print(f"spearman_rho={rho:.6f} sign_agreement={sign_agree:.3f} n={n_points}")


# ---------------------------------------------------------------- dual-risk


def _read_numbers(path) -> np.ndarray:
    vals = []
    for line in Path(path).read_text(encoding="utf-8").split():
        for tok in line.split(","):
            tok = tok.strip()
            if not tok:
                continue
            try:
                vals.append(float(tok))
            except ValueError:
                if vals:
                    raise InputError(f"{path}: non-numeric entry {tok!r}")
                # header token
    return np.array(vals)


def cmd_dual_risk(args):
    if args.delta < 0:
        raise UsageError("--delta must be nonnegative")
    losses = _read_numbers(args.losses)
    weights = _read_numbers(args.weights) if args.weights else None
    phi = _read_numbers(args.phi) if args.phi else None
    cfg = DualRiskConfig(args.delta, args.eta_range_factor, args.tol)
    report = dual_worst_case_risk(losses, cfg, weights=weights, phi=phi)
    text = report.to_json()
    if args.out:
        _write_text(Path(args.out), text + "\n")
    print(text)


# ---------------------------------------------------------------- report


def _load_mask(run_dir: Path):
    path = run_dir / "noise_mask.csv"
    if not path.exists():
        return None
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([bool(int(r[1])) for r in rows])


def _check_finite(obj, where="report"):
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, list):
        for i, v in enumerate(obj):
            _check_finite(v, f"{where}[{i}]")
    elif isinstance(obj, float) and not math.isfinite(obj):
        raise KdaifError(f"non-finite value at {where}")


def cmd_report(args):
    t0 = time.perf_counter()
    runs = []
    for d in args.runs:
        p = Path(d)
        if not (p / "config.json").exists():
            raise InputError(f"{p} is not a run directory")
        runs.append((p, load_json(p / "config.json")))
    fps = {cfg.get("data_fingerprint") for _, cfg in runs}
    if len(fps) != 1:
        raise InputError("runs were trained on different datasets (data_fingerprint differs); refusing to aggregate")
    n_trains = {cfg.get("n_train") for _, cfg in runs}
    if len(n_trains) != 1:
        raise InputError("runs disagree on N_train; refusing to aggregate")
    edges = np.linspace(0.0, 2.0, args.bins + 1)
    table, hist_rows, hists, arms = [], [], [], {}
    for p, cfg in runs:
        last = read_metrics_csv(p / "metrics.csv")[-1]
        mech = cfg.get("mechanism")
        arm = cfg["mode"] if mech is None else f"{cfg['mode']}:{mech}"
        row = {"run": p.name, "arm": arm, "seed": cfg["train"]["seed"]}
        for k in ("teacher_test_acc", "student_test_acc", "teacher_val_acc", "student_val_acc"):
            if k in last:
                row[k] = last[k]
        table.append(row)
        arms.setdefault(arm, []).append(row)
        files = influence_files(p)
        if not files:
            continue
        weights = np.asarray(load_json(files[-1])["weights"], dtype=np.float64)
        mask = _load_mask(p)
        if mask is None or mask.size != weights.size:
            mask = np.zeros(weights.size, dtype=bool)
        entry = {"run": p.name, "bin_edges": [float(e) for e in edges], "groups": {}}
        for group, sel in (("clean", ~mask), ("flipped", mask)):
            counts, _ = np.histogram(np.clip(weights[sel], 0.0, 2.0), bins=edges)
            entry["groups"][group] = {
                "counts": [int(c) for c in counts],
                "n": int(sel.sum()),
                "mean_weight": float(weights[sel].mean()) if sel.any() else None,
                "frac_below_one": float(np.mean(weights[sel] < 1.0)) if sel.any() else None,
            }
            for lo, hi, c in zip(edges[:-1], edges[1:], counts):
                hist_rows.append([p.name, group, repr(float(lo)), repr(float(hi)), int(c)])
        total = sum(sum(g["counts"]) for g in entry["groups"].values())
        if total != weights.size:
            raise KdaifError(f"histogram counts {total} do not sum to N_train {weights.size}")
        hists.append(entry)
    arm_summary = {}
    for arm, rows in sorted(arms.items()):
        s = {"n_runs": len(rows)}
        for k in ("teacher_test_acc", "student_test_acc"):
            vals = [r[k] for r in rows if k in r]
            if vals:
                s[f"mean_{k}"] = float(np.mean(vals))
        arm_summary[arm] = s
    report = {
        "schema_version": SCHEMA_VERSION,
        "experiment_id": hashlib.sha256(
            json.dumps([cfg for _, cfg in runs], sort_keys=True).encode()).hexdigest()[:16],
        "configs": {p.name: cfg for p, cfg in runs},
        "runs": table,
        "arms": arm_summary,
        "weight_histograms": hists,
    }
    if args.loo:
        loo = load_json(Path(args.loo) / "loo.json")
        if loo.get("spearman_rho") is not None:
            report["oracle_correlation"] = {"spearman_rho": loo["spearman_rho"], "n_points": loo["n_points"]}
    _check_finite(report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(report, out / "report.json")
    keys = ["run", "arm", "seed", "teacher_test_acc", "student_test_acc", "teacher_val_acc", "student_val_acc"]
    with open(out / "comparison.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(keys)
        for r in table:
            w.writerow([r.get(k, "") if not isinstance(r.get(k), float) else repr(r[k]) for k in keys])
    with open(out / "weight_hist.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "group", "bin_lo", "bin_hi", "count"])
        w.writerows(hist_rows)
    dump_json({"elapsed_seconds": time.perf_counter() - t0}, out / "timing.json")
    print(json.dumps({"out": str(out), "arms": arm_summary}))


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="kdaif", description="Knowledge distillation with adaptive influence weights.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="generate a dataset bundle directory")
    g.add_argument("--generator", choices=["blobs", "moons", "csv"], default="blobs")
    g.add_argument("--classes", type=int, default=None)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--separation", type=float, default=3.0)
    g.add_argument("--n", type=int, default=400, help="total points (moons)")
    g.add_argument("--noise-std", type=float, default=0.1, help="feature noise (moons)")
    g.add_argument("--csv", help="source CSV (generator csv)")
    g.add_argument("--noise-rate", type=float, default=0.0)
    g.add_argument("--shift", help="comma-separated validation shift vector")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a teacher/student pair")
    t.add_argument("--mode", choices=["kd", "online", "kdaif", "semi"], default="kdaif")
    t.add_argument("--mechanism", choices=["baseline", "m1", "m2", "m3", "m4"], default=None)
    t.add_argument("--alpha", type=float, default=0.6)
    t.add_argument("--lr-teacher", type=float, default=0.1)
    t.add_argument("--lr-student", type=float, default=0.1)
    t.add_argument("--steps", type=int, default=100, help="steps per outer iteration (M)")
    t.add_argument("--repeats", type=int, default=5, help="outer iterations (k)")
    t.add_argument("--warm-steps", type=int, default=None, help="teacher warm-up steps (default steps/2)")
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--damping", type=float, default=1e-3)
    t.add_argument("--l2-reg", type=float, default=1e-3)
    t.add_argument("--history-decay", type=float, default=0.5)
    t.add_argument("--solver", choices=list(SOLVERS), default="dense")
    t.add_argument("--teacher-hidden", default="32")
    t.add_argument("--student-hidden", default="8")
    t.add_argument("--activation", choices=["tanh", "relu"], default="tanh")
    t.add_argument("--labeled", type=int, default=40, help="labeled pool size (semi)")
    t.add_argument("--unlabeled", type=int, default=None, help="unlabeled pool size (semi)")
    t.add_argument("--data")
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    def model_flags(sp):
        sp.add_argument("--hidden", default="", help="comma-separated hidden sizes; empty = logistic regression")
        sp.add_argument("--activation", choices=["tanh", "relu"], default="tanh")
        sp.add_argument("--l2-reg", type=float, default=1e-3)

    f = sub.add_parser("fit", help="fit a supervised model to convergence")
    f.add_argument("--data", required=True)
    model_flags(f)
    f.add_argument("--seed", type=int, default=0)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    i = sub.add_parser("influence", help="influence scores and weights for a parameter file")
    i.add_argument("--data", required=True)
    i.add_argument("--params", required=True)
    i.add_argument("--teacher-params")
    i.add_argument("--alpha", type=float, default=0.6)
    model_flags(i)
    i.add_argument("--damping", type=float, default=1e-3)
    i.add_argument("--solver", choices=list(SOLVERS), default="dense")
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_influence)

    lo = sub.add_parser("loo", help="compare influence predictions with leave-one-out retraining")
    lo.add_argument("--data")
    lo.add_argument("--toy", choices=["quadratic"])
    lo.add_argument("--max-points", type=int, default=None)
    model_flags(lo)
    lo.add_argument("--damping", type=float, default=1e-3)
    lo.add_argument("--solver", choices=list(SOLVERS), default="dense")
    lo.add_argument("--seed", type=int, default=0)
    lo.add_argument("--jobs", type=int, default=_jobs_default())
    lo.add_argument("--budget-seconds", type=float, default=300.0)
    lo.add_argument("--out", required=True)
    lo.set_defaults(func=cmd_loo)

    dr = sub.add_parser("dual-risk", help="chi-square worst-case risk of a loss file")
    dr.add_argument("--losses", required=True)
    dr.add_argument("--delta", type=float, required=True)
    dr.add_argument("--weights")
    dr.add_argument("--phi")
    dr.add_argument("--tol", type=float, default=1e-8)
    dr.add_argument("--eta-range-factor", type=float, default=20.0)
    dr.add_argument("--out")
    dr.set_defaults(func=cmd_dual_risk)

    r = sub.add_parser("report", help="aggregate run directories")
    r.add_argument("--runs", nargs="+", required=True)
    r.add_argument("--loo", help="loo output directory to attach")
    r.add_argument("--bins", type=int, default=20)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        args.func(args)
    except UsageError as exc:
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except (KdaifError, ValueError, OSError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
