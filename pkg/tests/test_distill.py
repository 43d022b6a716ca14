import numpy as np
import pytest

from kdaif.data import LabeledSet, NoiseSpec, gen_blobs, inject_noise, split_labeled
from kdaif.distill import (
    Mechanism,
    SemiSupervisedPools,
    TrainConfig,
    pseudo_label,
    train_kdaif,
    train_online_kd,
    train_semi_supervised,
    train_supervised,
    train_vanilla_kd,
)
from kdaif.errors import DivergenceError, InputError, SolverError
from kdaif.model import MlpSpec, Net, Objective, forward, init_params, mixed_targets, one_hot


def nets(dim, K, ht=8, hs=4, seed=0):
    ts, ss = MlpSpec((dim, ht, K)), MlpSpec((dim, hs, K))
    return Net(ts, init_params(ts, 1000 + seed)), Net(ss, init_params(ss, 2000 + seed))


@pytest.fixture(scope="module")
def small():
    b = inject_noise(gen_blobs(3, 40, 4, 3.0, 0), NoiseSpec(0.1, 0))
    return b


def cfg(**kw):
    base = dict(max_steps=15, repeats=3, batch_size=16, lr_teacher=0.2, lr_student=0.2, damping=0.1, l2_reg=1e-2)
    base.update(kw)
    return TrainConfig(**base)


def same_run(a, b):
    assert a.metrics == b.metrics
    for x, y in zip(a.student_trajectory, b.student_trajectory):
        np.testing.assert_array_equal(x, y)
    for x, y in zip(a.teacher_trajectory, b.teacher_trajectory):
        np.testing.assert_array_equal(x, y)


class TestConfig:
    def test_defaults(self):
        c = TrainConfig()
        assert c.alpha == 0.6 and c.repeats == 5
        assert c.warmup == c.max_steps // 2

    def test_validation(self):
        with pytest.raises(InputError):
            TrainConfig(alpha=1.2)
        with pytest.raises(InputError):
            TrainConfig(repeats=0)
        with pytest.raises(InputError):
            Mechanism("m9")
        with pytest.raises(InputError):
            Mechanism("m4", history_decay=0.0)

    def test_mechanism_placement(self):
        assert Mechanism("m1").weights_student and not Mechanism("m1").weights_teacher
        assert Mechanism("m1").freezes_teacher
        assert Mechanism("m2").weights_teacher and not Mechanism("m2").weights_student
        assert Mechanism("m3").weights_teacher and Mechanism("m3").weights_student
        assert Mechanism("baseline").kind == "KD_BASELINE"


class TestVanillaKd:
    def test_alpha_one_is_supervised_training(self, small):
        t, s = nets(4, 3)
        c = cfg(alpha=1.0)
        run = train_vanilla_kd(t, s, small.train, c)
        ref = train_supervised(s.copy(), small.train, c.max_steps * c.repeats, c.lr_student, c.batch_size,
                               np.random.default_rng([c.seed, 1]), c.l2_reg)
        np.testing.assert_array_equal(run.student.params, ref.params)

    def test_self_distillation_is_stationary(self, small):
        _, s = nets(4, 3)
        twin = s.copy()
        c = cfg(alpha=0.0, warm_steps=0, l2_reg=0.0)
        run = train_vanilla_kd(twin, s, small.train, c)
        kd = [m["kd_train"] for m in run.metrics]
        assert all(b <= a + 1e-12 for a, b in zip(kd, kd[1:]))
        np.testing.assert_allclose(run.student.params, s.params, atol=1e-12)

    def test_teacher_is_frozen_after_warmup(self, small):
        t, s = nets(4, 3)
        run = train_vanilla_kd(t, s, small.train, cfg())
        for theta in run.teacher_trajectory[1:]:
            np.testing.assert_array_equal(theta, run.teacher_trajectory[0])

    def test_not_worse_than_training_alone(self):
        accs = []
        for seed in range(3):
            b = gen_blobs(3, 100, 10, 2.5, seed)
            t, s = nets(10, 3, ht=32, hs=8, seed=seed)
            c = cfg(seed=seed, max_steps=100, repeats=3, warm_steps=300, lr_teacher=0.1, lr_student=0.1)
            kd = train_vanilla_kd(t, s, b.train, c, test=b.test).final_metric("student_test_acc")
            alone = train_vanilla_kd(t, s, b.train, cfg(seed=seed, max_steps=100, repeats=3, warm_steps=300,
                                                        lr_teacher=0.1, lr_student=0.1, alpha=1.0),
                                     test=b.test).final_metric("student_test_acc")
            accs.append((kd, alone))
        kd, alone = np.mean(accs, axis=0)
        assert kd >= alone - 0.02

    def test_divergence_aborts_with_diagnostics(self, small):
        t, s = nets(4, 3)
        with pytest.raises(DivergenceError) as info:
            train_vanilla_kd(t, s, LabeledSet(small.train.X * 1e6, small.train.y), cfg(lr_student=1e6))
        assert info.value.diagnostics["model"] in ("student", "supervised")


class TestOnlineKd:
    def test_alpha_one_decouples(self, small):
        t, s = nets(4, 3)
        c = cfg(alpha=1.0)
        run = train_online_kd(t, s, small.train, c)
        steps = c.max_steps * c.repeats
        t_ref = train_supervised(t.copy(), small.train, c.warmup, c.lr_teacher, c.batch_size,
                                 np.random.default_rng([c.seed, 0]), c.l2_reg)
        t_ref = train_supervised(t_ref, small.train, steps, c.lr_teacher, c.batch_size,
                                 np.random.default_rng([c.seed, 1]), c.l2_reg)
        s_ref = train_supervised(s.copy(), small.train, steps, c.lr_student, c.batch_size,
                                 np.random.default_rng([c.seed, 1]), c.l2_reg)
        np.testing.assert_array_equal(run.teacher.params, t_ref.params)
        np.testing.assert_array_equal(run.student.params, s_ref.params)

    def test_zero_learning_rates(self, small):
        t, s = nets(4, 3)
        run = train_online_kd(t, s, small.train, cfg(lr_teacher=0.0, lr_student=0.0, max_steps=1, repeats=1))
        np.testing.assert_array_equal(run.teacher.params, t.params)
        np.testing.assert_array_equal(run.student.params, s.params)

    def test_alignment_improves(self):
        b = gen_blobs(3, 100, 4, 2.0, 0)
        t, s = nets(4, 3, ht=16, hs=4)
        run = train_online_kd(t, s, b.train, cfg(max_steps=50, repeats=4))
        assert run.metrics[-1]["kd_train"] <= run.metrics[0]["kd_train"]

    def test_student_sees_updated_teacher(self, small):
        t, s = nets(4, 3)
        c = cfg(max_steps=1, repeats=1, warm_steps=0)
        run = train_online_kd(t, s, small.train, c)
        idx = np.random.default_rng([c.seed, 1]).permutation(len(small.train))[: c.batch_size]
        X, y = small.train.X[idx], small.train.y[idx]
        w = np.ones(len(idx))
        t_obj = Objective(t.spec, X, mixed_targets(y, forward(s.spec, s.params, X), c.alpha, 3), w, c.l2_reg)
        t_new = t.params - c.lr_teacher * t_obj.grad(t.params)
        s_obj = Objective(s.spec, X, mixed_targets(y, forward(t.spec, t_new, X), c.alpha, 3), w, c.l2_reg)
        np.testing.assert_array_equal(run.teacher.params, t_new)
        np.testing.assert_array_equal(run.student.params, s.params - c.lr_student * s_obj.grad(s.params))


class TestKdaif:
    @pytest.mark.parametrize("mech", ["m2", "m3", "m4"])
    def test_unit_weights_reproduce_online(self, small, mech):
        t, s = nets(4, 3)
        a = train_kdaif(t, s, small.train, small.val, cfg(), mech, force_unit_weights=True)
        b = train_online_kd(t, s, small.train, cfg(), val=small.val)
        same_run(a, b)

    def test_baseline_equals_online(self, small):
        t, s = nets(4, 3)
        a = train_kdaif(t, s, small.train, small.val, cfg(), "baseline", test=small.test)
        b = train_online_kd(t, s, small.train, cfg(), val=small.val, test=small.test)
        same_run(a, b)
        assert a.reports == []

    def test_m1_unit_weights_reproduce_vanilla(self, small):
        t, s = nets(4, 3)
        a = train_kdaif(t, s, small.train, small.val, cfg(), "m1", force_unit_weights=True)
        b = train_vanilla_kd(t, s, small.train, cfg(), val=small.val)
        same_run(a, b)

    def test_reports_per_outer_iteration(self, small):
        t, s = nets(4, 3)
        run = train_kdaif(t, s, small.train, small.val, cfg(), "m3")
        assert len(run.reports) == 3
        assert len(run.metrics) == 4 and len(run.student_trajectory) == 4
        for rep in run.reports:
            assert np.all((rep.weights >= 0) & (rep.weights <= 2))
            assert rep.meta["damping"] == 0.1

    def test_weights_change_training(self, small):
        t, s = nets(4, 3)
        a = train_kdaif(t, s, small.train, small.val, cfg(), "m3")
        b = train_kdaif(t, s, small.train, small.val, cfg(), "m3", force_unit_weights=True)
        assert not np.array_equal(a.student.params, b.student.params)

    def test_m1_keeps_teacher_frozen(self, small):
        t, s = nets(4, 3)
        run = train_kdaif(t, s, small.train, small.val, cfg(), "m1")
        for theta in run.teacher_trajectory[1:]:
            np.testing.assert_array_equal(theta, run.teacher_trajectory[0])

    def test_m4_single_repeat_equals_m3(self, small):
        t, s = nets(4, 3)
        a = train_kdaif(t, s, small.train, small.val, cfg(repeats=1), "m3")
        b = train_kdaif(t, s, small.train, small.val, cfg(repeats=1), "m4")
        np.testing.assert_array_equal(a.student.params, b.student.params)

    def test_m4_vanishing_decay_approaches_m3(self, small):
        t, s = nets(4, 3)
        a = train_kdaif(t, s, small.train, small.val, cfg(), "m3")
        b = train_kdaif(t, s, small.train, small.val, cfg(), Mechanism("m4", history_decay=1e-12))
        np.testing.assert_allclose(b.student.params, a.student.params, rtol=1e-6, atol=1e-9)

    def test_m4_history_is_moving_average(self, small):
        t, s = nets(4, 3)
        run = train_kdaif(t, s, small.train, small.val, cfg(), Mechanism("m4", history_decay=0.5))
        from kdaif.influence import normalize_scores

        r0, r1 = run.reports[:2]
        np.testing.assert_allclose(r1.phi_norm, 0.5 * r0.phi_norm + 0.5 * normalize_scores(r1.phi), rtol=1e-12)

    def test_deterministic(self, small):
        t, s = nets(4, 3)
        same_run(train_kdaif(t, s, small.train, small.val, cfg(), "m4"),
                 train_kdaif(t, s, small.train, small.val, cfg(), "m4"))

    def test_inputs_not_mutated(self, small):
        t, s = nets(4, 3)
        t0, s0 = t.params.copy(), s.params.copy()
        train_kdaif(t, s, small.train, small.val, cfg(), "m3")
        np.testing.assert_array_equal(t.params, t0)
        np.testing.assert_array_equal(s.params, s0)

    def test_overlap_rejected(self, small):
        t, s = nets(4, 3)
        val = LabeledSet(small.train.X[:5], small.train.y[:5])
        with pytest.raises(InputError):
            train_kdaif(t, s, small.train, val, cfg(), "m3")

    def test_solver_error_carries_iteration(self, small):
        t, s = nets(4, 3)
        c = cfg(solver="conjugate_gradient", cg_max_iters=1, cg_tol=1e-14)
        with pytest.raises(SolverError) as info:
            train_kdaif(t, s, small.train, small.val, c, "m3")
        assert info.value.outer_iteration == 0

    def test_beats_baseline_on_two_noisy_blobs(self):
        diffs = []
        for seed in range(5):
            b = inject_noise(gen_blobs(2, 167, 20, 4.0, seed), NoiseSpec(0.1, seed))
            t, s = nets(20, 2, ht=32, hs=8, seed=seed)
            c = TrainConfig(max_steps=100, seed=seed, damping=0.1, warm_steps=500, l2_reg=1e-2)
            m3 = train_kdaif(t, s, b.train, b.val, c, "m3", test=b.test)
            base = train_kdaif(t, s, b.train, b.val, c, "baseline", test=b.test)
            diffs.append(m3.final_metric("student_test_acc") - base.final_metric("student_test_acc"))
        assert np.mean(diffs) > 0


class TestWeightedRisk:
    def test_direction_invariant_to_weight_scale(self):
        _, s = nets(4, 3)
        rng = np.random.default_rng(0)
        X, y, w = rng.normal(size=(20, 4)), rng.integers(0, 3, 20), rng.uniform(0, 2, 20)
        g1 = Objective(s.spec, X, one_hot(y, 3), w).grad(s.params)
        g2 = Objective(s.spec, X, one_hot(y, 3), 7.5 * w).grad(s.params)
        np.testing.assert_allclose(g1 / np.linalg.norm(g1), g2 / np.linalg.norm(g2), atol=1e-14)


class TestPseudoLabels:
    def test_zero_teacher_gives_uniform(self):
        spec = MlpSpec((3, 5, 4))
        p = pseudo_label(Net(spec, np.zeros(spec.n_params)), np.random.default_rng(0).normal(size=(6, 3)))
        np.testing.assert_allclose(p, 0.25)

    def test_valid_distributions(self):
        t, _ = nets(4, 3)
        p = pseudo_label(t, np.random.default_rng(1).normal(size=(10, 4)) * 5)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_confident_point_keeps_label(self):
        b = gen_blobs(3, 100, 2, 8.0, 0)
        t, _ = nets(2, 3, ht=8)
        train_supervised(t, b.train, 400, 0.2, 32, np.random.default_rng(0))
        p_train = t.predict_proba(b.train.X)
        i = int(np.argmax(p_train.max(axis=1)))
        assert np.argmax(pseudo_label(t, b.train.X[i : i + 1])[0]) == b.train.y[i]

    def test_pool_alignment(self):
        lab = LabeledSet(np.zeros((3, 2)), np.array([0, 1, 0]))
        with pytest.raises(InputError):
            SemiSupervisedPools(lab, np.zeros((4, 2)), pseudo_labels=np.zeros((3, 2)))


@pytest.fixture(scope="module")
def pools():
    b = gen_blobs(3, 100, 4, 2.5, 0)
    lab, X_u = split_labeled(b.train, 30, 60, 3, 0)
    return b, lab, X_u


class TestSemiSupervised:
    def test_unit_weights_teacher_is_labeled_only_training(self, pools):
        b, lab, X_u = pools
        t, s = nets(4, 3)
        c = cfg()
        run = train_semi_supervised(t, s, SemiSupervisedPools(lab, X_u), b.val, c, force_unit_weights=True)
        ref = train_supervised(t.copy(), lab, c.max_steps * c.repeats, c.lr_teacher, c.batch_size,
                               np.random.default_rng([c.seed, 0]), c.l2_reg)
        np.testing.assert_array_equal(run.teacher.params, ref.params)

    def test_empty_unlabeled_pool_is_weighted_supervised(self, pools):
        b, lab, _ = pools
        t, s = nets(4, 3)
        c = cfg()
        run = train_semi_supervised(t, s, SemiSupervisedPools(lab, np.zeros((0, 4))), b.val, c,
                                    force_unit_weights=True)
        ref = train_supervised(s.copy(), lab, c.max_steps * c.repeats, c.lr_student, c.batch_size,
                               np.random.default_rng([c.seed, 1]), c.l2_reg)
        np.testing.assert_array_equal(run.student.params, ref.params)
        weighted = train_semi_supervised(t, s, SemiSupervisedPools(lab, np.zeros((0, 4))), b.val, c)
        assert weighted.reports[0].n_train == len(lab)

    def test_reports_cover_both_pools(self, pools):
        b, lab, X_u = pools
        t, s = nets(4, 3)
        pools_obj = SemiSupervisedPools(lab, X_u)
        run = train_semi_supervised(t, s, pools_obj, b.val, cfg())
        assert len(run.reports) == 3
        assert run.reports[0].n_train == 90 and run.reports[0].meta["n_labeled"] == 30
        assert pools_obj.pseudo_labels.shape == (60, 3)

    def test_empty_labeled_pool(self, pools):
        b, _, X_u = pools
        t, s = nets(4, 3)
        with pytest.raises(InputError):
            train_semi_supervised(t, s, SemiSupervisedPools(LabeledSet(np.zeros((0, 4)), np.zeros(0, int)), X_u),
                                  b.val, cfg())
