import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import advdistill as ad
from advdistill.attacks import AttackConfig
from advdistill.errors import ConfigError, InternalConsistencyError
from advdistill.losses import DistillConfig
from advdistill.models import ce_objective

C = 3


def models(seed_s=1, seed_t=2, dim=6, hidden=8):
    spec = ad.ArchSpec("mlp", (dim,), C, hidden=hidden)
    return ad.Model(spec, init_seed=seed_s), ad.Model(spec, role="teacher", init_seed=seed_t)


def rand_batch(rng, n=6, dim=6):
    x = rng.uniform(0.05, 0.95, (n, dim))
    return ad.LabeledBatch(x, rng.integers(0, C, n), C)


def rand_probs(rng, n, c=C):
    return rng.dirichlet(np.ones(c), n)


class TestKlDiv:
    def test_identical_uniform_rows_are_zero(self):
        u = np.full(3, 1 / 3)
        assert ad.kl_div(u, u) == 0.0

    def test_analytic_log2(self):
        assert ad.kl_div([1.0, 0.0], [0.5, 0.5]) == pytest.approx(np.log(2), abs=1e-12)

    def test_matches_direct_sum_oracle(self):
        rng = np.random.default_rng(0)
        p = rand_probs(rng, 40)
        q = rand_probs(rng, 40)
        got = ad.kl_div(p, q)
        for i in range(40):
            direct = sum(
                p[i, j] * (np.log(p[i, j]) - np.log(max(q[i, j], 1e-12)))
                for j in range(C)
                if p[i, j] > 0
            )
            assert got[i] == pytest.approx(direct, abs=1e-9)

    @settings(max_examples=60, deadline=None)
    @given(st.lists(st.floats(0.001, 1.0), min_size=3, max_size=3),
           st.lists(st.floats(0.001, 1.0), min_size=3, max_size=3))
    def test_nonnegative_and_zero_iff_equal(self, a, b):
        p = np.array(a) / np.sum(a)
        q = np.array(b) / np.sum(b)
        assert ad.kl_div(p, q) >= 0.0
        assert ad.kl_div(p, p) == pytest.approx(0.0, abs=1e-15)


class TestBaselineLosses:
    def test_kd_alpha_zero_is_pure_ce(self):
        student, teacher = models()
        batch = rand_batch(np.random.default_rng(1))
        got = ad.kd_loss(student, teacher, batch, DistillConfig(method="kd", alpha=0.0, tau=4.0))
        ce = ce_objective(student.logits(batch.inputs), batch.labels)[0].mean()
        assert got == pytest.approx(ce, abs=1e-12)

    def test_kd_alpha_one_identical_models_is_zero(self):
        student, _ = models()
        twin = student.copy(role="teacher")
        batch = rand_batch(np.random.default_rng(2))
        got = ad.kd_loss(student, twin, batch, DistillConfig(method="kd", alpha=1.0, tau=2.0))
        assert got == pytest.approx(0.0, abs=1e-12)

    def test_kd_matches_hand_computed_two_class_case(self):
        # scalar oracle: fixed logits, alpha=0.5, tau=2, worked through the formula
        student, teacher = models(dim=2)
        x = np.array([[0.3, 0.7]])
        y = np.array([1])
        batch = ad.LabeledBatch(x, y, C)
        zs = student.logits(x)[0]
        zt = teacher.logits(x)[0]

        def soft(z, t):
            e = np.exp(z / t - np.max(z / t))
            return e / e.sum()

        ps1 = soft(zs, 1.0)
        ce = -np.log(ps1[1])
        ps, pt = soft(zs, 2.0), soft(zt, 2.0)
        kl = sum(pt[i] * (np.log(pt[i]) - np.log(ps[i])) for i in range(C))
        expected = 0.5 * ce + 0.5 * 4.0 * kl
        got = ad.kd_loss(student, teacher, batch, DistillConfig(method="kd", alpha=0.5, tau=2.0))
        assert got == pytest.approx(expected, abs=1e-10)

    def test_kd_invalid_alpha_rejected(self):
        student, teacher = models()
        batch = rand_batch(np.random.default_rng(3))
        with pytest.raises(ConfigError):
            ad.kd_loss(student, teacher, batch, DistillConfig(method="kd", alpha=1.5))

    def _adv(self, student, batch, objective, teacher=None):
        cfg = AttackConfig(epsilon=0.05, step_size=0.02, steps=3, objective=objective)
        if objective == ad.KL_FIXED_TARGET:
            return ad.pgd(student, batch, cfg,
                          target_probs=ad.forward_probs(teacher, batch.inputs))
        if objective == ad.KL_STUDENT_TEACHER:
            return ad.pgd(student, batch, cfg, reference=teacher)
        return ad.pgd(student, batch, cfg)

    def test_ard_alpha_zero_ignores_adversarial_term(self):
        student, teacher = models()
        batch = rand_batch(np.random.default_rng(4))
        adv = self._adv(student, batch, ad.CE_LABELS)
        got = ad.ard_loss(student, teacher, batch, adv, DistillConfig(method="ard", alpha=0.0))
        ce = ce_objective(student.logits(batch.inputs), batch.labels)[0].mean()
        assert got == pytest.approx(ce, abs=1e-12)

    def test_ard_identity_case_is_zero(self):
        student, _ = models()
        twin = student.copy(role="teacher")
        rng = np.random.default_rng(5)
        x = rng.uniform(0.1, 0.9, (5, 6))
        y = ad.predict_argmax(ad.forward_probs(student, x))  # CE > 0 but weighted by 0
        batch = ad.LabeledBatch(x, y, C)
        adv = ad.AdvBatch(x.copy(), x.copy(), np.zeros(5), 0.0)  # x' = x
        got = ad.ard_loss(student, twin, batch, adv, DistillConfig(method="ard", alpha=1.0))
        assert got == pytest.approx(0.0, abs=1e-12)

    def test_ard_matches_composed_oracle(self):
        student, teacher = models()
        batch = rand_batch(np.random.default_rng(6))
        adv = self._adv(student, batch, ad.CE_LABELS)
        alpha = 0.7
        got = ad.ard_loss(student, teacher, batch, adv, DistillConfig(method="ard", alpha=alpha))
        ce = ce_objective(student.logits(batch.inputs), batch.labels)[0].mean()
        kl = np.mean(ad.kl_div(ad.forward_probs(teacher, batch.inputs),
                               ad.forward_probs(student, adv.inputs)))
        assert got == pytest.approx((1 - alpha) * ce + alpha * kl, abs=1e-10)

    def test_rslad_matches_composed_oracle(self):
        student, teacher = models()
        batch = rand_batch(np.random.default_rng(7))
        adv = self._adv(student, batch, ad.KL_FIXED_TARGET, teacher)
        alpha = 0.4
        got = ad.rslad_loss(student, teacher, batch, adv,
                            DistillConfig(method="rslad", alpha=alpha))
        t = ad.forward_probs(teacher, batch.inputs)
        clean = np.mean(ad.kl_div(t, ad.forward_probs(student, batch.inputs)))
        robust = np.mean(ad.kl_div(t, ad.forward_probs(student, adv.inputs)))
        assert got == pytest.approx((1 - alpha) * clean + alpha * robust, abs=1e-10)

    def test_rslad_alpha_one_keeps_only_adversarial_term(self):
        student, teacher = models()
        batch = rand_batch(np.random.default_rng(8))
        adv = self._adv(student, batch, ad.KL_FIXED_TARGET, teacher)
        got = ad.rslad_loss(student, teacher, batch, adv, DistillConfig(method="rslad", alpha=1.0))
        t = ad.forward_probs(teacher, batch.inputs)
        robust = np.mean(ad.kl_div(t, ad.forward_probs(student, adv.inputs)))
        assert got == pytest.approx(robust, abs=1e-12)

    def test_adaad_identical_models_zero_for_any_alpha(self):
        student, _ = models()
        twin = student.copy(role="teacher")
        batch = rand_batch(np.random.default_rng(9))
        adv = self._adv(student, batch, ad.KL_STUDENT_TEACHER, twin)
        for alpha in (0.0, 0.3, 1.0):
            got = ad.adaad_loss(student, twin, batch, adv,
                                DistillConfig(method="adaad", alpha=alpha))
            assert got == pytest.approx(0.0, abs=1e-10)

    def test_adaad_matches_composed_oracle(self):
        student, teacher = models()
        batch = rand_batch(np.random.default_rng(10))
        adv = self._adv(student, batch, ad.KL_STUDENT_TEACHER, teacher)
        alpha = 0.5
        got = ad.adaad_loss(student, teacher, batch, adv,
                            DistillConfig(method="adaad", alpha=alpha))
        clean = np.mean(ad.kl_div(ad.forward_probs(teacher, batch.inputs),
                                  ad.forward_probs(student, batch.inputs)))
        robust = np.mean(ad.kl_div(ad.forward_probs(teacher, adv.inputs),
                                   ad.forward_probs(student, adv.inputs)))
        assert got == pytest.approx((1 - alpha) * clean + alpha * robust, abs=1e-10)

    def test_missing_adv_batch_rejected(self):
        student, teacher = models()
        batch = rand_batch(np.random.default_rng(11))
        for fn in (ad.ard_loss, ad.rslad_loss, ad.adaad_loss):
            with pytest.raises(ConfigError):
                fn(student, teacher, batch, None, DistillConfig(method="ard"))


class TestPartition:
    def test_perfect_teacher_gives_empty_st(self):
        rng = np.random.default_rng(12)
        probs = rand_probs(rng, 10)
        labels = np.argmax(probs, axis=1)
        part = ad.map_partition(probs, labels)
        assert part.n_st == 0 and part.n_at == 10

    def test_always_wrong_teacher_gives_empty_at(self):
        rng = np.random.default_rng(13)
        probs = rand_probs(rng, 10)
        labels = (np.argmax(probs, axis=1) + 1) % C
        part = ad.map_partition(probs, labels)
        assert part.n_at == 0 and part.n_st == 10

    def test_matches_row_scan_oracle(self):
        rng = np.random.default_rng(14)
        for _ in range(50):
            probs = rand_probs(rng, 16)
            labels = rng.integers(0, C, 16)
            part = ad.map_partition(probs, labels)
            for i in range(16):
                best = max(range(C), key=lambda j: (probs[i, j], -j))
                assert part.at[i] == (best == labels[i])
                assert part.st[i] == (best != labels[i])
            assert (part.st ^ part.at).all()


class TestElsSwap:
    def test_st_row_transposition(self):
        probs = np.array([[0.1, 0.6, 0.3]])
        out = ad.els_swap_st(probs, np.array([0]), np.array([True]))
        np.testing.assert_allclose(out.probs, [[0.6, 0.1, 0.3]])
        assert out.swapped.tolist() == [True]

    def test_empty_mask_is_identity(self):
        rng = np.random.default_rng(15)
        probs = rand_probs(rng, 8)
        out = ad.els_swap_st(probs, rng.integers(0, C, 8), np.zeros(8, dtype=bool))
        np.testing.assert_array_equal(out.probs, probs)
        assert out.n_swapped == 0

    def test_swapped_rows_become_correct_and_preserve_multiset(self):
        rng = np.random.default_rng(16)
        probs = rand_probs(rng, 64)
        labels = rng.integers(0, C, 64)
        st = np.argmax(probs, axis=1) != labels
        out = ad.els_swap_st(probs, labels, st)
        assert (ad.predict_argmax(out.probs[st]) == labels[st]).all()
        np.testing.assert_allclose(np.sort(out.probs, axis=1), np.sort(probs, axis=1),
                                   atol=1e-15)
        np.testing.assert_array_equal(out.probs[~st], probs[~st])

    def test_contract_breach_raises(self):
        probs = np.array([[0.7, 0.2, 0.1]])
        with pytest.raises(InternalConsistencyError, match="row 0"):
            ad.els_swap_st(probs, np.array([0]), np.array([True]))

    def test_margin_examples(self):
        # row arithmetic: P(y)=0.2, P(argmax)=0.5 -> -0.3
        assert ad.teacher_margin(np.array([0.3, 0.5, 0.2]), 2) == pytest.approx(-0.3)
        assert ad.teacher_margin(np.array([0.5, 0.3, 0.2]), 0) == 0.0

    def test_margin_sign_iff_misclassified(self):
        rng = np.random.default_rng(17)
        probs = rand_probs(rng, 100)
        labels = rng.integers(0, C, 100)
        m = ad.teacher_margin(probs, labels)
        wrong = np.argmax(probs, axis=1) != labels
        assert ((m < 0) == wrong).all()

    def test_at_swap_only_negative_margin(self):
        probs = np.array([[0.5, 0.2, 0.3], [0.2, 0.5, 0.3]])
        out = ad.els_swap_at(probs, np.array([1, 1]))
        np.testing.assert_allclose(out.probs[0], [0.2, 0.5, 0.3])
        np.testing.assert_allclose(out.probs[1], [0.2, 0.5, 0.3])
        assert out.swapped.tolist() == [True, False]

    def test_at_swap_noop_for_correct_teacher(self):
        rng = np.random.default_rng(18)
        probs = rand_probs(rng, 12)
        labels = np.argmax(probs, axis=1)
        out = ad.els_swap_at(probs, labels)
        assert out.n_swapped == 0
        np.testing.assert_array_equal(out.probs, probs)

    def test_at_swap_is_idempotent(self):
        rng = np.random.default_rng(19)
        probs = rand_probs(rng, 200)
        labels = rng.integers(0, C, 200)
        once = ad.els_swap_at(probs, labels)
        assert (ad.teacher_margin(once.probs, labels) >= 0).all()
        twice = ad.els_swap_at(once.probs, labels)
        assert twice.n_swapped == 0
        np.testing.assert_array_equal(twice.probs, once.probs)


class TestPcrAndLabels:
    def test_identical_predictions_give_zero(self):
        rng = np.random.default_rng(20)
        p = rand_probs(rng, 5)
        assert ad.pcr_loss(p, p, np.ones(5, dtype=bool)) == 0.0

    def test_analytic_sqrt2(self):
        clean = np.array([[1.0, 0.0]])
        adv = np.array([[0.0, 1.0]])
        assert ad.pcr_loss(clean, adv, np.array([True])) == pytest.approx(np.sqrt(2))

    def test_matches_per_row_norm_oracle(self):
        rng = np.random.default_rng(21)
        clean, adv = rand_probs(rng, 30), rand_probs(rng, 30)
        mask = rng.random(30) < 0.6
        got = ad.pcr_loss(clean, adv, mask)
        norms = [np.sqrt(((clean[i] - adv[i]) ** 2).sum()) for i in range(30) if mask[i]]
        assert got == pytest.approx(np.mean(norms), abs=1e-12)

    def test_empty_mask_returns_zero(self):
        assert ad.pcr_loss(np.ones((3, 2)) / 2, np.ones((3, 2)) / 2, np.zeros(3, bool)) == 0.0

    def test_smooth_formula(self):
        probs = np.array([[0.3, 0.7]])
        out = ad.alt_label_correct(probs, np.array([1]), "smooth", 0.1)
        np.testing.assert_allclose(out, [[0.05, 0.95]])

    def test_mix_extremes(self):
        rng = np.random.default_rng(22)
        probs = rand_probs(rng, 4)
        labels = rng.integers(0, C, 4)
        onehot = np.zeros_like(probs)
        onehot[np.arange(4), labels] = 1.0
        np.testing.assert_allclose(ad.alt_label_correct(probs, labels, "mix", 0.0), onehot)
        np.testing.assert_allclose(ad.alt_label_correct(probs, labels, "mix", 1.0), probs)

    def test_invalid_alpha_rejected(self):
        with pytest.raises(ConfigError):
            ad.alt_label_correct(np.array([[0.5, 0.5]]), np.array([0]), "smooth", 1.2)


from helpers import perfect_teacher_from_templates


class TestDgadLoss:
    def attack(self):
        return AttackConfig(epsilon=8 / 255, step_size=2 / 255, steps=5,
                            objective=ad.KL_STUDENT_TEACHER)

    def test_perfect_teacher_reduces_to_adaad_adversarial_term(self):
        spec = ad.DatasetSpec(n_train=32, n_test=8, classes=3, shape=(8,),
                              separation=0.45, noise_uniform=0.05, noise_gauss=0.0, seed=3)
        train, _ = ad.make_blobs(spec)
        teacher = perfect_teacher_from_templates(ad.blob_templates(spec))
        student = ad.Model(ad.ArchSpec("mlp", (8,), 3, hidden=12), init_seed=7)
        cfg = DistillConfig(method="dgad", beta=0.0)
        breakdown = ad.dgad_loss(student, teacher, train, cfg, attack=self.attack())
        assert breakdown.n_st == 0 and breakdown.n_swapped_st == 0
        assert breakdown.n_swapped_at == 0
        # same x' from the same deterministic attack, so the alpha=1 AdaAD
        # adversarial term must match the dgad total
        adv = ad.pgd(student, train, self.attack(), reference=teacher)
        expected = np.mean(ad.kl_div(ad.forward_probs(teacher, adv.inputs),
                                     ad.forward_probs(student, adv.inputs)))
        assert breakdown.total == pytest.approx(expected, abs=1e-6)

    def test_all_wrong_teacher_gives_st_only(self):
        rng = np.random.default_rng(23)
        student, teacher = models()
        x = rng.uniform(0.1, 0.9, (10, 6))
        tpred = ad.predict_argmax(ad.forward_probs(teacher, x))
        labels = (tpred + 1) % C
        batch = ad.LabeledBatch(x, labels, C)
        cfg = DistillConfig(method="dgad", beta=3.0)
        breakdown = ad.dgad_loss(student, teacher, batch, cfg, attack=self.attack())
        assert breakdown.n_at == 0
        assert breakdown.l_at == 0.0 and breakdown.l_pcr == 0.0
        assert breakdown.total == pytest.approx(breakdown.l_st, abs=1e-12)
        assert breakdown.n_swapped_st == 10

    def test_additivity_and_counts(self):
        rng = np.random.default_rng(24)
        student, teacher = models(seed_s=31, seed_t=32)
        x = rng.uniform(0.1, 0.9, (24, 6))
        tpred = ad.predict_argmax(ad.forward_probs(teacher, x))
        labels = tpred.copy()
        flip = rng.random(24) < 0.4
        labels[flip] = (tpred[flip] + 1) % C
        batch = ad.LabeledBatch(x, labels, C)
        cfg = DistillConfig(method="dgad", beta=2.5)
        b = ad.dgad_loss(student, teacher, batch, cfg, attack=self.attack())
        assert b.total == pytest.approx(b.l_st + b.l_at + 2.5 * b.l_pcr, abs=1e-6)
        assert b.n_st + b.n_at == 24
        assert b.l_st >= 0 and b.l_at >= 0 and b.l_pcr >= 0
        assert b.n_pcr_pairs == b.n_at

    def test_pcr_all_pairs_counts_everything(self):
        rng = np.random.default_rng(25)
        student, teacher = models(seed_s=41, seed_t=42)
        x = rng.uniform(0.1, 0.9, (12, 6))
        tpred = ad.predict_argmax(ad.forward_probs(teacher, x))
        labels = tpred.copy()
        labels[:5] = (tpred[:5] + 1) % C
        batch = ad.LabeledBatch(x, labels, C)
        cfg = DistillConfig(method="dgad", beta=1.0, pcr_all_pairs=True)
        b = ad.dgad_loss(student, teacher, batch, cfg, attack=self.attack())
        assert b.n_pcr_pairs == 12

    def test_wrong_method_or_objective_rejected(self):
        student, teacher = models()
        batch = rand_batch(np.random.default_rng(26))
        with pytest.raises(ConfigError):
            ad.dgad_loss(student, teacher, batch, DistillConfig(method="adaad"))
        with pytest.raises(ConfigError):
            ad.dgad_loss(student, teacher, batch, DistillConfig(method="dgad"),
                         attack=AttackConfig(objective=ad.CE_LABELS))

    def test_label_mode_smooth_touches_same_rows(self):
        rng = np.random.default_rng(27)
        student, teacher = models(seed_s=51, seed_t=52)
        x = rng.uniform(0.1, 0.9, (16, 6))
        tpred = ad.predict_argmax(ad.forward_probs(teacher, x))
        labels = tpred.copy()
        labels[:6] = (tpred[:6] + 1) % C
        batch = ad.LabeledBatch(x, labels, C)
        swap = ad.dgad_loss(student, teacher, batch,
                            DistillConfig(method="dgad", label_mode="swap"),
                            attack=self.attack())
        smooth = ad.dgad_loss(student, teacher, batch,
                              DistillConfig(method="dgad", label_mode="smooth", alpha=0.1),
                              attack=self.attack())
        assert smooth.n_swapped_st == swap.n_swapped_st == 6
