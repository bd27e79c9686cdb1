import dataclasses
import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from src.errors import ConfigError, DegenerateTarget
from src.kd_losses import (
    DkdConfig,
    KdConfig,
    ce_loss,
    dkd_loss,
    kd_decomposed,
    kd_loss,
    kd_tempered_loss,
    nkd_loss,
    t1_t2_terms,
    total_kd_objective,
)
from src.numkit import finite_diff_grad, nontarget_renormalize, softmax_stable


def _batch(rng, batch=4, classes=10):
    logits = rng.normal(size=(batch, classes))
    teacher = softmax_stable(rng.normal(size=(batch, classes)) * 2.0)
    targets = rng.integers(classes, size=batch)
    return logits, teacher, targets


def _numeric(loss_of, logits):
    return finite_diff_grad(lambda z: float(np.sum(loss_of(z).value)), logits)


class TestCeLoss:
    def test_certain_prediction(self):
        assert ce_loss([1.0, 0.0], 0).value == 0.0

    def test_uniform_pair(self):
        assert ce_loss([0.5, 0.5], 0).value == pytest.approx(math.log(2), abs=1e-12)

    def test_weighted(self):
        assert ce_loss([0.5, 0.5], 0, V_t=0.8).value == pytest.approx(0.8 * math.log(2), abs=1e-12)

    def test_clamps_zero_probability(self):
        result = ce_loss([0.0, 1.0], 0)
        assert result.clamped
        assert result.value == pytest.approx(-math.log(1e-30))

    def test_gradient(self, rng):
        logits, _, targets = _batch(rng)
        result = ce_loss(softmax_stable(logits), targets)
        numeric = _numeric(lambda z: ce_loss(softmax_stable(z), targets), logits)
        assert_allclose(result.grad_student_logits, numeric, rtol=1e-5, atol=1e-8)

    def test_component(self):
        assert ce_loss([0.5, 0.5], 1).components["l_ori"] == pytest.approx(math.log(2))


class TestKdLoss:
    def test_identical_pair(self):
        assert kd_loss([0.5, 0.5], [0.5, 0.5]).value == pytest.approx(math.log(2), abs=1e-12)

    def test_one_hot_teacher(self):
        assert kd_loss([1.0, 0.0], [0.5, 0.5]).value == pytest.approx(math.log(2), abs=1e-12)

    def test_three_classes(self):
        expected = -(0.7 * math.log(0.5) + 0.2 * math.log(0.3) + 0.1 * math.log(0.2))
        value = kd_loss([0.7, 0.2, 0.1], [0.5, 0.3, 0.2]).value
        assert value == pytest.approx(expected, abs=1e-12)
        assert value == pytest.approx(0.886941, abs=1e-6)

    def test_gradient(self, rng):
        logits, teacher, _ = _batch(rng)
        result = kd_loss(teacher, softmax_stable(logits))
        numeric = _numeric(lambda z: kd_loss(teacher, softmax_stable(z)), logits)
        assert_allclose(result.grad_student_logits, numeric, rtol=1e-5, atol=1e-8)


class TestDecomposition:
    def test_one_hot_teacher(self):
        target, non = kd_decomposed([1.0, 0.0], [0.5, 0.5], 0)
        assert target == pytest.approx(math.log(2), abs=1e-12)
        assert non == 0.0

    def test_identical_pair(self):
        target, non = kd_decomposed([0.5, 0.25, 0.25], [0.5, 0.25, 0.25], 0)
        assert target == pytest.approx(0.5 * math.log(2), abs=1e-12)
        assert non == pytest.approx(math.log(2), abs=1e-12)

    def test_three_classes(self):
        target, non = kd_decomposed([0.7, 0.2, 0.1], [0.5, 0.3, 0.2], 0)
        assert target == pytest.approx(-0.7 * math.log(0.5), abs=1e-12)
        assert non == pytest.approx(-(0.2 * math.log(0.3) + 0.1 * math.log(0.2)), abs=1e-12)

    @pytest.mark.parametrize("classes", [3, 10, 100])
    def test_parts_add_up(self, rng, classes):
        for _ in range(1000):
            T = rng.dirichlet(np.ones(classes))
            S = softmax_stable(rng.normal(size=classes) * 3.0)
            t = int(rng.integers(classes))
            target, non = kd_decomposed(T, S, t)
            assert abs(target + non - kd_loss(T, S).value) <= 1e-12


class TestTemperedKd:
    def test_unit_temperature_is_kd(self, rng):
        logits, teacher, _ = _batch(rng)
        tempered = kd_tempered_loss(teacher, logits, KdConfig(temperature=1.0))
        assert_allclose(tempered.value, kd_loss(teacher, softmax_stable(logits)).value)

    @pytest.mark.parametrize("mode", ["classical", "literal"])
    def test_gradient(self, rng, mode):
        logits, teacher, _ = _batch(rng)
        cfg = KdConfig(temperature=4.0, temperature_mode=mode)
        result = kd_tempered_loss(teacher, logits, cfg)
        numeric = _numeric(lambda z: kd_tempered_loss(teacher, z, cfg), logits)
        assert_allclose(result.grad_student_logits, numeric, rtol=1e-5, atol=1e-8)


class TestNkdLoss:
    def test_identical_pair(self):
        S = np.array([0.5, 0.25, 0.25])
        result = nkd_loss(S, S, np.log(S), 0, KdConfig(gamma=1.0, temperature=1.0))
        assert result.value == pytest.approx(1.5 * math.log(2), abs=1e-12)

    def test_three_classes(self):
        S = np.array([0.5, 0.3, 0.2])
        result = nkd_loss([0.7, 0.2, 0.1], S, np.log(S), 0, KdConfig(gamma=1.0))
        non = -(2 / 3 * math.log(0.6) + 1 / 3 * math.log(0.4))
        assert result.value == pytest.approx(-0.7 * math.log(0.5) + non, abs=1e-12)
        assert result.value == pytest.approx(1.131184, abs=1e-6)

    def test_gamma_scales_nontarget(self):
        S = np.array([0.5, 0.3, 0.2])
        result = nkd_loss([0.7, 0.2, 0.1], S, np.log(S), 0, KdConfig(gamma=1.5))
        non = -(2 / 3 * math.log(0.6) + 1 / 3 * math.log(0.4))
        assert result.value == pytest.approx(-0.7 * math.log(0.5) + 1.5 * non, abs=1e-12)

    def test_components(self):
        S = np.array([0.5, 0.3, 0.2])
        result = nkd_loss([0.7, 0.2, 0.1], S, np.log(S), 0, KdConfig(gamma=1.5))
        parts = result.components
        assert result.value == pytest.approx(parts["l_target"] + 1.5 * parts["l_non"], abs=1e-12)

    def test_gamma_zero_leaves_target_term(self):
        S = np.array([0.5, 0.3, 0.2])
        result = nkd_loss([0.7, 0.2, 0.1], S, np.log(S), 0, KdConfig(gamma=0.0))
        assert result.value == pytest.approx(-0.7 * math.log(0.5), abs=1e-12)

    @pytest.mark.parametrize("classes", [3, 10, 100])
    def test_nontarget_term_bounded_by_teacher_entropy(self, rng, classes):
        cfg = KdConfig(gamma=1.0, temperature=1.0)
        for _ in range(200):
            T = rng.dirichlet(np.ones(classes))
            z = rng.normal(size=classes) * 2.0
            t = int(rng.integers(classes))
            n_t = nontarget_renormalize(T, t)
            entropy = -float(np.sum(n_t * np.log(n_t)))
            non = nkd_loss(T, softmax_stable(z), z, t, cfg).components["l_non"]
            assert non >= entropy - 1e-9
            matched = nkd_loss(T, T, np.log(T), t, cfg).components["l_non"]
            assert matched == pytest.approx(entropy, abs=1e-9)

    def test_degenerate_teacher(self):
        S = np.array([0.5, 0.3, 0.2])
        with pytest.raises(DegenerateTarget):
            nkd_loss([1.0, 0.0, 0.0], S, np.log(S), 0, KdConfig())

    def test_degenerate_rows_skipped(self):
        S = np.array([[0.5, 0.3, 0.2], [0.5, 0.3, 0.2]])
        T = np.array([[1.0, 0.0, 0.0], [0.7, 0.2, 0.1]])
        result = nkd_loss(T, S, np.log(S), [0, 0], KdConfig(gamma=1.0), on_degenerate="skip")
        assert result.skipped == 1
        assert result.value[0] == pytest.approx(-math.log(0.5), abs=1e-12)
        assert result.value[1] == pytest.approx(1.131184, abs=1e-6)
        assert_allclose(result.grad_student_logits[0], S[0] - [1.0, 0.0, 0.0])

    @pytest.mark.parametrize(
        "cfg",
        [
            KdConfig(gamma=1.5, temperature=1.0),
            KdConfig(gamma=1.0, temperature=2.0),
            KdConfig(gamma=1.0, temperature=2.0, temperature_mode="literal"),
            KdConfig(gamma=1.5, temperature=1.0, nontarget="raw"),
            KdConfig(gamma=1.5, temperature=1.0, target_terms="t1_t2"),
            KdConfig(gamma=1.5, temperature=1.0, target_terms="t2"),
        ],
    )
    def test_gradient(self, rng, cfg):
        logits, teacher, targets = _batch(rng)

        def loss_of(z):
            return nkd_loss(teacher, softmax_stable(z), z, targets, cfg)

        numeric = _numeric(loss_of, logits)
        assert_allclose(loss_of(logits).grad_student_logits, numeric, rtol=1e-5, atol=1e-8)

    def test_nontarget_gradient_vanishes_at_match(self):
        z = np.array([1.0, 0.3, -0.4, 2.0])
        shifted = z.copy()
        shifted[0] += 1.0
        cfg = KdConfig(gamma=1.0)
        full = nkd_loss(softmax_stable(shifted), softmax_stable(z), z, 0, cfg)
        target = nkd_loss(softmax_stable(shifted), softmax_stable(z), z, 0, KdConfig(gamma=0.0))
        diff = full.grad_student_logits - target.grad_student_logits
        assert np.max(np.abs(diff)) <= 1e-12


class TestTotalObjective:
    def test_gamma_zero_one_hot_is_twice_ce(self):
        S = np.array([0.5, 0.5])
        result = total_kd_objective(S, [1.0, 0.0], np.log(S), 0, 1.0, KdConfig(gamma=0.0))
        assert result.value == pytest.approx(2 * math.log(2), abs=1e-12)

    def test_adds_parts(self, rng):
        logits, teacher, targets = _batch(rng)
        S = softmax_stable(logits)
        cfg = KdConfig()
        total = total_kd_objective(S, teacher, logits, targets, 1.0, cfg)
        parts = ce_loss(S, targets).value + nkd_loss(teacher, S, logits, targets, cfg).value
        assert_allclose(total.value, parts, rtol=0, atol=1e-12)


class TestDkdLoss:
    def test_matches_kd_at_beta_one_minus_teacher_target(self):
        T, S = [0.7, 0.2, 0.1], [0.5, 0.3, 0.2]
        result = dkd_loss(T, S, 0, DkdConfig(alpha=1.0, beta=0.3))
        assert result.value == pytest.approx(kd_loss(T, S).value, abs=1e-12)

    @pytest.mark.parametrize("classes", [3, 10, 100])
    def test_reconstructs_kd_per_sample(self, rng, classes):
        for _ in range(1000):
            T = rng.dirichlet(np.ones(classes))
            S = softmax_stable(rng.normal(size=classes) * 3.0)
            t = int(rng.integers(classes))
            cfg = DkdConfig(alpha=1.0, beta=1.0 - T[t])
            assert abs(dkd_loss(T, S, t, cfg).value - kd_loss(T, S).value) <= 1e-12

    def test_alpha_only(self):
        T = S = [0.5, 0.25, 0.25]
        result = dkd_loss(T, S, 0, DkdConfig(alpha=1.0, beta=0.0))
        assert result.value == pytest.approx(math.log(2), abs=1e-12)

    def test_degenerate(self):
        with pytest.raises(DegenerateTarget):
            dkd_loss([1.0, 0.0, 0.0], [0.5, 0.3, 0.2], 0, DkdConfig())

    def test_gradient(self, rng):
        logits, teacher, targets = _batch(rng)
        cfg = DkdConfig(alpha=1.0, beta=8.0)

        def loss_of(z):
            return dkd_loss(teacher, softmax_stable(z), targets, cfg)

        numeric = _numeric(loss_of, logits)
        assert_allclose(loss_of(logits).grad_student_logits, numeric, rtol=1e-5, atol=1e-8)


class TestTargetTerms:
    def test_certain_teacher(self):
        t1, t2 = t1_t2_terms(1.0, 0.5)
        assert t1 == pytest.approx(math.log(2))
        assert t2 == 0.0

    def test_split(self):
        t1, t2 = t1_t2_terms(0.7, 0.5)
        assert t1 == pytest.approx(0.7 * math.log(2))
        assert t2 == pytest.approx(0.3 * math.log(2))

    def test_clamped_at_one(self):
        t1, t2 = t1_t2_terms(0.5, 1.0)
        assert t1 == 0.0
        assert t2 == pytest.approx(-0.5 * math.log(1e-30))


class TestBatchMean:
    def test_identical_rows_match_single(self):
        T = np.array([0.7, 0.2, 0.1])
        S = np.array([0.5, 0.3, 0.2])
        cfg = KdConfig(gamma=1.0)
        single = nkd_loss(T, S, np.log(S), 0, cfg)
        rows = [np.tile(x, (3, 1)) for x in (T, S, np.log(S))]
        batch = nkd_loss(*rows, [0, 0, 0], cfg).mean()
        assert batch.value == pytest.approx(single.value, abs=1e-12)
        assert_allclose(batch.grad_student_logits.sum(axis=0), single.grad_student_logits)


class TestConfigs:
    def test_lambda_alias(self):
        cfg = KdConfig.from_dict({"gamma": 1.0, "lambda": 2.0})
        assert cfg.temperature == 2.0

    def test_unknown_key(self):
        with pytest.raises(ConfigError):
            KdConfig.from_dict({"gama": 1.0})

    @pytest.mark.parametrize(
        "data", [{"gamma": -1.0}, {"temperature": 0.0}, {"temperature_mode": "warm"}]
    )
    def test_invalid(self, data):
        with pytest.raises(ConfigError):
            KdConfig.from_dict(data)

    def test_dkd_defaults(self):
        assert dataclasses.asdict(DkdConfig()) == {"alpha": 1.0, "beta": 8.0}
