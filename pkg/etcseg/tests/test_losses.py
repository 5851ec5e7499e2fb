import math

import numpy as np
import pytest
from scipy import special as sp

from etcseg.autodiff import Tensor, grad_check
from etcseg.errors import DimensionError, ValidationError
from etcseg.services.evidence_service import DirichletField, EvidenceField, dirichlet_from_array, dirichlet_from_evidence
from etcseg.services.loss_service import (
    LossSwitches,
    bucs_loss,
    cross_sup_loss,
    ecb_loss,
    ece_loss,
    efb_loss,
    epb_loss,
    kl_to_uniform,
    lambda_kl_schedule,
    lambda_schedule,
    total_loss,
)
from etcseg.tests.conftest import random_evidence, random_one_hot

GRAD_TOL = 1e-4
SEEDS = range(10)


def one_hot_pixel(k, cls):
    y = np.zeros((k, 1, 1))
    y[cls] = 1.0
    return y


def field(e):
    return dirichlet_from_evidence(EvidenceField(e if isinstance(e, Tensor) else Tensor(e)))


def manual_field(prob, uncertainty):
    """DirichletField carrying arbitrary p-hat and u, for pseudo-label tests"""
    prob = Tensor(np.asarray(prob, dtype=np.float64))
    u = Tensor(np.asarray(uncertainty, dtype=np.float64))
    return DirichletField(evidence=prob, alpha=prob, strength=u, belief=prob, uncertainty=u, prob=prob)


def dirichlet_kl(a, b):
    """Generic KL(Dir(a) || Dir(b)) along axis 0"""
    sa = a.sum(axis=0)
    return (sp.gammaln(sa) - sp.gammaln(a).sum(axis=0) - sp.gammaln(b.sum(axis=0)) + sp.gammaln(b).sum(axis=0)
            + ((a - b) * (sp.digamma(a) - sp.digamma(sa))).sum(axis=0))


class TestSchedules:
    def test_kl_warmup(self):
        assert lambda_kl_schedule(0) == 0.0
        assert lambda_kl_schedule(100) == 0.5
        assert lambda_kl_schedule(200) == 1.0
        assert lambda_kl_schedule(10000) == 1.0

    def test_ramp_up(self):
        assert lambda_schedule(1000, 1000, 0.1) == 0.1
        assert lambda_schedule(5000, 1000, 0.1) == 0.1
        assert lambda_schedule(0, 1000, 0.1) == pytest.approx(0.1 * math.exp(-5.0), abs=1e-12)
        assert lambda_schedule(0, 1000, 0.1) == pytest.approx(6.7379e-4, abs=1e-8)
        assert lambda_schedule(500, 1000, 0.1) == pytest.approx(0.028650, abs=1e-6)


class TestEce:
    def test_worked_example(self):
        d = dirichlet_from_array(np.array([1.0, 0.0]).reshape(2, 1, 1))
        assert ece_loss(d, one_hot_pixel(2, 0)).item() == pytest.approx(0.5, abs=1e-12)

    def test_dominant_true_class_goes_to_zero(self):
        d = dirichlet_from_array(np.array([1e9, 2.0]).reshape(2, 1, 1))
        assert ece_loss(d, one_hot_pixel(2, 0)).item() < 1e-8

    @pytest.mark.parametrize('seed', SEEDS)
    def test_matches_monte_carlo_integral(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 5))
        alpha = rng.uniform(1.0, 6.0, size=k)
        cls = int(rng.integers(k))
        value = ece_loss(dirichlet_from_array((alpha - 1.0).reshape(k, 1, 1)), one_hot_pixel(k, cls)).item()
        draws = -np.log(rng.dirichlet(alpha, size=100_000)[:, cls])
        standard_error = draws.std(ddof=1) / math.sqrt(draws.size)
        assert abs(value - draws.mean()) < 3.0 * standard_error

    def test_gradient_signs(self, rng):
        e = Tensor(random_evidence(rng, (3, 4, 4)), requires_grad=True)
        y = random_one_hot(rng, 1, 3, 4, 4)[0]
        ece_loss(field(e), y).backward()
        assert np.all(e.grad[y == 1] < 0)
        assert np.all(e.grad[y == 0] > 0)

    def test_rejects_soft_labels(self):
        d = dirichlet_from_array(np.ones((2, 1, 1)))
        with pytest.raises(ValidationError):
            ece_loss(d, np.full((2, 1, 1), 0.5))


class TestKl:
    def test_zero_evidence_is_zero(self):
        d = dirichlet_from_array(np.zeros((3, 2, 2)))
        y = np.zeros((3, 2, 2))
        y[1] = 1.0
        assert kl_to_uniform(d, y).item() == pytest.approx(0.0, abs=1e-12)

    def test_worked_example(self):
        d = dirichlet_from_array(np.array([4.0, 2.0]).reshape(2, 1, 1))
        expected = dirichlet_kl(np.array([1.0, 3.0]), np.ones(2))
        assert kl_to_uniform(d, one_hot_pixel(2, 0)).item() == pytest.approx(expected, abs=1e-8)

    @pytest.mark.parametrize('seed', SEEDS)
    def test_matches_generic_oracle(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 5))
        e = random_evidence(rng, (k, 3, 3), 0.0, 8.0)
        y = random_one_hot(rng, 1, k, 3, 3)[0]
        alpha_tilde = y + (1.0 - y) * (e + 1.0)
        expected = dirichlet_kl(alpha_tilde, np.ones_like(alpha_tilde)).mean()
        assert kl_to_uniform(dirichlet_from_array(e), y).item() == pytest.approx(expected, abs=1e-8)

    def test_nonnegative(self, rng):
        for _ in range(100):
            e = random_evidence(rng, (3, 2, 2), 0.0, 10.0)
            assert kl_to_uniform(dirichlet_from_array(e), random_one_hot(rng, 1, 3, 2, 2)[0]).item() >= -1e-12


class TestEcb:
    def test_composition(self, rng):
        d = dirichlet_from_array(random_evidence(rng, (3, 2, 2)))
        y = random_one_hot(rng, 1, 3, 2, 2)[0]
        assert ecb_loss(d, y, t=0).item() == ece_loss(d, y).item()
        assert ecb_loss(d, y, t=500).item() == pytest.approx(ece_loss(d, y).item() + kl_to_uniform(d, y).item(),
                                                             abs=1e-12)


class TestEpb:
    def test_uniform_prediction_example(self):
        d = dirichlet_from_array(np.zeros((2, 4, 4)))
        y = np.zeros((2, 4, 4))
        y[0] = 1.0
        assert epb_loss(d, y).item() == pytest.approx(2.0 / 3.0, abs=1e-4)

    def test_confident_correct_prediction_near_zero(self):
        # every class present, otherwise the smoothing term dominates an empty class
        y = np.moveaxis(np.eye(3)[np.arange(16).reshape(4, 4) % 3], -1, 0)
        d = dirichlet_from_array(y * 1e9)
        assert epb_loss(d, y).item() < 1e-4

    def test_value_in_unit_interval(self, rng):
        for _ in range(20):
            d = dirichlet_from_array(random_evidence(rng, (3, 4, 4)))
            value = epb_loss(d, random_one_hot(rng, 1, 3, 4, 4)[0]).item()
            assert 0.0 <= value <= 1.0


class TestCrossSupervision:
    def test_worked_example(self):
        source = manual_field(np.array([1.0, 0.0]).reshape(2, 1, 1), np.array([[0.5]]))
        target = manual_field(np.array([0.5, 0.5]).reshape(2, 1, 1), np.array([[0.3]]))
        expected = 0.5 * 0.5 * math.sqrt(0.5)
        assert cross_sup_loss(source, target).item() == pytest.approx(expected, abs=1e-12)
        assert expected == pytest.approx(0.17678, abs=1e-5)

    def test_identical_fields(self, rng):
        e = random_evidence(rng, (3, 4, 4))
        assert cross_sup_loss(dirichlet_from_array(e), dirichlet_from_array(e)).item() == 0.0

    def test_fully_uncertain_source_contributes_nothing(self, rng):
        source = dirichlet_from_array(np.zeros((3, 4, 4)))
        target = dirichlet_from_array(random_evidence(rng, (3, 4, 4)))
        assert cross_sup_loss(source, target).item() == 0.0

    def test_unweighted_variant(self, rng):
        source = dirichlet_from_array(np.zeros((2, 2, 2)))
        target = dirichlet_from_array(random_evidence(rng, (2, 2, 2)))
        assert cross_sup_loss(source, target, weighted=False).item() > 0.0

    def test_source_uncertainty_never_raises_loss(self, rng):
        prob_src = np.array([0.7, 0.3]).reshape(2, 1, 1)
        target = manual_field(np.array([0.2, 0.8]).reshape(2, 1, 1), np.array([[0.5]]))
        values = [cross_sup_loss(manual_field(prob_src, np.array([[u]])), target).item()
                  for u in np.linspace(0.0, 1.0, 11)]
        assert all(later <= earlier for earlier, later in zip(values, values[1:]))

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            cross_sup_loss(dirichlet_from_array(np.ones((2, 2, 2))), dirichlet_from_array(np.ones((2, 3, 3))))

    def test_source_gets_no_gradient(self, rng):
        e_src = Tensor(random_evidence(rng, (3, 3, 3)), requires_grad=True)
        e_tgt = Tensor(random_evidence(rng, (3, 3, 3)), requires_grad=True)
        cross_sup_loss(field(e_src), field(e_tgt)).backward()
        assert e_src.grad is None
        assert np.any(e_tgt.grad != 0)

    def test_bucs_pair(self, rng):
        d1 = dirichlet_from_array(random_evidence(rng, (3, 4, 4)))
        d2 = dirichlet_from_array(random_evidence(rng, (3, 4, 4)))
        l12, l21, total = bucs_loss(d1, d2)
        s12, s21, _ = bucs_loss(d2, d1)
        assert total.item() == pytest.approx(l12.item() + l21.item(), abs=1e-12)
        assert (s12.item(), s21.item()) == (l21.item(), l12.item())
        assert [t.item() for t in bucs_loss(d1, d1)] == [0.0, 0.0, 0.0]


class TestEfb:
    def test_maximal_disagreement(self):
        d3 = manual_field(np.array([0.0, 1.0]).reshape(2, 1, 1), np.array([[0.1]]))
        assert efb_loss(np.array([1.0, 0.0]).reshape(2, 1, 1), d3).item() == pytest.approx(math.sqrt(2.0))

    def test_agreement_is_zero(self, rng):
        d3 = dirichlet_from_array(random_evidence(rng, (3, 4, 4)))
        assert efb_loss(d3.prob.data.copy(), d3).item() == 0.0

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            efb_loss(np.ones((2, 2, 2)) / 2, dirichlet_from_array(np.ones((2, 3, 3))))


class TestGradientChecks:
    @pytest.mark.parametrize('seed', SEEDS)
    def test_supervised_losses(self, seed):
        rng = np.random.default_rng(seed)
        k = int(rng.integers(2, 4))
        e = Tensor(random_evidence(rng, (k, 2, 2), 0.2, 4.0))
        y = random_one_hot(rng, 1, k, 2, 2)[0]
        assert grad_check(lambda e: ece_loss(field(e), y), [e]) < GRAD_TOL
        assert grad_check(lambda e: kl_to_uniform(field(e), y), [e]) < GRAD_TOL
        assert grad_check(lambda e: ecb_loss(field(e), y, t=50), [e]) < GRAD_TOL
        assert grad_check(lambda e: epb_loss(field(e), y), [e]) < GRAD_TOL

    @pytest.mark.parametrize('seed', SEEDS)
    def test_pseudo_label_losses(self, seed):
        rng = np.random.default_rng(100 + seed)
        source = dirichlet_from_array(random_evidence(rng, (3, 2, 2)))
        p_fuse = dirichlet_from_array(random_evidence(rng, (3, 2, 2))).prob.data
        e = Tensor(random_evidence(rng, (3, 2, 2), 0.2, 4.0))
        assert grad_check(lambda e: cross_sup_loss(source, field(e)), [e]) < GRAD_TOL
        assert grad_check(lambda e: efb_loss(p_fuse, field(e)), [e]) < GRAD_TOL

    @pytest.mark.parametrize('seed', SEEDS)
    def test_total_loss_through_fusion_branch(self, seed):
        rng = np.random.default_rng(200 + seed)
        ecb = EvidenceField(Tensor(random_evidence(rng, (2, 3, 2, 2))))
        epb = EvidenceField(Tensor(random_evidence(rng, (2, 3, 2, 2))))
        y = random_one_hot(rng, 1, 3, 2, 2)
        e3 = Tensor(random_evidence(rng, (2, 3, 2, 2), 0.2, 4.0))

        def f(e3):
            bundle = total_loss([ecb, epb, EvidenceField(e3)], y, [True, False], t=10, t_max=20)
            return bundle.l_total

        assert grad_check(f, [e3]) < GRAD_TOL


class TestTotalLoss:
    def _batch(self, rng):
        fields = [EvidenceField(Tensor(random_evidence(rng, (4, 3, 4, 4)))) for _ in range(3)]
        return fields, random_one_hot(rng, 2, 3, 4, 4), [True, True, False, False]

    def test_components_recombine(self, rng):
        fields, y, mask = self._batch(rng)
        bundle = total_loss(fields, y, mask, t=300, t_max=1000)
        c = bundle.components()
        recombined = c['l_ecb'] + c['l_epb'] + bundle.lam * (c['l_cs12'] + c['l_cs21'] + c['l_efb'])
        assert c['l_total'] == pytest.approx(recombined, abs=1e-12)
        assert c['l_bucs'] == pytest.approx(c['l_cs12'] + c['l_cs21'], abs=1e-12)
        assert bundle.lambda_kl == 1.0
        assert all(value >= 0 for value in c.values())

    def test_forced_zero_lambda_is_supervised_only(self, rng):
        fields, y, mask = self._batch(rng)
        bundle = total_loss(fields, y, mask, t=300, t_max=1000, force_lambda=0.0)
        assert bundle.l_total.item() == bundle.l_ecb.item() + bundle.l_epb.item()

    def test_switches_zero_terms(self, rng):
        fields, y, mask = self._batch(rng)
        switches = LossSwitches(use_cs12=False, use_cs21=False, use_efb=False)
        bundle = total_loss(fields, y, mask, t=300, t_max=1000, switches=switches)
        assert (bundle.l_cs12.item(), bundle.l_cs21.item(), bundle.l_efb.item()) == (0.0, 0.0, 0.0)

    def test_supervised_terms_use_labeled_images_only(self, rng):
        fields, y, mask = self._batch(rng)
        labeled_only = total_loss(fields, y, mask, t=300, t_max=1000)
        d1 = dirichlet_from_array(fields[0].e.data[:2])
        assert labeled_only.l_ecb.item() == pytest.approx(ecb_loss(d1, y, t=300).item(), abs=1e-12)

    def test_no_labeled_images(self, rng):
        fields, y, _ = self._batch(rng)
        with pytest.raises(ValidationError):
            total_loss(fields, y[:0], [False] * 4, t=0, t_max=10)

    def test_perfect_agreement_limit(self):
        y = np.zeros((1, 2, 2, 2))
        y[0, 0, 0] = 1.0
        y[0, 1, 1] = 1.0
        fields = [EvidenceField(Tensor(y * 1e9)) for _ in range(3)]
        assert total_loss(fields, y, [True], t=300, t_max=1000).l_total.item() < 1e-4
