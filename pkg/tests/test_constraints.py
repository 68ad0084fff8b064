import math

import numpy as np
import pytest
import torch
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from anocon.constraints import (
    ConstraintSpec,
    entropy_term,
    entropy_term_grad,
    expansion_loss_pixel,
    expansion_loss_pixel_grad,
    log_barrier_ext,
    log_barrier_ext_grad,
    pixel_softmax,
    shannon_entropy,
    size_constraint,
    size_term,
    size_term_grad,
)
from anocon.errors import DomainError, UsageError

T64 = torch.float64


def central_diff(f, x, h=1e-6):
    """Central finite differences of scalar f at every entry of x."""
    x = x.clone()
    g = torch.zeros_like(x)
    flat, gflat = x.view(-1), g.view(-1)
    for i in range(flat.numel()):
        old = flat[i].item()
        flat[i] = old + h
        fp = float(f(x))
        flat[i] = old - h
        fm = float(f(x))
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a, b):
    a, b = torch.as_tensor(a, dtype=T64), torch.as_tensor(b, dtype=T64)
    return float((a - b).abs().max() / max(b.abs().max().item(), 1e-12))


class TestSizeConstraint:
    def test_full_attention(self):
        assert float(size_constraint(torch.ones(3, 3, dtype=T64))) == 0.0

    def test_zero_attention(self):
        assert float(size_constraint(torch.zeros(3, 3, dtype=T64))) == 1.0

    def test_half_covered(self):
        assert float(size_constraint([[1.0, 1.0], [0.0, 0.0]])) == 0.5

    def test_mask_restricts_mean(self):
        a = torch.tensor([[1.0, 0.0], [0.0, 0.0]], dtype=T64)
        m = torch.tensor([[True, False], [False, False]])
        assert float(size_constraint(a, m)) == 0.0

    def test_out_of_range(self):
        with pytest.raises(DomainError):
            size_constraint([[1.5, 0.0]])
        with pytest.raises(DomainError):
            size_constraint([[-0.1, 0.0]])


class TestExpansionLoss:
    def test_values(self):
        assert float(expansion_loss_pixel(torch.ones(4, 4, dtype=T64))) == 0.0
        assert float(expansion_loss_pixel(torch.full((4, 4), 0.5, dtype=T64))) == 0.5

    def test_gradient_is_minus_one_over_size(self):
        a = torch.rand(5, 3, dtype=T64)
        g = expansion_loss_pixel_grad(a)
        assert torch.allclose(g, torch.full_like(a, -1 / 15), atol=1e-15)
        fd = central_diff(expansion_loss_pixel, a)
        assert rel_err(g, fd) < 1e-6


class TestLogBarrier:
    def test_known_values(self):
        assert float(log_barrier_ext(-1.0, 10)) == pytest.approx(0.0, abs=1e-15)
        assert float(log_barrier_ext(0.0, 10)) == pytest.approx(0.5605170186, abs=1e-10)
        assert float(log_barrier_ext(-0.01, 10)) == pytest.approx(0.4605170186, abs=1e-10)

    def test_both_branches_at_switch(self):
        t = 10.0
        z = -1 / t**2
        lower = -math.log(-z) / t
        upper = t * z - math.log(1 / t**2) / t + 1 / t
        assert lower == pytest.approx(0.4605170186, abs=1e-10)
        assert upper == pytest.approx(0.4605170186, abs=1e-10)

    def test_nonpositive_t(self):
        with pytest.raises(DomainError):
            log_barrier_ext(0.0, 0.0)
        with pytest.raises(DomainError):
            log_barrier_ext(0.0, -1.0)

    @pytest.mark.parametrize("t", [1.0, 5.0, 10.0, 25.0, 50.0])
    def test_continuity(self, t):
        z0 = -1 / t**2
        lower = -math.log(-z0) / t
        upper = t * z0 - math.log(1 / t**2) / t + 1 / t
        assert abs(lower - upper) < 1e-9
        # derivatives: -1/(t z) at z0 equals t
        assert abs(-1 / (t * z0) - t) < 1e-9
        assert abs(float(log_barrier_ext_grad(z0, t)) - t) < 1e-9

    @settings(max_examples=100, deadline=None)
    @given(st.floats(-5, 5), st.floats(-5, 5), st.sampled_from([1.0, 5.0, 10.0, 25.0, 50.0]))
    def test_monotone(self, z1, z2, t):
        lo, hi = min(z1, z2), max(z1, z2)
        assume(hi - lo > 1e-9)  # below float resolution of the barrier values
        assert float(log_barrier_ext(lo, t)) < float(log_barrier_ext(hi, t))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        for t in (1.0, 10.0, 50.0):
            z = torch.tensor(rng.uniform(-2, 1, 50), dtype=T64)
            z = z[(z + 1 / t**2).abs() > 1e-4]  # keep off the switch point
            fd = central_diff(lambda v: log_barrier_ext(v, t).sum(), z, h=1e-7)
            assert rel_err(log_barrier_ext_grad(z, t), fd) < 1e-5

    def test_gradient_strictly_positive(self):
        z = torch.linspace(-10, 10, 1001, dtype=T64)
        assert torch.all(log_barrier_ext_grad(z, 10.0) > 0)

    def test_defined_for_all_real_z(self):
        z = torch.tensor([-1e6, -1.0, 0.0, 1.0, 1e6], dtype=T64)
        assert torch.all(torch.isfinite(log_barrier_ext(z, 10.0)))


class TestSizeTerm:
    def test_full_attention_per_mode(self):
        a = torch.ones(3, 4, 4, dtype=T64)
        assert float(size_term(a, ConstraintSpec("l2_pixel", lambda_s=5))) == 0.0
        assert float(size_term(a, ConstraintSpec("l2_image", lambda_s=5))) == 0.0
        barrier = float(size_term(a, ConstraintSpec("logbarrier", lambda_s=1, t=10)))
        assert barrier == pytest.approx(0.5605170186, abs=1e-10)
        assert barrier > 0

    def test_geometric_schedule(self):
        spec = ConstraintSpec("logbarrier", lambda_s=1, t_schedule="geometric_1p01")
        assert spec.t_eff(0) == 1.0
        assert spec.t_eff(100) == pytest.approx(2.7048138294, abs=1e-9)
        a = torch.ones(1, 2, 2, dtype=T64)
        t = spec.t_eff(100)
        expect = -math.log(1 / t**2) / t + 1 / t
        assert float(size_term(a, spec, epoch=100)) == pytest.approx(expect, abs=1e-12)

    def test_l2_image_square(self):
        a = torch.tensor([[[1.0, 1.0], [0.0, 0.0]]], dtype=T64)
        assert float(size_term(a, ConstraintSpec("l2_image", lambda_s=1))) == 0.25

    def test_kind_mismatch(self):
        with pytest.raises(UsageError):
            size_term(torch.ones(1, 2, 2), ConstraintSpec("entropy", lambda_h=0.1))
        with pytest.raises(UsageError):
            size_term(torch.ones(1, 2, 2), ConstraintSpec("none"))

    @pytest.mark.parametrize("kind", ["l2_pixel", "l2_image", "logbarrier"])
    def test_gradients(self, kind):
        torch.manual_seed(1)
        spec = ConstraintSpec(kind, lambda_s=3.0, t=10.0)
        a = torch.rand(4, 5, 5, dtype=T64) * 0.9 + 0.05
        analytic = size_term_grad(a, spec)
        fd = central_diff(lambda v: size_term(v, spec), a)
        auto = a.clone().requires_grad_(True)
        size_term(auto, spec).backward()
        assert rel_err(analytic, fd) < 1e-4
        assert rel_err(auto.grad, analytic) < 1e-12

    def test_l2_image_gradient_zero_when_satisfied(self):
        # f_c = 0 exactly at full attention: one-sided penalty gives no gradient
        a = torch.ones(2, 3, 3, dtype=T64)
        assert torch.all(size_term_grad(a, ConstraintSpec("l2_image", lambda_s=1)) == 0)
        assert torch.all(size_term_grad(a, ConstraintSpec("logbarrier", lambda_s=1, t=5)) < 0)


class TestSoftmaxEntropy:
    def test_equal_values(self):
        p = pixel_softmax(torch.zeros(1, 2, dtype=T64), torch.ones(1, 2, dtype=torch.bool))
        assert p.tolist() == [[0.5, 0.5]]

    def test_ln3(self):
        p = pixel_softmax(torch.tensor([[0.0, math.log(3)]], dtype=T64), torch.ones(1, 2, dtype=torch.bool))
        assert p[0, 0].item() == pytest.approx(0.25, abs=1e-15)
        assert p[0, 1].item() == pytest.approx(0.75, abs=1e-15)

    def test_zero_outside_brain_and_normalized(self):
        rng = np.random.default_rng(3)
        a = torch.tensor(rng.normal(0, 5, (6, 6)), dtype=T64)
        b = torch.tensor(rng.random((6, 6)) > 0.4)
        p = pixel_softmax(a, b)
        assert torch.all(p[~b] == 0)
        assert torch.all(p[b] > 0)
        assert abs(p[b].sum().item() - 1) < 1e-6

    def test_stable_for_huge_logits(self):
        b = torch.ones(2, 2, dtype=torch.bool)
        p = pixel_softmax(torch.tensor([[1e4, 1e4], [0.0, 0.0]], dtype=T64), b)
        assert torch.all(torch.isfinite(p))
        assert p.sum().item() == pytest.approx(1.0)

    def test_empty_brain(self):
        with pytest.raises(DomainError):
            pixel_softmax(torch.zeros(2, 2), torch.zeros(2, 2, dtype=torch.bool))

    def test_one_hot_entropy(self):
        p = torch.zeros(3, 3, dtype=T64)
        p[1, 1] = 1
        assert float(shannon_entropy(p, torch.ones(3, 3, dtype=torch.bool))) == 0.0

    @pytest.mark.parametrize("i", [2, 4, 16])
    def test_uniform_entropy(self, i):
        p = torch.full((1, i), 1 / i, dtype=T64)
        h = float(shannon_entropy(p, torch.ones(1, i, dtype=torch.bool)))
        assert h == pytest.approx(math.log(i) / i, abs=1e-12)

    def test_uniform_four(self):
        p = torch.full((2, 2), 0.25, dtype=T64)
        assert float(shannon_entropy(p, torch.ones(2, 2, dtype=torch.bool))) == pytest.approx(0.34657359, abs=1e-8)

    def test_negative_probabilities(self):
        with pytest.raises(DomainError):
            shannon_entropy(torch.tensor([[-0.1, 1.1]]), torch.ones(1, 2, dtype=torch.bool))

    @settings(max_examples=80, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(2, 40))
    def test_uniform_is_maximal(self, seed, i):
        rng = np.random.default_rng(seed)
        b = torch.ones(1, i, dtype=torch.bool)
        p = pixel_softmax(torch.tensor(rng.normal(0, 3, (1, i)), dtype=T64), b)
        assert float(shannon_entropy(p, b)) <= math.log(i) / i + 1e-12


class TestEntropyTerm:
    def test_uniform_value(self):
        spec = ConstraintSpec("entropy", lambda_h=0.1)
        a = torch.zeros(3, 2, 2, dtype=T64)
        b = torch.ones(3, 2, 2, dtype=torch.bool)
        assert float(entropy_term(a, b, spec)) == pytest.approx(-0.1 * math.log(4) / 4, abs=1e-12)
        assert float(entropy_term(a, b, spec)) == pytest.approx(-0.03466, abs=1e-5)

    def test_zero_weight(self):
        rng = np.random.default_rng(0)
        a = torch.tensor(rng.normal(size=(2, 4, 4)))
        b = torch.ones(2, 4, 4, dtype=torch.bool)
        assert float(entropy_term(a, b, ConstraintSpec("entropy", lambda_h=0.0))) == 0.0

    def test_kind_mismatch(self):
        with pytest.raises(UsageError):
            entropy_term(torch.zeros(1, 2, 2), torch.ones(1, 2, 2, dtype=torch.bool), ConstraintSpec("l2_image"))

    def test_gradient_at_random_points(self):
        spec = ConstraintSpec("entropy", lambda_h=0.1)
        rng = np.random.default_rng(7)
        for _ in range(20):
            a = torch.tensor(rng.normal(0, 1.5, (2, 4, 4)), dtype=T64)
            b = torch.tensor(rng.random((2, 4, 4)) > 0.3)
            b[:, 0, 0] = True
            analytic = entropy_term_grad(a, b, spec)
            fd = central_diff(lambda v: entropy_term(v, b, spec), a)
            assert rel_err(analytic, fd) < 1e-4
            auto = a.clone().requires_grad_(True)
            entropy_term(auto, b, spec).backward()
            assert rel_err(auto.grad, analytic) < 1e-10


def test_spec_invariants():
    with pytest.raises(UsageError):
        ConstraintSpec("logbarrier", t=0.0)
    with pytest.raises(UsageError):
        ConstraintSpec("bogus")
    with pytest.raises(UsageError):
        ConstraintSpec("entropy", lambda_h=-1)
