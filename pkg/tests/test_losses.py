import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from uotisp import losses


def t(*values):
    return torch.tensor(values, dtype=torch.float64)


class TestPenaltyValues:
    def test_phi_exp_trivials(self):
        assert float(losses.phi_exp(torch.tensor(0.0))) == pytest.approx(1.0, abs=1e-9)
        assert float(losses.phi_exp(torch.tensor(1.0, dtype=torch.float64))) == pytest.approx(math.e, abs=1e-9)
        assert float(losses.phi_exp(torch.tensor(math.log(2.0), dtype=torch.float64))) == pytest.approx(2.0, abs=1e-9)

    def test_phi_exp_clamps(self):
        big = float(losses.phi_exp(torch.tensor(50.0)))
        assert big == pytest.approx(math.exp(20.0), rel=1e-6)

    def test_non_finite_rejected(self):
        for phi in (losses.phi_exp, losses.phi_softplus, losses.phi_identity):
            with pytest.raises(ValueError):
                phi(torch.tensor(float("nan")))

    @pytest.mark.parametrize("name", ["exp", "softplus", "identity"])
    def test_pair_nondecreasing_and_convex(self, name):
        pair = losses.resolve_penalty(name)
        grid = torch.linspace(-10.0, 10.0, 81, dtype=torch.float64)
        for phi in (pair.phi1, pair.phi2):
            vals = phi(grid)
            assert (vals[1:] >= vals[:-1] - 1e-12).all()
            mid = phi((grid[:-2] + grid[2:]) / 2)
            assert (mid <= (phi(grid[:-2]) + phi(grid[2:])) / 2 + 1e-12).all()

    @pytest.mark.parametrize("name", ["exp", "softplus", "identity"])
    def test_clamp_saturates(self, name):
        pair = losses.resolve_penalty(name)
        above = t(21.0, 30.0, 1e6)
        expected = pair.phi1(torch.tensor(pair.clamp_max, dtype=torch.float64))
        assert torch.allclose(pair.phi1(above), expected.expand(3))

    def test_unknown_penalty(self):
        with pytest.raises(KeyError):
            losses.resolve_penalty("nope")


class TestHinge:
    @pytest.mark.parametrize("x,expected", [(-2.0, 0.0), (0.0, 1.0), (1.5, 2.5)])
    def test_values(self, x, expected):
        assert float(losses.hinge(torch.tensor(x, dtype=torch.float64))) == pytest.approx(expected, abs=1e-12)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            losses.hinge(torch.tensor(float("inf")))


class TestCosts:
    def test_unpaired_identical(self):
        x = torch.rand(2, 3, 4, 4)
        assert float(losses.unpaired_cost(x, x, 1e-3)) == 0.0

    def test_unpaired_uniform_difference(self):
        a = torch.zeros(2, 3, 2, 2, dtype=torch.float64)
        b = torch.ones(2, 3, 2, 2, dtype=torch.float64)
        assert float(losses.unpaired_cost(b, a, 1e-3)) == pytest.approx(1e-3, abs=1e-12)

    def test_unpaired_single_element(self):
        # one element differs by 0.5 among 12: tau * 0.25 / 12
        a = torch.zeros(1, 3, 2, 2, dtype=torch.float64)
        b = a.clone()
        b[0, 0, 0, 0] = 0.5
        assert float(losses.unpaired_cost(b, a, 1e-3)) == pytest.approx(1e-3 * 0.25 / 12, abs=1e-15)

    def test_unpaired_errors(self):
        with pytest.raises(ValueError):
            losses.unpaired_cost(torch.zeros(1, 3), torch.zeros(1, 4), 1.0)
        with pytest.raises(ValueError):
            losses.unpaired_cost(torch.zeros(1, 3), torch.zeros(1, 3), -0.1)

    def test_paired_values(self):
        x = torch.rand(2, 3, 4, 4)
        assert float(losses.paired_cost(x, x)) == 0.0
        a = torch.zeros(1, 4, dtype=torch.float64)
        assert float(losses.paired_cost(a + 0.2, a)) == pytest.approx(0.2, abs=1e-12)
        assert float(losses.paired_cost(t(0.0, 1.0).view(1, 2), t(1.0, 0.0).view(1, 2))) == pytest.approx(1.0)

    def test_reduction_none_matches_mean(self):
        gen = torch.rand(4, 3, 2, 2, dtype=torch.float64)
        anchor = torch.rand(4, 3, 2, 2, dtype=torch.float64)
        per = losses.unpaired_cost(gen, anchor, 0.5, reduction="none")
        assert per.shape == (4,)
        assert float(per.mean()) == pytest.approx(float(losses.unpaired_cost(gen, anchor, 0.5)))


class TestR1Penalty:
    def test_constant_potential(self):
        fn = lambda y: torch.full((y.shape[0],), 3.0)
        assert float(losses.r1_penalty(fn, torch.rand(3, 5), 1.5)) == 0.0

    def test_linear_potential(self):
        fn = lambda y: y.flatten(1).sum(dim=1)
        val = losses.r1_penalty(fn, torch.full((2, 4), 0.5, dtype=torch.float64), 1.5)
        assert float(val) == pytest.approx(3.0, abs=1e-12)

    def test_quadratic_matches_finite_differences(self):
        # P(y) = sum y^2 at y=0.5 everywhere, D=4: r1 = 0.75 * sum (2*0.5)^2 = 3
        fn = lambda y: y.flatten(1).pow(2).sum(dim=1)
        y = torch.full((1, 4), 0.5, dtype=torch.float64)
        analytic = float(losses.r1_penalty(fn, y, 1.5).detach())
        assert analytic == pytest.approx(3.0, abs=1e-10)
        # independent check: finite-difference the gradient norm on the same stub
        eps = 1e-5
        grads = []
        for i in range(4):
            hi, lo = y.clone(), y.clone()
            hi[0, i] += eps
            lo[0, i] -= eps
            grads.append((float(fn(hi)[0]) - float(fn(lo)[0])) / (2 * eps))
        fd = 0.75 * sum(g * g for g in grads)
        assert analytic == pytest.approx(fd, rel=1e-6)

    def test_nonscalar_potential_rejected(self):
        fn = lambda y: y
        with pytest.raises(ValueError):
            losses.r1_penalty(fn, torch.rand(2, 3), 1.0)


class TestPotentialObjective:
    def test_all_zero(self):
        pair = losses.exp_pair()
        val = losses.potential_objective(t(0.0), t(0.0), t(0.0), pair, 0.0)
        assert float(val) == pytest.approx(2.0, abs=1e-9)

    def test_symmetric_five(self):
        pair = losses.exp_pair()
        val = losses.potential_objective(t(0.0), t(5.0), t(5.0), pair, 0.0)
        assert float(val) == pytest.approx(math.exp(5) + math.exp(-5), rel=1e-9)

    def test_with_r1(self):
        pair = losses.exp_pair()
        val = losses.potential_objective(t(1.0), t(1.0), t(0.0), pair, 3.0)
        assert float(val) == pytest.approx(5.0, abs=1e-9)

    def test_empty_batch(self):
        pair = losses.exp_pair()
        with pytest.raises(ValueError):
            losses.potential_objective(torch.empty(0), torch.empty(0), torch.empty(0), pair)

    @given(
        base=st.floats(-3, 3),
        bump=st.floats(0.01, 3),
        cost=st.floats(0, 2),
    )
    @settings(max_examples=40, deadline=None)
    def test_monotone_in_potential_gap(self, base, bump, cost):
        pair = losses.exp_pair()
        c = t(cost, cost)
        pf = t(base, base - 1.0)
        pr = t(base / 2, base)
        ref = float(losses.potential_objective(c, pf, pr, pair))
        up_fake = float(losses.potential_objective(c, pf + bump, pr, pair))
        up_real = float(losses.potential_objective(c, pf, pr + bump, pair))
        assert up_fake >= ref - 1e-9
        assert up_real <= ref + 1e-9


class TestTransportObjective:
    def test_values(self):
        assert float(losses.transport_objective(t(0.5), t(2.0))) == pytest.approx(-1.5)
        assert float(losses.transport_objective(t(0.0), t(0.0))) == 0.0
        assert float(losses.transport_objective(t(1.0, 0.0), t(0.0, 1.0))) == pytest.approx(0.0)

    def test_empty(self):
        with pytest.raises(ValueError):
            losses.transport_objective(torch.empty(0), torch.empty(0))


class TestExpertObjectives:
    def test_disc_trivials(self):
        assert float(losses.expert_disc_objective([t(2.0)], [t(-3.0)])) == 0.0
        assert float(losses.expert_disc_objective([t(0.0)], [t(0.0)])) == pytest.approx(2.0)
        zero = t(0.0, 0.0)
        assert float(losses.expert_disc_objective([zero, zero], [zero, zero])) == pytest.approx(4.0)

    def test_disc_mismatch(self):
        with pytest.raises(ValueError):
            losses.expert_disc_objective([t(0.0)], [t(0.0), t(0.0)])

    def test_disc_nonnegative(self):
        scores = [torch.randn(8, dtype=torch.float64) for _ in range(3)]
        fakes = [torch.randn(8, dtype=torch.float64) for _ in range(3)]
        assert float(losses.expert_disc_objective(scores, fakes)) >= 0.0

    def test_gen_trivials(self):
        assert float(losses.expert_gen_objective([t(3.0)])) == pytest.approx(-3.0)
        assert float(losses.expert_gen_objective([])) == 0.0
        assert float(losses.expert_gen_objective([t(1.0), t(-1.0), t(2.0)])) == pytest.approx(-2.0)

    @given(st.lists(st.lists(st.floats(-5, 5), min_size=2, max_size=4), min_size=1, max_size=4))
    @settings(max_examples=40, deadline=None)
    def test_additivity_over_experts(self, rows):
        width = min(len(r) for r in rows)
        reals = [t(*r[:width]) for r in rows]
        fakes = [t(*r[:width]) * -0.5 for r in rows]
        joint_disc = float(losses.expert_disc_objective(reals, fakes))
        split_disc = sum(float(losses.expert_disc_objective([r], [f])) for r, f in zip(reals, fakes))
        assert joint_disc == pytest.approx(split_disc, rel=1e-9, abs=1e-9)
        joint_gen = float(losses.expert_gen_objective(fakes))
        split_gen = sum(float(losses.expert_gen_objective([f])) for f in fakes)
        assert joint_gen == pytest.approx(split_gen, rel=1e-9, abs=1e-9)


class TestTotalObjective:
    @pytest.mark.parametrize(
        "lt,lexp,lam,expected",
        [(1.0, -2.0, 1.0, -1.0), (0.7, 5.0, 0.0, 0.7), (0.0, 4.0, 0.5, 2.0)],
    )
    def test_values(self, lt, lexp, lam, expected):
        out = losses.total_transport_objective(
            torch.tensor(lt, dtype=torch.float64), torch.tensor(lexp, dtype=torch.float64), lam
        )
        assert float(out) == pytest.approx(expected, abs=1e-12)

    def test_empty_committee_recovers_transport_objective(self):
        lt = losses.transport_objective(t(0.3, 0.2), t(1.0, -1.0))
        lexp = losses.expert_gen_objective([])
        assert float(losses.total_transport_objective(lt, lexp, 1.0)) == float(lt)


class TestClassicalReduction:
    def test_identity_pair_recovers_dual_pairing(self):
        # with identity penalties and gamma=0, L_P + L_T == mean(-pot_real)
        pair = losses.identity_pair()
        c = t(0.4, 0.1, 0.9)
        pf = t(0.2, -0.3, 1.1)
        pr = t(0.5, 0.0, -0.2)
        lp = losses.potential_objective(c, pf, pr, pair, 0.0)
        lt = losses.transport_objective(c, pf)
        assert float(lp + lt) == pytest.approx(float((-pr).mean()), abs=1e-12)


class TestLossBreakdown:
    @given(
        cost=st.floats(-10, 10),
        pot=st.floats(-10, 10),
        exp=st.floats(-10, 10),
        lam=st.floats(0, 3),
    )
    @settings(max_examples=60, deadline=None)
    def test_recomposition_exact(self, cost, pot, exp, lam):
        total = losses.LossBreakdown.compose_total(cost, pot, exp, lam)
        breakdown = losses.LossBreakdown(
            cost_term=cost, potential_term=pot, expert_term=exp, total_transport=total
        )
        # bit-level identity, not approximate
        assert breakdown.total_transport == (breakdown.cost_term - breakdown.potential_term) + lam * breakdown.expert_term
