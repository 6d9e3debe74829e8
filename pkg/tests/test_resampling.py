"""Sinkhorn plans, the OT resampler, multinomial baseline, and the schedule."""

import numpy as np
import pytest
from scipy import stats

import flowfilter.autodiff as ad
from flowfilter.autodiff import ParamStore, Tensor
from flowfilter import resampling as rs
from _oracles import central_difference_gradient, exact_ot_cost


def uniform_log(n, batch=()):
    return Tensor(np.full(batch + (n,), -np.log(n)))


class TestSinkhorn:
    def test_single_point(self):
        plan = rs.sinkhorn(Tensor(np.zeros((1, 1))), a=Tensor([1.0]), b=Tensor([1.0]),
                           epsilon=0.1)
        np.testing.assert_allclose(plan.plan, [[1.0]], atol=1e-12)

    def test_diagonal_dominance(self):
        n = 5
        cost = np.ones((n, n)) - np.eye(n)  # zero diagonal, unit off-diagonal
        a = np.full(n, 1.0 / n)
        plan = rs.sinkhorn(Tensor(cost), a=Tensor(a), b=Tensor(a), epsilon=1e-3,
                           max_iter=500, tol=1e-12)
        np.testing.assert_allclose(plan.plan, np.eye(n) / n, atol=1e-6)

    def test_marginals_on_accepted_plans(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            n = rng.integers(2, 9)
            pts = rng.standard_normal((n, 2))
            cost = ((pts[:, None] - pts[None, :]) ** 2).sum(-1)
            a = rng.dirichlet(np.ones(n))
            b = rng.dirichlet(np.ones(n))
            plan = rs.sinkhorn(Tensor(cost / cost.max()), a=Tensor(a), b=Tensor(b),
                               epsilon=0.05, max_iter=2000, tol=1e-4)
            assert plan.converged
            assert plan.row_error < 1e-4 and plan.col_error < 1e-4
            np.testing.assert_allclose(plan.plan.sum(axis=1), a, atol=1e-4)

    def test_close_to_exact_ot_at_small_epsilon(self):
        rng = np.random.default_rng(2)
        for _ in range(10):
            n = int(rng.integers(2, 6))
            pts = rng.standard_normal((n, 2))
            cost = ((pts[:, None] - pts[None, :]) ** 2).sum(-1)
            cost += rng.random((n, n)) * 0.01  # break symmetry/ties
            a = rng.dirichlet(np.ones(n) * 2)
            b = rng.dirichlet(np.ones(n) * 2)
            eps = 1e-3 * cost.max()
            plan = rs.sinkhorn(Tensor(cost), a=Tensor(a), b=Tensor(b), epsilon=eps,
                               max_iter=40000, tol=1e-10)
            got = float((plan.plan * cost).sum())
            want = exact_ot_cost(a, b, cost)
            assert abs(got - want) <= 0.01 * max(want, 1e-12) + 1e-9

    def test_entropic_cost_decreases_toward_exact(self):
        rng = np.random.default_rng(3)
        n = 6
        pts = rng.standard_normal((n, 2))
        cost = ((pts[:, None] - pts[None, :]) ** 2).sum(-1)
        cost /= cost.max()
        a = rng.dirichlet(np.ones(n))
        b = rng.dirichlet(np.ones(n))
        exact = exact_ot_cost(a, b, cost)
        costs = []
        for eps in [0.5, 0.2, 0.1, 0.05, 0.02, 0.01]:
            plan = rs.sinkhorn(Tensor(cost), a=Tensor(a), b=Tensor(b), epsilon=eps,
                               max_iter=30000, tol=1e-11)
            costs.append(float((plan.plan * cost).sum()))
        diffs = np.diff(costs)
        assert np.all(diffs <= 1e-9)               # monotone decrease
        assert costs[-1] >= exact - 1e-9           # bounded below by the optimum
        assert costs[-1] - exact < costs[0] - exact  # strict progress toward it

    def test_batched_matches_per_member(self):
        rng = np.random.default_rng(4)
        n = 7
        pts = rng.standard_normal((3, n, 2))
        cost = ((pts[:, :, None] - pts[:, None, :]) ** 2).sum(-1)
        a = rng.dirichlet(np.ones(n), size=3)
        b = np.full((3, n), 1.0 / n)
        batched = rs.sinkhorn(Tensor(cost), a=Tensor(a), b=Tensor(b), epsilon=0.1,
                              max_iter=50, tol=0.0)
        for k in range(3):
            solo = rs.sinkhorn(Tensor(cost[k]), a=Tensor(a[k]), b=Tensor(b[k]),
                               epsilon=0.1, max_iter=50, tol=0.0)
            np.testing.assert_allclose(batched.plan[k], solo.plan, atol=1e-14)

    def test_input_validation(self):
        c = Tensor(np.zeros((2, 2)))
        ok = Tensor([0.5, 0.5])
        with pytest.raises(rs.ResamplingError, match="epsilon"):
            rs.sinkhorn(c, a=ok, b=ok, epsilon=0.0)
        with pytest.raises(rs.ResamplingError, match="sum to 1"):
            rs.sinkhorn(c, a=Tensor([0.5, 0.6]), b=ok, epsilon=0.1)
        with pytest.raises(rs.ResamplingError, match="positive"):
            rs.sinkhorn(c, a=Tensor([1.0, 0.0]), b=ok, epsilon=0.1)
        with pytest.raises(rs.ResamplingError):
            rs.sinkhorn(c, a=ok, b=ok, log_a=uniform_log(2), epsilon=0.1)


class TestOtResample:
    def test_self_transport(self):
        # uniform weights, well-separated particles, tiny blur: stay put
        pts = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0], [7.0, 7.0],
                        [-4.0, 3.0], [3.0, -6.0]])
        new, plan = rs.ot_resample(Tensor(pts), uniform_log(6), epsilon=1e-4,
                                   max_iter=2000, tol=1e-10)
        diameter = np.sqrt(((pts[:, None] - pts[None, :]) ** 2).sum(-1)).max()
        disp = np.sqrt(((new.data - pts) ** 2).sum(-1)).max()
        assert disp < 1e-3 * diameter

    def test_point_mass(self):
        rng = np.random.default_rng(5)
        pts = rng.standard_normal((5, 3))
        lw = np.full(5, -600.0)
        lw[2] = 0.0
        new, _ = rs.ot_resample(Tensor(pts), Tensor(lw), epsilon=0.1, max_iter=500,
                                tol=1e-8)
        np.testing.assert_allclose(new.data, np.tile(pts[2], (5, 1)), atol=1e-4)

    def test_weighted_mean_preserved(self):
        rng = np.random.default_rng(6)
        worst = 0.0
        for _ in range(200):
            n = int(rng.integers(2, 40))
            d = int(rng.integers(1, 4))
            pts = rng.standard_normal((n, d)) * rng.uniform(0.5, 10)
            lw = rng.standard_normal(n) * 3.0
            new, _ = rs.ot_resample(Tensor(pts), Tensor(lw),
                                    epsilon=rng.uniform(0.05, 1.0), max_iter=100)
            w = np.exp(lw - lw.max())
            w /= w.sum()
            want = (w[:, None] * pts).sum(0)
            got = new.data.mean(axis=0)
            worst = max(worst, np.abs(got - want).max())
        assert worst < 1e-10

    def test_degenerate_identical_particles(self):
        pts = np.ones((8, 2)) * 3.7
        new, plan = rs.ot_resample(Tensor(pts), uniform_log(8), epsilon=0.5)
        np.testing.assert_allclose(new.data, pts, atol=1e-12)
        np.testing.assert_allclose(plan.plan.sum(), 1.0, atol=1e-12)

    def test_gradient_wrt_weights_and_states(self):
        rng = np.random.default_rng(7)
        n, d = 6, 2
        pts = rng.standard_normal((n, d))
        lw = rng.standard_normal(n) * 0.5
        W = rng.standard_normal((n, d))

        def run(flat):
            store = ad.ParamStore()
            p_pts = store.add("pts", flat[: n * d].reshape(n, d))
            p_lw = store.add("lw", flat[n * d:])
            tape = ad.Tape()
            with ad.use_tape(tape):
                store.watch(tape)
                new, _ = rs.ot_resample(p_pts, p_lw, epsilon=0.2, max_iter=40,
                                        tol=0.0)
                loss = ad.sum(new * Tensor(W))
            g = ad.grad(loss, store)
            return loss.item(), np.concatenate([g["pts"].ravel(), g["lw"]])

        x0 = np.concatenate([pts.ravel(), lw])
        _, got = run(x0)

        def value(v):
            store = ad.ParamStore()
            p_pts = store.add("pts", v[: n * d].reshape(n, d))
            p_lw = store.add("lw", v[n * d:])
            new, _ = rs.ot_resample(p_pts, p_lw, epsilon=0.2, max_iter=40, tol=0.0)
            return float((new.data * W).sum())

        want = central_difference_gradient(value, x0, eps=1e-6)
        np.testing.assert_allclose(got, want, rtol=1e-3, atol=1e-8)

    def test_batched_resample_shapes(self):
        rng = np.random.default_rng(8)
        pts = rng.standard_normal((4, 10, 3))
        lw = rng.standard_normal((4, 10))
        new, plan = rs.ot_resample(Tensor(pts), Tensor(lw), epsilon=0.3)
        assert new.data.shape == (4, 10, 3)
        # per-member mean preservation
        w = np.exp(lw - lw.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        want = np.einsum("bn,bnd->bd", w, pts)
        np.testing.assert_allclose(new.data.mean(axis=1), want, atol=1e-10)


class TestMultinomial:
    def test_point_mass_copies(self):
        pts = np.arange(12.0).reshape(4, 3)
        lw = np.array([-900.0, 0.0, -900.0, -900.0])
        new, idx = rs.multinomial_resample(Tensor(pts), Tensor(lw),
                                           np.random.default_rng(0))
        np.testing.assert_array_equal(new.data, np.tile(pts[1], (4, 1)))
        assert np.all(idx == 1)

    def test_detached_from_tape(self):
        tape = ad.Tape()
        store = ParamStore()
        pts = store.add("pts", np.random.default_rng(1).standard_normal((5, 2)))
        with ad.use_tape(tape):
            store.watch(tape)
            new, _ = rs.multinomial_resample(pts, uniform_log(5),
                                             np.random.default_rng(2))
        assert new.node is None

    def test_distinct_fraction(self):
        n = 10_000
        rng = np.random.default_rng(3)
        pts = np.arange(float(n))[:, None]
        fracs = []
        for _ in range(100):
            _, idx = rs.multinomial_resample(Tensor(pts), uniform_log(n), rng)
            fracs.append(np.unique(idx).size / n)
        want = 1.0 - (1.0 - 1.0 / n) ** n  # ~ 1 - 1/e
        assert abs(np.mean(fracs) - want) < 0.005

    def test_expected_counts_chi_square(self):
        # n slots split evenly over k categories, each slot weighted by its
        # category weight: drawn categories must follow the category law.
        rng = np.random.default_rng(4)
        k, n = 10, 100_000
        w = rng.dirichlet(np.ones(k) * 5)
        cats = np.arange(n) % k
        pts = cats.astype(float)[:, None]
        lw = np.log(w[cats])
        _, idx = rs.multinomial_resample(Tensor(pts), Tensor(lw),
                                         np.random.default_rng(5))
        counts = np.bincount(cats[idx], minlength=k)
        res = stats.chisquare(counts, w * n)
        assert res.pvalue > 1e-3


class TestSchedule:
    def test_reference_value(self):
        assert rs.epsilon_schedule(100) == pytest.approx(0.5 / np.log(100.0) ** 2)
        assert rs.epsilon_schedule(100) == pytest.approx(0.023568, abs=1e-5)

    def test_strictly_decreasing(self):
        grid = [10, 25, 100, 400, 1600, 10_000]
        vals = [rs.epsilon_schedule(n) for n in grid]
        assert np.all(np.diff(vals) < 0)

    def test_vanishes_faster_than_one_over_log(self):
        # epsilon * log(n) = c / log(n) must itself tend to zero
        grid = [100, 10**3, 10**4, 10**5, 10**6]
        prods = [rs.epsilon_schedule(n) * np.log(n) for n in grid]
        assert np.all(np.diff(prods) < 0)
        np.testing.assert_allclose(prods, [0.5 / np.log(n) for n in grid])

    def test_small_n_rejected(self):
        with pytest.raises(rs.ResamplingError):
            rs.epsilon_schedule(1)


class TestPlanDump:
    def test_write_and_cap(self, tmp_path):
        rng = np.random.default_rng(9)
        pts = rng.standard_normal((6, 2))
        _, plan = rs.ot_resample(Tensor(pts), uniform_log(6), epsilon=0.3)
        path = tmp_path / "plan.csv"
        rs.dump_plan_csv(plan, path, comment="cfg=deadbeef")
        lines = path.read_text().splitlines()
        assert lines[0] == "# cfg=deadbeef"
        assert lines[1].startswith("# epsilon=")
        assert len(lines) == 3 + 6
        vals = np.array([[float(v) for v in ln.split(",")] for ln in lines[3:]])
        np.testing.assert_allclose(vals.sum(), 1.0, atol=1e-6)

        big_pts = rng.standard_normal((65, 1))
        _, big_plan = rs.ot_resample(Tensor(big_pts), uniform_log(65), epsilon=0.3)
        with pytest.raises(rs.ResamplingError):
            rs.dump_plan_csv(big_plan, tmp_path / "big.csv")
