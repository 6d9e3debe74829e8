"""Flow forward/inverse/log-determinant contracts."""

import numpy as np
import pytest

import flowfilter.autodiff as ad
from flowfilter.autodiff import ParamStore, Tensor
from flowfilter import flows
from _oracles import central_difference_gradient, numerical_jacobian


def random_planar(seed, dim=2, cond_dim=0, randomize=True):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    flow = flows.PlanarFlow(store, "pf", dim, cond_dim=cond_dim, rng=rng)
    if randomize:
        updates = {"pf.w": rng.standard_normal(dim), "pf.v": rng.standard_normal(dim)}
        if cond_dim:
            updates["pf.cond_w"] = rng.standard_normal(cond_dim)
            updates["pf.cond_b"] = rng.standard_normal(())
        else:
            updates["pf.b"] = rng.standard_normal(())
        store.set_values(updates)
    return store, flow


def random_coupling_stack(seed, dim=4, n_units=1, cond_dim=0):
    rng = np.random.default_rng(seed)
    store = ParamStore()
    stack = flows.make_coupling_stack(
        store, "cs", dim, n_units, cond_dim=cond_dim, hidden=8, rng=rng,
        identity_start=False,
    )
    return store, stack


def numeric_logdet(fn, z0):
    """log|det| of the Jacobian of ``fn`` at ``z0`` by central differences."""
    jac = numerical_jacobian(fn, z0)
    sign, logdet = np.linalg.slogdet(jac)
    assert sign > 0
    return logdet


class TestPlanar:
    def test_zero_v_is_identity(self):
        store, flow = random_planar(0, dim=3, randomize=False)
        z = np.random.default_rng(1).standard_normal((5, 3))
        s, logdet = flow.forward(Tensor(z))
        np.testing.assert_array_equal(s.data, z)
        np.testing.assert_array_equal(logdet.data, np.zeros(5))

    def test_scalar_case_at_origin(self):
        # w=1, v=1, b=0, z=0: s = 0 + 1*tanh(0) = 0, logdet = log(1 + tanh'(0)) = log 2
        store = ParamStore()
        flow = flows.PlanarFlow(store, "pf", 1, rng=np.random.default_rng(0))
        store.set_values({"pf.w": [1.0], "pf.v": [1.0], "pf.b": 0.0})
        s, logdet = flow.forward(Tensor([[0.0]]))
        assert s.data[0, 0] == 0.0
        np.testing.assert_allclose(logdet.data[0], np.log(2.0), rtol=0, atol=1e-15)

    @pytest.mark.parametrize("seed", range(6))
    def test_logdet_matches_numerical_jacobian(self, seed):
        store, flow = random_planar(seed, dim=2)
        z0 = np.random.default_rng(100 + seed).standard_normal(2)

        def fn(v):
            s, _ = flow.forward(Tensor(v.reshape(1, 2)))
            return s.data.ravel()

        _, logdet = flow.forward(Tensor(z0.reshape(1, 2)))
        np.testing.assert_allclose(logdet.data[0], numeric_logdet(fn, z0), atol=1e-6)

    def test_margin_enforced_for_adversarial_v(self):
        # choose v so that wᵀv = -3, far past the invertibility boundary
        store, flow = random_planar(3, dim=4, randomize=False)
        w = np.random.default_rng(5).standard_normal(4)
        v = -3.0 * w / np.dot(w, w)
        store.set_values({"pf.w": w, "pf.v": v})
        v_hat = flow._v_hat()
        wv_hat = float(np.dot(w, v_hat.data))
        assert wv_hat >= -1.0 + flows.PLANAR_MARGIN - 1e-12
        z = np.random.default_rng(6).standard_normal((64, 4))
        _, logdet = flow.forward(Tensor(z))
        assert np.all(np.isfinite(logdet.data))

    def test_reparametrization_identity_on_feasible_set(self):
        # wᵀv > -1 + margin already: v̂ must equal v exactly
        store, flow = random_planar(9, dim=3, randomize=False)
        w = np.array([0.5, -0.2, 0.1])
        v = np.array([0.3, 0.4, -0.1])
        assert np.dot(w, v) > -1.0 + flows.PLANAR_MARGIN
        store.set_values({"pf.w": w, "pf.v": v})
        np.testing.assert_array_equal(flow._v_hat().data, v)

    def test_conditional_bias_enters_inner_argument(self):
        store, flow = random_planar(11, dim=1, cond_dim=1)
        z = np.random.default_rng(2).standard_normal((7, 1))
        u = np.random.default_rng(3).standard_normal((7, 1))
        s, _ = flow.forward(Tensor(z), Tensor(u))
        # equivalent unconditional flow with b = S·u + c, evaluated row by row
        S = store["pf.cond_w"].data
        c = store["pf.cond_b"].data
        store2, flow2 = random_planar(11, dim=1, cond_dim=0, randomize=False)
        store2.set_values({"pf.w": store["pf.w"].data, "pf.v": store["pf.v"].data})
        for i in range(7):
            store2.set_values({"pf.b": float(S @ u[i] + c)})
            si, _ = flow2.forward(Tensor(z[i: i + 1]))
            np.testing.assert_allclose(si.data, s.data[i: i + 1], rtol=1e-14)

    def test_conditional_requires_cond(self):
        _, flow = random_planar(1, dim=1, cond_dim=1)
        with pytest.raises(flows.FlowError):
            flow.forward(Tensor([[0.0]]))

    def test_no_inverse(self):
        _, flow = random_planar(1)
        with pytest.raises(flows.FlowError):
            flow.inverse(Tensor([[0.0, 0.0]]))

    def test_param_gradients_match_finite_differences(self):
        store, flow = random_planar(17, dim=2, cond_dim=2)
        rng = np.random.default_rng(18)
        z = rng.standard_normal((6, 2))
        u = rng.standard_normal((6, 2))
        wts = rng.standard_normal((6, 2))

        def loss_value():
            s, logdet = flow.forward(Tensor(z), Tensor(u))
            return ad.sum(s * Tensor(wts)) + ad.sum(logdet)

        x0 = store.flatten()

        def f(vec):
            store.load_flat(vec)
            out = loss_value().item()
            return out

        tape = ad.Tape()
        store.load_flat(x0)
        with ad.use_tape(tape):
            store.watch(tape)
            loss = loss_value()
        grads = ad.grad(loss, store)
        flat_grad = np.concatenate([grads[n].ravel() for n in store.names()])
        fd = central_difference_gradient(f, x0, eps=1e-5)
        store.load_flat(x0)
        np.testing.assert_allclose(flat_grad, fd, rtol=1e-4, atol=1e-7)


class TestCoupling:
    def test_dim_one_rejected_with_guidance(self):
        store = ParamStore()
        with pytest.raises(flows.FlowError, match="planar"):
            flows.CouplingLayer(store, "c", 1, rng=np.random.default_rng(0))

    def test_identity_start_is_exact(self):
        store = ParamStore()
        layer = flows.CouplingLayer(store, "c", 4, rng=np.random.default_rng(0))
        z = np.random.default_rng(1).standard_normal((10, 4))
        s, logdet = layer.forward(Tensor(z))
        np.testing.assert_array_equal(s.data, z)
        np.testing.assert_array_equal(logdet.data, np.zeros(10))

    def test_round_trip(self):
        _, stack = random_coupling_stack(21, dim=4, n_units=2)
        z = np.random.default_rng(22).standard_normal((16, 4))
        s, _ = stack.forward(Tensor(z))
        back, _ = stack.inverse(s)
        assert np.max(np.abs(back.data - z)) < 1e-10

    def test_logdet_antisymmetry(self):
        _, stack = random_coupling_stack(23, dim=6, n_units=2)
        z = np.random.default_rng(24).standard_normal((8, 6))
        s, ld_f = stack.forward(Tensor(z))
        _, ld_i = stack.inverse(s)
        assert np.max(np.abs(ld_f.data + ld_i.data)) < 1e-10

    @pytest.mark.parametrize("seed", range(4))
    def test_single_layer_logdet_vs_numerical_jacobian(self, seed):
        rng = np.random.default_rng(seed)
        store = ParamStore()
        layer = flows.CouplingLayer(store, "c", 4, hidden=8, rng=rng,
                                    identity_start=False)
        z0 = np.random.default_rng(50 + seed).standard_normal(4)

        def fn(v):
            s, _ = layer.forward(Tensor(v.reshape(1, 4)))
            return s.data.ravel()

        _, logdet = layer.forward(Tensor(z0.reshape(1, 4)))
        np.testing.assert_allclose(logdet.data[0], numeric_logdet(fn, z0), atol=1e-5)

    @pytest.mark.parametrize("seed", range(4))
    def test_stack_logdet_vs_numerical_jacobian(self, seed):
        _, stack = random_coupling_stack(60 + seed, dim=4, n_units=1)
        z0 = np.random.default_rng(70 + seed).standard_normal(4)

        def fn(v):
            s, _ = stack.forward(Tensor(v.reshape(1, 4)))
            return s.data.ravel()

        _, logdet = stack.forward(Tensor(z0.reshape(1, 4)))
        np.testing.assert_allclose(logdet.data[0], numeric_logdet(fn, z0), atol=1e-5)

    def test_conditional_coupling_uses_cond(self):
        rng = np.random.default_rng(31)
        store = ParamStore()
        layer = flows.CouplingLayer(store, "c", 4, cond_dim=2, hidden=8, rng=rng,
                                    identity_start=False)
        z = rng.standard_normal((3, 4))
        u1 = rng.standard_normal((3, 2))
        u2 = u1 + 1.0
        s1, _ = layer.forward(Tensor(z), Tensor(u1))
        s2, _ = layer.forward(Tensor(z), Tensor(u2))
        assert np.max(np.abs(s1.data - s2.data)) > 1e-6
        with pytest.raises(flows.FlowError):
            layer.forward(Tensor(z))

    def test_conditional_round_trip(self):
        rng = np.random.default_rng(33)
        store = ParamStore()
        stack = flows.make_coupling_stack(store, "cs", 4, 2, cond_dim=3, hidden=8,
                                          rng=rng, identity_start=False)
        z = rng.standard_normal((16, 4))
        u = rng.standard_normal((16, 3))
        s, _ = stack.forward(Tensor(z), Tensor(u))
        back, _ = stack.inverse(s, Tensor(u))
        assert np.max(np.abs(back.data - z)) < 1e-10

    def test_odd_dimension_split(self):
        _, stack = random_coupling_stack(35, dim=5, n_units=1)
        z = np.random.default_rng(36).standard_normal((16, 5))
        s, _ = stack.forward(Tensor(z))
        back, _ = stack.inverse(s)
        assert np.max(np.abs(back.data - z)) < 1e-10


class TestStack:
    def test_empty_stack_is_identity(self):
        stack = flows.FlowStack([])
        z = np.random.default_rng(0).standard_normal((4, 3))
        s, logdet = stack.forward(Tensor(z))
        np.testing.assert_array_equal(s.data, z)
        np.testing.assert_array_equal(logdet.data, np.zeros(4))
        assert stack.has_inverse

    def test_two_alternating_layers_change_both_halves(self):
        _, stack = random_coupling_stack(41, dim=4, n_units=1)
        z = np.random.default_rng(42).standard_normal((5, 4))
        s, _ = stack.forward(Tensor(z))
        assert np.all(np.abs(s.data[:, :2] - z[:, :2]) > 1e-9)
        assert np.all(np.abs(s.data[:, 2:] - z[:, 2:]) > 1e-9)

    def test_stack_with_planar_member_has_no_inverse(self):
        store = ParamStore()
        rng = np.random.default_rng(43)
        members = [
            flows.CouplingLayer(store, "c0", 2, hidden=4, rng=rng),
            flows.PlanarFlow(store, "p0", 2, rng=rng),
        ]
        stack = flows.FlowStack(members)
        assert not stack.has_inverse
        with pytest.raises(flows.FlowError):
            stack.inverse(Tensor(np.zeros((1, 2))))

    def test_logdets_add(self):
        store, stack = random_coupling_stack(45, dim=4, n_units=2)
        z = Tensor(np.random.default_rng(46).standard_normal((3, 4)))
        _, total = stack.forward(z)
        acc = np.zeros(3)
        cur = z
        for layer in stack.flows:
            cur, ld = layer.forward(cur)
            acc += ld.data
        np.testing.assert_allclose(total.data, acc, rtol=1e-14)

    def test_describe_serializes(self):
        import json

        _, stack = random_coupling_stack(47, dim=4, n_units=1)
        desc = stack.describe()
        assert desc["kind"] == "stack" and len(desc["flows"]) == 2
        json.dumps(desc)  # must be JSON-serializable for checkpoints


class TestDensityNormalization:
    def test_pushforward_density_normalizes(self):
        """Importance-weight box volumes: E[1_B(s)/p̂(s)] should equal vol(B).

        A mildly perturbed stack keeps the weights 1/p̂ well concentrated so
        the standard-error estimate is trustworthy; a violently deformed flow
        would make this a heavy-tail estimator and the test meaningless.
        """
        store, stack = random_coupling_stack(51, dim=2, n_units=1)
        rng_w = np.random.default_rng(53)
        store.set_values({
            name: 0.2 * rng_w.standard_normal(store[name].data.shape)
                  / np.sqrt(store[name].data.shape[0])
            for name in store.names() if name.endswith(".W2")
        })
        n = 100_000
        rng = np.random.default_rng(52)
        z = rng.standard_normal((n, 2))
        s, logdet = stack.forward(Tensor(z))
        log_base = -0.5 * np.sum(z * z, axis=1) - np.log(2 * np.pi)
        log_p = log_base - logdet.data  # density of s under the pushforward
        for box in [(-0.5, 0.5, -0.5, 0.5), (0.0, 1.0, -1.0, 0.0)]:
            x0, x1, y0, y1 = box
            inside = (
                (s.data[:, 0] > x0) & (s.data[:, 0] < x1)
                & (s.data[:, 1] > y0) & (s.data[:, 1] < y1)
            )
            w = inside * np.exp(-log_p)
            est, se = w.mean(), w.std() / np.sqrt(n)
            vol = (x1 - x0) * (y1 - y0)
            assert abs(est - vol) < 3 * se
