"""Tensor-engine correctness: every primitive's reverse-mode gradient is
validated against central finite differences, plus the shape and
determinism contracts."""

import numpy as np
import pytest

from scenediff import engine as E
from scenediff import kernels


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Independent central-difference gradient of a scalar function."""
    g = np.zeros_like(x)
    flat_x, flat_g = x.reshape(-1), g.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        hi = f()
        flat_x[i] = orig - h
        lo = f()
        flat_x[i] = orig
        flat_g[i] = (hi - lo) / (2 * h)
    return g


def check_op(build, shapes, seed, scale=1.0):
    """Compare reverse-mode against finite differences for one op graph."""
    rng = np.random.default_rng(seed)
    params = [E.parameter(rng.normal(size=s) * scale, f"p{i}")
              for i, s in enumerate(shapes)]

    def loss_value():
        return build(*params).item()

    loss = build(*params)
    grads = E.backward(loss, params)
    worst = 0.0
    for p in params:
        fd = fd_grad(loss_value, p.v)
        rv = grads[id(p)]
        err = np.abs(rv - fd) / np.maximum.reduce([np.abs(rv), np.abs(fd),
                                                   np.full_like(fd, 1e-6)])
        worst = max(worst, float(err.max()))
    return worst


class TestPrimitiveValues:
    def test_softmax_symmetry(self):
        out = E.softmax(E.tensor([0.0, 0.0, 0.0]), axis=0)
        np.testing.assert_allclose(out.v, [1 / 3, 1 / 3, 1 / 3], atol=1e-15)

    def test_matmul_identity(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(2, 2))
        out = E.matmul(E.tensor(np.eye(2)), E.tensor(A))
        np.testing.assert_array_equal(out.v, A)

    def test_layer_norm_moments(self):
        x = E.tensor([[1.0, 2.0, 3.0]])
        g = E.tensor(np.ones(3))
        b = E.tensor(np.zeros(3))
        out = E.layer_norm(x, g, b, eps=0.0).v[0]
        assert abs(out.mean()) < 1e-12
        assert abs(out.var() - 1.0) < 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(E.ShapeError, match=r"\(2, 3\).*\(4, 2\)"):
            E.add(E.tensor(np.zeros((2, 3))), E.tensor(np.zeros((4, 2))))
        with pytest.raises(E.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
            E.matmul(E.tensor(np.zeros((2, 3))), E.tensor(np.zeros((2, 3))))

    def test_forward_deterministic(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(8, 8))
        w = rng.normal(size=(8, 8))
        a = E.matmul(E.softmax(E.tensor(x), axis=1), E.tensor(w)).v
        b = E.matmul(E.softmax(E.tensor(x), axis=1), E.tensor(w)).v
        assert np.array_equal(a, b)

    def test_finite_check(self):
        t = E.tensor([1.0, np.inf])
        with pytest.raises(E.NumericsError, match="bad place"):
            t.check_finite("bad place")


class TestBackward:
    def test_square_gradient(self):
        x = E.parameter(np.array(3.0), "x")
        loss = E.mul(x, x)
        grads = E.backward(loss, [x])
        assert grads[id(x)] == pytest.approx(6.0)

    def test_linear_loss_grad_independent_of_x(self):
        rng = np.random.default_rng(1)
        A = rng.normal(size=(4,))
        grads = []
        for val in (rng.normal(size=4), rng.normal(size=4)):
            x = E.parameter(val, "x")
            loss = E.sum_all(E.mul(E.tensor(A), x))
            grads.append(E.backward(loss, [x])[id(x)])
        np.testing.assert_allclose(grads[0], grads[1], rtol=0, atol=0)

    def test_two_layer_mlp_matches_fd(self):
        rng = np.random.default_rng(2)
        x = E.tensor(rng.normal(size=(5, 6)))

        def build(w1, b1, w2):
            h = E.tanh(E.add(E.matmul(x, w1),
                             E.broadcast_to(E.reshape(b1, (1, 4)), (5, 4))))
            return E.sum_squared(E.matmul(h, w2))

        worst = check_op(build, [(6, 4), (4,), (4, 3)], seed=3, scale=0.5)
        assert worst < 1e-4

    def test_non_scalar_loss_rejected(self):
        x = E.parameter(np.ones(3), "x")
        with pytest.raises(E.ShapeError, match="scalar"):
            E.backward(E.mul(x, x), [x])

    def test_unreachable_leaf_gets_zero(self):
        x = E.parameter(np.array(2.0), "x")
        y = E.parameter(np.array(5.0), "y")
        grads = E.backward(E.mul(x, x), [x, y])
        assert grads[id(y)] == pytest.approx(0.0)
        assert grads[id(x)] == pytest.approx(4.0)


ELEMENTWISE_CASES = [
    ("add", lambda a, b: E.sum_squared(E.add(a, b)), 2),
    ("sub", lambda a, b: E.sum_squared(E.sub(a, b)), 2),
    ("mul", lambda a, b: E.sum_squared(E.mul(a, b)), 2),
    ("div", lambda a, b: E.sum_squared(E.div(a, E.add(E.mul(b, b), 1.0))), 2),
    ("relu", lambda a: E.sum_squared(E.relu(a)), 1),
    ("sigmoid", lambda a: E.sum_squared(E.sigmoid(a)), 1),
    ("silu", lambda a: E.sum_squared(E.silu(a)), 1),
    ("tanh", lambda a: E.sum_squared(E.tanh(a)), 1),
    ("exp", lambda a: E.sum_squared(E.exp(a)), 1),
    ("log", lambda a: E.sum_squared(E.log(E.add(E.mul(a, a), 0.5))), 1),
    ("sqrt", lambda a: E.sum_squared(E.sqrt(E.add(E.mul(a, a), 0.5))), 1),
    ("mean", lambda a: E.mul(E.mean(a), E.mean(a)), 1),
    ("sum_axis", lambda a: E.sum_squared(E.sum_axis(a, axis=0)), 1),
    ("softmax", lambda a: E.sum_squared(E.softmax(a, axis=-1)), 1),
    ("maximum", lambda a: E.sum_squared(E.maximum_const(a, 0.25)), 1),
]


class TestGradientSweep:
    """Every primitive against finite differences over random shapes/seeds."""

    @pytest.mark.parametrize("name,build,arity",
                             ELEMENTWISE_CASES, ids=[c[0] for c in ELEMENTWISE_CASES])
    def test_elementwise(self, name, build, arity):
        rng = np.random.default_rng(hash(name) % 2 ** 32)
        for trial in range(7):
            shape = tuple(rng.integers(1, 5, size=rng.integers(1, 4)))
            worst = check_op(build, [shape] * arity,
                             seed=int(rng.integers(2 ** 31)))
            assert worst < 1e-4, f"{name} shape {shape}: {worst}"

    def test_matmul_weight_and_batched(self):
        for seed in range(5):
            worst = check_op(lambda a, b: E.sum_squared(E.matmul(a, b)),
                             [(3, 4, 2), (2, 5)], seed=seed)
            assert worst < 1e-4
            worst = check_op(lambda a, b: E.sum_squared(E.matmul(a, b)),
                             [(3, 2, 4), (3, 4, 2)], seed=seed + 50)
            assert worst < 1e-4

    def test_structural_ops(self):
        cases = [
            lambda a: E.sum_squared(E.transpose(a, (1, 2, 0))),
            lambda a: E.sum_squared(E.reshape(a, (4, 6))),
            lambda a: E.sum_squared(E.broadcast_to(
                E.reshape(E.mean(a), (1, 1)), (3, 3))),
            lambda a: E.sum_squared(E.slice_axis(a, 1, 1, 3)),
            lambda a: E.sum_squared(E.flip(a, 0)),
            lambda a: E.sum_squared(E.concat([a, a], axis=0)),
            lambda a: E.sum_squared(E.gather(a, np.array([1, 1, 0]), axis=0)),
        ]
        for i, build in enumerate(cases):
            worst = check_op(build, [(2, 3, 4)], seed=10 + i)
            assert worst < 1e-4, f"case {i}: {worst}"

    def test_layer_norm_gradients(self):
        def build(x, g, b):
            return E.sum_squared(E.layer_norm(x, g, b))

        for seed in range(5):
            worst = check_op(build, [(3, 4, 6), (6,), (6,)], seed=seed)
            assert worst < 1e-4

    def test_gru_scan_gradients(self):
        def build(xg, h0, u):
            return E.sum_squared(E.gru_scan(xg, h0, u))

        for seed in range(4):
            worst = check_op(build, [(4, 3, 9), (3, 3), (3, 9)],
                             seed=seed, scale=0.6)
            assert worst < 1e-4

    def test_many_random_graphs(self):
        """Composite random graphs: 100 shape/seed combinations total."""
        count = 0
        for seed in range(40):
            rng = np.random.default_rng(seed)
            m, k, n = rng.integers(1, 5, size=3)

            def build(a, w):
                h = E.silu(E.matmul(a, w))
                return E.mean(E.mul(h, h))

            worst = check_op(build, [(int(m), int(k)), (int(k), int(n))],
                             seed=seed + 1000)
            assert worst < 1e-4
            count += 1
        assert count == 40


class TestGradCheckHarness:
    def test_quadratic_form_tight(self):
        rng = np.random.default_rng(0)
        A = rng.normal(size=(5, 5))
        A = A @ A.T + np.eye(5)
        x = E.parameter(rng.normal(size=(1, 5)), "x")

        def f():
            return E.sum_all(E.matmul(E.matmul(x, E.tensor(A)),
                                      E.transpose(x, (1, 0))))

        report = E.grad_check(f, [x], max_coords=5)
        assert report["x"] < 1e-8

    def test_zero_parameter_function(self):
        assert E.grad_check(lambda: E.tensor(1.0), []) == {}


class TestKernels:
    def test_fallback_matches_reference(self):
        from scenediff.kernels import _gru_np
        rng = np.random.default_rng(4)
        xg = rng.normal(size=(6, 4, 12))
        h0 = rng.normal(size=(4, 4))
        u = rng.normal(size=(4, 12)) * 0.4
        hs, cache = _gru_np.scan_forward(xg, h0, u)
        # manual recurrence, step by step
        h = h0.copy()
        for t in range(6):
            gates = h @ u
            z = 1 / (1 + np.exp(-(xg[t, :, :4] + gates[:, :4])))
            r = 1 / (1 + np.exp(-(xg[t, :, 4:8] + gates[:, 4:8])))
            n = np.tanh(xg[t, :, 8:] + r * gates[:, 8:])
            h = (1 - z) * h + z * n
            np.testing.assert_allclose(hs[t], h, atol=1e-14)

    @pytest.mark.skipif(not kernels.HAVE_COMPILED,
                        reason="compiled kernel not built")
    def test_compiled_matches_fallback(self):
        from scenediff.kernels import _gru_cy, _gru_np
        rng = np.random.default_rng(9)
        xg = rng.normal(size=(11, 7, 24))
        h0 = rng.normal(size=(7, 8))
        u = rng.normal(size=(8, 24)) * 0.3
        hs_a, cache_a = _gru_np.scan_forward(xg, h0, u)
        hs_b, cache_b = _gru_cy.scan_forward(xg, h0, u)
        np.testing.assert_allclose(hs_a, hs_b, atol=1e-13)
        dhs = np.ascontiguousarray(rng.normal(size=hs_a.shape))
        for ga, gb in zip(_gru_np.scan_backward(dhs, cache_a, u),
                          _gru_cy.scan_backward(dhs, cache_b, u)):
            np.testing.assert_allclose(ga, gb, atol=1e-12)
