"""Tape engine: forward values, vector-Jacobian products, backward contract."""

import numpy as np
import pytest

from oracles import conv2d_naive, fd_gradient, rel_err

from saliencycut import tensor as T
from saliencycut.errors import DimensionError, GraphError, NumericsError


class TestForwardValues:
    def test_relu(self):
        out = T.relu(T.Tensor([-1.0, 0.0, 2.0]))
        assert np.array_equal(out.data, [0.0, 0.0, 2.0])

    def test_mean(self):
        assert T.mean(T.Tensor([2.0, 4.0])).item() == 3.0

    def test_identity_kernel_conv(self):
        x = np.arange(9, dtype=float).reshape(1, 1, 3, 3)
        k = np.ones((1, 1, 1, 1))
        out = T.conv2d(T.Tensor(x), T.Tensor(k))
        assert np.array_equal(out.data, x)

    def test_zero_kernel_conv(self):
        rng = np.random.default_rng(0)
        x = rng.uniform(-1, 1, (2, 3, 5, 5))
        out = T.conv2d(T.Tensor(x), T.Tensor(np.zeros((4, 3, 3, 3))), padding=1)
        assert np.array_equal(out.data, np.zeros((2, 4, 5, 5)))

    def test_conv_matches_naive_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.uniform(-1, 1, (1, 2, 5, 5))
        w = rng.uniform(-1, 1, (3, 2, 3, 3))
        got = T.conv2d(T.Tensor(x), T.Tensor(w)).data
        want = conv2d_naive(x, w)
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_conv_oracle_on_many_shapes(self):
        # invariant: agreement within 1e-12 on >= 50 random shape/stride/pad combos
        rng = np.random.default_rng(2)
        for _ in range(55):
            n = int(rng.integers(1, 3))
            c = int(rng.integers(1, 4))
            f = int(rng.integers(1, 4))
            kh = int(rng.integers(1, 4))
            kw = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 3))
            h = int(rng.integers(kh, kh + 5))
            w = int(rng.integers(kw, kw + 5))
            x = rng.uniform(-1, 1, (n, c, h, w))
            k = rng.uniform(-1, 1, (f, c, kh, kw))
            got = T.conv2d(T.Tensor(x), T.Tensor(k), stride=stride, padding=pad).data
            want = conv2d_naive(x, k, stride=stride, padding=pad)
            assert got.shape == want.shape
            assert np.max(np.abs(got - want)) <= 1e-12

    def test_conv_output_shape(self):
        x = T.Tensor(np.zeros((1, 1, 7, 9)))
        k = T.Tensor(np.zeros((2, 1, 3, 3)))
        out = T.conv2d(x, k, stride=2, padding=1)
        assert out.shape == (1, 2, 4, 5)

    def test_topk_mean_values(self):
        t = T.Tensor(np.array([[1.0, 5.0, 3.0, 2.0]]))
        assert T.topk_mean(t, 2).data[0] == 4.0

    def test_topk_tie_break_is_stable(self):
        t = T.Graph().leaf(np.array([[2.0, 2.0, 2.0, 1.0]]), requires_grad=True)
        out = T.topk_mean(t, 2)
        grads = T.backward(T.mean(out))
        # equal scores resolve by ascending index: entries 0 and 1 selected
        assert np.array_equal(grads[t.node_id].data, [[0.5, 0.5, 0.0, 0.0]])

    def test_avg_pool(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out = T.avg_pool2d(T.Tensor(x), 2)
        assert np.array_equal(out.data, [[[[2.5, 4.5], [10.5, 12.5]]]])

    def test_crop_batch(self):
        x = np.arange(2 * 1 * 4 * 4, dtype=float).reshape(2, 1, 4, 4)
        out = T.crop_batch(T.Tensor(x), [0, 2], [1, 0], 2, 2)
        assert np.array_equal(out.data[0, 0], x[0, 0, 0:2, 1:3])
        assert np.array_equal(out.data[1, 0], x[1, 0, 2:4, 0:2])

    def test_operator_sugar(self):
        g = T.Graph()
        x = g.leaf(np.array([2.0, 4.0]), requires_grad=True)
        out = T.mean((x - 1.0) * 3.0 / 2.0 + 0.5)
        assert out.item() == pytest.approx(3.5)


class TestErrors:
    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(T.Tensor([1.0, 2.0]), T.Tensor([1.0, 2.0, 3.0]))

    def test_conv_channel_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv2d(T.Tensor(np.zeros((1, 2, 4, 4))), T.Tensor(np.zeros((1, 3, 3, 3))))

    def test_kernel_larger_than_padded_input(self):
        with pytest.raises(DimensionError):
            T.conv2d(T.Tensor(np.zeros((1, 1, 2, 2))), T.Tensor(np.zeros((1, 1, 5, 5))))

    def test_backward_needs_scalar(self):
        g = T.Graph()
        t = g.leaf(np.ones(3), requires_grad=True)
        with pytest.raises(GraphError):
            T.backward(T.mul(t, 2.0))

    def test_backward_needs_graph(self):
        with pytest.raises(GraphError):
            T.backward(T.Tensor(1.0))

    def test_nan_rejected_at_op_boundary(self):
        with pytest.raises(NumericsError):
            T.Tensor([1.0, np.nan])

    def test_inf_rejected_at_op_boundary(self):
        with pytest.raises(NumericsError):
            T.Tensor([np.inf])

    def test_mixed_graphs_rejected(self):
        a = T.Graph().leaf(np.ones(2))
        b = T.Graph().leaf(np.ones(2))
        with pytest.raises(GraphError):
            T.add(a, b)

    def test_topk_count_bounds(self):
        with pytest.raises(DimensionError):
            T.topk_mean(T.Tensor(np.zeros((1, 4))), 5)

    def test_crop_out_of_bounds(self):
        with pytest.raises(DimensionError):
            T.crop_batch(T.Tensor(np.zeros((1, 1, 4, 4))), [3], [0], 2, 2)


class TestBackward:
    def test_sum_of_squares(self):
        g = T.Graph()
        x = g.leaf(np.array([1.0, 2.0]), requires_grad=True)
        loss = T.tensor_sum(T.mul(x, x))
        grads = T.backward(loss)
        assert np.array_equal(grads[x.node_id].data, [2.0, 4.0])

    def test_unused_leaf_gets_zeros(self):
        g = T.Graph()
        x = g.leaf(np.array([1.0, 2.0]), requires_grad=True)
        y = g.leaf(np.array([5.0]), requires_grad=True)
        grads = T.backward(T.tensor_sum(T.mul(x, x)))
        assert np.array_equal(grads[y.node_id].data, [0.0])

    def test_no_grad_leaf_not_reported(self):
        g = T.Graph()
        x = g.leaf(np.array([1.0, 2.0]), requires_grad=True)
        c = g.leaf(np.array([3.0, 4.0]))
        grads = T.backward(T.tensor_sum(T.mul(x, c)))
        assert c.node_id not in grads
        assert np.array_equal(grads[x.node_id].data, [3.0, 4.0])

    def test_fan_out_accumulates(self):
        g = T.Graph()
        x = g.leaf(np.array([3.0]), requires_grad=True)
        loss = T.tensor_sum(T.add(T.mul(x, x), T.mul(x, 2.0)))
        grads = T.backward(loss)
        assert np.array_equal(grads[x.node_id].data, [8.0])

    def test_backward_deterministic(self):
        def run():
            rng = np.random.default_rng(7)
            g = T.Graph()
            x = g.leaf(rng.uniform(-1, 1, (2, 3, 6, 6)), requires_grad=True)
            k = g.leaf(rng.uniform(-1, 1, (4, 3, 3, 3)), requires_grad=True)
            out = T.mean(T.relu(T.conv2d(x, k, padding=1)))
            grads = T.backward(out)
            return grads[x.node_id].data.tobytes(), grads[k.node_id].data.tobytes()

        assert run() == run()

    def test_three_layer_net_matches_fd(self):
        # every parameter gradient within 1e-4 relative error of central FD
        rng = np.random.default_rng(11)
        x0 = rng.uniform(-1, 1, (1, 2, 8, 8))
        arrays = {
            "k1": rng.uniform(-0.5, 0.5, (3, 2, 3, 3)),
            "k2": rng.uniform(-0.5, 0.5, (4, 3, 3, 3)),
            "w3": rng.uniform(-0.5, 0.5, (4 * 4 * 4, 1)),
        }

        def forward(vals):
            g = T.Graph()
            x = g.leaf(x0)
            leaves = {k: g.leaf(v, requires_grad=True) for k, v in vals.items()}
            h = T.avg_pool2d(T.relu(T.conv2d(x, leaves["k1"], padding=1)), 2)
            h = T.relu(T.conv2d(h, leaves["k2"], padding=1))
            out = T.mean(T.matmul(T.flatten(h), leaves["w3"]))
            return out, leaves

        loss, leaves = forward(arrays)
        grads = T.backward(loss)
        for name, arr in arrays.items():
            def f(v, _name=name):
                vals = dict(arrays)
                vals[_name] = v
                return forward(vals)[0].item()

            want = fd_gradient(f, arr.copy())
            assert rel_err(grads[leaves[name].node_id].data, want) <= 1e-4


def _mean_of(t):
    return T.mean(t) if t.data.ndim else t


OP_CASES = [
    ("add", {"a": (3, 4), "b": (3, 4)},
     lambda v: _mean_of(T.add(v["a"], v["b"]))),
    ("add_scalar", {"a": (3, 4)},
     lambda v: _mean_of(T.add(v["a"], 0.7))),
    ("sub", {"a": (3, 4), "b": (3, 4)},
     lambda v: _mean_of(T.sub(v["a"], v["b"]))),
    ("mul", {"a": (3, 4), "b": (3, 4)},
     lambda v: _mean_of(T.mul(v["a"], v["b"]))),
    ("mul_scalar", {"a": (3, 4)},
     lambda v: _mean_of(T.mul(v["a"], -1.7))),
    ("relu", {"a": (5, 5)},
     lambda v: _mean_of(T.relu(v["a"]))),
    ("abs", {"a": (5, 5)},
     lambda v: _mean_of(T.abs_(v["a"]))),
    ("max_with_scalar", {"a": (5, 5)},
     lambda v: _mean_of(T.max_with_scalar(v["a"], 0.1))),
    ("mean", {"a": (4, 6)},
     lambda v: T.mean(v["a"])),
    ("sum", {"a": (4, 6)},
     lambda v: T.tensor_sum(v["a"])),
    ("matmul", {"a": (3, 4), "b": (4, 2)},
     lambda v: _mean_of(T.matmul(v["a"], v["b"]))),
    ("add_bias_2d", {"a": (3, 4), "b": (4,)},
     lambda v: _mean_of(T.add_bias(v["a"], v["b"]))),
    ("add_bias_4d", {"a": (2, 3, 4, 4), "b": (3,)},
     lambda v: _mean_of(T.add_bias(v["a"], v["b"]))),
    ("conv", {"a": (2, 2, 6, 6), "b": (3, 2, 3, 3)},
     lambda v: _mean_of(T.conv2d(v["a"], v["b"], padding=1))),
    ("conv_stride", {"a": (1, 2, 7, 7), "b": (2, 2, 3, 3)},
     lambda v: _mean_of(T.conv2d(v["a"], v["b"], stride=2))),
    ("avg_pool", {"a": (2, 2, 4, 4)},
     lambda v: _mean_of(T.avg_pool2d(v["a"], 2))),
    ("flatten", {"a": (2, 3, 2, 2), "b": (12, 1)},
     lambda v: _mean_of(T.matmul(T.flatten(v["a"]), v["b"]))),
    ("reshape", {"a": (2, 6)},
     lambda v: _mean_of(T.mul(T.reshape(v["a"], (3, 4)), 1.5))),
    ("crop", {"a": (2, 2, 5, 5)},
     lambda v: _mean_of(T.crop_batch(v["a"], [1, 0], [0, 2], 3, 3))),
    ("topk", {"a": (3, 8)},
     lambda v: _mean_of(T.topk_mean(v["a"], 3))),
]


@pytest.mark.parametrize("name,shapes,build", OP_CASES, ids=[c[0] for c in OP_CASES])
def test_vjp_matches_finite_differences(name, shapes, build):
    """Analytic VJP of every op vs central differences at eps=1e-5, float64."""
    rng = np.random.default_rng(abs(hash(name)) % 2**32)
    arrays = {k: rng.uniform(-1.0, 1.0, s) for k, s in shapes.items()}

    def forward(vals):
        g = T.Graph()
        leaves = {k: g.leaf(v, requires_grad=True) for k, v in vals.items()}
        return build(leaves), leaves

    out, leaves = forward(arrays)
    grads = T.backward(out)
    for key, arr in arrays.items():
        def f(v, _key=key):
            vals = dict(arrays)
            vals[_key] = v
            return forward(vals)[0].item()

        want = fd_gradient(f, arr.copy())
        assert rel_err(grads[leaves[key].node_id].data, want) <= 1e-4, name
