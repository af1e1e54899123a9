import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from eagr import tensor as T
from eagr.errors import ContractError, DimensionError, DomainError, ParseError
from eagr.gradcheck import check_gradients
from eagr.tensor import FlopCounter, Tape, Tensor

import oracles


def leaf(a):
    return Tensor(a, requires_grad=True)


class TestTensor:
    def test_shape_and_data_agree(self):
        t = Tensor(np.arange(6.0).reshape(2, 3))
        assert t.shape == (2, 3)
        assert t.size == 6
        assert t.data.dtype == np.float64

    def test_rejects_non_finite(self):
        with pytest.raises(DomainError):
            Tensor([1.0, float("nan")])
        with pytest.raises(DomainError):
            Tensor([float("inf")])

    @pytest.mark.filterwarnings("ignore:overflow encountered")
    def test_ops_refuse_to_produce_non_finite(self):
        with pytest.raises(DomainError):
            T.scale(Tensor([1e308]), 10.0)

    def test_operators(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        b = Tensor([[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_array_equal((a @ b).data, a.data)
        np.testing.assert_array_equal((a + b).data, a.data + b.data)
        np.testing.assert_array_equal((a - b).data, a.data - b.data)
        np.testing.assert_array_equal((a * 2).data, a.data * 2)
        np.testing.assert_array_equal((a * b).data, a.data * b.data)
        np.testing.assert_array_equal((-a).data, -a.data)


class TestMatmul:
    def test_identity(self):
        x = Tensor([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), x).data, x.data)

    def test_against_triple_loop(self):
        a = [[1.0, 2.0], [3.0, 4.0]]
        b = [[5.0], [6.0]]
        expected = oracles.matmul(a, b)
        assert expected == [[17.0], [39.0]]
        np.testing.assert_array_equal(T.matmul(Tensor(a), Tensor(b)).data, expected)

    def test_zeros(self, rng):
        out = T.matmul(Tensor(np.zeros((3, 2))), Tensor(rng.standard_normal((2, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((3, 4)))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(2, 3\)"):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    @pytest.mark.parametrize("m,k,n", [(1, 1, 1), (3, 4, 5), (7, 2, 6)])
    def test_mac_count(self, m, k, n):
        with FlopCounter() as fc:
            T.matmul(Tensor(np.ones((m, k))), Tensor(np.ones((k, n))))
        assert fc.mac_count == m * k * n
        assert fc.breakdown == {"matmul": m * k * n}


class TestFlopCounter:
    def test_additive_and_resettable(self):
        with FlopCounter() as fc:
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 4))))
            first = fc.mac_count
            T.conv1x1(Tensor(np.ones((5, 3))), Tensor(np.ones((3, 2))), Tensor(np.zeros(2)))
            assert fc.mac_count >= first
        assert fc.mac_count == 2 * 3 * 4 + 5 * 3 * 2
        fc.reset()
        assert fc.mac_count == 0 and fc.breakdown == {}

    def test_conv3x3_count(self):
        x = Tensor(np.ones((6, 5, 2)))
        w = Tensor(np.ones((3, 3, 2, 4)))
        with FlopCounter() as fc:
            T.conv3x3(x, w, Tensor(np.zeros(4)), stride=2)
        assert fc.mac_count == 3 * 3 * 9 * 2 * 4

    def test_inactive_counter_sees_nothing(self):
        fc = FlopCounter()
        T.matmul(Tensor(np.ones((2, 2))), Tensor(np.ones((2, 2))))
        assert fc.mac_count == 0


class TestSoftmax:
    def test_uniform_row(self):
        out = T.softmax_rows(Tensor([[0.0, 0.0, 0.0]])).data
        np.testing.assert_allclose(out, [[1 / 3] * 3], rtol=0, atol=1e-15)

    def test_log_ratio(self):
        row = [math.log(1.0), math.log(3.0)]
        expected = [v / sum(math.exp(r) for r in row) for v in (math.exp(r) for r in row)]
        out = T.softmax_rows(Tensor([row])).data[0]
        np.testing.assert_allclose(out, expected, atol=1e-15)
        np.testing.assert_allclose(out, [0.25, 0.75], atol=1e-15)

    def test_large_logits_do_not_overflow(self):
        out = T.softmax_rows(Tensor([[1000.0, 0.0]])).data[0]
        assert out[0] == pytest.approx(1.0) and out[1] < 1e-300

    @settings(max_examples=60, deadline=None)
    @given(
        arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 6)),
               elements=st.floats(-50, 50)),
        st.floats(-100, 100),
    )
    def test_rows_sum_to_one_and_shift_invariant(self, x, shift):
        s = T.softmax_rows(Tensor(x)).data
        assert np.all(s >= 0)
        np.testing.assert_allclose(s.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        shifted = T.softmax_rows(Tensor(x + shift)).data
        np.testing.assert_allclose(shifted, s, rtol=0, atol=1e-12)


class TestHadamard:
    def test_identity_and_zero(self, rng):
        a = Tensor(rng.standard_normal((3, 4)))
        np.testing.assert_array_equal(T.hadamard(a, Tensor(np.ones((3, 4)))).data, a.data)
        np.testing.assert_array_equal(T.hadamard(a, Tensor(np.zeros((3, 4)))).data, 0.0)

    def test_broadcast_column(self):
        out = T.hadamard(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[2.0], [0.0]]))
        np.testing.assert_array_equal(out.data, [[2.0, 4.0], [0.0, 0.0]])

    def test_incompatible(self):
        with pytest.raises(DimensionError):
            T.hadamard(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 1))))
        with pytest.raises(DimensionError):
            T.hadamard(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 2))))


class TestPool:
    def test_constant(self):
        x = Tensor(np.full((7, 5, 2), 2.5))
        np.testing.assert_array_equal(T.adaptive_avg_pool(x, (3, 2)).data, 2.5)

    def test_four_by_four(self):
        x = np.arange(1.0, 17.0).reshape(4, 4, 1)
        img = [[[x[r, c, 0]] for c in range(4)] for r in range(4)]
        expected = oracles.bin_average(img, 4, 4, (2, 2))
        out = T.adaptive_avg_pool(Tensor(x), (2, 2)).data
        np.testing.assert_array_equal(out, expected)
        np.testing.assert_array_equal(out[:, :, 0], [[3.5, 5.5], [11.5, 13.5]])

    def test_full_grid_is_identity(self, rng):
        x = rng.standard_normal((4, 3, 2))
        np.testing.assert_array_equal(T.adaptive_avg_pool(Tensor(x), (4, 3)).data, x)

    def test_grid_too_large(self):
        with pytest.raises(DimensionError):
            T.adaptive_avg_pool(Tensor(np.ones((3, 3, 1))), (4, 2))

    @settings(max_examples=40, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(1, 3),
           st.integers(-64, 64))
    def test_conserves_total_of_constant_bins(self, ph, pw, bh, bw, v):
        # bins of equal size bh x bw, each holding one dyadic constant
        vals = (np.arange(ph * pw).reshape(ph, pw) + v) / 4.0
        x = np.kron(vals, np.ones((bh, bw)))[:, :, None]
        pooled = T.adaptive_avg_pool(Tensor(x), (ph, pw))
        assert T.sum_all(pooled).item() * bh * bw == x.sum()

    def test_gradient_is_uniform_within_bins(self):
        x = leaf(np.arange(12.0).reshape(4, 3, 1))
        with Tape():
            loss = T.sum_all(T.adaptive_avg_pool(x, (2, 1)))
        T.backward(loss)
        np.testing.assert_allclose(x.grad, np.full((4, 3, 1), 1 / 6))


class TestConv:
    def test_conv1x1_identity(self, rng):
        x = rng.standard_normal((5, 3))
        out = T.conv1x1(Tensor(x), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_array_equal(out.data, x)

    def test_conv1x1_small(self):
        expected = oracles.affine([[1.0, 2.0]], [[1.0], [1.0]], [0.5])
        out = T.conv1x1(Tensor([[1.0, 2.0]]), Tensor([[1.0], [1.0]]), Tensor([0.5]))
        np.testing.assert_array_equal(out.data, expected)
        assert out.data[0, 0] == 3.5

    def test_conv1x1_zero_weights_give_bias(self, rng):
        b = rng.standard_normal(4)
        out = T.conv1x1(Tensor(rng.standard_normal((6, 3))), Tensor(np.zeros((3, 4))), Tensor(b))
        np.testing.assert_array_equal(out.data, np.tile(b, (6, 1)))

    def test_conv1x1_mismatch(self):
        with pytest.raises(DimensionError):
            T.conv1x1(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), Tensor(np.zeros(3)))

    def test_conv3x3_delta_kernel(self, rng):
        x = rng.standard_normal((5, 6, 2))
        w = np.zeros((3, 3, 2, 2))
        w[1, 1] = np.eye(2)
        out = T.conv3x3(Tensor(x), Tensor(w), Tensor(np.zeros(2)), 1).data
        np.testing.assert_array_equal(out, x)

    def test_conv3x3_matches_direct_sum(self, rng):
        x = rng.standard_normal((5, 4, 2))
        w = rng.standard_normal((3, 3, 2, 3))
        b = rng.standard_normal(3)
        for stride in (1, 2):
            out = T.conv3x3(Tensor(x), Tensor(w), Tensor(b), stride).data
            hout, wout = (5 - 1) // stride + 1, (4 - 1) // stride + 1
            assert out.shape == (hout, wout, 3)
            for i in range(hout):
                for j in range(wout):
                    for o in range(3):
                        acc = b[o]
                        for di in range(3):
                            for dj in range(3):
                                r, c = i * stride + di - 1, j * stride + dj - 1
                                if 0 <= r < 5 and 0 <= c < 4:
                                    acc += sum(x[r, c, k] * w[di, dj, k, o] for k in range(2))
                        assert out[i, j, o] == pytest.approx(acc, abs=1e-12)

    def test_conv3x3_rejects_bad_stride(self):
        with pytest.raises(ContractError):
            T.conv3x3(Tensor(np.ones((4, 4, 1))), Tensor(np.ones((3, 3, 1, 1))), Tensor(np.zeros(1)), 3)


class TestSpatial:
    def test_upsample(self):
        x = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[:, :, None])
        out = T.upsample_nearest(x, 2).data[:, :, 0]
        np.testing.assert_array_equal(
            out, [[1, 1, 2, 2], [1, 1, 2, 2], [3, 3, 4, 4], [3, 3, 4, 4]]
        )

    def test_concat(self, rng):
        a, b = rng.standard_normal((6, 3)), rng.standard_normal((6, 2))
        out = T.concat_channels(Tensor(a), Tensor(b)).data
        expected = [[*a[i], *b[i]] for i in range(6)]
        np.testing.assert_array_equal(out, expected)
        with pytest.raises(DimensionError):
            T.concat_channels(Tensor(a), Tensor(np.ones((5, 2))))

    def test_subsample_and_take(self):
        x = Tensor(np.arange(16.0).reshape(4, 4, 1))
        np.testing.assert_array_equal(T.subsample(x, 2).data[:, :, 0], [[0, 2], [8, 10]])
        m = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_array_equal(T.take(m, [2, 0], axis=0).data, [[4, 5], [0, 1]])
        np.testing.assert_array_equal(T.take(m, [1], axis=1).data, [[1], [3], [5]])


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0, 0, 2])

    def test_relu_subgradient_at_zero(self):
        x = leaf([0.0, 1.0, -1.0])
        with Tape():
            loss = T.sum_all(T.relu(x))
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])

    def test_add_zero(self, rng):
        a = rng.standard_normal((2, 3))
        np.testing.assert_array_equal(T.add(Tensor(a), Tensor(np.zeros((2, 3)))).data, a)

    def test_sum_all(self):
        assert T.sum_all(Tensor([[1.0, 2.0], [3.0, 4.0]])).item() == 10.0

    def test_log_domain(self):
        with pytest.raises(DomainError):
            T.log(Tensor([1.0, 0.0]))
        with pytest.raises(DomainError):
            T.log(Tensor([-1.0]))

    def test_add_shape_mismatch(self):
        with pytest.raises(DimensionError):
            T.add(Tensor(np.ones(3)), Tensor(np.ones(2)))


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng.standard_normal((3, 4)))
        with Tape():
            loss = T.sum_all(x)
        T.backward(loss)
        np.testing.assert_array_equal(x.grad, np.ones((3, 4)))

    def test_matmul_weight_grad_against_finite_differences(self, rng):
        x = Tensor(rng.standard_normal((4, 3)))
        w = leaf(rng.standard_normal((3, 2)))
        with Tape():
            loss = T.sum_all(T.matmul(x, w))
        T.backward(loss)
        h = 1e-5
        numeric = np.zeros_like(w.data)
        for idx in np.ndindex(w.shape):
            orig = w.data[idx]
            w.data[idx] = orig + h
            up = T.sum_all(T.matmul(x, w)).item()
            w.data[idx] = orig - h
            down = T.sum_all(T.matmul(x, w)).item()
            w.data[idx] = orig
            numeric[idx] = (up - down) / (2 * h)
        np.testing.assert_allclose(w.grad, numeric, rtol=1e-6, atol=1e-8)
        np.testing.assert_allclose(w.grad, x.data.T @ np.ones((4, 2)), rtol=1e-12)

    def test_disconnected_leaf_gets_zeros(self, rng):
        x = leaf(rng.standard_normal(3))
        unused = leaf(rng.standard_normal((2, 2)))
        side = leaf(rng.standard_normal(3))
        with Tape():
            T.scale(side, 2.0)  # recorded but does not feed the loss
            loss = T.sum_all(x)
        T.backward(loss, leaves=[unused])
        np.testing.assert_array_equal(unused.grad, np.zeros((2, 2)))
        np.testing.assert_array_equal(side.grad, np.zeros(3))

    def test_non_scalar_loss(self, rng):
        x = leaf(rng.standard_normal(3))
        with Tape():
            y = T.scale(x, 2.0)
        with pytest.raises(ContractError):
            T.backward(y)

    def test_requires_tape(self, rng):
        x = leaf(rng.standard_normal(3))
        with pytest.raises(ContractError):
            T.backward(T.sum_all(x))

    def test_tape_is_consumed(self, rng):
        x = leaf(rng.standard_normal(3))
        with Tape() as tape:
            loss = T.sum_all(x)
        assert len(tape) == 1
        T.backward(loss)
        assert len(tape) == 0
        with pytest.raises(ContractError):
            T.backward(loss)

    def test_tape_order_is_topological(self, rng):
        a = leaf(rng.standard_normal((2, 2)))
        with Tape() as tape:
            b = T.relu(T.matmul(a, a))
            T.sum_all(T.add(b, a))
        seen = {id(a)}
        for node in tape.nodes:
            assert all(id(i) in seen for i in node.inputs)
            seen.add(id(node.output))

    def test_shared_subexpression_accumulates(self):
        x = leaf([2.0])
        with Tape():
            loss = T.sum_all(T.hadamard(x, x))
        T.backward(loss)
        assert x.grad[0] == 4.0

    def test_deterministic(self, rng):
        data = rng.standard_normal((5, 4))
        w_data = rng.standard_normal((4, 3))
        grads = []
        for _ in range(2):
            w = leaf(w_data)
            with Tape():
                loss = T.sum_all(T.softmax_rows(T.matmul(Tensor(data), w)) * Tensor(np.arange(15.0).reshape(5, 3)))
            T.backward(loss)
            grads.append(w.grad)
        assert grads[0].tobytes() == grads[1].tobytes()

    def test_no_recording_outside_tape(self, rng):
        x = leaf(rng.standard_normal(3))
        y = T.scale(x, 2.0)
        assert not y.requires_grad


OPS = {
    "matmul": (lambda a, b: T.matmul(a, b), [(3, 4), (4, 2)]),
    "softmax_rows": (T.softmax_rows, [(4, 5)]),
    "hadamard": (T.hadamard, [(4, 3), (4, 1)]),
    "pool": (lambda x: T.adaptive_avg_pool(x, (2, 3)), [(5, 6, 4)]),
    "conv1x1": (T.conv1x1, [(6, 3), (3, 4), (4,)]),
    "conv3x3_s1": (lambda x, w, b: T.conv3x3(x, w, b, 1), [(4, 5, 2), (3, 3, 2, 3), (3,)]),
    "conv3x3_s2": (lambda x, w, b: T.conv3x3(x, w, b, 2), [(6, 5, 2), (3, 3, 2, 2), (2,)]),
    "upsample": (lambda x: T.upsample_nearest(x, 2), [(3, 2, 4)]),
    "concat": (T.concat_channels, [(6, 2), (6, 3)]),
    "transpose": (T.transpose, [(3, 5)]),
    "sub": (T.sub, [(3, 3), (3, 3)]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradients_match_finite_differences(name, rng):
    fn, shapes = OPS[name]
    inputs = [leaf(rng.standard_normal(s)) for s in shapes]
    assert check_gradients(fn, inputs, rng) <= 1e-4


def test_log_and_relu_gradients(rng):
    pos = leaf(rng.uniform(0.3, 3.0, (3, 4)))
    assert check_gradients(T.log, [pos], rng) <= 1e-4
    x = rng.standard_normal((3, 4))
    x[np.abs(x) < 0.05] = 0.5
    assert check_gradients(T.relu, [leaf(x)], rng) <= 1e-4


class TestSerialization:
    def test_round_trip(self, rng):
        t = Tensor(rng.standard_normal((2, 3, 4)))
        raw = T.tensor_to_bytes(t)
        assert raw[:4] == b"EAGT"
        back = T.tensor_from_bytes(raw)
        assert back.shape == t.shape
        assert back.data.tobytes() == t.data.tobytes()
        assert T.tensor_to_bytes(back) == raw

    def test_layout(self):
        raw = T.tensor_to_bytes(Tensor([[1.0, 2.0]]))
        assert raw == (b"EAGT" + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                       + (1).to_bytes(4, "little") + (2).to_bytes(4, "little")
                       + np.array([1.0, 2.0], dtype="<f8").tobytes())

    def test_scalar(self):
        back = T.tensor_from_bytes(T.tensor_to_bytes(Tensor(3.5)))
        assert back.shape == () and back.item() == 3.5

    def test_truncated(self):
        raw = T.tensor_to_bytes(Tensor([1.0, 2.0]))
        with pytest.raises(ParseError) as exc:
            T.read_tensor(io.BytesIO(raw[:-3]))
        assert exc.value.offset == len(raw) - 3

    def test_bad_magic(self):
        with pytest.raises(ParseError):
            T.tensor_from_bytes(b"XXXX" + bytes(8))
