"""Forward-value contracts of the tensor ops, checked against naive oracles."""

import itertools

import numpy as np
import pytest

from conftest import conv2d_direct, maxpool2d_direct

from hcn import ops
from hcn.errors import NonFiniteError, ShapeError
from hcn.tensor import GradTape, ParameterStore, Tensor


class TestTensor:
    def test_shape_and_size(self):
        t = Tensor(np.zeros((2, 3, 4)))
        assert t.shape == (2, 3, 4)
        assert t.size == 24
        assert t.dtype == np.float64

    def test_rejects_nan(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([1.0, np.nan]))

    def test_rejects_inf(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([np.inf, 0.0]))

    def test_int_input_promoted(self):
        t = Tensor(np.arange(4))
        assert t.dtype == np.float64


class TestParameterStore:
    def test_registration_order_preserved(self):
        store = ParameterStore()
        store.register("b", np.zeros(2))
        store.register("a", np.ones(3))
        assert store.names() == ["b", "a"]
        assert store.total_size() == 5

    def test_duplicate_name_rejected(self):
        store = ParameterStore()
        store.register("w", np.zeros(2))
        with pytest.raises(ValueError):
            store.register("w", np.zeros(2))

    def test_snapshot_roundtrip(self):
        store = ParameterStore()
        t = store.register("w", np.arange(6, dtype=np.float64).reshape(2, 3))
        snap = store.state_arrays()
        t.data = t.data * 0.0
        store.load_arrays(snap)
        np.testing.assert_array_equal(store["w"].data, np.arange(6).reshape(2, 3))


class TestConv2d:
    def test_identity_kernel(self):
        x = Tensor(np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4))
        w = Tensor(np.ones((1, 1, 1, 1)))
        b = Tensor(np.zeros(1))
        out = ops.conv2d(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_bias_only(self):
        x = Tensor(np.zeros((2, 3, 4, 5)))
        w = Tensor(np.zeros((2, 3, 3, 3)))
        b = Tensor(np.array([1.5, -2.0]))
        out = ops.conv2d(x, w, b)
        np.testing.assert_array_equal(out.data[:, 0], np.full((2, 4, 5), 1.5))
        np.testing.assert_array_equal(out.data[:, 1], np.full((2, 4, 5), -2.0))

    def test_3x3_matches_direct_oracle(self):
        x = np.arange(16, dtype=np.float64).reshape(1, 1, 4, 4) + 1.0
        rng = np.random.default_rng(0)
        w = rng.normal(size=(1, 1, 3, 3))
        b = np.array([0.25])
        out = ops.conv2d(Tensor(x), Tensor(w), Tensor(b))
        np.testing.assert_allclose(out.data, conv2d_direct(x, w, b), rtol=0, atol=1e-12)

    def test_exhaustive_small_shapes_match_oracle(self):
        rng = np.random.default_rng(7)
        for bsz, cin, cout, h, w, kh, kw in itertools.product(
            (1, 2), (1, 3), (1, 2), (1, 3, 5), (1, 4, 5), (1, 3), (1, 3)
        ):
            if kh > h or kw > w:
                continue
            x = rng.normal(size=(bsz, cin, h, w))
            wt = rng.normal(size=(cout, cin, kh, kw))
            b = rng.normal(size=cout)
            got = ops.conv2d(Tensor(x), Tensor(wt), Tensor(b)).data
            np.testing.assert_allclose(got, conv2d_direct(x, wt, b), rtol=0, atol=1e-12)

    def test_channel_mismatch_names_axis(self):
        x = Tensor(np.zeros((1, 2, 4, 4)))
        w = Tensor(np.zeros((1, 3, 3, 3)))
        b = Tensor(np.zeros(1))
        with pytest.raises(ShapeError, match="channel"):
            ops.conv2d(x, w, b)

    def test_even_kernel_rejected(self):
        x = Tensor(np.zeros((1, 1, 4, 4)))
        with pytest.raises(ValueError, match="odd"):
            ops.conv2d(x, Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.zeros(1)))


class TestMaxPool:
    def test_constant_field(self):
        x = Tensor(np.full((1, 2, 4, 4), 3.25))
        out = ops.maxpool2d(x, (2, 2))
        np.testing.assert_array_equal(out.data, np.full((1, 2, 2, 2), 3.25))

    def test_distinct_values_match_oracle(self):
        rng = np.random.default_rng(3)
        x = rng.permutation(np.arange(32, dtype=np.float64)).reshape(1, 2, 4, 4)
        out = ops.maxpool2d(Tensor(x), (2, 2))
        np.testing.assert_array_equal(out.data, maxpool2d_direct(x, (2, 2)))

    def test_floor_semantics_and_2x1_window(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 5, 3))
        out = ops.maxpool2d(Tensor(x), (2, 1))
        assert out.shape == (2, 3, 2, 3)
        np.testing.assert_array_equal(out.data, maxpool2d_direct(x, (2, 1)))

    def test_tie_routes_gradient_to_first_row_major(self):
        x = Tensor(np.array([[[[1.0, 1.0], [1.0, 1.0]]]]), requires_grad=True)
        tape = GradTape()
        out = ops.maxpool2d(x, (2, 2), tape)
        tape.backward((out, np.ones_like(out.data)))
        np.testing.assert_array_equal(x.grad, np.array([[[[1.0, 0.0], [0.0, 0.0]]]]))

    def test_window_larger_than_input_rejected(self):
        with pytest.raises(ShapeError):
            ops.maxpool2d(Tensor(np.zeros((1, 1, 1, 4))), (2, 2))


class TestPermute:
    def test_identity_order(self):
        x = Tensor(np.arange(24, dtype=np.float64).reshape(2, 3, 4))
        out = ops.permute(x, (0, 1, 2))
        np.testing.assert_array_equal(out.data, x.data)

    def test_element_mapping_exhaustive(self):
        x = np.arange(24, dtype=np.float64).reshape(2, 3, 4)
        out = ops.permute(Tensor(x), (0, 2, 1))
        assert out.shape == (2, 4, 3)
        for i in range(2):
            for j in range(4):
                for k in range(3):
                    assert out.data[i, j, k] == x[i, k, j]

    def test_inverse_composition_bit_exact_all_rank_le_4(self):
        rng = np.random.default_rng(11)
        for rank in (1, 2, 3, 4):
            shape = tuple(rng.integers(1, 5, size=rank))
            x = rng.normal(size=shape)
            for order in itertools.permutations(range(rank)):
                inverse = tuple(np.argsort(order))
                back = ops.permute(ops.permute(Tensor(x), order), inverse)
                np.testing.assert_array_equal(back.data, x)

    def test_invalid_order_rejected(self):
        with pytest.raises(ValueError):
            ops.permute(Tensor(np.zeros((2, 2))), (0, 0))


class TestConcatChannels:
    def test_neutral_element(self):
        x = np.random.default_rng(0).normal(size=(2, 3, 4, 4))
        empty = np.zeros((2, 0, 4, 4))
        out = ops.concat_channels(Tensor(x), Tensor(empty))
        np.testing.assert_array_equal(out.data, x)

    def test_block_layout(self):
        a = np.arange(2 * 2 * 2 * 2, dtype=np.float64).reshape(2, 2, 2, 2)
        b = -np.arange(2 * 3 * 2 * 2, dtype=np.float64).reshape(2, 3, 2, 2) - 1
        out = ops.concat_channels(Tensor(a), Tensor(b))
        assert out.shape == (2, 5, 2, 2)
        np.testing.assert_array_equal(out.data[:, :2], a)
        np.testing.assert_array_equal(out.data[:, 2:], b)

    def test_backward_splits_ramp(self):
        a = Tensor(np.zeros((1, 2, 2, 2)), requires_grad=True)
        b = Tensor(np.zeros((1, 3, 2, 2)), requires_grad=True)
        tape = GradTape()
        out = ops.concat_channels(a, b, tape)
        g = np.arange(out.size, dtype=np.float64).reshape(out.shape)
        tape.backward((out, g))
        np.testing.assert_array_equal(a.grad, g[:, :2])
        np.testing.assert_array_equal(b.grad, g[:, 2:])

    def test_non_channel_mismatch_rejected(self):
        with pytest.raises(ShapeError, match="axis"):
            ops.concat_channels(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 2, 4, 3))))


class TestPointwiseOps:
    def test_relu_sign_cases(self):
        out = ops.relu(Tensor(np.array([-1.0, 0.0, 2.0])))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_dense_identity_affine(self):
        x = np.random.default_rng(1).normal(size=(3, 4))
        out = ops.dense(Tensor(x), Tensor(np.eye(4)), Tensor(np.zeros(4)))
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_dense_feature_mismatch(self):
        with pytest.raises(ShapeError, match="feature"):
            ops.dense(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))), Tensor(np.zeros(4)))

    def test_maximum_tie_prefers_first(self):
        a = Tensor(np.array([1.0, 5.0]), requires_grad=True)
        b = Tensor(np.array([1.0, 2.0]), requires_grad=True)
        tape = GradTape()
        out = ops.maximum(a, b, tape)
        tape.backward((out, np.ones(2)))
        np.testing.assert_array_equal(a.grad, [1.0, 1.0])
        np.testing.assert_array_equal(b.grad, [0.0, 0.0])


class TestDropout:
    def test_eval_mode_is_identity(self):
        x = Tensor(np.random.default_rng(2).normal(size=(5, 5)))
        out = ops.dropout(x, 0.9, "eval")
        np.testing.assert_array_equal(out.data, x.data)

    def test_ratio_one_rejected(self):
        with pytest.raises(ValueError):
            ops.dropout(Tensor(np.zeros(3)), 1.0, "train", np.random.default_rng(0))

    def test_train_mean_preserved_within_2_percent(self):
        rng = np.random.default_rng(9)
        x = Tensor(np.full(20000, 3.0))
        out = ops.dropout(x, 0.5, "train", rng)
        assert abs(out.data.mean() - 3.0) / 3.0 < 0.02

    def test_survivors_scaled(self):
        rng = np.random.default_rng(5)
        out = ops.dropout(Tensor(np.ones(1000)), 0.25, "train", rng)
        kept = out.data[out.data != 0]
        np.testing.assert_allclose(kept, 1.0 / 0.75)


class TestResizeTemporal:
    def test_same_length_identity(self):
        x = np.random.default_rng(0).normal(size=(7, 3, 2))
        out = ops.resize_temporal_bilinear(Tensor(x), 7)
        np.testing.assert_array_equal(out.data, x)

    def test_constant_preserved(self):
        x = np.full((4, 2, 3), 1.75)
        out = ops.resize_temporal_bilinear(Tensor(x), 9)
        np.testing.assert_allclose(out.data, 1.75)

    def test_two_to_three_frames_midpoint(self):
        x = np.zeros((2, 1, 1))
        x[1, 0, 0] = 1.0
        out = ops.resize_temporal_bilinear(Tensor(x), 3)
        np.testing.assert_allclose(out.data[:, 0, 0], [0.0, 0.5, 1.0])

    def test_up_down_roundtrip_preserves_endpoints(self):
        x = np.random.default_rng(8).normal(size=(6, 2, 2))
        up = ops.resize_temporal_bilinear(Tensor(x), 12)
        down = ops.resize_temporal_bilinear(up, 6)
        np.testing.assert_array_equal(down.data[0], x[0])
        np.testing.assert_array_equal(down.data[-1], x[-1])


class TestCropResizeTemporal:
    def test_full_span_identity(self):
        f = np.random.default_rng(1).normal(size=(3, 8, 2))
        out = ops.crop_resize_temporal(Tensor(f), np.array([[0.0, 8.0]]), 8)
        np.testing.assert_array_equal(out.data[0], f)

    def test_constant_map(self):
        f = np.full((2, 10, 1), -0.5)
        out = ops.crop_resize_temporal(Tensor(f), np.array([[1.0, 7.0]]), 4)
        np.testing.assert_allclose(out.data, -0.5)

    def test_linear_ramp_half_span(self):
        t = 8
        f = np.arange(t, dtype=np.float64).reshape(1, t, 1)
        out = ops.crop_resize_temporal(Tensor(f), np.array([[0.0, 4.0]]), 4)
        # bin centers at 0.5, 1.5, 2.5, 3.5 minus the half-pixel offset
        np.testing.assert_allclose(out.data[0, 0, :, 0], [0.0, 1.0, 2.0, 3.0])

    def test_fully_outside_span_rejected(self):
        f = Tensor(np.zeros((1, 4, 1)))
        with pytest.raises(ValueError):
            ops.crop_resize_temporal(f, np.array([[5.0, 9.0]]), 2)


class TestGradTape:
    def test_zero_cotangent_gives_zero_grads(self):
        x = Tensor(np.random.default_rng(0).normal(size=(1, 1, 4, 4)), requires_grad=True)
        w = Tensor(np.random.default_rng(1).normal(size=(1, 1, 3, 3)), requires_grad=True)
        b = Tensor(np.zeros(1), requires_grad=True)
        tape = GradTape()
        out = ops.conv2d(x, w, b, tape)
        tape.backward((out, np.zeros_like(out.data)))
        np.testing.assert_array_equal(x.grad, np.zeros_like(x.data))
        np.testing.assert_array_equal(w.grad, np.zeros_like(w.data))
        np.testing.assert_array_equal(b.grad, np.zeros(1))

    def test_identity_adjoint(self):
        x = Tensor(np.random.default_rng(2).normal(size=(1, 1, 3, 3)), requires_grad=True)
        tape = GradTape()
        out = ops.conv2d(x, Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)), tape)
        tape.backward((out, np.ones_like(out.data)))
        np.testing.assert_array_equal(x.grad, np.ones_like(x.data))

    def test_fanout_accumulates(self):
        x = Tensor(np.ones(4), requires_grad=True)
        tape = GradTape()
        y1 = ops.scale(x, 2.0, tape)
        y2 = ops.scale(x, 3.0, tape)
        s = ops.add(y1, y2, tape)
        tape.backward((s, np.ones(4)))
        np.testing.assert_array_equal(x.grad, np.full(4, 5.0))

    def test_multi_head_partial_seed(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tape = GradTape()
        ops.scale(x, 2.0, tape)  # head never seeded
        y2 = ops.scale(x, 3.0, tape)
        tape.backward((y2, np.ones(3)))
        np.testing.assert_array_equal(x.grad, np.full(3, 3.0))
