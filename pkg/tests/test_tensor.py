"""Tensor engine tests: loop oracles for every layer, finite-difference grads."""

import numpy as np
import pytest

from hqfnet import tensor as T
from hqfnet.tensor import OpTape, ShapeError, Tensor


def loop_conv1x1(x, w, b):
    B, C, H, W = x.shape
    O = w.shape[0]
    out = np.zeros((B, O, H, W))
    for bi in range(B):
        for o in range(O):
            for h in range(H):
                for wi in range(W):
                    acc = b[o]
                    for c in range(C):
                        acc += w[o, c] * x[bi, c, h, wi]
                    out[bi, o, h, wi] = acc
    return out


def loop_depthwise3x3(x, dw, stride):
    B, C, H, W = x.shape
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    out = np.zeros((B, C, Ho, Wo))
    for bi in range(B):
        for c in range(C):
            for i in range(Ho):
                for j in range(Wo):
                    acc = 0.0
                    for u in range(3):
                        for v in range(3):
                            r = i * stride + u - 1
                            s = j * stride + v - 1
                            if 0 <= r < H and 0 <= s < W:
                                acc += dw[c, u, v] * x[bi, c, r, s]
                    out[bi, c, i, j] = acc
    return out


def scatter_transposed2x(x, w, b):
    B, C, H, W = x.shape
    O = w.shape[0]
    out = np.zeros((B, O, 2 * H, 2 * W))
    out += b[None, :, None, None]
    for bi in range(B):
        for o in range(O):
            for c in range(C):
                for h in range(H):
                    for wi in range(W):
                        for u in range(2):
                            for v in range(2):
                                out[bi, o, 2 * h + u, 2 * wi + v] += w[o, c, u, v] * x[bi, c, h, wi]
    return out


def bilinear_oracle(v, cx, cy):
    """Closed-form w00*v00 + w01*v01 + w10*v10 + w11*v11 with zero padding."""
    B, C, Ht, Wt = v.shape
    ix = (cx + 1.0) * 0.5 * Wt - 0.5
    iy = (cy + 1.0) * 0.5 * Ht - 0.5
    x0, y0 = int(np.floor(ix)), int(np.floor(iy))
    fx, fy = ix - x0, iy - y0

    def at(b, y, x):
        if 0 <= y < Ht and 0 <= x < Wt:
            return v[b, :, y, x]
        return np.zeros(C)

    out = np.zeros((B, C))
    for b in range(B):
        out[b] = (
            (1 - fy) * (1 - fx) * at(b, y0, x0)
            + (1 - fy) * fx * at(b, y0, x0 + 1)
            + fy * (1 - fx) * at(b, y0 + 1, x0)
            + fy * fx * at(b, y0 + 1, x0 + 1)
        )
    return out


class TestConv1x1:
    def test_identity_weight(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)))
        w = Tensor(np.eye(3))
        b = Tensor(np.zeros(3))
        out = T.conv1x1(x, w, b)
        np.testing.assert_array_equal(out.data, x.data)

    def test_sum_of_ones(self):
        x = Tensor(np.ones((1, 2, 1, 1)))
        out = T.conv1x1(x, Tensor([[1.0, 1.0]]), Tensor([0.0]))
        assert out.data.reshape(()) == 2.0

    def test_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 4, 4))
        w = rng.normal(size=(5, 3))
        b = rng.normal(size=5)
        out = T.conv1x1(Tensor(x), Tensor(w), Tensor(b))
        assert np.abs(out.data - loop_conv1x1(x, w, b)).max() <= 1e-12

    def test_channel_mismatch_names_axis(self):
        with pytest.raises(ShapeError, match="channel"):
            T.conv1x1(Tensor(np.zeros((1, 3, 2, 2))), Tensor(np.zeros((4, 2))))


class TestDepthwiseSeparable:
    def test_delta_kernel_identity(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(1, 3, 5, 5))
        dw = np.zeros((3, 3, 3))
        dw[:, 1, 1] = 1.0
        out = T.depthwise_separable_conv(Tensor(x), Tensor(dw), Tensor(np.eye(3)), Tensor(np.zeros(3)))
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_stride2_halves_224(self):
        x = Tensor(np.zeros((1, 2, 224, 224)))
        out = T.depthwise_separable_conv(
            x, Tensor(np.zeros((2, 3, 3))), Tensor(np.zeros((4, 2))), stride=2
        )
        assert out.shape == (1, 4, 112, 112)

    @pytest.mark.parametrize("stride", [1, 2])
    def test_depthwise_matches_loop_oracle(self, stride):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(2, 3, 6, 6))
        dw = rng.normal(size=(3, 3, 3))
        out = T.depthwise_conv3x3(Tensor(x), Tensor(dw), stride=stride)
        assert np.abs(out.data - loop_depthwise3x3(x, dw, stride)).max() <= 1e-12


class TestTransposedConv2x:
    def test_single_pixel_broadcast(self):
        v = 3.7
        out = T.transposed_conv2x(
            Tensor(np.full((1, 1, 1, 1), v)), Tensor(np.ones((1, 1, 2, 2))), Tensor(np.zeros(1))
        )
        np.testing.assert_array_equal(out.data, np.full((1, 1, 2, 2), v))

    def test_doubles_14_to_28(self):
        out = T.transposed_conv2x(
            Tensor(np.zeros((2, 3, 14, 14))), Tensor(np.zeros((5, 3, 2, 2)))
        )
        assert out.shape == (2, 5, 28, 28)

    def test_matches_scatter_oracle(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(2, 3, 3, 4))
        w = rng.normal(size=(2, 3, 2, 2))
        b = rng.normal(size=2)
        out = T.transposed_conv2x(Tensor(x), Tensor(w), Tensor(b))
        assert np.abs(out.data - scatter_transposed2x(x, w, b)).max() <= 1e-12


class TestAdaptiveAvgPool:
    def test_identity_when_s_equals_input(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(1, 2, 4, 4))
        out = T.adaptive_avg_pool(Tensor(x), 4)
        np.testing.assert_array_equal(out.data, x)

    def test_2x2_blocks(self):
        x = np.arange(16, dtype=float).reshape(1, 1, 4, 4)
        out = T.adaptive_avg_pool(Tensor(x), 2)
        expect = np.array([[x[0, 0, :2, :2].mean(), x[0, 0, :2, 2:].mean()],
                           [x[0, 0, 2:, :2].mean(), x[0, 0, 2:, 2:].mean()]])
        np.testing.assert_allclose(out.data[0, 0], expect, atol=1e-15)

    def test_bottleneck_shapes(self):
        x = Tensor(np.zeros((2, 1024, 14, 14)))
        pooled = T.adaptive_avg_pool(x, 4)
        assert pooled.shape == (2, 1024, 4, 4)
        z = T.conv1x1(pooled, Tensor(np.zeros((3, 1024))), Tensor(np.zeros(3)))
        assert z.shape == (2, 3, 4, 4)

    def test_window_mean_oracle_14(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(1, 1, 14, 14))
        out = T.adaptive_avg_pool(Tensor(x), 4)
        for j in range(4):
            for k in range(4):
                r0, r1 = (j * 14) // 4, -((-(j + 1) * 14) // 4)
                c0, c1 = (k * 14) // 4, -((-(k + 1) * 14) // 4)
                assert abs(out.data[0, 0, j, k] - x[0, 0, r0:r1, c0:c1].mean()) <= 1e-12

    def test_preserves_global_mean_when_divisible(self):
        rng = np.random.default_rng(7)
        x = rng.normal(size=(2, 3, 8, 8))
        out = T.adaptive_avg_pool(Tensor(x), 4)
        assert abs(out.data.mean() - x.mean()) <= 1e-12

    def test_oversized_target_rejected(self):
        with pytest.raises(ShapeError):
            T.adaptive_avg_pool(Tensor(np.zeros((1, 1, 3, 3))), 4)


class TestBilinearSample:
    def test_pixel_center_hits_value(self):
        rng = np.random.default_rng(8)
        v = rng.normal(size=(1, 2, 4, 4))
        # center of pixel (row 1, col 2): x = 2*(2+0.5)/4-1, y = 2*(1+0.5)/4-1
        coords = Tensor(np.array([[[2 * 2.5 / 4 - 1, 2 * 1.5 / 4 - 1]]]))
        out = T.bilinear_sample(Tensor(v), coords)
        np.testing.assert_allclose(out.data[0, :, 0], v[0, :, 1, 2], atol=1e-14)

    def test_midpoint_averages_neighbors(self):
        rng = np.random.default_rng(9)
        v = rng.normal(size=(1, 1, 4, 4))
        coords = Tensor(np.array([[[2 * 2.0 / 4 - 1, 2 * 1.5 / 4 - 1]]]))  # between cols 1,2 in row 1
        out = T.bilinear_sample(Tensor(v), coords)
        expect = 0.5 * (v[0, 0, 1, 1] + v[0, 0, 1, 2])
        assert abs(out.data[0, 0, 0] - expect) <= 1e-14

    def test_matches_closed_form_oracle(self):
        rng = np.random.default_rng(10)
        v = rng.normal(size=(2, 3, 5, 6))
        pts = rng.uniform(-1.3, 1.3, size=(2, 17, 2))
        out = T.bilinear_sample(Tensor(v), Tensor(pts))
        for b in range(2):
            for p in range(17):
                expect = bilinear_oracle(v, pts[b, p, 0], pts[b, p, 1])[b]
                assert np.abs(out.data[b, :, p] - expect).max() <= 1e-12

    def test_linear_in_grid_values(self):
        rng = np.random.default_rng(11)
        v1 = rng.normal(size=(1, 2, 4, 4))
        v2 = rng.normal(size=(1, 2, 4, 4))
        pts = Tensor(rng.uniform(-1, 1, size=(1, 9, 2)))
        a, b = 0.37, -1.21
        lhs = T.bilinear_sample(Tensor(a * v1 + b * v2), pts).data
        rhs = a * T.bilinear_sample(Tensor(v1), pts).data + b * T.bilinear_sample(Tensor(v2), pts).data
        assert np.abs(lhs - rhs).max() <= 1e-12

    def test_nonfinite_coords_rejected(self):
        with pytest.raises(ValueError, match="non-finite"):
            T.bilinear_sample(Tensor(np.zeros((1, 1, 2, 2))), Tensor(np.array([[[np.nan, 0.0]]])))


class TestBilinearUpsample:
    def test_identity(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(1, 2, 3, 5))
        out = T.bilinear_upsample(Tensor(x), 3, 5)
        np.testing.assert_allclose(out.data, x, atol=1e-15)

    def test_single_pixel_constant(self):
        out = T.bilinear_upsample(Tensor(np.full((1, 1, 1, 1), 2.5)), 4, 6)
        np.testing.assert_array_equal(out.data, np.full((1, 1, 4, 6), 2.5))

    def test_2x2_to_4x4_matches_grid_oracle(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(1, 1, 2, 2))
        out = T.bilinear_upsample(Tensor(x), 4, 4)
        # clamped-border bilinear oracle evaluated per output center
        for j in range(4):
            for k in range(4):
                sy = np.clip((j + 0.5) * 2 / 4 - 0.5, 0, 1)
                sx = np.clip((k + 0.5) * 2 / 4 - 0.5, 0, 1)
                y0, x0 = int(np.floor(sy)), int(np.floor(sx))
                y0, x0 = min(y0, 0), min(x0, 0)
                fy, fx = sy - y0, sx - x0
                expect = (
                    (1 - fy) * (1 - fx) * x[0, 0, y0, x0]
                    + (1 - fy) * fx * x[0, 0, y0, x0 + 1]
                    + fy * (1 - fx) * x[0, 0, y0 + 1, x0]
                    + fy * fx * x[0, 0, y0 + 1, x0 + 1]
                )
                assert abs(out.data[0, 0, j, k] - expect) <= 1e-12

    def test_interior_matches_bilinear_sample(self):
        rng = np.random.default_rng(14)
        x = rng.normal(size=(1, 2, 4, 4))
        up = T.bilinear_upsample(Tensor(x), 8, 8)
        xs = (np.arange(8) + 0.5) / 8 * 2 - 1
        pts = np.stack(np.meshgrid(xs, xs, indexing="xy"), axis=-1).reshape(1, -1, 2)
        sampled = T.bilinear_sample(Tensor(x), Tensor(pts)).data.reshape(1, 2, 8, 8)
        # away from the border the two conventions coincide
        assert np.abs(up.data[:, :, 2:6, 2:6] - sampled[:, :, 2:6, 2:6]).max() <= 1e-12


class TestPointwiseAndAffine:
    def test_sigmoid_at_zero(self):
        assert T.sigmoid(Tensor(np.zeros(3))).data[0] == 0.5

    def test_softmax_uniform(self):
        out = T.softmax(Tensor(np.full((2, 3), 1.7)))
        np.testing.assert_allclose(out.data, 1.0 / 3.0, atol=1e-15)

    def test_softmax_rows_sum_to_one(self):
        rng = np.random.default_rng(15)
        out = T.softmax(Tensor(rng.normal(size=(4, 7)) * 20))
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-12)

    def test_softmax_permutation_equivariance(self):
        rng = np.random.default_rng(16)
        x = rng.normal(size=(2, 5))
        perm = rng.permutation(5)
        a = T.softmax(Tensor(x[:, perm])).data
        b = T.softmax(Tensor(x)).data[:, perm]
        assert np.abs(a - b).max() <= 1e-15

    def test_softmax_empty_axis_rejected(self):
        with pytest.raises(ShapeError):
            T.softmax(Tensor(np.zeros((3, 0))))

    def test_linear_zero_weight_gives_bias(self):
        rng = np.random.default_rng(17)
        x = rng.normal(size=(3, 4))
        c = rng.normal(size=2)
        out = T.linear(Tensor(x), Tensor(np.zeros((2, 4))), Tensor(c))
        np.testing.assert_allclose(out.data, np.tile(c, (3, 1)), atol=1e-15)

    def test_tanh_open_interval(self):
        out = T.tanh(Tensor(np.array([-50.0, 0.0, 50.0])))
        assert out.data[0] >= -1.0 and out.data[2] <= 1.0 and out.data[1] == 0.0

    def test_finite_outputs_on_finite_inputs(self):
        rng = np.random.default_rng(18)
        x = Tensor(rng.normal(size=(2, 3, 4, 4)) * 100)
        for fn in (T.relu, T.tanh, T.sigmoid):
            assert np.isfinite(fn(x).data).all()
        assert np.isfinite(T.global_avg_pool(x).data).all()


class TestFiniteDiffCheck:
    def test_quadratic_exact(self):
        f = lambda t: float(t[0] ** 2)
        err = T.finite_diff_check(f, np.array([3.0]), np.array([6.0]))
        assert err <= 1e-12

    def test_sine_at_zero(self):
        f = lambda t: float(np.sin(t[0]))
        err = T.finite_diff_check(f, np.array([0.0]), np.array([1.0]), h=1e-3)
        assert err <= 1e-6  # O(h^2)

    def test_nonfinite_rejected(self):
        f = lambda t: float("nan")
        with pytest.raises(ValueError):
            T.finite_diff_check(f, np.array([0.0]), np.array([0.0]))


def _grad_of(build, params, seed=0):
    """Analytic gradient of a scalar head over a parameter vector."""
    tape = OpTape()
    loss = build(params, tape)
    tape.backward(loss)
    return params.grad.copy()


class TestLayerGradients:
    """Every layer's analytic backward vs central finite differences."""

    CASES = {}

    @staticmethod
    def scalar_head(out, tape):
        rng = np.random.default_rng(99)
        w = rng.normal(size=out.shape)
        flat = T.reshape(out, (1, out.data.size), tape)
        proj = T.linear(flat, Tensor(w.reshape(1, -1)), tape=tape)
        return T.reshape(proj, (), tape)

    def check(self, n_params, build, tol=1e-5, seed=0):
        rng = np.random.default_rng(seed)
        theta0 = rng.normal(size=n_params) * 0.5

        def value(theta):
            return float(build(Tensor(theta), None).data)

        params = Tensor(theta0)
        tape = OpTape()
        loss = build(params, tape)
        tape.backward(loss)
        err = T.finite_diff_check(value, theta0, params.grad, h=1e-3)
        assert err <= tol, f"gradient mismatch: rel err {err}"

    def test_conv1x1_grads(self):
        def build(p, tape):
            x = T.reshape(T.slice_axis(p, 0, 0, 12, tape), (1, 3, 2, 2), tape)
            w = T.reshape(T.slice_axis(p, 0, 12, 18, tape), (2, 3), tape)
            b = T.slice_axis(p, 0, 18, 20, tape)
            out = T.conv1x1(x, w, b, tape)
            return self.scalar_head(out, tape)
        self.check(20, build)

    def test_depthwise_separable_grads(self):
        def build(p, tape):
            x = T.reshape(T.slice_axis(p, 0, 0, 32, tape), (1, 2, 4, 4), tape)
            dw = T.reshape(T.slice_axis(p, 0, 32, 50, tape), (2, 3, 3), tape)
            pw = T.reshape(T.slice_axis(p, 0, 50, 56, tape), (3, 2), tape)
            b = T.slice_axis(p, 0, 56, 59, tape)
            out = T.depthwise_separable_conv(x, dw, pw, b, stride=2, tape=tape)
            return self.scalar_head(out, tape)
        self.check(59, build)

    def test_transposed_conv_grads(self):
        def build(p, tape):
            x = T.reshape(T.slice_axis(p, 0, 0, 18, tape), (1, 2, 3, 3), tape)
            w = T.reshape(T.slice_axis(p, 0, 18, 34, tape), (2, 2, 2, 2), tape)
            b = T.slice_axis(p, 0, 34, 36, tape)
            out = T.transposed_conv2x(x, w, b, tape)
            return self.scalar_head(out, tape)
        self.check(36, build)

    def test_pool_grads(self):
        def build(p, tape):
            x = T.reshape(p, (1, 2, 6, 6), tape)
            out = T.adaptive_avg_pool(x, 4, tape=tape)
            out = T.avg_pool(out, 2, tape)
            return self.scalar_head(out, tape)
        self.check(72, build)

    def test_bilinear_sample_grads(self):
        def build(p, tape):
            v = T.reshape(T.slice_axis(p, 0, 0, 32, tape), (1, 2, 4, 4), tape)
            raw = T.reshape(T.slice_axis(p, 0, 32, 44, tape), (1, 6, 2), tape)
            coords = T.scale_const(T.tanh(raw, tape), 0.9, tape)
            out = T.bilinear_sample(v, coords, tape)
            return self.scalar_head(out, tape)
        self.check(44, build)

    def test_bilinear_upsample_grads(self):
        def build(p, tape):
            x = T.reshape(p, (1, 2, 3, 3), tape)
            out = T.bilinear_upsample(x, 5, 7, tape)
            return self.scalar_head(out, tape)
        self.check(18, build)

    def test_activation_grads(self):
        def build(p, tape):
            x = T.reshape(p, (2, 6), tape)
            out = T.softmax(T.tanh(x, tape), tape)
            out = T.mul(out, T.sigmoid(x, tape), tape)
            return self.scalar_head(out, tape)
        self.check(12, build)

    def test_channel_mod_grads(self):
        def build(p, tape):
            x = T.reshape(T.slice_axis(p, 0, 0, 16, tape), (1, 2, 2, 4), tape)
            s = T.reshape(T.slice_axis(p, 0, 16, 18, tape), (1, 2), tape)
            t = T.reshape(T.slice_axis(p, 0, 18, 20, tape), (1, 2), tape)
            out = T.shift_channels(T.scale_channels(x, s, tape), t, tape)
            return self.scalar_head(out, tape)
        self.check(20, build)

    def test_structural_grads(self):
        def build(p, tape):
            a = T.reshape(T.slice_axis(p, 0, 0, 8, tape), (1, 2, 2, 2), tape)
            b = T.reshape(T.slice_axis(p, 0, 8, 16, tape), (1, 2, 2, 2), tape)
            cat = T.concat([a, b], 1, tape)
            out = T.take_index(T.moveaxis(cat, 1, 3, tape), 3, 1, tape)
            out = T.add(T.reshape(out, (1, 4), tape), T.global_avg_pool(cat, tape), tape)
            return self.scalar_head(out, tape)
        self.check(16, build)

    def test_cross_entropy_grads(self):
        labels = np.array([[[0, 1], [2, 255]]])
        def build(p, tape):
            logits = T.reshape(p, (1, 3, 2, 2), tape)
            return T.cross_entropy(logits, labels, tape=tape)
        self.check(12, build)

    def test_many_random_configs(self):
        # spot-check conv + activation + pool compositions at random sizes
        rng = np.random.default_rng(100)
        for trial in range(100):
            B = int(rng.integers(1, 3))
            C = int(rng.integers(1, 4))
            H = int(rng.integers(2, 6))
            n = B * C * H * H

            def build(p, tape, B=B, C=C, H=H, n=n):
                x = T.reshape(p, (B, C, H, H), tape)
                h = T.tanh(x, tape)
                out = T.adaptive_avg_pool(h, 1, tape=tape)
                flat = T.reshape(out, (1, B * C), tape)
                return T.reshape(
                    T.linear(flat, Tensor(np.ones((1, B * C))), tape=tape), (), tape
                )

            theta0 = rng.normal(size=n) * 0.3
            params = Tensor(theta0)
            tape = OpTape()
            loss = build(params, tape)
            tape.backward(loss)
            err = T.finite_diff_check(
                lambda t: float(build(Tensor(t), None).data), theta0, params.grad, h=1e-3
            )
            assert err <= 1e-5


class TestOpTape:
    def test_reverse_order_replay(self):
        tape = OpTape()
        x = Tensor(np.array([2.0]))
        y = T.scale_const(x, 3.0, tape)
        z = T.add_const(y, 1.0, tape)
        w = T.reshape(z, (), tape)
        assert tape.op_names() == ["scale_const", "add_const", "reshape"]
        tape.backward(w)
        assert x.grad[0] == 3.0

    def test_replay_bit_identical(self):
        rng = np.random.default_rng(20)
        x = Tensor(rng.normal(size=(1, 3, 4, 4)))
        w = Tensor(rng.normal(size=(2, 3)))
        tape = OpTape()
        out = T.conv1x1(x, w, tape=tape)
        out = T.tanh(out, tape)
        loss = T.reshape(T.global_avg_pool(out, tape), (1, 2), tape)
        loss = T.reshape(T.linear(loss, Tensor(np.ones((1, 2))), tape=tape), (), tape)
        tape.backward(loss)
        g1 = w.grad.copy()
        w.zero_grad()
        x.zero_grad()
        tape.backward(loss)
        np.testing.assert_array_equal(g1, w.grad)

    def test_untouched_tensor_gets_no_grad(self):
        tape = OpTape()
        x = Tensor(np.ones((1, 1, 2, 2)))
        unused = Tensor(np.ones((1, 1)))
        out = T.reshape(T.global_avg_pool(x, tape), (), tape)
        tape.backward(out)
        assert unused.grad is None
