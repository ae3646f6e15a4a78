import numpy as np
import pytest

from gelsim import optical
from gelsim.camera import TactileGeometryFrame


def rand_frame(rng, h=16, w=16, max_depth=20.0):
    normal = rng.normal(size=(h, w, 3))
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    normal[..., 2] = -np.abs(normal[..., 2])  # camera-facing
    normal /= np.linalg.norm(normal, axis=-1, keepdims=True)
    depth = rng.uniform(2.0, max_depth, size=(h, w))
    valid = rng.random((h, w)) > 0.1
    return TactileGeometryFrame(depth=depth, normal=normal, valid_mask=valid, max_depth=max_depth)


class TestNormalize:
    def test_endpoints(self):
        frame = TactileGeometryFrame(
            depth=np.full((8, 8), 20.0),
            normal=np.tile([0.0, 0.0, -1.0], (8, 8, 1)),
            valid_mask=np.zeros((8, 8), bool),
            max_depth=20.0,
        )
        out = optical.normalize_inputs(frame)
        np.testing.assert_allclose(out[0, 0], [0.5, 0.5, 0.0, 1.0])

    def test_half_depth(self):
        frame = TactileGeometryFrame(
            depth=np.full((8, 8), 10.0),
            normal=np.tile([0.0, 0.0, -1.0], (8, 8, 1)),
            valid_mask=np.ones((8, 8), bool),
            max_depth=20.0,
        )
        assert optical.normalize_inputs(frame)[0, 0, 3] == pytest.approx(0.5)

    def test_range(self):
        rng = np.random.default_rng(0)
        out = optical.normalize_inputs(rand_frame(rng))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestForward:
    def test_shape_and_range(self):
        model = optical.OpticalModel.initialize(seed=1)
        rng = np.random.default_rng(2)
        x = rng.uniform(size=(16, 16, 4))
        y = model.forward(x)
        assert y.shape == (16, 16, 3)
        assert np.all(np.abs(y) <= 1.0)
        assert np.all(np.isfinite(y))

    def test_deterministic(self):
        model = optical.OpticalModel.initialize(seed=1)
        x = np.random.default_rng(3).uniform(size=(16, 16, 4))
        np.testing.assert_array_equal(model.forward(x), model.forward(x))

    def test_no_mirror_symmetry(self):
        model = optical.OpticalModel.initialize(seed=1)
        x = np.random.default_rng(4).uniform(size=(16, 16, 4))
        y = model.forward(x)
        y_m = model.forward(x[:, ::-1])
        assert not np.allclose(y, y_m[:, ::-1])

    def test_param_count_budget(self):
        model = optical.OpticalModel.initialize(seed=0)
        assert model.n_params() < 100_000

    def test_bad_channels(self):
        model = optical.OpticalModel.initialize(seed=0)
        with pytest.raises(optical.OpticalError):
            model.forward(np.zeros((16, 16, 3)))


class TestCompose:
    def test_zero_residual(self):
        idle = np.random.default_rng(5).uniform(size=(8, 8, 3))
        np.testing.assert_array_equal(optical.compose(idle, np.zeros_like(idle)), idle)

    def test_clamp_up(self):
        idle = np.full((4, 4, 3), 0.9)
        res = np.full((4, 4, 3), 0.3)
        np.testing.assert_allclose(optical.compose(idle, res), 1.0)

    def test_clamp_down(self):
        idle = np.full((4, 4, 3), 0.2)
        res = np.full((4, 4, 3), -0.5)
        np.testing.assert_allclose(optical.compose(idle, res), 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(optical.OpticalError):
            optical.compose(np.zeros((4, 4, 3)), np.zeros((8, 8, 3)))


class TestLayerGradients:
    """Analytic gradients vs central finite differences, every layer type."""

    H = 1e-4
    TOL = 1e-3

    def fd_check(self, f, x, analytic_dx):
        rng = np.random.default_rng(99)
        # probe a subset of coordinates
        flat = x.reshape(-1)
        idx = rng.choice(flat.size, size=min(40, flat.size), replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + self.H
            lp = f(x)
            flat[i] = orig - self.H
            lm = f(x)
            flat[i] = orig
            fd = (lp - lm) / (2 * self.H)
            an = analytic_dx.reshape(-1)[i]
            assert an == pytest.approx(fd, rel=self.TOL, abs=1e-7), f"coord {i}"

    def test_conv_stride1_input_and_params(self):
        rng = np.random.default_rng(10)
        x = rng.normal(size=(2, 8, 8, 3))
        W = rng.normal(size=(3, 3, 3, 5)) * 0.3
        b = rng.normal(size=5) * 0.1
        target = rng.normal(size=(2, 8, 8, 5))

        def loss_of(x_):
            y = optical.conv3x3_forward(x_, W, b, stride=1)
            return float(np.sum((y - target) ** 2))

        y = optical.conv3x3_forward(x, W, b, stride=1)
        dy = 2.0 * (y - target)
        dx, dW, db = optical.conv3x3_backward(x, W, dy, stride=1)
        self.fd_check(loss_of, x, dx)

        def loss_of_W(W_):
            return float(np.sum((optical.conv3x3_forward(x, W_, b, stride=1) - target) ** 2))

        self.fd_check(loss_of_W, W, dW)

        h = self.H
        for i in range(len(b)):
            orig = b[i]
            b[i] = orig + h
            lp = loss_of(x)
            b[i] = orig - h
            lm = loss_of(x)
            b[i] = orig
            assert db[i] == pytest.approx((lp - lm) / (2 * h), rel=self.TOL)

    def test_conv_stride2(self):
        rng = np.random.default_rng(11)
        x = rng.normal(size=(1, 8, 8, 4))
        W = rng.normal(size=(3, 3, 4, 6)) * 0.3
        b = np.zeros(6)
        target = rng.normal(size=(1, 4, 4, 6))

        def loss_of(x_):
            y = optical.conv3x3_forward(x_, W, b, stride=2)
            return float(np.sum((y - target) ** 2))

        y = optical.conv3x3_forward(x, W, b, stride=2)
        dy = 2.0 * (y - target)
        dx, dW, _ = optical.conv3x3_backward(x, W, dy, stride=2)
        self.fd_check(loss_of, x, dx)

        def loss_of_W(W_):
            return float(np.sum((optical.conv3x3_forward(x, W_, b, stride=2) - target) ** 2))

        self.fd_check(loss_of_W, W, dW)

    def test_elu(self):
        rng = np.random.default_rng(12)
        x = rng.normal(size=(4, 6, 6, 3))
        target = rng.normal(size=x.shape)

        def loss_of(x_):
            return float(np.sum((optical.elu_forward(x_) - target) ** 2))

        y = optical.elu_forward(x)
        dx = optical.elu_backward(y, 2.0 * (y - target))
        self.fd_check(loss_of, x, dx)

    def test_upsample(self):
        rng = np.random.default_rng(13)
        x = rng.normal(size=(2, 4, 4, 3))
        target = rng.normal(size=(2, 8, 8, 3))

        def loss_of(x_):
            return float(np.sum((optical.upsample2_forward(x_) - target) ** 2))

        y = optical.upsample2_forward(x)
        dx = optical.upsample2_backward(2.0 * (y - target))
        self.fd_check(loss_of, x, dx)

    def test_full_model_input_gradient(self):
        model = optical.OpticalModel.initialize(seed=5)
        rng = np.random.default_rng(14)
        x = rng.uniform(size=(1, 8, 8, 4))
        target = rng.uniform(-0.5, 0.5, size=(1, 8, 8, 3))

        def loss_of(x_):
            y = model.forward(x_)
            return float(np.mean((y - target) ** 2))

        y, cache = model.forward(x, want_cache=True)
        dy = (2.0 / y.size) * (y - target)
        grads, dx = model.backward(cache, dy)
        self.fd_check(loss_of, x, dx)

    def test_full_model_param_gradients(self):
        model = optical.OpticalModel.initialize(seed=6)
        rng = np.random.default_rng(15)
        x = rng.uniform(size=(1, 8, 8, 4))
        target = rng.uniform(-0.5, 0.5, size=(1, 8, 8, 3))
        y, cache = model.forward(x, want_cache=True)
        dy = (2.0 / y.size) * (y - target)
        grads, _ = model.backward(cache, dy)
        h = self.H
        for name in ("enc1", "enc2", "bott", "dec1", "out"):
            W, b = model.weights[name]
            gW = grads[name][0]
            flatW = W.reshape(-1)
            idx = rng.choice(flatW.size, size=12, replace=False)
            for i in idx:
                orig = flatW[i]
                flatW[i] = orig + h
                lp = float(np.mean((model.forward(x) - target) ** 2))
                flatW[i] = orig - h
                lm = float(np.mean((model.forward(x) - target) ** 2))
                flatW[i] = orig
                fd = (lp - lm) / (2 * h)
                assert gW.reshape(-1)[i] == pytest.approx(fd, rel=self.TOL, abs=1e-9), (name, i)


class TestTraining:
    def small_dataset(self, n=4, hw=16, seed=20):
        rng = np.random.default_rng(seed)
        return [
            (rng.uniform(size=(hw, hw, 4)), rng.uniform(-0.4, 0.4, size=(hw, hw, 3)))
            for _ in range(n)
        ]

    def test_single_sample_descent(self):
        data = self.small_dataset(n=1)
        model = optical.OpticalModel.initialize(seed=1)
        _, hist = optical.train(model, data, optical.TrainConfig(epochs=10, seed=0))
        assert all(b < a for a, b in zip(hist, hist[1:]))

    def test_determinism(self):
        data = self.small_dataset(n=4)
        m1, h1 = optical.train(optical.OpticalModel.initialize(seed=2), data,
                               optical.TrainConfig(epochs=5, seed=3))
        m2, h2 = optical.train(optical.OpticalModel.initialize(seed=2), data,
                               optical.TrainConfig(epochs=5, seed=3))
        np.testing.assert_allclose(h1, h2, atol=1e-10)
        for k in m1.weights:
            np.testing.assert_array_equal(m1.weights[k][0], m2.weights[k][0])

    def test_empty_dataset(self):
        with pytest.raises(optical.OpticalError):
            optical.train(optical.OpticalModel.initialize(0), [], optical.TrainConfig())


class TestSynthShade:
    def flat_frame(self, h=16, w=16):
        return TactileGeometryFrame(
            depth=np.full((h, w), 20.0),
            normal=np.tile([0.0, 0.0, -1.0], (h, w, 1)),
            valid_mask=np.ones((h, w), bool),
            max_depth=20.0,
        )

    def test_flat_surface_uniform_scale(self):
        frame = self.flat_frame()
        pattern = optical.make_pattern(16, 16, seed=0)
        out = optical.synth_shade(frame, pattern)
        ratio = out / pattern
        assert np.allclose(ratio, ratio[0, 0], atol=1e-12)

    def test_lambert_brightness_ordering(self):
        frame = self.flat_frame()
        light = optical._LIGHTS[0]
        frame.normal[0, 0] = -light  # facing the light
        frame.normal[0, 1] = np.array([light[0], light[1], -abs(light[2])])
        frame.normal[0, 1] /= np.linalg.norm(frame.normal[0, 1])
        pattern = np.ones((16, 16, 3))
        out = optical.synth_shade(frame, pattern)
        assert out[0, 0].mean() > out[0, 1].mean()

    def test_range(self):
        rng = np.random.default_rng(30)
        frame = rand_frame(rng)
        out = optical.synth_shade(frame, optical.make_pattern(16, 16, seed=1))
        assert out.min() >= 0.0 and out.max() <= 1.0


class TestWeightsIO:
    def test_round_trip(self, tmp_path):
        model = optical.OpticalModel.initialize(seed=7)
        path = tmp_path / "w.optw"
        optical.save_weights(model, path)
        back = optical.load_weights(path)
        x = np.random.default_rng(8).uniform(size=(16, 16, 4))
        # float32 serialization quantizes the parameters
        np.testing.assert_allclose(back.forward(x), model.forward(x), atol=1e-5)

    def test_save_load_save_stable(self, tmp_path):
        model = optical.OpticalModel.initialize(seed=9)
        p1, p2 = tmp_path / "a.optw", tmp_path / "b.optw"
        optical.save_weights(model, p1)
        optical.save_weights(optical.load_weights(p1), p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.optw"
        p.write_bytes(b"XXXX" + b"\0" * 64)
        with pytest.raises(optical.OpticalError):
            optical.load_weights(p)
