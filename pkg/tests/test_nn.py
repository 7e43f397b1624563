import numpy as np
import pytest

from museguide import nn
from museguide.errors import InvalidLoss, ShapeError


def naive_conv2d(x, w, b, stride, padding):
    """Quadruple-loop oracle for cross-correlation."""
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, f, oh, ow))
    for ni in range(n):
        for fi in range(f):
            for i in range(oh):
                for j in range(ow):
                    patch = xp[ni, :, i * stride : i * stride + kh,
                               j * stride : j * stride + kw]
                    out[ni, fi, i, j] = np.sum(patch * w[fi]) + b[fi]
    return out


class TestConv2d:
    def test_identity_1x1(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
        w = np.eye(3, dtype=np.float32).reshape(3, 3, 1, 1)
        out = nn.conv2d(nn.Tensor(x), nn.Tensor(w), nn.Tensor(np.zeros(3, np.float32)))
        assert np.allclose(out.data, x)

    def test_all_ones_3x3(self):
        x = np.ones((1, 1, 3, 3), np.float32)
        w = np.ones((1, 1, 3, 3), np.float32)
        out = nn.conv2d(nn.Tensor(x), nn.Tensor(w), nn.Tensor(np.zeros(1, np.float32)))
        assert out.data.shape == (1, 1, 1, 1)
        assert out.data[0, 0, 0, 0] == 9.0

    @pytest.mark.parametrize("stride,padding", [(1, 0), (1, 1), (2, 1)])
    def test_matches_naive_oracle(self, stride, padding):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, 3, 3))
        b = rng.normal(size=4)
        out = nn.conv2d(nn.Tensor(x), nn.Tensor(w), nn.Tensor(b),
                        stride=stride, padding=padding)
        oracle = naive_conv2d(x, w, b, stride, padding)
        assert out.data.shape == oracle.shape
        assert np.max(np.abs(out.data - oracle)) < 1e-5

    def test_stride2_output_spatial(self):
        rng = np.random.default_rng(2)
        x = nn.Tensor(rng.normal(size=(2, 3, 8, 8)))
        w = nn.Tensor(rng.normal(size=(4, 3, 3, 3)))
        out = nn.conv2d(x, w, stride=2, padding=1)
        assert out.data.shape == (2, 4, 4, 4)

    def test_channel_mismatch_raises(self):
        with pytest.raises(ShapeError):
            nn.conv2d(nn.Tensor(np.zeros((1, 2, 4, 4))),
                      nn.Tensor(np.zeros((1, 3, 3, 3))))


class TestPixelShuffle:
    def test_paper_default_shape(self):
        x = nn.Tensor(np.zeros((1, 1, 1024, 64), np.float32))
        out = nn.pixel_unshuffle(x, 4)
        assert out.data.shape == (1, 16, 256, 16)

    def test_r1_identity(self):
        x = np.arange(16, dtype=np.float32).reshape(1, 1, 4, 4)
        out = nn.pixel_unshuffle(nn.Tensor(x), 1)
        assert np.array_equal(out.data, x)

    def test_shuffle_inverts_unshuffle(self):
        rng = np.random.default_rng(3)
        x = rng.normal(size=(1, 2, 8, 8)).astype(np.float32)
        down = nn.pixel_unshuffle(nn.Tensor(x), 2)
        up = nn.pixel_shuffle(down, 2)
        assert np.array_equal(up.data, x)

    def test_preserves_values_and_energy(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(1, 3, 8, 4)).astype(np.float32)
        out = nn.pixel_unshuffle(nn.Tensor(x), 2)
        a = np.sort(out.data.ravel())
        b = np.sort(x.ravel())
        assert np.array_equal(a, b)
        # identical multisets summed in identical order: energy is exact
        assert np.sum(a.astype(np.float64) ** 2) == np.sum(b.astype(np.float64) ** 2)

    def test_indivisible_raises(self):
        with pytest.raises(ShapeError):
            nn.pixel_unshuffle(nn.Tensor(np.zeros((1, 1, 6, 4))), 4)


class TestBackprop:
    def test_linear_map_gradient(self):
        rng = np.random.default_rng(5)
        x = rng.normal(size=(4, 6)).astype(np.float64)
        w = nn.Parameter(rng.normal(size=(6, 3)))

        def build():
            return nn.tsum(nn.matmul(nn.Tensor(x), w))

        err = nn.finite_difference_check(build, {"w": w}, n_samples=18, seed=0)
        assert err < 1e-4
        # analytic: d(sum(xW))/dW = column sums of x, broadcast
        w.zero_grad()
        build().backward()
        expected = np.tile(x.sum(axis=0)[:, None], (1, 3))
        assert np.allclose(w.grad, expected)

    def test_unused_parameter_zero_grad(self):
        w = nn.Parameter(np.ones((3, 3)))
        unused = nn.Parameter(np.ones(4))
        loss = nn.tsum(nn.mul(w, w))
        loss.backward()
        assert np.array_equal(unused.grad, np.zeros(4))

    def test_frozen_parameter_gets_no_grad(self):
        frozen = nn.Parameter(np.ones((2, 2)), frozen=True)
        live = nn.Parameter(np.ones((2, 2)))
        loss = nn.tsum(nn.mul(nn.add(frozen, live), live))
        loss.backward()
        assert np.array_equal(frozen.grad, np.zeros((2, 2)))
        assert not np.array_equal(live.grad, np.zeros((2, 2)))

    def test_nonscalar_loss_rejected(self):
        with pytest.raises(InvalidLoss):
            nn.Tensor(np.ones(3), requires_grad=True).backward()

    def test_determinism(self):
        rng = np.random.default_rng(6)
        x = rng.normal(size=(2, 3, 8, 8))
        w = nn.Parameter(rng.normal(size=(4, 3, 3, 3)))

        def run():
            w.zero_grad()
            loss = nn.mean(nn.power(nn.conv2d(nn.Tensor(x), w, padding=1), 2))
            loss.backward()
            return loss.data.tobytes(), w.grad.tobytes()

        assert run() == run()


FD_CASES = {}


def _register_fd_cases():
    rng = np.random.default_rng(42)

    def conv_case(stride, padding):
        x = rng.normal(size=(2, 3, 6, 6))
        w = nn.Parameter(rng.normal(size=(4, 3, 3, 3)) * 0.3)
        b = nn.Parameter(rng.normal(size=4) * 0.1)
        return (lambda: nn.mean(nn.power(
            nn.conv2d(nn.Tensor(x), w, b, stride, padding), 2)),
            {"w": w, "b": b})

    FD_CASES["conv_s1"] = conv_case(1, 1)
    FD_CASES["conv_s2"] = conv_case(2, 1)

    x = rng.normal(size=(2, 4, 4, 4))
    g = nn.Parameter(rng.normal(size=4) * 0.5 + 1.0)
    bt = nn.Parameter(rng.normal(size=4) * 0.1)
    FD_CASES["group_norm"] = (
        lambda: nn.mean(nn.power(nn.group_norm(nn.Tensor(x), g, bt, 2), 2)),
        {"g": g, "bt": bt})

    xs = rng.normal(size=(3, 5))
    ws = nn.Parameter(rng.normal(size=(5, 4)) * 0.4)
    FD_CASES["linear_silu"] = (
        lambda: nn.mean(nn.power(nn.silu(nn.matmul(nn.Tensor(xs), ws)), 2)),
        {"ws": ws})

    xu = rng.normal(size=(1, 2, 4, 4))
    wu = nn.Parameter(rng.normal(size=(2, 2, 3, 3)) * 0.3)
    FD_CASES["unshuffle_upsample"] = (
        lambda: nn.mean(nn.power(
            nn.upsample_to(nn.pixel_unshuffle(
                nn.conv2d(nn.Tensor(xu), wu, padding=1), 2), (4, 4)), 2)),
        {"wu": wu})

    xc = rng.normal(size=(2, 3, 4, 4))
    wc = nn.Parameter(rng.normal(size=(3, 6, 3, 3)) * 0.3)
    FD_CASES["concat_conv"] = (
        lambda: nn.mean(nn.power(
            nn.conv2d(nn.concat([nn.Tensor(xc), nn.Tensor(xc)], axis=1),
                      wc, padding=1), 2)),
        {"wc": wc})


_register_fd_cases()


@pytest.mark.parametrize("name", sorted(FD_CASES))
def test_layer_finite_difference(name):
    build, params = FD_CASES[name]
    err = nn.finite_difference_check(build, params, n_samples=120, seed=7)
    assert err < 1e-3, f"{name}: max rel err {err}"


class TestTensorIO:
    def test_tensor_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(8)
        arr = rng.normal(size=(3, 5, 2)).astype(np.float32)
        path = tmp_path / "x.tnsr"
        nn.save_tensor(path, arr)
        back = nn.load_tensor(path)
        assert np.array_equal(back, arr)
        with open(path, "rb") as fh:
            assert fh.read(5) == b"TNSR1"

    def test_checkpoint_roundtrip(self, tmp_path):
        params = {
            "block.weight": nn.Parameter(np.ones((2, 3), np.float32)),
            "block.bias": nn.Parameter(np.zeros(2, np.float32), frozen=True),
        }
        nn.save_checkpoint(tmp_path / "ckpt", params, {"kind": "test"})
        tensors, manifest = nn.load_checkpoint(tmp_path / "ckpt")
        assert manifest["schema"] == "checkpoint/v1"
        assert manifest["kind"] == "test"
        assert manifest["layers"]["block.bias"]["frozen"] is True
        target = {
            "block.weight": nn.Parameter(np.zeros((2, 3), np.float32)),
            "block.bias": nn.Parameter(np.ones(2, np.float32)),
        }
        nn.assign_state(target, tensors)
        assert np.array_equal(target["block.weight"].data, np.ones((2, 3)))

    def test_missing_checkpoint_raises(self, tmp_path):
        from museguide.errors import NotLoaded
        with pytest.raises(NotLoaded):
            nn.load_checkpoint(tmp_path / "nope")


class TestAdam:
    def test_descends_quadratic(self):
        p = nn.Parameter(np.array([4.0, -3.0], np.float32))
        opt = nn.Adam({"p": p}, lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            nn.tsum(nn.mul(p, p)).backward()
            opt.step()
        assert np.max(np.abs(p.data)) < 0.2

    def test_skips_frozen(self):
        p = nn.Parameter(np.ones(3, np.float32), frozen=True)
        opt = nn.Adam({"p": p}, lr=0.1)
        before = p.data.copy()
        opt.zero_grad()
        opt.step()
        assert np.array_equal(p.data, before)
