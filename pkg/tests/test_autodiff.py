import math

import numpy as np
import pytest
import torch

from diffseg3d import autodiff as ad

from oracles import conv3d_loops, trilinear_voxel


def _t(a):
    return torch.as_tensor(np.asarray(a, dtype=np.float64))


class TestConv3d:
    def test_identity_kernel(self):
        x = torch.randn(2, 3, 4, 5, 6, dtype=torch.float64)
        w = torch.zeros(3, 3, 1, 1, 1, dtype=torch.float64)
        for c in range(3):
            w[c, c] = 1.0
        assert torch.equal(ad.conv3d(x, w, torch.zeros(3, dtype=torch.float64)), x)

    def test_zero_kernel(self):
        x = torch.randn(1, 2, 5, 5, 5)
        out = ad.conv3d(x, torch.zeros(4, 2, 3, 3, 3))
        assert out.shape == (1, 4, 3, 3, 3)
        assert not out.any()

    def test_matches_loops_4cube(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 1, 4, 4, 4))
        w = rng.normal(size=(1, 1, 3, 3, 3))
        got = ad.conv3d(_t(x), _t(w)).numpy()
        np.testing.assert_allclose(got, conv3d_loops(x, w, None, 1, 0), atol=1e-6, rtol=0)

    def test_matches_loops_random_configs(self):
        rng = np.random.default_rng(1)
        for trial in range(50):
            cin, cout = rng.integers(1, 3, size=2)
            k = int(rng.integers(1, 4))
            stride = int(rng.integers(1, 3))
            pad = int(rng.integers(0, 2))
            d, h, w_ = (int(v) for v in rng.integers(max(1, k - 2 * pad), 6, size=3))
            x = rng.normal(size=(1, cin, d, h, w_))
            w = rng.normal(size=(cout, cin, k, k, k))
            b = rng.normal(size=cout)
            got = ad.conv3d(_t(x), _t(w), _t(b), stride, pad).numpy()
            want = conv3d_loops(x, w, b, stride, pad)
            assert got.shape == want.shape
            assert ad.conv_output_extent(d, k, stride, pad) == want.shape[2]
            np.testing.assert_allclose(got, want, atol=1e-6, rtol=0, err_msg=f"trial {trial}")

    def test_shape_errors(self):
        with pytest.raises(ad.ShapeError, match="channel mismatch"):
            ad.conv3d(torch.zeros(1, 2, 4, 4, 4), torch.zeros(1, 3, 3, 3, 3))
        with pytest.raises(ad.ShapeError, match="exceeds padded input"):
            ad.conv3d(torch.zeros(1, 1, 2, 2, 2), torch.zeros(1, 1, 3, 3, 3))
        with pytest.raises(ad.ShapeError):
            ad.conv3d(torch.zeros(1, 1, 4, 4, 4), torch.zeros(1, 1, 3, 3, 3), stride=0)


class TestTrilinear:
    def test_identity(self):
        x = torch.randn(1, 2, 3, 4, 5)
        assert torch.equal(ad.trilinear_upsample(x, (3, 4, 5)), x)

    def test_constant(self):
        x = torch.full((1, 3, 2, 3, 2), 0.7, dtype=torch.float64)
        out = ad.trilinear_upsample(x, (5, 7, 9))
        assert out.shape == (1, 3, 5, 7, 9)
        torch.testing.assert_close(out, torch.full_like(out, 0.7))

    def test_ramp_matches_voxel_oracle(self):
        z, y, x = np.meshgrid(np.arange(2), np.arange(2), np.arange(2), indexing="ij")
        ramp = 0.3 * z - 1.1 * y + 2.0 * x + 0.5
        got = ad.trilinear_upsample(_t(ramp)[None, None], (4, 4, 4))[0, 0].numpy()
        np.testing.assert_allclose(got, trilinear_voxel(ramp, (4, 4, 4)), atol=1e-6, rtol=0)

    def test_random_non_integer_scale(self):
        vol = np.random.default_rng(2).normal(size=(3, 2, 4))
        got = ad.trilinear_upsample(_t(vol)[None, None], (5, 7, 6))[0, 0].numpy()
        np.testing.assert_allclose(got, trilinear_voxel(vol, (5, 7, 6)), atol=1e-9, rtol=0)

    def test_rejects_shrinking(self):
        with pytest.raises(ad.ShapeError):
            ad.trilinear_upsample(torch.zeros(1, 1, 4, 4, 4), (2, 4, 4))


class TestSoftmax:
    def test_single_class(self):
        out = ad.channel_softmax(torch.randn(2, 1, 3, 3, 3))
        assert torch.equal(out, torch.ones_like(out))

    def test_equal_logits(self):
        out = ad.channel_softmax(torch.full((1, 4, 2, 2, 2), 3.0))
        torch.testing.assert_close(out, torch.full_like(out, 0.25))

    def test_closed_form(self):
        logits = torch.tensor([0.0, math.log(3.0)], dtype=torch.float64).reshape(1, 2, 1, 1, 1)
        out = ad.channel_softmax(logits).reshape(-1)
        torch.testing.assert_close(out, torch.tensor([0.25, 0.75], dtype=torch.float64))

    def test_overflow_safe(self):
        logits = (torch.rand(2, 5, 3, 3, 3, dtype=torch.float64) * 2 - 1) * 1e4
        out = ad.channel_softmax(logits)
        assert torch.isfinite(out).all()
        assert (out.sum(dim=1) - 1).abs().max() < 1e-6


class TestAdam:
    def test_zero_gradient(self):
        p = torch.tensor([1.0, -2.0])
        opt = ad.Adam([p], lr=0.1)
        ad.adam_step([p], [torch.zeros(2)], opt)
        assert torch.equal(p, torch.tensor([1.0, -2.0]))
        assert opt.step_count == 1

    def test_first_step_by_hand(self):
        # m1 = 0.1, v1 = 0.001; bias-corrected 1 and 1 -> w = -0.1 / (1 + 1e-8)
        w = torch.zeros(1, dtype=torch.float64)
        opt = ad.Adam([w], lr=0.1)
        opt.step([torch.ones(1, dtype=torch.float64)])
        assert w.item() == pytest.approx(-0.1 / (1 + 1e-8), abs=1e-12)

    def test_identical_params_stay_identical(self):
        a = torch.tensor([0.5, 0.5])
        opt = ad.Adam([a], lr=0.05)
        g = torch.Generator().manual_seed(0)
        for _ in range(25):
            gi = torch.randn(1, generator=g).repeat(2)
            opt.step([gi])
            assert a[0].item() == a[1].item()

    def test_nan_rejected(self):
        p = torch.ones(3)
        opt = ad.Adam([p], lr=0.1)
        with pytest.raises(ad.DivergenceError):
            opt.step([torch.tensor([0.0, float("nan"), 1.0])])
        assert torch.equal(p, torch.ones(3))
        assert opt.step_count == 0

    def test_agrees_with_torch_adam(self):
        g = torch.Generator().manual_seed(3)
        p1 = torch.randn(4, 3, generator=g, dtype=torch.float64)
        p2 = p1.clone().requires_grad_(True)
        ours = ad.Adam([p1], lr=1e-2)
        ref = torch.optim.Adam([p2], lr=1e-2)
        for _ in range(10):
            grad = torch.randn(4, 3, generator=g, dtype=torch.float64)
            ours.step([grad])
            p2.grad = grad.clone()
            ref.step()
        torch.testing.assert_close(p1, p2.detach(), rtol=1e-10, atol=1e-12)


class TestGradCheck:
    def test_sum_of_squares(self):
        x = torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)
        assert ad.grad_check(lambda v: (v**2).sum(), x) < 1e-7

    def test_softmax_sum_has_zero_gradient(self):
        x = torch.randn(1, 3, 2, 2, 2, dtype=torch.float64, requires_grad=True)
        ad.channel_softmax(x).sum().backward()
        assert x.grad.abs().max() < 1e-7

    def test_rejects_non_scalar(self):
        with pytest.raises(ad.ShapeError):
            ad.grad_check(lambda v: v * 2, torch.ones(3, dtype=torch.float64))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_conv3d(self, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(1, 1, 4, 4, 4, generator=g, dtype=torch.float64)
        w = torch.randn(2, 1, 3, 3, 3, generator=g, dtype=torch.float64)
        b = torch.randn(2, generator=g, dtype=torch.float64)
        assert ad.grad_check(lambda v: (ad.conv3d(v, w, b, 1, 1) ** 2).sum(), x) < 1e-5
        assert ad.grad_check(lambda v: (ad.conv3d(x, v, b, 2, 1) ** 2).sum(), w) < 1e-5
        assert ad.grad_check(lambda v: ad.conv3d(x, w, v).sum(), b) < 1e-5

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_elementwise_and_norm_ops(self, seed):
        g = torch.Generator().manual_seed(seed)
        x = torch.randn(1, 4, 2, 2, 2, generator=g, dtype=torch.float64)
        y = torch.randn(1, 4, 2, 2, 2, generator=g, dtype=torch.float64)
        gw = torch.randn(4, generator=g, dtype=torch.float64)
        gb = torch.randn(4, generator=g, dtype=torch.float64)
        probe = torch.randn(1, 4, 2, 2, 2, generator=g, dtype=torch.float64)
        checks = {
            "silu": lambda v: (ad.silu(v) * probe).sum(),
            "group_norm": lambda v: (ad.group_norm(v, 2, gw, gb) * probe).sum(),
            "mul_add_sub": lambda v: ((v * y + v - y) * probe).mean(),
            "l1": lambda v: ad.l1_loss(v, y),
            "concat": lambda v: (ad.concat_channels([v, y]) ** 2).sum(),
            "upsample": lambda v: (ad.trilinear_upsample(v, (4, 3, 5)) ** 2).sum(),
            "softmax": lambda v: (ad.channel_softmax(v) * probe).sum(),
        }
        for name, fn in checks.items():
            assert ad.grad_check(fn, x) < 1e-5, name

    def test_downsample(self):
        g = torch.Generator().manual_seed(7)
        x = torch.randn(1, 2, 4, 4, 4, generator=g, dtype=torch.float64)
        w = torch.randn(3, 2, 3, 3, 3, generator=g, dtype=torch.float64)
        assert ad.downsample2x(x, w).shape == (1, 3, 2, 2, 2)
        assert ad.grad_check(lambda v: (ad.downsample2x(v, w) ** 2).sum(), x) < 1e-5


def test_group_count_rule():
    assert ad.num_groups(16) == 8
    assert ad.num_groups(4) == 4
    assert ad.num_groups(12) == 6


def test_checkpoint_roundtrip(tmp_path):
    params = {"enc.weight": torch.randn(3, 2, 3, 3, 3), "bias": torch.randn(5), "scalar": torch.tensor(2.5)}
    path = tmp_path / "p.hdt"
    ad.save_checkpoint(path, params)
    raw = path.read_bytes()
    assert raw[:4] == b"HDT1"
    back = ad.load_checkpoint(path)
    assert list(back) == list(params)
    for k in params:
        assert torch.equal(back[k], params[k])
    ad.save_checkpoint(tmp_path / "q.hdt", back)
    assert (tmp_path / "q.hdt").read_bytes() == raw


def test_checkpoint_layout(tmp_path):
    ad.save_checkpoint(tmp_path / "p.hdt", {"w": torch.tensor([[1.0, 2.0]])})
    raw = (tmp_path / "p.hdt").read_bytes()
    expected = (b"HDT1" + (1).to_bytes(8, "little") + b"w" + (2).to_bytes(8, "little")
                + (1).to_bytes(8, "little") + (2).to_bytes(8, "little")
                + np.array([1.0, 2.0], dtype="<f4").tobytes())
    assert raw == expected


def test_forward_deterministic():
    g = torch.Generator().manual_seed(0)
    x = torch.randn(1, 2, 6, 6, 6, generator=g)
    w = torch.randn(4, 2, 3, 3, 3, generator=g)
    a = ad.group_norm(ad.conv3d(x, w, padding=1), 2)
    b = ad.group_norm(ad.conv3d(x, w, padding=1), 2)
    assert torch.equal(a, b)
