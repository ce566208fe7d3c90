import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st
from scipy import stats

from kcnet.augment import (
    GeomAugConfig,
    MixupConfig,
    draw_geom_params,
    draw_lambda,
    geometric_augment,
    mixup,
    mixup_batch,
)


def rotate_oracle(img, deg, fill=0.0):
    """Counterclockwise (as displayed) rotation about the centre, bilinear, zero padding."""
    c, h, w = img.shape
    a = np.deg2rad(deg)
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    dx, dy = xs - w / 2, ys - h / 2
    # inverse map: rotate output coords clockwise back into the input
    sx = w / 2 + np.cos(a) * dx - np.sin(a) * dy - 0.5
    sy = h / 2 + np.sin(a) * dx + np.cos(a) * dy - 0.5
    x0, y0 = np.floor(sx).astype(int), np.floor(sy).astype(int)
    fx, fy = sx - x0, sy - y0
    src = np.pad(img - fill, ((0, 0), (1, 1), (1, 1)))

    def at(yy, xx):
        ok = (yy >= -1) & (yy <= h) & (xx >= -1) & (xx <= w)
        return np.where(ok, src[:, np.clip(yy + 1, 0, h + 1), np.clip(xx + 1, 0, w + 1)], 0.0)

    out = ((1 - fx) * (1 - fy) * at(y0, x0) + fx * (1 - fy) * at(y0, x0 + 1)
           + (1 - fx) * fy * at(y0 + 1, x0) + fx * fy * at(y0 + 1, x0 + 1))
    return out + fill


def smooth_batch(n=2, size=32):
    y, x = np.mgrid[0:size, 0:size] / size
    base = np.stack([np.sin(3 * x + 1) * np.cos(2 * y), x * y, np.cos(4 * y) + x])
    return torch.from_numpy(np.stack([base * (i + 1) for i in range(n)])).float()


IDENTITY = dict(hflip_prob=0.0, rot_deg=(0, 0), scale=(1, 1), translate_frac=(0, 0), strict=False)


class TestGeometric:
    def test_disabled_is_identity(self):
        a, t = smooth_batch(), smooth_batch() * 2
        oa, ot = geometric_augment(a, t, GeomAugConfig.disabled(), np.random.default_rng(0))
        assert torch.equal(oa, a) and torch.equal(ot, t)

    def test_rotation_matches_oracle(self):
        a = smooth_batch()
        cfg = GeomAugConfig(**{**IDENTITY, "rot_deg": (5, 5)})
        out, _ = geometric_augment(a, a.clone(), cfg, np.random.default_rng(0))
        for i in range(len(a)):
            expected = rotate_oracle(a[i].double().numpy(), 5.0)
            assert np.mean(np.abs(out[i].numpy() - expected)) < 1e-4

    def test_rotation_fill_value(self):
        a = smooth_batch(1)
        fill = torch.tensor([-1.5, 0.3, 2.0])
        cfg = GeomAugConfig(**{**IDENTITY, "rot_deg": (8, 8)})
        out, _ = geometric_augment(a, a, cfg, np.random.default_rng(0), fill=(fill, fill))
        expected = rotate_oracle(a[0].double().numpy(), 8.0, fill.double().numpy()[:, None, None])
        assert np.mean(np.abs(out[0].numpy() - expected)) < 1e-4
        assert out[0, :, 0, 0].tolist() == pytest.approx(fill.tolist(), abs=1e-5)

    def test_flip_involution(self):
        a = smooth_batch(3)
        cfg = GeomAugConfig(**{**IDENTITY, "hflip_prob": 1.0})
        once, _ = geometric_augment(a, a, cfg, np.random.default_rng(0))
        twice, _ = geometric_augment(once, once, cfg, np.random.default_rng(1))
        assert not torch.equal(once, a)
        assert torch.equal(twice, a)

    def test_rotation_roughly_invertible(self):
        a = smooth_batch(1, 64)
        fwd, _ = geometric_augment(a, a, GeomAugConfig(**{**IDENTITY, "rot_deg": (7, 7)}), np.random.default_rng(0))
        back, _ = geometric_augment(fwd, fwd, GeomAugConfig(**{**IDENTITY, "rot_deg": (-7, -7)}),
                                    np.random.default_rng(0))
        core = (slice(None), slice(None), slice(16, 48), slice(16, 48))
        assert torch.mean(torch.abs(back[core] - a[core])) < 0.02

    def test_same_transform_for_both_maps(self):
        a = smooth_batch(4)
        oa, ot = geometric_augment(a, a.clone(), GeomAugConfig(), np.random.default_rng(5))
        assert torch.equal(oa, ot)
        assert not torch.equal(oa, a)

    def test_scale_and_translate(self):
        # a centred bright square grows with scale and moves with translation
        img = torch.zeros(1, 3, 64, 64)
        img[..., 24:40, 24:40] = 1.0
        cfg = GeomAugConfig(**{**IDENTITY, "scale": (1.4, 1.4)})
        out, _ = geometric_augment(img, img, cfg, np.random.default_rng(0))
        assert (out[0, 0] > 0.5).sum() == pytest.approx(16 * 16 * 1.96, rel=0.1)

    @given(st.integers(0, 10**6))
    @settings(max_examples=25, deadline=None)
    def test_params_within_ranges(self, seed):
        cfg = GeomAugConfig()
        p = draw_geom_params(cfg, 16, np.random.default_rng(seed))
        assert np.all((0 <= p.angle) & (p.angle <= 10))
        assert np.all((0.6 <= p.scale) & (p.scale <= 1.4))
        for t in (p.tx, p.ty):
            assert np.all((0.01 <= np.abs(t)) & (np.abs(t) <= 0.10))

    def test_bounds_enforced(self):
        with pytest.raises(ValueError):
            GeomAugConfig(rot_deg=(0, 30))
        GeomAugConfig(rot_deg=(0, 30), strict=False)


class TestLambda:
    def test_mean_symmetric(self):
        rng = np.random.default_rng(0)
        lam = np.array([draw_lambda(MixupConfig(0.2), rng) for _ in range(10_000)])
        assert abs(lam.mean() - 0.5) < 0.02
        assert lam.min() >= 0 and lam.max() <= 1

    def test_alpha_one_uniform(self):
        rng = np.random.default_rng(1)
        lam = np.array([draw_lambda(MixupConfig(1.0), rng) for _ in range(10_000)])
        assert stats.kstest(lam, "uniform").statistic < 0.02

    def test_deterministic(self):
        a = draw_lambda(MixupConfig(), np.random.default_rng(4))
        assert a == draw_lambda(MixupConfig(), np.random.default_rng(4))

    def test_alpha_positive(self):
        with pytest.raises(ValueError):
            MixupConfig(alpha=0)


class TestMixup:
    xi, xj = torch.randn(3, 8, 8, dtype=torch.float64), torch.randn(3, 8, 8, dtype=torch.float64)
    yi, yj = torch.tensor([1.0, 0.0], dtype=torch.float64), torch.tensor([0.0, 1.0], dtype=torch.float64)

    def test_endpoints(self):
        x, y = mixup(self.xi, self.yi, self.xj, self.yj, 1.0)
        assert torch.equal(x, self.xi) and torch.equal(y, self.yi)
        x, y = mixup(self.xi, self.yi, self.xj, self.yj, 0.0)
        assert torch.equal(x, self.xj) and torch.equal(y, self.yj)

    def test_soft_label(self):
        _, y = mixup(self.xi, self.yi, self.xj, self.yj, 0.3)
        assert y.tolist() == pytest.approx([0.3, 0.7])

    @given(st.floats(0, 1))
    @settings(max_examples=50, deadline=None)
    def test_symmetry_and_simplex(self, lam):
        xa, ya = mixup(self.xi, self.yi, self.xj, self.yj, lam)
        xb, yb = mixup(self.xj, self.yj, self.xi, self.yi, 1 - lam)
        assert torch.allclose(xa, xb, atol=1e-12) and torch.allclose(ya, yb, atol=1e-12)
        assert abs(float(ya.sum()) - 1) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            mixup(self.xi, self.yi, self.xj[:2], self.yj, 0.5)

    def test_batch_shares_lambda_across_maps(self):
        a = torch.randn(6, 3, 4, 4)
        y = torch.nn.functional.one_hot(torch.tensor([0, 1, 0, 1, 1, 0]), 2).float()
        xa, xt, ym = mixup_batch(a, a.clone(), y, MixupConfig(0.4), np.random.default_rng(2))
        assert torch.equal(xa, xt)
        assert torch.allclose(ym.sum(1), torch.ones(6))
