import numpy as np
import pytest
import torch

from spatreg.grid import (
    compose,
    downsample,
    downsample_displacement,
    identity_grid,
    image_pyramid,
    to_deformation,
    upsample_displacement,
    warp,
    warp_nearest,
)
from spatreg.metrics import jacobian_det

from fdcheck import assert_grad_matches


def rand_img(shape, seed=0, dtype=torch.float32):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(shape, generator=g, dtype=dtype)


class TestIdentityGrid:
    def test_2x2_coordinates(self):
        g = identity_grid((2, 2))
        for i in range(2):
            for j in range(2):
                assert g[0, i, j] == i
                assert g[1, i, j] == j

    def test_rejects_empty_shape(self):
        with pytest.raises(ValueError):
            identity_grid(())

    def test_rejects_zero_dim(self):
        with pytest.raises(ValueError):
            identity_grid((4, 0))

    @pytest.mark.parametrize("shape", [(6, 7), (5, 6, 7)])
    def test_jacobian_is_one(self, shape):
        j = jacobian_det(identity_grid(shape, dtype=torch.float64))
        assert torch.allclose(j, torch.ones_like(j), atol=1e-12)


class TestCompose:
    def test_zero_displacement_is_identity(self):
        ident = identity_grid((5, 4))
        assert torch.equal(compose(ident, torch.zeros_like(ident)), ident)

    def test_additive_roundtrip_is_exact(self):
        u = rand_img((2, 9, 8), seed=3, dtype=torch.float64)
        ident = identity_grid((9, 8), dtype=torch.float64)
        back = compose(ident, u) - ident
        assert torch.allclose(back, u, atol=1e-12)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compose(identity_grid((4, 4)), torch.zeros(2, 5, 4))


class TestWarp:
    @pytest.mark.parametrize("shape", [(7, 6), (5, 6, 4)])
    def test_zero_displacement_is_exact(self, shape):
        img = rand_img(shape, seed=1)
        u = torch.zeros((len(shape),) + shape)
        assert torch.equal(warp(img, to_deformation(u)), img)

    def test_identity_grid_is_exact(self):
        img = rand_img((12, 11), seed=2)
        assert torch.equal(warp(img, identity_grid((12, 11))), img)

    def test_linear_ramp_half_voxel_shift(self):
        # multilinear interpolation is exact on linear functions
        n = 10
        img = torch.arange(n, dtype=torch.float64).unsqueeze(1).expand(n, n).clone()
        u = torch.zeros(2, n, n, dtype=torch.float64)
        u[0] = 0.5
        out = warp(img, to_deformation(u))
        expected = img + 0.5
        assert torch.allclose(out[: n - 1], expected[: n - 1], atol=1e-12)
        assert torch.allclose(out[n - 1], img[n - 1], atol=1e-12)  # clamped

    def test_integer_shift_matches_index_oracle(self):
        img = rand_img((8, 9), seed=4)
        u = torch.zeros(2, 8, 9)
        u[0] = 1.0
        out = warp(img, to_deformation(u))
        oracle = np.concatenate([img.numpy()[1:], img.numpy()[-1:]], axis=0)
        assert torch.equal(out, torch.from_numpy(oracle))

    def test_out_of_bounds_clamps_to_edge(self):
        img = rand_img((6, 6), seed=5)
        u = torch.full((2, 6, 6), 50.0)
        out = warp(img, to_deformation(u))
        assert torch.allclose(out, torch.full_like(out, float(img[-1, -1])))

    def test_channels_warp_independently(self):
        img = rand_img((3, 7, 7), seed=6)
        u = rand_img((2, 7, 7), seed=7) * 0.3
        phi = to_deformation(u)
        stacked = warp(img, phi)
        for c in range(3):
            assert torch.equal(stacked[c], warp(img[c], phi))

    def test_gradient_wrt_displacement(self):
        img = rand_img((8, 9), seed=8, dtype=torch.float64)
        u0 = 0.1 + 0.3 * torch.rand(
            (2, 8, 9), generator=torch.Generator().manual_seed(9),
            dtype=torch.float64,
        )
        probe = rand_img((8, 9), seed=10, dtype=torch.float64)

        def loss(u):
            return (warp(img, to_deformation(u)) * probe).sum()

        assert_grad_matches(loss, u0, n_probes=8, rel_tol=1e-3)

    def test_gradient_wrt_image(self):
        u = 0.1 + 0.3 * torch.rand(
            (2, 7, 7), generator=torch.Generator().manual_seed(11),
            dtype=torch.float64,
        )
        phi = to_deformation(u)
        probe = rand_img((7, 7), seed=12, dtype=torch.float64)

        def loss(img):
            return (warp(img, phi) * probe).sum()

        assert_grad_matches(loss, rand_img((7, 7), seed=13, dtype=torch.float64),
                            n_probes=8, rel_tol=1e-3)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            warp(torch.zeros(5, 5), identity_grid((6, 6)))

    def test_nan_coordinates_rejected(self):
        phi = identity_grid((5, 5))
        phi[0, 2, 2] = float("nan")
        with pytest.raises(FloatingPointError):
            warp(torch.zeros(5, 5), phi)

    def test_infinite_coordinates_clamp_safely(self):
        img = rand_img((5, 5), seed=15)
        phi = identity_grid((5, 5))
        phi[0, 2, 2] = float("inf")
        out = warp(img, phi)
        assert torch.isfinite(out).all()
        assert out[2, 2] == img[4, 2]


class TestWarpNearest:
    def test_integer_shift_on_labels(self):
        labels = torch.arange(20).reshape(4, 5) % 3
        u = torch.zeros(2, 4, 5)
        u[1] = 1.0
        out = warp_nearest(labels, to_deformation(u))
        oracle = np.concatenate(
            [labels.numpy()[:, 1:], labels.numpy()[:, -1:]], axis=1
        )
        assert torch.equal(out, torch.from_numpy(oracle))

    def test_zero_displacement_exact(self):
        labels = (rand_img((9, 9), seed=14) > 0).long()
        out = warp_nearest(labels, identity_grid((9, 9)))
        assert torch.equal(out, labels)


class TestResampling:
    def test_constant_image_every_level(self):
        img = torch.full((64, 64), 3.25)
        for level in image_pyramid(img, 3):
            assert torch.allclose(level, torch.full_like(level, 3.25), atol=1e-6)

    def test_pyramid_shapes_64(self):
        shapes = [tuple(l.shape) for l in image_pyramid(torch.zeros(64, 64), 3)]
        assert shapes == [(16, 16), (32, 32), (64, 64)]

    def test_upsample_rescales_units(self):
        u = torch.full((2, 8, 8), 1.0)
        up = upsample_displacement(u)
        assert up.shape == (2, 16, 16)
        assert torch.allclose(up, torch.full_like(up, 2.0), atol=1e-6)

    def test_downsample_of_upsample_constant_roundtrip(self):
        u = torch.full((2, 8, 8), 0.7)
        back = downsample_displacement(upsample_displacement(u))
        assert back.shape == u.shape
        assert torch.allclose(back, u, atol=1e-6)

    def test_rejects_too_small_target(self):
        with pytest.raises(ValueError):
            downsample(torch.zeros(6, 6))

    def test_3d_downsample_shape(self):
        out = downsample(torch.zeros(16, 12, 10))
        assert tuple(out.shape) == (8, 6, 5)
