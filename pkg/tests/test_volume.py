"""Volume substrate: construction, resampling, cropping, flipping, file I/O."""

from __future__ import annotations

import numpy as np
import pytest

from voxloc.volume import (
    Volume3,
    VoxelBox,
    crop_box,
    downsample_to,
    flip_lr,
    read_volume,
    rescale_intensity,
    resample_isotropic,
    write_volume,
)


def ramp_volume(dims, spacing, coeffs=(0.0, 1.0, 0.0, 0.0)):
    """Tri-affine field a + b*i + c*j + d*k on the index grid."""
    a, b, c, d = coeffs
    i, j, k = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    return Volume3(a + b * i + c * j + d * k, spacing)


def smooth_volume(dims=(48, 48, 48), spacing=(1.0, 1.0, 1.0)):
    """Band-limited smooth test content, near zero at the boundary."""
    i, j, k = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in dims), indexing="ij")
    c = [(n - 1) / 2.0 for n in dims]
    r2 = ((i - c[0]) ** 2 + (j - c[1]) ** 2 + (k - c[2]) ** 2) / (min(dims) / 4.0) ** 2
    return Volume3(np.exp(-r2), spacing)


class TestVolume3:
    def test_valid_construction(self):
        v = Volume3(np.zeros((4, 5, 6)), (1.0, 2.0, 3.0))
        assert v.dims == (4, 5, 6)
        assert v.spacing == (1.0, 2.0, 3.0)

    def test_data_is_read_only(self):
        v = Volume3(np.zeros((2, 2, 2)), (1, 1, 1))
        with pytest.raises(ValueError):
            v.data[0, 0, 0] = 1.0

    def test_rejects_bad_spacing(self):
        with pytest.raises(ValueError):
            Volume3(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))
        with pytest.raises(ValueError):
            Volume3(np.zeros((2, 2, 2)), (1.0, -1.0, 1.0))

    def test_rejects_non_3d(self):
        with pytest.raises(ValueError):
            Volume3(np.zeros((2, 2)), (1, 1, 1))

    def test_linear_order_is_x_fastest(self):
        # element (i,j,k) sits at linear index i + nx*(j + ny*k)
        v = ramp_volume((2, 3, 4), (1, 1, 1), coeffs=(0.0, 1.0, 2.0, 6.0))
        lin = v.ravel_linear()
        nx, ny, _ = v.dims
        for (i, j, k) in [(0, 0, 0), (1, 0, 0), (0, 1, 0), (1, 2, 3)]:
            assert lin[i + nx * (j + ny * k)] == v.data[i, j, k]


class TestResampleIsotropic:
    def test_identity(self):
        rng = np.random.default_rng(0)
        v = Volume3(rng.random((6, 7, 8)), (1.0, 1.0, 1.0))
        out = resample_isotropic(v, 1.0)
        assert out.dims == v.dims
        np.testing.assert_allclose(out.data, v.data, atol=1e-12)

    def test_constant_upsample(self):
        v = Volume3(np.full((4, 4, 4), 0.7), (2.0, 2.0, 2.0))
        out = resample_isotropic(v, 1.0)
        assert out.dims == (8, 8, 8)
        assert out.spacing == (1.0, 1.0, 1.0)
        np.testing.assert_allclose(out.data, 0.7, atol=1e-12)

    def test_linear_ramp_analytic(self):
        # f(i) = i/7 along axis 0 at spacing 2mm; resampled to 1mm the value
        # at output index q (physical q mm) is (q/2)/7 while in bounds.
        dims = (8, 6, 6)
        i = np.arange(dims[0], dtype=np.float64) / 7.0
        data = np.broadcast_to(i[:, None, None], dims).copy()
        v = Volume3(data, (2.0, 1.0, 1.0))
        out = resample_isotropic(v, 1.0)
        assert out.dims == (16, 6, 6)
        q = np.arange(15)  # q=15 samples index 7.5, clamped; interior only
        expected = (q / 2.0) / 7.0
        np.testing.assert_allclose(out.data[:15, 0, 0], expected, atol=1e-9)

    def test_rejects_bad_spacing(self):
        v = Volume3(np.zeros((2, 2, 2)), (1, 1, 1))
        with pytest.raises(ValueError):
            resample_isotropic(v, 0.0)
        with pytest.raises(ValueError):
            resample_isotropic(v, -2.0)

    def test_tri_affine_exact(self):
        # trilinear interpolation reproduces tri-affine fields exactly
        v = ramp_volume((9, 8, 7), (1.5, 2.0, 1.0), coeffs=(0.3, 0.25, -0.5, 1.75))
        out = resample_isotropic(v, 1.0)
        i, j, k = np.meshgrid(*(np.arange(n, dtype=np.float64) for n in out.dims), indexing="ij")
        # in-bounds sample points only (edges clamp)
        src = [i * 1.0 / 1.5, j * 1.0 / 2.0, k * 1.0 / 1.0]
        inb = (src[0] <= 8) & (src[1] <= 7) & (src[2] <= 6)
        expected = 0.3 + 0.25 * src[0] - 0.5 * src[1] + 1.75 * src[2]
        assert np.max(np.abs(out.data[inb] - expected[inb])) <= 1e-9

    def test_roundtrip_smooth(self):
        v = smooth_volume()
        coarse = resample_isotropic(v, 1.6)
        back = downsample_to(coarse, v.dims)
        assert np.max(np.abs(back.data - v.data)) <= 0.05


class TestRescaleIntensity:
    def test_hand_example(self):
        v = Volume3(np.array([2.0, 4.0, 6.0]).reshape(3, 1, 1), (1, 1, 1))
        out = rescale_intensity(v)
        np.testing.assert_allclose(out.data.ravel(), [0.0, 0.5, 1.0])

    def test_already_unit_range(self):
        data = np.linspace(0.0, 1.0, 8).reshape(2, 2, 2)
        v = Volume3(data, (1, 1, 1))
        np.testing.assert_allclose(rescale_intensity(v).data, data, atol=1e-15)

    def test_constant_maps_to_zeros(self):
        v = Volume3(np.full((2, 2, 2), 5.0), (1, 1, 1))
        assert np.all(rescale_intensity(v).data == 0.0)

    def test_minmax_invariant(self):
        rng = np.random.default_rng(3)
        v = Volume3(rng.normal(size=(5, 5, 5)) * 40 - 3, (1, 1, 1))
        out = rescale_intensity(v)
        assert out.data.min() == 0.0
        assert out.data.max() == 1.0


class TestDownsampleTo:
    def test_same_dims_identity(self):
        rng = np.random.default_rng(1)
        v = Volume3(rng.random((12, 12, 12)), (1, 1, 1))
        out = downsample_to(v, (12, 12, 12))
        np.testing.assert_array_equal(out.data, v.data)

    def test_constant(self):
        v = Volume3(np.full((16, 16, 16), 0.25), (1, 1, 1))
        out = downsample_to(v, (8, 8, 8))
        assert out.dims == (8, 8, 8)
        assert out.spacing == (2.0, 2.0, 2.0)
        np.testing.assert_allclose(out.data, 0.25, atol=1e-12)

    def test_linear_ramp_analytic(self):
        # ramp f(i)=i/(n-1) along axis 0; output voxel q samples input index
        # q * n_in/n_out, giving q * (100/80) / 99 analytically.
        dims = (100, 4, 4)
        i = np.arange(dims[0], dtype=np.float64) / 99.0
        v = Volume3(np.broadcast_to(i[:, None, None], dims).copy(), (1.0, 1.0, 1.0))
        out = downsample_to(v, (80, 4, 4))
        q = np.arange(80, dtype=np.float64)
        expected = q * (100.0 / 80.0) / 99.0
        inb = q * 100.0 / 80.0 <= 99.0
        np.testing.assert_allclose(out.data[inb, 0, 0], expected[inb], atol=1e-9)

    def test_preserves_physical_extent(self):
        v = Volume3(np.zeros((100, 60, 40)), (1.0, 2.0, 3.0))
        out = downsample_to(v, (50, 30, 10))
        extent_in = tuple(d * s for d, s in zip(v.dims, v.spacing))
        extent_out = tuple(d * s for d, s in zip(out.dims, out.spacing))
        assert extent_in == extent_out

    def test_rejects_bad_dims(self):
        v = Volume3(np.zeros((4, 4, 4)), (1, 1, 1))
        with pytest.raises(ValueError):
            downsample_to(v, (0, 4, 4))
        with pytest.raises(ValueError):
            downsample_to(v, (4, -1, 4))

    def test_nearest_preserves_binarity(self):
        rng = np.random.default_rng(7)
        v = Volume3((rng.random((20, 20, 20)) > 0.5).astype(np.float64), (1, 1, 1))
        out = downsample_to(v, (9, 9, 9), interpolation="nearest")
        assert set(np.unique(out.data)) <= {0.0, 1.0}


class TestCropBox:
    def test_center_block_exact_copy(self):
        rng = np.random.default_rng(2)
        v = Volume3(rng.random((128, 128, 128)), (1, 1, 1))
        out = crop_box(v, VoxelBox((64, 64, 64), (64, 64, 64)), pad_value=0.0)
        np.testing.assert_array_equal(out.data, v.data[32:96, 32:96, 32:96])

    def test_pad_oracle(self):
        # index-arithmetic oracle: compare against an explicitly zero-padded copy
        rng = np.random.default_rng(4)
        v = Volume3(rng.random((8, 8, 8)), (1, 1, 1))
        padded = np.zeros((12, 12, 12))
        padded[2:10, 2:10, 2:10] = v.data
        out = crop_box(v, VoxelBox((0, 0, 0), (4, 4, 4)), pad_value=0.0)
        np.testing.assert_array_equal(out.data, padded[0:4, 0:4, 0:4])

    def test_single_voxel(self):
        rng = np.random.default_rng(5)
        v = Volume3(rng.random((6, 6, 6)), (1, 1, 1))
        out = crop_box(v, VoxelBox((3, 4, 5), (1, 1, 1)))
        assert out.data[0, 0, 0] == v.data[3, 4, 5]

    def test_center_readback(self):
        # output voxel floor(extent/2) is exactly v[center]
        rng = np.random.default_rng(6)
        v = Volume3(rng.random((40, 40, 40)), (1, 1, 1))
        for center, extent in [((20, 20, 20), (64, 64, 64)), ((5, 30, 11), (7, 8, 9))]:
            out = crop_box(v, VoxelBox(center, extent), pad_value=-1.0)
            q = tuple(e // 2 for e in extent)
            assert out.data[q] == v.data[center]

    def test_custom_pad_value(self):
        v = Volume3(np.ones((4, 4, 4)), (1, 1, 1))
        out = crop_box(v, VoxelBox((0, 0, 0), (4, 4, 4)), pad_value=9.5)
        assert out.data[0, 0, 0] == 9.5
        assert out.data[2, 2, 2] == 1.0

    def test_fully_outside(self):
        v = Volume3(np.ones((4, 4, 4)), (1, 1, 1))
        out = crop_box(v, VoxelBox((100, 100, 100), (4, 4, 4)), pad_value=0.0)
        assert np.all(out.data == 0.0)

    def test_rejects_bad_extent(self):
        with pytest.raises(ValueError):
            VoxelBox((0, 0, 0), (0, 4, 4))


class TestFlipLr:
    def test_involution_bitwise(self):
        rng = np.random.default_rng(8)
        v = Volume3(rng.random((9, 5, 7)), (1, 1, 1))
        np.testing.assert_array_equal(flip_lr(flip_lr(v)).data, v.data)

    def test_index_reflection(self):
        data = np.zeros((8, 8, 8))
        data[0, 3, 3] = 1.0
        out = flip_lr(Volume3(data, (1, 1, 1)))
        assert out.data[7, 3, 3] == 1.0
        assert out.data.sum() == 1.0

    def test_argmax_reflects(self):
        rng = np.random.default_rng(9)
        v = Volume3(rng.random((11, 6, 6)), (1, 1, 1))
        flipped = flip_lr(v)
        p = np.unravel_index(np.argmax(v.data), v.dims)
        q = np.unravel_index(np.argmax(flipped.data), v.dims)
        assert q == (v.dims[0] - 1 - p[0], p[1], p[2])

    def test_preserves_multiset(self):
        rng = np.random.default_rng(10)
        v = Volume3(rng.random((5, 6, 7)), (1, 1, 1))
        assert sorted(flip_lr(v).data.ravel()) == sorted(v.data.ravel())


class TestVolumeFiles:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(11)
        v = Volume3(rng.random((6, 7, 8)).astype(np.float32), (1.0, 1.5, 2.0))
        path = tmp_path / "vol.json"
        write_volume(v, path)
        back = read_volume(path)
        assert back.dims == v.dims
        assert back.spacing == v.spacing
        np.testing.assert_array_equal(back.data, v.data)

    def test_payload_is_x_fastest(self, tmp_path):
        v = ramp_volume((2, 3, 2), (1, 1, 1), coeffs=(0.0, 1.0, 2.0, 6.0))
        path = tmp_path / "vol.json"
        write_volume(v, path)
        raw = np.frombuffer((tmp_path / "vol.raw").read_bytes(), dtype="<f4")
        np.testing.assert_array_equal(raw, v.data.ravel(order="F").astype(np.float32))

    def test_rejects_payload_length_mismatch(self, tmp_path):
        v = Volume3(np.zeros((4, 4, 4), dtype=np.float32), (1, 1, 1))
        path = tmp_path / "vol.json"
        write_volume(v, path)
        payload = tmp_path / "vol.raw"
        payload.write_bytes(payload.read_bytes()[:-4])
        with pytest.raises(ValueError, match="length mismatch"):
            read_volume(path)

    def test_rejects_unknown_header_fields(self, tmp_path):
        import json

        v = Volume3(np.zeros((2, 2, 2), dtype=np.float32), (1, 1, 1))
        path = tmp_path / "vol.json"
        write_volume(v, path)
        header = json.loads(path.read_text())
        header["dtype"] = "f64"
        path.write_text(json.dumps(header))
        with pytest.raises(ValueError, match="dtype"):
            read_volume(path)

    def test_write_is_deterministic(self, tmp_path):
        rng = np.random.default_rng(12)
        v = Volume3(rng.random((5, 5, 5)).astype(np.float32), (1, 1, 1))
        write_volume(v, tmp_path / "a.json")
        write_volume(v, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()
        assert (tmp_path / "a.raw").read_bytes() == (tmp_path / "b.raw").read_bytes()
