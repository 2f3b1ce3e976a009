import gzip

import numpy as np
import pytest
import torch
from scipy.ndimage import gaussian_filter

from diffwarp import (
    SubjectRecord,
    Volume,
    load_dataset_dir,
    load_volume,
    make_synthetic_pair,
    preprocess,
    split_dataset,
    write_synthetic_dataset,
)
from diffwarp.data import SegmentationMap
from diffwarp.fields import warp_trilinear
from diffwarp.nifti import read_nifti, write_nifti


class TestNiftiIO:
    @pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
    @pytest.mark.parametrize("dtype", [np.float32, np.int16, np.uint8])
    def test_roundtrip_bit_exact(self, tmp_path, suffix, dtype):
        rng = np.random.default_rng(0)
        if np.issubdtype(dtype, np.floating):
            arr = rng.standard_normal((7, 6, 5)).astype(dtype)
        else:
            arr = rng.integers(0, 100, (7, 6, 5)).astype(dtype)
        p = tmp_path / ("vol" + suffix)
        write_nifti(p, arr, zooms=(1.37, 1.37, 10.0))
        back, zooms = read_nifti(p)
        assert back.dtype == dtype
        np.testing.assert_array_equal(back, arr)
        assert zooms == pytest.approx((1.37, 1.37, 10.0), rel=1e-6)

    def test_4d_roundtrip(self, tmp_path):
        arr = np.random.default_rng(1).standard_normal((4, 5, 6, 3)).astype(np.float32)
        p = tmp_path / "vol4d.nii.gz"
        write_nifti(p, arr)
        back, _ = read_nifti(p)
        np.testing.assert_array_equal(back, arr)

    def test_truncated_file_rejected(self, tmp_path):
        p = tmp_path / "vol.nii"
        write_nifti(p, np.zeros((4, 4, 4), dtype=np.float32))
        (tmp_path / "cut.nii").write_bytes(p.read_bytes()[:400])
        with pytest.raises(ValueError, match="truncated"):
            read_nifti(tmp_path / "cut.nii")

    def test_not_nifti_rejected(self, tmp_path):
        p = tmp_path / "junk.nii"
        p.write_bytes(b"\x00" * 1000)
        with pytest.raises(ValueError, match="NIfTI"):
            read_nifti(p)

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="readable"):
            read_nifti(tmp_path / "nope.nii.gz")

    def test_corrupt_gzip_rejected(self, tmp_path):
        p = tmp_path / "bad.nii.gz"
        good = gzip.compress(b"x" * 1000)
        p.write_bytes(good[:20])
        with pytest.raises(ValueError):
            read_nifti(p)

    def test_scl_slope_applied(self, tmp_path):
        p = tmp_path / "scaled.nii"
        write_nifti(p, np.arange(8, dtype=np.int16).reshape(2, 2, 2))
        raw = bytearray(p.read_bytes())
        import struct

        struct.pack_into("<2f", raw, 112, 2.0, 1.0)
        p.write_bytes(bytes(raw))
        back, _ = read_nifti(p)
        np.testing.assert_allclose(back, np.arange(8).reshape(2, 2, 2) * 2.0 + 1.0)

    def test_load_volume_axis_order_and_spacing(self, tmp_path):
        # disk order is (x, y, z); the package uses (slice=z, row=y, col=x)
        arr = np.zeros((5, 6, 7), dtype=np.float32)
        arr[4, 2, 1] = 3.0
        p = tmp_path / "vol.nii.gz"
        write_nifti(p, arr, zooms=(1.37, 1.37, 10.0))
        vol = load_volume(p)
        assert vol.data.shape == (7, 6, 5)
        assert vol.data[1, 2, 4] == 3.0
        assert vol.spacing == pytest.approx((10.0, 1.37, 1.37), rel=1e-6)


class TestPreprocess:
    def test_intensity_endpoints(self):
        vol = Volume(data=np.random.default_rng(0).uniform(40, 900, (8, 16, 16))
                     .astype(np.float32),
                     spacing=(3.15, 1.5, 1.5))
        out = preprocess(vol, target_shape=(8, 16, 16))
        assert out.data.min() == pytest.approx(-1.0, abs=1e-6)
        assert out.data.max() == pytest.approx(1.0, abs=1e-6)
        assert out.data.shape == (8, 16, 16)

    def test_geometry_noop_when_spacing_matches(self):
        data = np.random.default_rng(1).uniform(0, 1, (8, 16, 16)).astype(np.float32)
        vol = Volume(data=data, spacing=(3.15, 1.5, 1.5))
        out = preprocess(vol, target_shape=(8, 16, 16))
        # affine intensity map only: ordering of voxels preserved
        flat_in = data.ravel().argsort()
        flat_out = out.data.ravel().argsort()
        np.testing.assert_array_equal(flat_in, flat_out)

    def test_idempotent_on_preprocessed(self):
        vol = Volume(data=np.random.default_rng(2).uniform(0, 1, (8, 16, 16))
                     .astype(np.float32), spacing=(3.15, 1.5, 1.5))
        once = preprocess(vol, target_shape=(8, 16, 16))
        twice = preprocess(once, target_shape=(8, 16, 16))
        np.testing.assert_allclose(twice.data, once.data, atol=1e-6)

    def test_crop_and_pad_centering(self):
        data = np.zeros((12, 20, 10), dtype=np.float32)
        data[6, 10, 5] = 1.0
        data[0, 0, 0] = -1.0  # fixes the intensity range
        vol = Volume(data=data, spacing=(3.15, 1.5, 1.5))
        out = preprocess(vol, target_shape=(8, 16, 16))
        assert out.data.shape == (8, 16, 16)
        # the bright center voxel stays at the center
        assert out.data[6 - 2, 10 - 2, 5 + 3] == out.data.max()

    def test_resample_matches_gaussian_oracle(self):
        # a smooth Gaussian sampled at two resolutions: resampling the
        # coarse grid must approximate direct sampling on the fine grid
        # (the resampler spreads the corner-to-corner extent over the new
        # grid, so the fine positions are k * (n_in - 1)/(n_out - 1) * dx)
        def sample(positions):
            z, y, x = np.meshgrid(*[positions] * 3, indexing="ij")
            return np.exp(
                -(((z - 12.0) ** 2) / 400 + ((y - 12.0) ** 2) / 400
                  + ((x - 12.0) ** 2) / 400)
            ).astype(np.float32)

        coarse = Volume(data=sample(np.arange(8) * 3.0), spacing=(3.0, 3.0, 3.0))
        out = preprocess(coarse, target_spacing=(1.5, 1.5, 1.5),
                         target_shape=(16, 16, 16))
        direct = sample(np.arange(16) * (7 / 15) * 3.0)
        direct = 2 * (direct - direct.min()) / (direct.max() - direct.min()) - 1
        assert np.abs(out.data - direct).max() <= 2e-2

    def test_seg_path_preserves_labels(self):
        seg = np.zeros((8, 8, 8), dtype=np.int16)
        seg[2:5, 2:5, 2:5] = 2
        vol = Volume(data=seg.astype(np.float32), spacing=(3.0, 3.0, 3.0))
        out = preprocess(vol, target_spacing=(1.5, 1.5, 1.5),
                         target_shape=(16, 16, 16), seg=True)
        assert set(np.unique(out.data)) <= {0.0, 2.0}

    def test_degenerate_range_rejected(self):
        vol = Volume(data=np.ones((4, 4, 4), dtype=np.float32))
        with pytest.raises(ValueError, match="degenerate"):
            preprocess(vol, target_spacing=(1.0, 1.0, 1.0), target_shape=(4, 4, 4))


class TestSyntheticPair:
    def test_basic_properties(self):
        rec = make_synthetic_pair(0, shape=(8, 16, 16), max_disp=2.0)
        assert rec.ed.data.shape == (8, 16, 16)
        assert rec.ed.data.min() == pytest.approx(-1.0, abs=1e-6)
        assert rec.ed.data.max() == pytest.approx(1.0, abs=1e-6)
        assert rec.gt_field.shape == (3, 8, 16, 16)
        mags = np.sqrt((rec.gt_field**2).sum(axis=0))
        assert mags.max() == pytest.approx(2.0, rel=1e-5)
        assert rec.ed_seg.labels <= {1, 2}

    def test_target_is_exact_warp_of_source(self):
        rec = make_synthetic_pair(3, shape=(8, 16, 16), max_disp=2.0)
        redo = warp_trilinear(
            rec.ed.tensor(), torch.as_tensor(rec.gt_field)
        ).numpy()
        np.testing.assert_array_equal(rec.es.data, redo)

    def test_zero_displacement_is_identity(self):
        rec = make_synthetic_pair(1, shape=(8, 16, 16), max_disp=0.0)
        np.testing.assert_array_equal(rec.ed.data, rec.es.data)
        assert rec.gt_field.max() == 0.0

    def test_seeded_determinism(self):
        a = make_synthetic_pair(7, shape=(8, 16, 16))
        b = make_synthetic_pair(7, shape=(8, 16, 16))
        np.testing.assert_array_equal(a.ed.data, b.ed.data)
        np.testing.assert_array_equal(a.gt_field, b.gt_field)
        c = make_synthetic_pair(8, shape=(8, 16, 16))
        assert not np.array_equal(a.ed.data, c.ed.data)

    def test_excessive_displacement_rejected(self):
        with pytest.raises(ValueError, match="max_disp"):
            make_synthetic_pair(0, shape=(8, 16, 16), max_disp=5.0)


class TestSplitDataset:
    @staticmethod
    def records(n):
        vol = Volume(data=np.zeros((2, 2, 2), dtype=np.float32))
        return [SubjectRecord(id=f"s{i:03d}", ed=vol, es=vol) for i in range(n)]

    def test_partition_no_overlap(self):
        recs = self.records(20)
        train, val = split_dataset(recs, 0.8, seed=0)
        assert len(train) == 16 and len(val) == 4
        assert {r.id for r in train} | {r.id for r in val} == {r.id for r in recs}
        assert not ({r.id for r in train} & {r.id for r in val})

    def test_90_10_on_100(self):
        train, val = split_dataset(self.records(100), 0.9, seed=1)
        assert len(train) == 90 and len(val) == 10

    def test_deterministic_and_order_independent(self):
        recs = self.records(10)
        t1, v1 = split_dataset(recs, 0.7, seed=5)
        t2, v2 = split_dataset(list(reversed(recs)), 0.7, seed=5)
        assert [r.id for r in t1] == [r.id for r in t2]
        t3, _ = split_dataset(recs, 0.7, seed=6)
        assert [r.id for r in t1] != [r.id for r in t3]

    def test_bad_fraction_rejected(self):
        with pytest.raises(ValueError):
            split_dataset(self.records(10), 1.0, seed=0)
        with pytest.raises(ValueError):
            split_dataset(self.records(2), 0.01, seed=0)
        with pytest.raises(ValueError):
            split_dataset([], 0.5, seed=0)


class TestDatasetDir:
    def test_synthetic_write_load_roundtrip(self, tmp_path):
        written = write_synthetic_dataset(tmp_path, 3, seed=10, shape=(8, 16, 16),
                                          max_disp=2.0)
        loaded = load_dataset_dir(tmp_path)
        assert [r.id for r in loaded] == [r.id for r in written]
        for a, b in zip(written, loaded):
            np.testing.assert_allclose(a.ed.data, b.ed.data, atol=1e-7)
            np.testing.assert_array_equal(a.ed_seg.data, b.ed_seg.data)
            np.testing.assert_allclose(a.gt_field, b.gt_field, atol=1e-7)
            assert b.n_frames == a.n_frames

    def test_acdc_layout(self, tmp_path):
        sub = tmp_path / "patient099"
        sub.mkdir()
        rng = np.random.default_rng(0)
        shape_xyz = (20, 24, 6)
        for idx in (1, 9):
            write_nifti(sub / f"patient099_frame{idx:02d}.nii.gz",
                        rng.uniform(0, 500, shape_xyz).astype(np.float32),
                        zooms=(1.5, 1.5, 3.15))
            seg = np.zeros(shape_xyz, dtype=np.int16)
            seg[5:10, 5:10, 2:4] = 1
            write_nifti(sub / f"patient099_frame{idx:02d}_gt.nii.gz", seg,
                        zooms=(1.5, 1.5, 3.15))
        (sub / "Info.cfg").write_text(
            "ED: 1\nES: 9\nGroup: NOR\nHeight: 170.0\nNbFrame: 12\nWeight: 70.0\n"
        )
        recs = load_dataset_dir(tmp_path, target_shape=(8, 16, 16))
        assert len(recs) == 1
        rec = recs[0]
        assert rec.id == "patient099"
        assert rec.ed.data.shape == (8, 16, 16)
        assert rec.n_frames == 9
        assert rec.ed_seg is not None and rec.ed_seg.labels == {1}

    def test_empty_dir_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="no subjects"):
            load_dataset_dir(tmp_path)

    def test_missing_dir_rejected(self, tmp_path):
        with pytest.raises(ValueError, match="not a directory"):
            load_dataset_dir(tmp_path / "nope")
