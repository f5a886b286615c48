import itertools
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from uafuse.data.nifti import (
    BadDimensionError,
    BadMagicError,
    NiftiError,
    TruncatedPayloadError,
    UnsupportedDatatypeError,
    make_header,
    read_nifti,
    write_nifti,
)
from uafuse.data.patches import (
    EmptyTargetError,
    PatchGrid,
    axis_starts,
    build_patch_grid,
    filter_and_balance,
    stitch,
)
from uafuse.data.phantom import Corruption, PhantomSpec, PhantomSpecError, generate_phantom
from uafuse.data.slices import CLASS_GRAY, export_slices, read_pgm, to_gray
from uafuse.data.volume import Volume, load_case, normalize, save_case


class TestNifti:
    @pytest.mark.parametrize("dtype", [np.float32, np.uint8, np.int16])
    def test_round_trip_bit_exact(self, tmp_path, rng, dtype):
        if dtype is np.float32:
            grid = rng.standard_normal((8, 8, 8)).astype(dtype)
        else:
            info = np.iinfo(dtype)
            grid = rng.integers(info.min, info.max, (7, 5, 9), endpoint=True).astype(dtype)
        write_nifti(grid, (0.8, 1.25, 3.0), tmp_path / "a.nii")
        back, spacing = read_nifti(tmp_path / "a.nii")
        assert back.dtype == grid.dtype
        assert back.tobytes() == grid.tobytes()
        np.testing.assert_allclose(spacing, (0.8, 1.25, 3.0), atol=1e-6)

    def test_header_layout(self, tmp_path):
        write_nifti(np.zeros((8, 8, 8), np.float32), (1, 1, 1), tmp_path / "a.nii")
        raw = (tmp_path / "a.nii").read_bytes()
        assert struct.unpack("<i", raw[:4])[0] == 348
        assert raw[344:348] == b"n+1\x00"
        assert struct.unpack("<f", raw[108:112])[0] == 352.0
        assert struct.unpack("<h", raw[70:72])[0] == 16
        assert struct.unpack("<8h", raw[40:56])[:4] == (3, 8, 8, 8)
        assert len(raw) == 352 + 8 ** 3 * 4

    def test_fortran_order_on_disk(self, tmp_path):
        grid = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
        write_nifti(grid, (1, 1, 1), tmp_path / "a.nii")
        payload = np.frombuffer((tmp_path / "a.nii").read_bytes()[352:], "<f4")
        # the first axis varies fastest
        assert payload[:2].tolist() == [grid[0, 0, 0], grid[1, 0, 0]]

    def test_big_endian_is_swapped(self, tmp_path, rng):
        grid = rng.standard_normal((4, 5, 6)).astype(np.float32)
        hdr = make_header(grid.shape, np.float32, (1.0, 2.0, 3.0)).astype(make_header((1, 1, 1), np.float32).dtype.newbyteorder(">"))
        raw = hdr.tobytes() + b"\x00" * 4 + grid.astype(">f4").tobytes(order="F")
        assert struct.unpack("<i", raw[:4])[0] == 1543569408
        (tmp_path / "be.nii").write_bytes(raw)
        back, spacing = read_nifti(tmp_path / "be.nii")
        assert np.array_equal(back, grid)
        assert spacing == (1.0, 2.0, 3.0)

    def _valid(self, tmp_path):
        write_nifti(np.ones((4, 4, 4), np.float32), (1, 1, 1), tmp_path / "a.nii")
        return bytearray((tmp_path / "a.nii").read_bytes())

    def test_bad_magic(self, tmp_path):
        raw = self._valid(tmp_path)
        raw[344:348] = b"ni1\x00"
        (tmp_path / "b.nii").write_bytes(raw)
        with pytest.raises(BadMagicError):
            read_nifti(tmp_path / "b.nii")

    def test_unsupported_datatype(self, tmp_path):
        raw = self._valid(tmp_path)
        raw[70:72] = struct.pack("<h", 64)
        (tmp_path / "b.nii").write_bytes(raw)
        with pytest.raises(UnsupportedDatatypeError):
            read_nifti(tmp_path / "b.nii")
        with pytest.raises(UnsupportedDatatypeError):
            write_nifti(np.zeros((2, 2, 2)), (1, 1, 1), tmp_path / "c.nii")

    def test_bad_dimension(self, tmp_path):
        raw = self._valid(tmp_path)
        raw[40:42] = struct.pack("<h", 4)
        (tmp_path / "b.nii").write_bytes(raw)
        with pytest.raises(BadDimensionError):
            read_nifti(tmp_path / "b.nii")

    def test_truncated(self, tmp_path):
        raw = self._valid(tmp_path)
        (tmp_path / "b.nii").write_bytes(raw[:-5])
        with pytest.raises(TruncatedPayloadError):
            read_nifti(tmp_path / "b.nii")
        (tmp_path / "c.nii").write_bytes(raw[:100])
        with pytest.raises(TruncatedPayloadError):
            read_nifti(tmp_path / "c.nii")

    def test_errors_are_distinct(self):
        kinds = {BadMagicError, UnsupportedDatatypeError, BadDimensionError, TruncatedPayloadError}
        assert len(kinds) == 4 and all(issubclass(k, NiftiError) for k in kinds)


class TestNormalize:
    def test_constant_grid_becomes_zero(self):
        v = normalize(Volume([np.full((4, 4, 4), 3.0, np.float32)]))
        assert not np.any(v.modalities[0])

    def test_corner_values(self):
        g = np.zeros((6, 6, 6), np.float32)
        g[:2, :2, :2] = np.arange(1, 9).reshape(2, 2, 2)
        out = normalize(Volume([g])).modalities[0]
        support = out[:2, :2, :2]
        assert abs(support.mean()) < 1e-6
        assert support.std() == pytest.approx(1.0, abs=1e-6)
        assert not np.any(out[g == 0])

    def test_idempotent(self, rng):
        g = rng.standard_normal((8, 8, 8)).astype(np.float32) * 4 + 7
        once = normalize(Volume([g]))
        np.testing.assert_allclose(normalize(once).modalities[0], once.modalities[0], atol=1e-5)

    def test_inputs_untouched(self, rng):
        g = rng.standard_normal((4, 4, 4)).astype(np.float32)
        keep = g.copy()
        normalize(Volume([g]))
        assert np.array_equal(g, keep)


class TestPatchGrid:
    def test_sixty_gives_27_patches(self):
        assert axis_starts(60, 32, 14) == [0, 14, 28]
        assert len(build_patch_grid((60, 60, 60))) == 27

    def test_exact_fit(self):
        assert build_patch_grid((32, 32, 32)).starts == [(0, 0, 0)]

    def test_forty_clamps(self):
        assert axis_starts(40, 32, 14) == [0, 8]

    def test_stride_longer_than_patch_is_capped(self):
        assert axis_starts(10, 2, 5) == [0, 2, 4, 6, 8]

    def test_patch_larger_than_volume(self):
        with pytest.raises(ValueError, match="exceeds"):
            build_patch_grid((31, 40, 40))

    @settings(max_examples=150, deadline=None)
    @given(st.tuples(*[st.integers(1, 64)] * 3), st.tuples(*[st.integers(1, 32)] * 3),
           st.tuples(*[st.integers(1, 40)] * 3))
    def test_coverage(self, dims, patch, stride):
        patch = tuple(min(p, d) for p, d in zip(patch, dims))
        grid = build_patch_grid(dims, patch, stride)
        covered = np.zeros(dims, dtype=bool)
        for i in range(len(grid)):
            assert all(s + p <= d for s, p, d in zip(grid.starts[i], patch, dims))
            covered[grid.window(i)] = True
        assert covered.all()


class TestFilterAndBalance:
    def test_background_only_raises(self):
        grid = build_patch_grid((40, 40, 40))
        with pytest.raises(EmptyTargetError, match="background-only"):
            filter_and_balance(grid, np.zeros((40, 40, 40), np.int64))

    def test_origin_voxel_keeps_covering_patches(self):
        lab = np.zeros((60, 60, 60), np.int64)
        lab[0, 0, 0] = 2
        grid = build_patch_grid(lab.shape)
        sampler = filter_and_balance(grid, lab)
        kept = [grid.starts[i] for i in np.flatnonzero(grid.keep_mask)]
        assert kept == [(0, 0, 0)]
        assert sampler.entries == [(0, 0)]
        assert grid.dominant_class[0] == 2

    def test_class_balanced_marginals(self):
        # 90 patches dominated by class 1, 10 by class 2
        lab = np.zeros((100 * 4, 4, 4), np.int64)
        for i in range(100):
            lab[4 * i, 0, 0] = 1 if i < 90 else 2
        grid = build_patch_grid(lab.shape, (4, 4, 4), (4, 4, 4))
        sampler = filter_and_balance(grid, lab, mode="class-balanced")
        draws = sampler.draw(np.random.default_rng(0), 1000)
        counts = np.bincount([grid.dominant_class[i] for _, i in draws], minlength=3)
        assert abs(counts[1] - 500) <= 50 and abs(counts[2] - 500) <= 50

    def test_target_only_follows_patch_frequencies(self):
        lab = np.zeros((40, 4, 4), np.int64)
        for i in range(10):
            lab[4 * i, 0, 0] = 1 if i < 9 else 2
        grid = build_patch_grid(lab.shape, (4, 4, 4), (4, 4, 4))
        draws = filter_and_balance(grid, lab).draw(np.random.default_rng(0), 2000)
        frac2 = np.mean([grid.dominant_class[i] == 2 for _, i in draws])
        assert 0.07 < frac2 < 0.13

    def test_multiple_volumes(self):
        labs = [np.zeros((32, 32, 32), np.int64) for _ in range(2)]
        labs[1][5, 5, 5] = 1
        sampler = filter_and_balance([build_patch_grid(l.shape) for l in labs], labs)
        assert sampler.entries == [(1, 0)]


class TestPhantom:
    def test_deterministic(self):
        spec = PhantomSpec(dims=(24, 24, 24))
        a, b = generate_phantom(spec, 7), generate_phantom(spec, 7)
        assert a.label.tobytes() == b.label.tobytes()
        assert all(x.tobytes() == y.tobytes() for x, y in zip(a.modalities, b.modalities))
        assert generate_phantom(spec, 8).label.tobytes() != a.label.tobytes()

    @pytest.mark.parametrize("seed", range(5))
    def test_all_classes_present(self, seed):
        v = generate_phantom(PhantomSpec(dims=(32, 32, 32)), seed)
        assert set(np.unique(v.label)) == set(range(5))
        assert v.modalities[0].dtype == np.float32

    def test_missing_contrast_class(self):
        with pytest.raises(PhantomSpecError, match="missing class"):
            PhantomSpec(num_classes=4, contrast=[[(0, 1)] * 3, [(0, 1)] * 4])

    def test_bad_corruption(self):
        with pytest.raises(PhantomSpecError):
            Corruption(1, ((0, 4), (0, 4), (0, 4)), mode="blur")
        with pytest.raises(PhantomSpecError):
            PhantomSpec(dims=(16, 16, 16), corruption=Corruption(1, ((0, 20), (0, 4), (0, 4))))

    def test_swap_contrast_region_statistics(self):
        region = ((8, 24), (8, 24), (8, 24))
        spec = PhantomSpec(dims=(32, 32, 32), corruption=Corruption(1, region, "swap-contrast"))
        v = generate_phantom(spec, 3)
        img, lab = v.modalities[1], v.label
        inside = v.region
        assert inside.sum() == 16 ** 3
        for c in range(spec.num_classes):
            a, b = img[inside & (lab == c)], img[~inside & (lab == c)]
            if len(a) < 20:
                continue
            assert abs(a.mean() - b.mean()) > 2 * b.std()
        # the uncorrupted modality is unaffected
        clean = generate_phantom(PhantomSpec(dims=(32, 32, 32)), 3)
        assert np.array_equal(clean.modalities[0], v.modalities[0])

    def test_spec_dict_round_trip(self):
        spec = PhantomSpec(dims=(20, 20, 20), corruption=Corruption(1, ((0, 4), (2, 6), (1, 9))))
        assert PhantomSpec.from_dict(spec.to_dict()) == spec


class TestStitch:
    def test_identity(self, rng):
        grid = build_patch_grid((32, 32, 32))
        p = rng.dirichlet(np.ones(3), size=(32, 32, 32)).transpose(3, 0, 1, 2)
        assert np.array_equal(stitch([p], grid), p)

    def test_half_overlap_mean(self):
        grid = PatchGrid((6, 4, 4), (4, 4, 4), (2, 4, 4), [(0, 0, 0), (2, 0, 0)])
        p, q = np.full((2, 4, 4, 4), 0.2), np.full((2, 4, 4, 4), 0.6)
        out = stitch([p, q], grid)
        assert np.allclose(out[:, 2:4], 0.4) and np.all(out[:, :2] == 0.2) and np.all(out[:, 4:] == 0.6)

    @pytest.mark.parametrize("seed", range(5))
    def test_matches_brute_force_accumulation(self, seed):
        r = np.random.default_rng(seed)
        dims = tuple(int(v) for v in r.integers(5, 12, 3))
        patch = tuple(int(r.integers(2, d + 1)) for d in dims)
        grid = build_patch_grid(dims, patch, tuple(int(v) for v in r.integers(1, 4, 3)))
        preds = [r.dirichlet(np.ones(3), size=patch).transpose(3, 0, 1, 2) for _ in range(len(grid))]
        expected = np.zeros((3,) + dims)
        for x, y, z in itertools.product(*map(range, dims)):
            total, n = np.zeros(3), 0
            for start, p in zip(grid.starts, preds):
                o = (x - start[0], y - start[1], z - start[2])
                if all(0 <= a < b for a, b in zip(o, patch)):
                    total = total + p[:, o[0], o[1], o[2]]
                    n += 1
            expected[:, x, y, z] = total / n
        got = stitch(preds, grid)
        assert np.array_equal(got, expected)
        np.testing.assert_allclose(got.sum(axis=0), 1.0, atol=1e-12)

    def test_missing_prediction(self):
        grid = build_patch_grid((40, 32, 32))
        with pytest.raises(ValueError, match="missing"):
            stitch([np.zeros((2, 32, 32, 32)), None], grid)
        with pytest.raises(ValueError):
            stitch([np.zeros((2, 32, 32, 32))], grid)


class TestVolumeIO:
    def test_case_round_trip(self, tmp_path):
        region = ((0, 8), (0, 8), (0, 8))
        v = generate_phantom(PhantomSpec(dims=(16, 16, 16), corruption=Corruption(1, region)), 0)
        save_case(v, tmp_path / "case_0")
        back = load_case(tmp_path / "case_0")
        assert np.array_equal(back.label, v.label)
        assert np.array_equal(back.region, v.region)
        assert all(np.array_equal(a, b) for a, b in zip(back.modalities, v.modalities))

    def test_mismatched_dims(self):
        with pytest.raises(ValueError):
            Volume([np.zeros((2, 2, 2)), np.zeros((2, 2, 3))])


class TestSlices:
    def test_export_and_read_back(self, tmp_path):
        lab = np.zeros((5, 6, 3), np.int64)
        lab[1:3, 2:5, 1] = 2
        paths = export_slices(lab, tmp_path)
        assert len(paths) == 3
        img = read_pgm(paths[1])
        assert img.shape == (6, 5)
        assert img[3, 2] == CLASS_GRAY[2] and img[0, 0] == CLASS_GRAY[0]

    def test_real_valued_scaling(self):
        g = to_gray(np.array([[[-1.0, 0.0, 1.0]]]))
        assert g.ravel().tolist() == [0, 128, 255]
