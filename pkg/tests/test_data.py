import json

import numpy as np
import pytest

from cassilab.cube import SpectralCube
from cassilab.data import (
    SceneSplit,
    SyntheticSpec,
    crop_patch,
    desk_wavelength_grid,
    generate_synthetic,
    load_cube,
    load_plane,
    save_cube,
    save_plane,
    synthetic_curvature_bound,
)
from cassilab.errors import CubeFormatError


def random_cube(seed=0, H=8, W=8, N=4):
    rng = np.random.default_rng(seed)
    data = rng.random((H, W, N)).astype(np.float32)
    return SpectralCube(data, np.linspace(450, 650, N))


class TestCubeFormat:
    def test_roundtrip_bit_exact(self, tmp_path):
        cube = random_cube()
        save_cube(cube, tmp_path / "c")
        loaded = load_cube(tmp_path / "c")
        assert np.array_equal(loaded.data, cube.data)
        assert np.array_equal(loaded.wavelengths, cube.wavelengths)

    def test_truncated_payload(self, tmp_path):
        cube = random_cube()
        save_cube(cube, tmp_path / "c")
        raw = (tmp_path / "c" / "data.bin").read_bytes()
        (tmp_path / "c" / "data.bin").write_bytes(raw[:-8])
        with pytest.raises(CubeFormatError, match="bytes"):
            load_cube(tmp_path / "c")

    def test_decreasing_wavelengths(self, tmp_path):
        cube = random_cube()
        save_cube(cube, tmp_path / "c")
        header = json.loads((tmp_path / "c" / "header.json").read_text())
        header["wavelengths_nm"] = header["wavelengths_nm"][::-1]
        (tmp_path / "c" / "header.json").write_text(json.dumps(header))
        with pytest.raises(CubeFormatError, match="increasing"):
            load_cube(tmp_path / "c")

    def test_nan_payload(self, tmp_path):
        cube = random_cube()
        save_cube(cube, tmp_path / "c")
        data = np.frombuffer((tmp_path / "c" / "data.bin").read_bytes(), "<f4").copy()
        data[3] = np.nan
        (tmp_path / "c" / "data.bin").write_bytes(data.tobytes())
        with pytest.raises(CubeFormatError, match="non-finite"):
            load_cube(tmp_path / "c")

    def test_missing_header_key(self, tmp_path):
        cube = random_cube()
        save_cube(cube, tmp_path / "c")
        header = json.loads((tmp_path / "c" / "header.json").read_text())
        del header["layout"]
        (tmp_path / "c" / "header.json").write_text(json.dumps(header))
        with pytest.raises(CubeFormatError, match="layout"):
            load_cube(tmp_path / "c")

    def test_header_declares_format(self, tmp_path):
        save_cube(random_cube(), tmp_path / "c")
        header = json.loads((tmp_path / "c" / "header.json").read_text())
        assert header["shape"] == [8, 8, 4]
        assert header["dtype"] == "float32-le"
        assert header["layout"] == "row-major, band-slowest"

    def test_plane_container(self, tmp_path):
        rng = np.random.default_rng(1)
        plane = rng.random((6, 9)).astype(np.float32)
        save_plane(plane, tmp_path / "p")
        assert np.array_equal(load_plane(tmp_path / "p"), plane)


class TestSyntheticScenes:
    def test_consistent_across_grids(self):
        spec = SyntheticSpec(seed=3)
        a = generate_synthetic(spec, [450.0, 520.0, 650.0])
        b = generate_synthetic(spec, [480.0, 520.0, 600.0])
        assert np.array_equal(a.data[:, :, 1], b.data[:, :, 1])

    def test_values_in_unit_interval(self):
        cube = generate_synthetic(SyntheticSpec(seed=4), np.linspace(450, 650, 16))
        assert cube.data.min() >= 0.0
        assert cube.data.max() <= 1.0

    def test_midpoint_within_curvature_bound(self):
        spec = SyntheticSpec(seed=5)
        lo, hi = 520.0, 540.0
        mid = 0.5 * (lo + hi)
        cube = generate_synthetic(spec, [lo, mid, hi])
        linear = 0.5 * (cube.data[:, :, 0] + cube.data[:, :, 2])
        max_err = np.abs(cube.data[:, :, 1] - linear).max()
        bound = synthetic_curvature_bound(spec) * (hi - lo) ** 2 / 8.0
        assert max_err <= bound + 1e-6

    def test_grid_outside_range_rejected(self):
        with pytest.raises(ValueError, match="range"):
            generate_synthetic(SyntheticSpec(seed=0), [400.0, 500.0])

    def test_deterministic(self):
        spec = SyntheticSpec(seed=6)
        grid = [470.0, 550.0]
        assert np.array_equal(
            generate_synthetic(spec, grid).data, generate_synthetic(spec, grid).data
        )


class TestCropPatch:
    def test_full_size_crop_is_whole_scene(self):
        cube = random_cube(H=8, W=8)
        out = crop_patch(cube, 8, np.random.default_rng(0))
        assert np.array_equal(out.data, cube.data)

    def test_deterministic_for_seed(self):
        cube = random_cube(H=16, W=16)
        a = crop_patch(cube, 4, np.random.default_rng(5))
        b = crop_patch(cube, 4, np.random.default_rng(5))
        assert np.array_equal(a.data, b.data)

    def test_too_large_rejected(self):
        with pytest.raises(ValueError, match="patch"):
            crop_patch(random_cube(H=8, W=8), 9, np.random.default_rng(0))

    def test_corner_distribution_uniform(self):
        cube = random_cube(H=7, W=7, N=1)
        rng = np.random.default_rng(7)
        counts = np.zeros((4, 4))
        n_draws = 10_000
        for _ in range(n_draws):
            patch = crop_patch(cube, 4, rng)
            # locate the corner by matching the first pixel row/col offsets
            for r in range(4):
                for c in range(4):
                    if np.array_equal(patch.data, cube.data[r : r + 4, c : c + 4]):
                        counts[r, c] += 1
                        break
                else:
                    continue
                break
        p = 1.0 / 16
        sigma = np.sqrt(n_draws * p * (1 - p))
        assert np.all(np.abs(counts - n_draws * p) <= 3 * sigma), counts


class TestSceneSplit:
    def test_disjointness_enforced(self):
        with pytest.raises(ValueError, match="disjoint"):
            SceneSplit(["a", "b"], ["b"], [450.0], [500.0])
        with pytest.raises(ValueError, match="disjoint"):
            SceneSplit(["a"], ["b"], [450.0], [450.0])

    def test_json_roundtrip(self, tmp_path):
        split = SceneSplit(["s0", "s1"], ["s2"], [450.0, 500.0], [475.0])
        split.to_json(tmp_path / "split.json")
        loaded = SceneSplit.from_json(tmp_path / "split.json")
        assert loaded == split
        assert loaded.full_grid == [450.0, 475.0, 500.0]


def test_desk_grid_proportions():
    train, holdout = desk_wavelength_grid()
    assert len(train) == 12 and len(holdout) == 4
    grid = sorted(train + holdout)
    assert grid[0] == 450.0 and grid[-1] == 650.0
    assert not set(train) & set(holdout)
    # held-out bands sit strictly inside the trained range
    assert min(holdout) > min(train) and max(holdout) < max(train)
