import numpy as np
import pytest
from scipy.ndimage import binary_erosion

from dcnet.network import NetworkConfig, init_params
from dcnet.phantom import make_scheme
from dcnet.sh import num_coeffs, render_sh
from dcnet.volio import (
    CohortManifest,
    SubjectEntry,
    dcs_to_sh,
    export_psic,
    extract_dcs,
    fit_sh_volume,
    read_manifest,
    read_mask,
    read_model,
    read_volume,
    write_manifest,
    write_mask,
    write_model,
    write_volume,
    Volume,
)


class TestContainers:
    def test_volume_round_trip(self, tmp_path, rng):
        data = rng.random((4, 5, 6, 7)).astype(np.float32).astype(np.float64)
        dirs = rng.normal(size=(7, 3))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        path = tmp_path / "vol.dcb"
        write_volume(path, data, 1000.0, dirs)
        volume = read_volume(path)
        assert np.array_equal(volume.data, data)
        assert np.array_equal(volume.directions, dirs)
        assert volume.b_value == 1000.0

    def test_write_read_write_is_byte_stable(self, tmp_path, rng):
        data = rng.random((3, 3, 3, 5))
        dirs = np.tile([0.0, 0.0, 1.0], (5, 1))
        write_volume(tmp_path / "a.dcb", data, 700.0, dirs)
        volume = read_volume(tmp_path / "a.dcb")
        write_volume(tmp_path / "b.dcb", volume.data, volume.b_value, volume.directions)
        assert (tmp_path / "a.dcb").read_bytes() == (tmp_path / "b.dcb").read_bytes()

    def test_mask_round_trip(self, tmp_path, rng):
        mask = rng.random((6, 5, 4)) > 0.5
        write_mask(tmp_path / "m.dcb", mask)
        assert np.array_equal(read_mask(tmp_path / "m.dcb"), mask)

    def test_magic_checked(self, tmp_path, rng):
        mask = rng.random((2, 2, 2)) > 0.5
        write_mask(tmp_path / "m.dcb", mask)
        with pytest.raises(ValueError):
            read_volume(tmp_path / "m.dcb")

    def test_truncated_payload_rejected(self, tmp_path, rng):
        path = tmp_path / "vol.dcb"
        write_volume(path, rng.random((3, 3, 3, 2)), 500.0, np.tile([0, 0, 1.0], (2, 1)))
        raw = path.read_bytes()
        path.write_bytes(raw[:-8])
        with pytest.raises(ValueError):
            read_volume(path)

    def test_atomic_write_failure_leaves_nothing(self, tmp_path):
        from dcnet.volio import _atomic_write

        target = tmp_path / "out.bin"

        def boom(fh):
            fh.write(b"partial")
            raise RuntimeError("simulated failure")

        with pytest.raises(RuntimeError):
            _atomic_write(target, boom)
        assert not target.exists()
        assert list(tmp_path.iterdir()) == []


class TestModelFile:
    def test_round_trip(self, tmp_path):
        params = init_params(NetworkConfig(n_max=2), seed=3)
        write_model(tmp_path / "m.mdl", params, seed=3, training_meta={"epochs": 7})
        loaded, header = read_model(tmp_path / "m.mdl")
        assert np.array_equal(loaded.flat, params.flat)
        assert loaded.config == params.config
        assert header["training"]["epochs"] == 7
        assert header["seed"] == 3

    def test_corrupted_payload_detected(self, tmp_path):
        params = init_params(NetworkConfig(n_max=2), seed=3)
        path = tmp_path / "m.mdl"
        write_model(path, params, seed=3)
        raw = bytearray(path.read_bytes())
        raw[-5] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(ValueError):
            read_model(path)


class TestManifest:
    def test_round_trip(self, tmp_path):
        manifest = CohortManifest(
            tmp_path,
            [SubjectEntry("s0", 0, "s0.dcb", "s0_roi.dcb"), SubjectEntry("s1", 1, "s1.dcb", "s1_roi.dcb")],
            provenance={"seed": 4},
        )
        write_manifest(tmp_path / "manifest.json", manifest)
        loaded = read_manifest(tmp_path / "manifest.json")
        assert loaded.subjects == manifest.subjects
        assert loaded.provenance == {"seed": 4}
        assert loaded.volume_path(loaded.subjects[0]) == tmp_path / "s0.dcb"


class TestExtractDcs:
    def test_full_mask_interior_count(self, rng):
        data = rng.random((5, 5, 5, 3))
        mask = np.ones((5, 5, 5), dtype=bool)
        cubes = extract_dcs(data, mask, radius=1)
        assert len(cubes) == 27

    def test_single_voxel_mask_yields_nothing(self, rng):
        data = rng.random((5, 5, 5, 3))
        mask = np.zeros((5, 5, 5), dtype=bool)
        mask[2, 2, 2] = True
        assert len(extract_dcs(data, mask, radius=1)) == 0

    def test_center_values_match_source(self, rng):
        data = rng.random((6, 6, 6, 4))
        mask = np.ones((6, 6, 6), dtype=bool)
        cubes = extract_dcs(data, mask, radius=1)
        for center, cube in zip(cubes.centers, cubes.cubes):
            assert np.array_equal(cube[1, 1, 1], data[tuple(center)])
            lo = center - 1
            assert np.array_equal(cube, data[lo[0]:lo[0]+3, lo[1]:lo[1]+3, lo[2]:lo[2]+3])

    def test_count_matches_erosion_oracle(self, rng):
        mask = rng.random((8, 7, 9)) > 0.35
        data = rng.random(mask.shape + (2,))
        cubes = extract_dcs(data, mask, radius=1)
        eroded = binary_erosion(mask, structure=np.ones((3, 3, 3)), border_value=0)
        assert len(cubes) == int(eroded.sum())
        assert np.array_equal(cubes.centers, np.argwhere(eroded))

    def test_lexicographic_order(self, rng):
        mask = np.ones((5, 5, 5), dtype=bool)
        cubes = extract_dcs(rng.random((5, 5, 5, 1)), mask, radius=1)
        as_tuples = [tuple(c) for c in cubes.centers]
        assert as_tuples == sorted(as_tuples)

    def test_radius_too_large(self, rng):
        with pytest.raises(ValueError):
            extract_dcs(rng.random((3, 3, 3, 1)), np.ones((3, 3, 3), dtype=bool), radius=2)


class TestDcsToSh:
    def test_constant_cube_isolates_dc_channel(self):
        scheme = make_scheme(41, seed=0)
        cubes = np.full((2, 3, 3, 3, 41), 0.5)
        coeffs = dcs_to_sh(cubes, scheme, 6, reg=0.0)
        assert coeffs.shape == (2, 3, 3, 3, 28)
        assert np.allclose(coeffs[..., 0], 0.5 * np.sqrt(4 * np.pi), atol=1e-12)
        assert np.abs(coeffs[..., 1:]).max() < 1e-12

    def test_band_limited_round_trip(self, rng):
        scheme = make_scheme(41, seed=0)
        truth = rng.normal(size=(4, 3, 3, 3, 28))
        signals = render_sh(truth.reshape(-1, 28), scheme.directions, 6).reshape(4, 3, 3, 3, 41)
        fitted = dcs_to_sh(signals, scheme, 6, reg=0.0)
        assert np.linalg.norm(fitted - truth) < 1e-10 * np.linalg.norm(truth)

    def test_channel_count(self):
        assert num_coeffs(6) == 28

    def test_volume_path_matches_cube_path(self, rng):
        scheme = make_scheme(20, seed=2)
        data = rng.uniform(0.2, 1.0, (6, 6, 6, 20))
        mask = np.ones((6, 6, 6), dtype=bool)
        volume = Volume(data, scheme.b_value, scheme.directions)
        coeff_volume = fit_sh_volume(volume, mask, 6)
        from_volume = extract_dcs(coeff_volume, mask, radius=1)
        direct = dcs_to_sh(extract_dcs(data, mask, radius=1).cubes, scheme, 6)
        assert np.allclose(from_volume.cubes, direct, atol=1e-12)


class TestExportPsic:
    def test_uniform_white_and_black_outside(self, tmp_path):
        mask = np.zeros((4, 4, 3), dtype=bool)
        mask[1:3, 1:3, 1] = True
        scores = np.where(mask, 1.0, 0.0)
        written = export_psic(tmp_path / "psic.dcb", scores, mask)
        volume = read_volume(tmp_path / "psic.dcb")
        assert volume.data.shape == (4, 4, 3, 1)
        assert np.all(volume.data[mask, 0] == 1.0)
        assert np.all(volume.data[~mask, 0] == 0.0)
        pgms = [p for p in written if p.suffix == ".pgm"]
        assert len(pgms) == 1  # only slice z=1 intersects the mask
        raw = pgms[0].read_bytes()
        header, pixels = raw.split(b"255\n", 1)
        assert header == b"P5\n4 4\n"
        image = np.frombuffer(pixels, dtype=np.uint8).reshape(4, 4)
        assert np.all(image[1:3, 1:3] == 255)
        assert image.sum() == 4 * 255

    def test_scores_out_of_range_rejected(self, tmp_path):
        mask = np.ones((2, 2, 2), dtype=bool)
        with pytest.raises(ValueError):
            export_psic(tmp_path / "p.dcb", np.full((2, 2, 2), 1.5), mask)

    def test_container_round_trip_bytes(self, tmp_path, rng):
        mask = rng.random((3, 3, 3)) > 0.4
        scores = np.where(mask, rng.random((3, 3, 3)), 0.0)
        export_psic(tmp_path / "a.dcb", scores, mask)
        volume = read_volume(tmp_path / "a.dcb")
        export_psic(tmp_path / "b.dcb", volume.data[..., 0], mask)
        assert (tmp_path / "a.dcb").read_bytes() == (tmp_path / "b.dcb").read_bytes()
