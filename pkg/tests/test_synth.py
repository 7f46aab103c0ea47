"""Scene generation determinism, render physics, and dataset round trips."""

import numpy as np
import pytest

from radarkit.errors import ConfigError, DataFormatError
from radarkit.synth import (
    CHIRP_INDICES,
    CHIRPS_PER_FRAME,
    FRAME_RATE_HZ,
    WAVELENGTH_M,
    Dataset,
    SynthConfig,
    generate_dataset,
    generate_scene,
    read_manifest,
    read_sequence,
    render_ramap,
    write_dataset,
    write_sequence,
)

SMALL = SynthConfig(height=32, width=32, frames=8, noise_sigma=0.05)


class TestGenerateScene:
    def test_same_seed_identical(self):
        a = generate_scene(7, "CS", SMALL)
        b = generate_scene(7, "CS", SMALL)
        assert a == b

    def test_different_scenarios_differ(self):
        a = generate_scene(7, "PL", SMALL)
        b = generate_scene(7, "HW", SMALL)
        assert a.targets != b.targets

    def test_unknown_scenario(self):
        with pytest.raises(ConfigError):
            generate_scene(0, "XX", SMALL)

    def test_highway_faster_than_parking_lot(self):
        def mean_speed(scenario):
            speeds = []
            for seed in range(100):
                scene = generate_scene(seed, scenario, SMALL)
                speeds.extend(abs(t.speed_mps) for t in scene.targets)
            return np.mean(speeds)

        assert mean_speed("HW") > mean_speed("PL")

    def test_targets_in_grid_for_all_frames(self):
        cfg = SynthConfig(height=64, width=64, frames=32)
        lo = cfg.edge_margin_bins - 0.5
        hi = cfg.height - 1 - cfg.edge_margin_bins + 0.5
        for seed in range(1000):
            scenario = ("PL", "CR", "CS", "HW")[seed % 4]
            scene = generate_scene(seed, scenario, cfg)
            for t in scene.targets:
                for frame in (0, cfg.frames - 1):
                    r_bin = (t.range_m + t.speed_mps * frame / FRAME_RATE_HZ) / cfg.range_resolution_m
                    assert lo <= r_bin <= hi, (seed, scenario, t)
                assert -45.0 <= t.azimuth_deg <= 45.0

    def test_min_separation_respected(self):
        cfg = SynthConfig(height=64, width=64, frames=4, min_separation_bins=10.0, mean_targets=6)
        for seed in range(30):
            scene = generate_scene(seed, "CS", cfg)
            bins = [
                (t.range_m / cfg.range_resolution_m,
                 (t.azimuth_deg / 90.0 + 0.5) * (cfg.width - 1))
                for t in scene.targets
            ]
            for i in range(len(bins)):
                for j in range(i + 1, len(bins)):
                    assert np.hypot(bins[i][0] - bins[j][0], bins[i][1] - bins[j][1]) >= 10.0


class TestRender:
    def test_static_target_peak_at_bin(self):
        # odd width puts azimuth 0 exactly on bin 16
        cfg = SynthConfig(height=32, width=33, frames=4, noise_sigma=0.0)
        from radarkit.synth import Scene, TargetSpec

        target = TargetSpec(class_id=1, range_m=16 * 0.23, azimuth_deg=0.0,
                            speed_mps=0.0, amplitude=2.0)
        scene = Scene(0, "PL", 4, 0.0, (target,))
        cube, anns = render_ramap(scene, cfg, dtype=np.float64)
        mag = np.hypot(cube[0], cube[1])
        for t in range(4):
            for c in range(4):
                idx = np.unravel_index(np.argmax(mag[t, c]), mag[t, c].shape)
                assert idx == (16, 16)
        assert all(a.range_bin == 16 and a.azimuth_bin == 16 for a in anns)
        assert abs(mag[0, 0, 16, 16] - 2.0) < 1e-9

    def test_zero_targets_pure_noise(self):
        from radarkit.synth import Scene

        cfg = SynthConfig(height=16, width=16, frames=2, noise_sigma=0.1)
        scene = Scene(3, "PL", 2, 0.1, ())
        cube, anns = render_ramap(scene, cfg, dtype=np.float64)
        assert anns == []
        assert 0.0 < np.abs(cube).mean() < 0.5

    def test_chirp_phase_model(self):
        from radarkit.synth import Scene, TargetSpec

        cfg = SynthConfig(height=64, width=64, frames=1, noise_sigma=0.0)
        v = 3.7
        target = TargetSpec(class_id=2, range_m=30 * 0.23, azimuth_deg=10.0,
                            speed_mps=v, amplitude=1.5)
        scene = Scene(0, "CS", 1, 0.0, (target,))
        cube, anns = render_ramap(scene, cfg, dtype=np.float64)
        rb, ab = anns[0].range_bin, anns[0].azimuth_bin
        z0 = cube[0, 0, 0, rb, ab] + 1j * cube[1, 0, 0, rb, ab]
        z3 = cube[0, 0, 3, rb, ab] + 1j * cube[1, 0, 3, rb, ab]
        dt_chirp = (1.0 / FRAME_RATE_HZ) / CHIRPS_PER_FRAME
        want = 2 * np.pi * 2 * v * (CHIRP_INDICES[3] - CHIRP_INDICES[0]) * dt_chirp / WAVELENGTH_M
        got = np.angle(z3 / z0)
        diff = (got - want + np.pi) % (2 * np.pi) - np.pi
        assert abs(diff) < 1e-9

    def test_annotation_is_argmax_of_clean_blob(self):
        cfg = SynthConfig(height=48, width=48, frames=6, noise_sigma=0.0)
        for seed in range(20):
            scene = generate_scene(seed, "CR", cfg)
            from radarkit.synth import Scene

            for tgt in scene.targets:
                solo = Scene(seed, "CR", cfg.frames, 0.0, (tgt,))
                cube, anns = render_ramap(solo, cfg, dtype=np.float64)
                mag = np.hypot(cube[0], cube[1])
                for t in range(cfg.frames):
                    ann = anns[t]
                    idx = np.unravel_index(np.argmax(mag[t, 0]), mag[t, 0].shape)
                    assert (ann.range_bin, ann.azimuth_bin) == idx

    def test_snr_tracks_configuration(self):
        from radarkit.synth import Scene, TargetSpec

        amp, sigma_n = 3.0, 0.12
        cfg = SynthConfig(height=64, width=64, frames=1, noise_sigma=sigma_n)
        ratios = []
        for seed in range(100):
            target = TargetSpec(1, 12 * 0.23, -20.0, 0.0, amp)
            scene = Scene(seed, "CR", 1, sigma_n, (target,))
            cube, anns = render_ramap(scene, cfg, dtype=np.float64)
            mag = np.hypot(cube[0, 0], cube[1, 0])
            peak = mag[:, anns[0].range_bin, anns[0].azimuth_bin].mean()
            noise_floor = np.sqrt((mag[:, 40:, 40:] ** 2).mean())
            ratios.append(peak / noise_floor)
        measured = np.mean(ratios)
        expected = amp / (np.sqrt(2) * sigma_n)
        assert abs(measured / expected - 1.0) < 0.10

    def test_determinism_bytes(self):
        cfg = SMALL
        a, _ = render_ramap(generate_scene(5, "HW", cfg), cfg)
        b, _ = render_ramap(generate_scene(5, "HW", cfg), cfg)
        assert a.tobytes() == b.tobytes()


class TestDatasetIO:
    def test_round_trip_three_sequences(self, tmp_path):
        cfg = SMALL
        items = []
        for i, scenario in enumerate(["PL", "CR", "HW"]):
            scene = generate_scene(i, scenario, cfg)
            cube, anns = render_ramap(scene, cfg)
            items.append((f"{i:03d}_seq", cube, anns, scenario, "train" if i < 2 else "val"))
        manifest = write_dataset(tmp_path, items)
        assert manifest.total_frames == sum(cube.shape[1] for _, cube, _, _, _ in items)

        ds = Dataset(tmp_path)
        assert ds.manifest == manifest
        for name, cube, anns, _, _ in items:
            cube2, anns2 = ds.load(name)
            assert cube2.tobytes() == cube.astype("<f4").tobytes()
            assert anns2 == anns

    def test_truncated_sequence_names_file(self, tmp_path):
        cube = np.zeros((2, 2, 4, 8, 8), dtype=np.float32)
        path = tmp_path / "x.ramc"
        write_sequence(path, cube)
        data = path.read_bytes()
        path.write_bytes(data[:50])
        with pytest.raises(DataFormatError) as ei:
            read_sequence(path)
        assert "x.ramc" in str(ei.value)

    def test_bad_magic_and_version(self, tmp_path):
        path = tmp_path / "y.ramc"
        path.write_bytes(b"NOPE" + b"\x00" * 30)
        with pytest.raises(DataFormatError):
            read_sequence(path)
        good = tmp_path / "z.ramc"
        write_sequence(good, np.zeros((2, 1, 4, 4, 4), dtype=np.float32))
        data = bytearray(good.read_bytes())
        data[4] = 99
        good.write_bytes(bytes(data))
        with pytest.raises(DataFormatError) as ei:
            read_sequence(good)
        assert "version" in str(ei.value)

    def test_manifest_missing_or_malformed(self, tmp_path):
        with pytest.raises(DataFormatError):
            read_manifest(tmp_path)
        (tmp_path / "manifest.txt").write_text("ramc-dataset v1\nsequence broken\n")
        with pytest.raises(DataFormatError):
            read_manifest(tmp_path)

    def test_generate_dataset_deterministic_bytes(self, tmp_path):
        cfg = SMALL
        d1, d2 = tmp_path / "a", tmp_path / "b"
        generate_dataset(d1, seed=11, sequences=4, cfg=cfg)
        generate_dataset(d2, seed=11, sequences=4, cfg=cfg)
        for p1 in sorted(d1.iterdir()):
            p2 = d2 / p1.name
            assert p1.read_bytes() == p2.read_bytes()

    def test_generate_dataset_split_mix(self, tmp_path):
        manifest = generate_dataset(tmp_path / "d", seed=3, sequences=8, cfg=SMALL)
        assert len(manifest.split("train")) == 6
        assert len(manifest.split("val")) == 2
        scenarios = {e.scenario for e in manifest.entries}
        assert scenarios == {"PL", "CR", "CS", "HW"}
