"""Deterministic synthetic FMCW range-azimuth scene generator.

Each target is a complex 2-D Gaussian blob on the range-azimuth grid whose
phase rotates across the selected chirps in proportion to its radial
velocity:

    phase(frame t, chirp j) = 2*pi * 2 * (R(t) + v * j * dt_chirp) / lambda

with R(t) the linearly moving range, lambda = 3.9 mm (77 GHz carrier) and
dt_chirp the chirp interval when 256 chirps span one 30 fps frame; of
those, chirps (0, 64, 128, 192) are rendered.  Channel 0 carries the real
part, channel 1 the imaginary part, plus additive complex Gaussian noise.

Scenario tags (PL/CR/CS/HW) select target count, class mix, and speed
profiles.  Everything is a pure function of (seed, scenario, config).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, replace

import numpy as np

from .confmap import Annotation
from .errors import ConfigError, DataFormatError

SCENARIOS = ("PL", "CR", "CS", "HW")

WAVELENGTH_M = 0.0039
FRAME_RATE_HZ = 30.0
CHIRPS_PER_FRAME = 256
CHIRP_INDICES = (0, 64, 128, 192)


@dataclass(frozen=True)
class ScenarioProfile:
    mean_targets: float
    class_mix: tuple[float, float, float]   # pedestrian, cyclist, car
    speed_lo: float                         # |radial velocity| bounds, m/s
    speed_hi: float


# class mixes and speeds chosen so the four scenarios are statistically
# distinguishable; amplitudes (below) separate the classes visually
PROFILES = {
    "PL": ScenarioProfile(4.0, (0.60, 0.25, 0.15), 0.0, 2.0),
    "CR": ScenarioProfile(5.0, (0.45, 0.30, 0.25), 0.5, 6.0),
    "CS": ScenarioProfile(5.0, (0.30, 0.25, 0.45), 2.0, 12.0),
    "HW": ScenarioProfile(4.0, (0.05, 0.15, 0.80), 8.0, 35.0),
}

AMPLITUDE_RANGES = ((0.6, 1.2), (1.2, 2.5), (2.5, 5.0))


@dataclass(frozen=True)
class SynthConfig:
    height: int = 128
    width: int = 128
    chirps: int = 4
    frames: int = 128                 # frames per generated sequence
    range_resolution_m: float = 0.23
    azimuth_span_deg: float = 90.0    # mapped across the azimuth bins
    noise_sigma: float = 0.08
    blob_sigma_range: float = 2.0     # bins
    blob_sigma_azimuth: float = 3.0   # bins (beams widen in azimuth)
    mean_targets: float | None = None  # overrides the scenario profile
    min_separation_bins: float = 0.0
    edge_margin_bins: float = 3.0


@dataclass(frozen=True)
class TargetSpec:
    class_id: int
    range_m: float                    # at frame 0
    azimuth_deg: float
    speed_mps: float                  # signed radial velocity
    amplitude: float


@dataclass(frozen=True)
class Scene:
    seed: int
    scenario: str
    frames: int
    noise_sigma: float
    targets: tuple[TargetSpec, ...]


def _rng(seed, scenario):
    return np.random.Generator(
        np.random.PCG64(np.random.SeedSequence((int(seed), SCENARIOS.index(scenario))))
    )


def _bin_of(range_m, azimuth_deg, cfg: SynthConfig):
    r = range_m / cfg.range_resolution_m
    a = (azimuth_deg / cfg.azimuth_span_deg + 0.5) * (cfg.width - 1)
    return r, a


def generate_scene(seed: int, scenario: str, cfg: SynthConfig = SynthConfig()) -> Scene:
    """Deterministic per (seed, scenario, config); every target stays
    inside the grid for all frames."""
    if scenario not in SCENARIOS:
        raise ConfigError(f"unknown scenario {scenario!r}; choose from {SCENARIOS}")
    profile = PROFILES[scenario]
    rng = _rng(seed, scenario)
    mean = cfg.mean_targets if cfg.mean_targets is not None else profile.mean_targets
    count = max(1, int(rng.poisson(mean)))

    duration = (cfg.frames - 1) / FRAME_RATE_HZ
    lo_m = max(1.0, cfg.edge_margin_bins * cfg.range_resolution_m)
    hi_m = (cfg.height - 1 - cfg.edge_margin_bins) * cfg.range_resolution_m
    az_half = cfg.azimuth_span_deg / 2.0
    az_margin = cfg.azimuth_span_deg * cfg.edge_margin_bins / max(1, cfg.width - 1)

    targets: list[TargetSpec] = []
    placed_bins: list[tuple[float, float]] = []
    attempts = 0
    while len(targets) < count and attempts < 200 * count:
        attempts += 1
        class_id = int(rng.choice(3, p=profile.class_mix))
        speed = rng.uniform(profile.speed_lo, profile.speed_hi)
        speed *= rng.choice((-1.0, 1.0))
        travel = speed * duration
        # cap the speed so a feasible start interval exists inside the grid
        if abs(travel) >= (hi_m - lo_m):
            speed = np.sign(speed) * 0.9 * (hi_m - lo_m) / max(duration, 1e-9)
            travel = speed * duration
        start_lo = lo_m - min(0.0, travel)
        start_hi = hi_m - max(0.0, travel)
        range_m = rng.uniform(start_lo, start_hi)
        azimuth = rng.uniform(-az_half + az_margin, az_half - az_margin)
        if cfg.min_separation_bins > 0:
            rb, ab = _bin_of(range_m, azimuth, cfg)
            too_close = any(
                np.hypot(rb - r0, ab - a0) < cfg.min_separation_bins
                for r0, a0 in placed_bins
            )
            if too_close:
                continue
            placed_bins.append((rb, ab))
        amp = rng.uniform(*AMPLITUDE_RANGES[class_id])
        targets.append(TargetSpec(class_id, float(range_m), float(azimuth), float(speed), float(amp)))
    return Scene(seed, scenario, cfg.frames, cfg.noise_sigma, tuple(targets))


def render_ramap(scene: Scene, cfg: SynthConfig = SynthConfig(), dtype=np.float32):
    """Render (2,T,C,H,W) RF frames plus per-frame annotations."""
    if cfg.chirps != len(CHIRP_INDICES):
        raise ConfigError(f"renderer supports exactly {len(CHIRP_INDICES)} chirps")
    t_frames, c, h, w = scene.frames, cfg.chirps, cfg.height, cfg.width
    cube = np.zeros((2, t_frames, c, h, w))
    rows = np.arange(h)[:, None]
    cols = np.arange(w)[None, :]
    dt_chirp = (1.0 / FRAME_RATE_HZ) / CHIRPS_PER_FRAME
    annotations: list[Annotation] = []

    for t in range(t_frames):
        for tgt in scene.targets:
            range_now = tgt.range_m + tgt.speed_mps * t / FRAME_RATE_HZ
            rb, ab = _bin_of(range_now, tgt.azimuth_deg, cfg)
            blob = tgt.amplitude * np.exp(
                -((rows - rb) ** 2) / (2 * cfg.blob_sigma_range ** 2)
                - ((cols - ab) ** 2) / (2 * cfg.blob_sigma_azimuth ** 2)
            )
            for ci, chirp_idx in enumerate(CHIRP_INDICES):
                phase = (
                    2.0 * np.pi * 2.0
                    * (range_now + tgt.speed_mps * chirp_idx * dt_chirp)
                    / WAVELENGTH_M
                )
                cube[0, t, ci] += blob * np.cos(phase)
                cube[1, t, ci] += blob * np.sin(phase)
            annotations.append(
                Annotation(t, tgt.class_id, int(round(rb)), int(round(ab)))
            )
    if scene.noise_sigma > 0:
        noise_rng = np.random.Generator(
            np.random.PCG64(np.random.SeedSequence((scene.seed, 97, SCENARIOS.index(scene.scenario))))
        )
        cube += scene.noise_sigma * noise_rng.standard_normal(cube.shape)
    return cube.astype(dtype), annotations


# ---------------------------------------------------------------------------
# on-disk dataset format
#
# directory layout: manifest.txt + <name>.ramc + <name>.ann
# .ramc: magic "RAMC", version u16, five u32 extents (2,T,C,H,W), f32 LE data

_RAMC_MAGIC = b"RAMC"
_RAMC_VERSION = 1
_MANIFEST_NAME = "manifest.txt"
_MANIFEST_HEADER = "ramc-dataset v1"


@dataclass(frozen=True)
class SequenceEntry:
    name: str
    frames: int
    scenario: str
    split: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[SequenceEntry, ...]

    @property
    def total_frames(self) -> int:
        return sum(e.frames for e in self.entries)

    def split(self, tag: str) -> tuple[SequenceEntry, ...]:
        return tuple(e for e in self.entries if e.split == tag)


def write_sequence(path, cube: np.ndarray) -> None:
    if cube.ndim != 5 or cube.shape[0] != 2:
        raise ConfigError(f"sequence cube must be (2,T,C,H,W), got {cube.shape}")
    with open(path, "wb") as fh:
        fh.write(_RAMC_MAGIC)
        fh.write(struct.pack("<H", _RAMC_VERSION))
        fh.write(struct.pack("<5I", *cube.shape))
        fh.write(np.ascontiguousarray(cube, dtype="<f4").tobytes())


def read_sequence(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _RAMC_MAGIC:
            raise DataFormatError(f"{path}: bad magic {magic!r} at offset 0")
        raw = fh.read(2)
        if len(raw) != 2:
            raise DataFormatError(f"{path}: truncated version field at offset 4")
        (version,) = struct.unpack("<H", raw)
        if version != _RAMC_VERSION:
            raise DataFormatError(f"{path}: unsupported version {version}")
        raw = fh.read(20)
        if len(raw) != 20:
            raise DataFormatError(f"{path}: truncated extents at offset 6")
        shape = struct.unpack("<5I", raw)
        if shape[0] != 2 or any(s < 1 for s in shape):
            raise DataFormatError(f"{path}: invalid extents {shape}")
        count = int(np.prod(shape, dtype=np.int64))
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise DataFormatError(
                f"{path}: truncated payload at offset {26 + len(payload)} "
                f"(expected {4 * count} bytes)"
            )
        if fh.read(1):
            raise DataFormatError(f"{path}: trailing bytes after payload")
    return np.frombuffer(payload, dtype="<f4").reshape(shape).copy()


def write_dataset(directory, sequences) -> DatasetManifest:
    """sequences: iterable of (name, cube, annotations, scenario, split)."""
    from pathlib import Path

    from .confmap import write_annotations

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, cube, annotations, scenario, split in sequences:
        write_sequence(directory / f"{name}.ramc", cube)
        write_annotations(directory / f"{name}.ann", annotations)
        entries.append(SequenceEntry(name, int(cube.shape[1]), scenario, split))
    manifest = DatasetManifest(tuple(entries))
    with open(directory / _MANIFEST_NAME, "w", encoding="ascii") as fh:
        fh.write(_MANIFEST_HEADER + "\n")
        for e in manifest.entries:
            fh.write(f"sequence {e.name} frames {e.frames} scenario {e.scenario} split {e.split}\n")
    return manifest


def read_manifest(directory) -> DatasetManifest:
    from pathlib import Path

    path = Path(directory) / _MANIFEST_NAME
    if not path.exists():
        raise DataFormatError(f"{path}: manifest not found")
    entries = []
    with open(path, "r", encoding="ascii") as fh:
        header = fh.readline().strip()
        if header != _MANIFEST_HEADER:
            raise DataFormatError(f"{path}:1: bad header {header!r}")
        for lineno, line in enumerate(fh, 2):
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8 or parts[0] != "sequence" or parts[2] != "frames" \
                    or parts[4] != "scenario" or parts[6] != "split":
                raise DataFormatError(f"{path}:{lineno}: malformed sequence record")
            if parts[5] not in SCENARIOS or parts[7] not in ("train", "val"):
                raise DataFormatError(f"{path}:{lineno}: unknown scenario or split tag")
            entries.append(SequenceEntry(parts[1], int(parts[3]), parts[5], parts[7]))
    return DatasetManifest(tuple(entries))


class Dataset:
    """Manifest plus per-sequence loading; verifies files exist and parse."""

    def __init__(self, directory):
        from pathlib import Path

        self.directory = Path(directory)
        self.manifest = read_manifest(directory)
        for e in self.manifest.entries:
            for ext in (".ramc", ".ann"):
                p = self.directory / f"{e.name}{ext}"
                if not p.exists():
                    raise DataFormatError(f"{p}: referenced by manifest but missing")

    def load(self, name: str):
        from .confmap import read_annotations

        cube = read_sequence(self.directory / f"{name}.ramc")
        annotations = read_annotations(self.directory / f"{name}.ann")
        entry = next(e for e in self.manifest.entries if e.name == name)
        if cube.shape[1] != entry.frames:
            raise DataFormatError(
                f"{self.directory / (name + '.ramc')}: frame count {cube.shape[1]} "
                f"does not match manifest ({entry.frames})"
            )
        return cube, annotations


def generate_dataset(directory, seed: int, sequences: int, cfg: SynthConfig = SynthConfig(),
                     scenario_cycle=SCENARIOS, val_fraction: float = 0.2,
                     dtype=np.float32) -> DatasetManifest:
    """Generate a scenario-mixed dataset; the trailing fraction of the
    sequences becomes the validation split."""
    items = []
    n_val = int(round(sequences * val_fraction))
    for i in range(sequences):
        scenario = scenario_cycle[i % len(scenario_cycle)]
        scene = generate_scene(seed + i, scenario, cfg)
        cube, annotations = render_ramap(scene, cfg, dtype=dtype)
        split = "val" if i >= sequences - n_val else "train"
        items.append((f"{i:03d}_seq", cube, annotations, scenario, split))
    return write_dataset(directory, items)
