"""Synthetic co-registered radar/depth scenes with concealed-metal labels.

The radar model is standard dechirped FMCW: each reflector at range R
lands at beat frequency f_b = 2 * (B/T_c) * R / c with amplitude falling
as 1/R^2, phase tied to range (4*pi*R/lambda plus a per-frame start
phase), and an inter-receiver phase of pi*sin(azimuth) for the
half-wavelength two-antenna array. A concealed plate reflects from the
front torso surface: same reflector stack, small range standoff, with a
specularity factor that decays in the wearer's facing angle. Channel
layout is [Rx1 I, Rx1 Q, Rx2 I, Rx2 Q].

Depth frames rasterize subjects as rounded-rectangle silhouettes at
constant range against a background plane, with optional zeroed pixels
standing in for ToF dropouts.

All chirp constants are stand-ins chosen for a 24 GHz device class, not
a characterization of any particular sensor.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import Manifest, Sample, SampleRecord, write_manifest, write_sample
from .engine import RngStream
from .preprocess import RADAR_CHANNELS, RADAR_SAMPLES, DepthFrame, RadarTrace

C_M_S = 299_792_458.0
TRACKING_RANGE_M = (0.5, 20.0)
SPECULAR_SCALE_DEG = 7.5
METAL_STANDOFF_M = 0.12  # plate sits on the front torso surface
METAL_SIZE_M = (0.20, 0.15)  # height, width
BODY_CORNER_POWER = 4  # superellipse exponent for the silhouette


class SimulationError(Exception):
    """Scene or chirp configuration outside the modeled envelope."""


@dataclass(frozen=True)
class ChirpConfig:
    carrier_hz: float = 24.0e9
    bandwidth_hz: float = 200.0e6
    chirp_s: float = 256.0e-6
    n_samples: int = 256
    channels: int = 4

    def __post_init__(self):
        if self.n_samples != RADAR_SAMPLES or self.channels != RADAR_CHANNELS:
            raise SimulationError(
                f"chirp must keep {RADAR_SAMPLES} samples x {RADAR_CHANNELS} channels "
                f"to match the trace shape, got {self.n_samples} x {self.channels}"
            )
        if min(self.carrier_hz, self.bandwidth_hz, self.chirp_s) <= 0:
            raise SimulationError("carrier, bandwidth and chirp duration must be positive")

    @property
    def sample_rate_hz(self):
        return self.n_samples / self.chirp_s

    @property
    def slope_hz_s(self):
        return self.bandwidth_hz / self.chirp_s

    @property
    def wavelength_m(self):
        return C_M_S / self.carrier_hz

    def beat_hz(self, range_m):
        return 2.0 * self.slope_hz_s * range_m / C_M_S

    def beat_bin(self, range_m):
        """Fractional index of the range's peak in an n_samples-point spectrum."""
        return self.beat_hz(range_m) * self.chirp_s

    @property
    def max_range_m(self):
        """Unambiguous limit: beat frequency at Nyquist."""
        return self.sample_rate_hz / 2.0 * C_M_S / (2.0 * self.slope_hz_s)


@dataclass(frozen=True)
class Subject:
    range_m: float
    azimuth_deg: float
    width_m: float = 0.5
    height_m: float = 1.7
    reflectivity: float = 1.0
    facing_deg: float = 0.0
    carrying: bool = False
    metal_reflectivity: float = 0.5
    metal_offset_m: tuple = (0.0, 0.0)  # (up, right) on the torso plane

    def __post_init__(self):
        lo, hi = TRACKING_RANGE_M
        if not lo <= self.range_m <= hi:
            raise SimulationError(
                f"subject range {self.range_m} m outside tracking range [{lo}, {hi}] m"
            )
        if self.width_m <= 0 or self.height_m <= 0:
            raise SimulationError("subject extent must be positive")
        object.__setattr__(self, "metal_offset_m", tuple(self.metal_offset_m))

    @property
    def specularity(self):
        return math.exp(-0.5 * (self.facing_deg / SPECULAR_SCALE_DEG) ** 2)


@dataclass(frozen=True)
class SceneSpec:
    subjects: tuple = ()
    seed: int = 0
    n_frames: int = 1
    frame_rate_hz: float = 20.0

    def __post_init__(self):
        object.__setattr__(self, "subjects", tuple(self.subjects))
        if len(self.subjects) > 2:
            raise SimulationError(f"at most two subjects supported, got {len(self.subjects)}")
        if self.n_frames < 0 or self.frame_rate_hz <= 0:
            raise SimulationError("frame count must be >= 0 and frame rate positive")


def _reflectors(scene: SceneSpec):
    """Point-echo list: (range, azimuth_deg, amplitude) per body and plate."""
    out = []
    for s in scene.subjects:
        out.append((s.range_m, s.azimuth_deg, s.reflectivity / s.range_m**2))
        if s.carrying:
            r = s.range_m - METAL_STANDOFF_M
            daz = math.degrees(math.atan2(s.metal_offset_m[1], r))
            out.append((r, s.azimuth_deg + daz,
                        s.metal_reflectivity * s.specularity / r**2))
    return out


def fmcw_beat(scene: SceneSpec, chirp: ChirpConfig = ChirpConfig(),
              noise_sigma=0.0, frame=0) -> RadarTrace:
    """Dechirped intermediate-frequency trace for one frame, (1, N, 4)."""
    rng = RngStream(scene.seed).split(f"radar/{frame}")
    t = np.arange(chirp.n_samples, dtype=np.float64) / chirp.sample_rate_hz
    trace = np.zeros((chirp.n_samples, chirp.channels), dtype=np.float64)
    phi_frame = float(rng.uniform((), 0.0, 2.0 * math.pi))
    for r, az_deg, amp in _reflectors(scene):
        f_b = chirp.beat_hz(r)
        if f_b > chirp.sample_rate_hz / 2.0:
            raise SimulationError(
                f"target at {r} m beats at {f_b:.0f} Hz, beyond Nyquist "
                f"{chirp.sample_rate_hz / 2:.0f} Hz (max range {chirp.max_range_m:.1f} m)"
            )
        phi = phi_frame + 4.0 * math.pi * r / chirp.wavelength_m
        psi = math.pi * math.sin(math.radians(az_deg))
        arg = 2.0 * math.pi * f_b * t + phi
        trace[:, 0] += amp * np.cos(arg)
        trace[:, 1] += amp * np.sin(arg)
        trace[:, 2] += amp * np.cos(arg + psi)
        trace[:, 3] += amp * np.sin(arg + psi)
    noise = rng.split("noise").normal((chirp.n_samples, chirp.channels),
                                      std=1.0, dtype=np.float64)
    trace += noise_sigma * noise
    return RadarTrace(trace[None].astype(np.float32))


def _pixel_angles(resolution, fov_deg):
    h, w = resolution
    fov_el, fov_az = fov_deg
    el = fov_el / 2.0 - (np.arange(h) + 0.5) * fov_el / h  # row 0 = top
    az = -fov_az / 2.0 + (np.arange(w) + 0.5) * fov_az / w  # col 0 = left
    return el[:, None], az[None, :]


def _silhouette(subject: Subject, el, az):
    half_az = math.degrees(math.atan2(subject.width_m / 2.0, subject.range_m))
    half_el = math.degrees(math.atan2(subject.height_m / 2.0, subject.range_m))
    u = (az - subject.azimuth_deg) / half_az
    v = el / half_el
    n = BODY_CORNER_POWER
    return np.abs(u) ** n + np.abs(v) ** n <= 1.0


def render_depth(scene: SceneSpec, resolution=(32, 64), fov_deg=(20.0, 40.0),
                 background_m=8.0, hole_fraction=0.0, frame=0) -> DepthFrame:
    """Constant-range silhouettes over a background plane; zeros mark holes."""
    el, az = _pixel_angles(resolution, fov_deg)
    depth = np.full(resolution, background_m, dtype=np.float32)
    for s in sorted(scene.subjects, key=lambda s: -s.range_m):
        sil = _silhouette(s, el, az)
        if not sil.any():
            warnings.warn(f"subject at azimuth {s.azimuth_deg} deg is outside the "
                          f"{fov_deg} deg field of view", stacklevel=2)
            continue
        depth[sil] = s.range_m
    if hole_fraction > 0.0:
        holes = RngStream(scene.seed).split(f"depth/holes/{frame}").uniform(resolution)
        depth[holes < hole_fraction] = 0.0
    return DepthFrame(depth)


def ground_truth_mask(scene: SceneSpec, resolution=(32, 64), fov_deg=(20.0, 40.0)) -> np.ndarray:
    """Torso-patch pixels of each carrying subject, clipped to its silhouette.

    Plates too small to cover a pixel center still mark the nearest
    silhouette pixel, so an in-view positive never degenerates to an
    empty mask.
    """
    el, az = _pixel_angles(resolution, fov_deg)
    mask = np.zeros(resolution, dtype=np.uint8)
    for s in scene.subjects:
        if not s.carrying:
            continue
        sil = _silhouette(s, el, az)
        if not sil.any():
            continue
        up, right = s.metal_offset_m
        el_c = math.degrees(math.atan2(up, s.range_m))
        az_c = s.azimuth_deg + math.degrees(math.atan2(right, s.range_m))
        half_el = math.degrees(math.atan2(METAL_SIZE_M[0] / 2.0, s.range_m))
        half_az = math.degrees(math.atan2(METAL_SIZE_M[1] / 2.0, s.range_m))
        patch = sil & (np.abs(el - el_c) <= half_el) & (np.abs(az - az_c) <= half_az)
        if not patch.any():
            dist = (el - el_c) ** 2 + (az - az_c) ** 2 + np.where(sil, 0.0, np.inf)
            patch = np.zeros_like(sil)
            patch[np.unravel_index(np.argmin(dist), dist.shape)] = True
        mask[patch] = 1
    return mask


@dataclass(frozen=True)
class DatasetSpec:
    """Scene distribution for synthetic dataset generation."""

    count: int
    resolution: tuple = (32, 64)
    fov_deg: tuple = (20.0, 40.0)
    positive_fraction: float = 0.5
    regime_mix: tuple = (1 / 3, 1 / 3, 1 / 3)  # 1P, 2P1, 2P2
    range_m: tuple = (2.5, 6.5)
    azimuth_deg: tuple = (-12.0, 12.0)
    min_range_gap_m: float = 1.0
    min_azimuth_gap_deg: float = 8.0
    noise_sigma: float = 0.01
    hole_fraction: float = 0.05
    background_m: float = 8.0
    metal_reflectivity: float = 0.5
    facing_jitter_deg: float = 3.0

    def __post_init__(self):
        if self.count < 0:
            raise SimulationError("count must be non-negative")
        if not 0.0 <= self.positive_fraction <= 1.0:
            raise SimulationError("positive_fraction must lie in [0, 1]")
        if len(self.regime_mix) != 3 or min(self.regime_mix) < 0 or \
                abs(sum(self.regime_mix) - 1.0) > 1e-9:
            raise SimulationError("regime_mix must be three fractions summing to 1")
        for name in ("resolution", "fov_deg", "regime_mix", "range_m", "azimuth_deg"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    @classmethod
    def from_json(cls, path):
        with open(path, "rb") as fh:
            doc = json.loads(fh.read().decode())
        known = {f.name for f in dataclasses.fields(cls)}
        stray = set(doc) - known
        if stray:
            raise SimulationError(f"unknown dataset config keys {sorted(stray)}")
        return cls(**doc)


def _assignments(spec: DatasetSpec, rng: RngStream):
    """Exact-count label and regime lists, deterministically shuffled.

    2P1 frames are attribution-given-presence: the object is always
    there and the task is which subject carries it, so their label is
    pinned to 1. ``positive_fraction`` governs the presence regimes
    (1P, 2P2) with an exact count.
    """
    n = spec.count
    cuts = [round(sum(spec.regime_mix[: i + 1]) * n) for i in range(3)]
    regimes = []
    start = 0
    for name, stop in zip(("1P", "2P1", "2P2"), cuts):
        regimes.extend([name] * (stop - start))
        start = stop
    regime_order = rng.split("regimes").permutation(n)
    regimes = [regimes[i] for i in regime_order]
    free = [i for i, r in enumerate(regimes) if r != "2P1"]
    n_pos = round(len(free) * spec.positive_fraction)
    flags = [1] * n_pos + [0] * (len(free) - n_pos)
    flag_order = rng.split("labels").permutation(len(free))
    labels = [1] * n
    for slot, j in zip(free, flag_order):
        labels[slot] = flags[j]
    return labels, regimes


def _draw_scene(spec: DatasetSpec, label, regime, rng: RngStream) -> SceneSpec:
    n_subj = 1 if regime == "1P" else 2
    for _ in range(10_000):
        ranges = rng.uniform((n_subj,), *spec.range_m)
        azimuths = rng.uniform((n_subj,), *spec.azimuth_deg)
        if n_subj == 1:
            break
        if (abs(ranges[0] - ranges[1]) >= spec.min_range_gap_m
                and abs(azimuths[0] - azimuths[1]) >= spec.min_azimuth_gap_deg):
            break
    else:
        raise SimulationError(
            "cannot place two subjects with the requested separation; "
            "widen range_m/azimuth_deg or shrink the gaps"
        )
    # drawn regardless of label so geometry stays label-independent
    pick = int(rng.split("carrier").integers(2)) if n_subj == 2 else 0
    carrier = pick if label == 1 else None
    subjects = []
    for k in range(n_subj):
        subjects.append(Subject(
            range_m=float(ranges[k]),
            azimuth_deg=float(azimuths[k]),
            facing_deg=float(rng.uniform((), -spec.facing_jitter_deg, spec.facing_jitter_deg)),
            carrying=k == carrier,
            metal_reflectivity=spec.metal_reflectivity,
            metal_offset_m=(float(rng.uniform((), -0.05, 0.05)),
                            float(rng.uniform((), -0.05, 0.05))),
        ))
    return SceneSpec(tuple(subjects), seed=int(rng.split("scene-seed").integers(2**31)))


def make_dataset(spec: DatasetSpec, seed, out_dir, chirp: ChirpConfig = ChirpConfig()) -> Manifest:
    """Write ``count`` samples plus a manifest under ``out_dir``; returns the manifest."""
    os.makedirs(os.path.join(out_dir, "blobs"), exist_ok=True)
    root_rng = RngStream(seed)
    labels, regimes = _assignments(spec, root_rng)
    records = []
    for i in range(spec.count):
        scene = _draw_scene(spec, labels[i], regimes[i], root_rng.split(f"scene/{i}"))
        radar = fmcw_beat(scene, chirp, noise_sigma=spec.noise_sigma)
        depth = render_depth(scene, spec.resolution, spec.fov_deg,
                             background_m=spec.background_m,
                             hole_fraction=spec.hole_fraction)
        mask = ground_truth_mask(scene, spec.resolution, spec.fov_deg)
        sample = Sample(radar, depth, mask, labels[i], regimes[i])
        rec = SampleRecord(id=f"s{i:05d}", path=f"blobs/s{i:05d}.bin",
                           label=labels[i], regime=regimes[i])
        write_sample(sample, os.path.join(out_dir, rec.path))
        records.append(rec)
    manifest = Manifest(resolution=spec.resolution, samples=records)
    write_manifest(manifest, os.path.join(out_dir, "manifest.json"))
    return manifest
