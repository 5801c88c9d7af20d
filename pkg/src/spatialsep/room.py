"""Spatialized two-speaker mixtures: scene sampling, image-method RIRs, mixing.

Geometry is in meters in a shoebox room with one corner at the origin.
Sources and the 6-microphone circular array share one horizontal plane.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.signal import fftconvolve

from .errors import ConfigError, DataError
from .signal import CANONICAL_RATE, MultiChannelSignal

SPEED_OF_SOUND = 343.0
ARRAY_DIAMETER = 0.07
NUM_MICS = 6
WALL_MARGIN = 0.3
MIN_SOURCE_DISTANCE = 0.5
DIM_RANGE = ((3.0, 8.0), (3.0, 10.0), (2.5, 6.0))
T60_RANGE = (0.05, 0.5)
PLANE_HEIGHT = (1.0, 2.0)
# Angle-difference buckets (degrees) and their target shares.
ANGLE_BUCKETS = ((0.0, 15.0), (15.0, 45.0), (45.0, 90.0), (90.0, 180.0))
BUCKET_PROBS = (0.16, 0.29, 0.26, 0.29)
SINC_TAPS = 81
MAX_ORDER_CAP = 30
MAX_ATTEMPTS = 10000


@dataclass
class ArrayGeometry:
    center: np.ndarray
    orientation: float
    diameter: float = ARRAY_DIAMETER

    @property
    def mic_positions(self) -> np.ndarray:
        """``[6, 3]`` microphone coordinates, 60 degrees apart."""
        angles = self.orientation + 2.0 * np.pi * np.arange(NUM_MICS) / NUM_MICS
        r = self.diameter / 2.0
        offsets = np.stack([r * np.cos(angles), r * np.sin(angles), np.zeros(NUM_MICS)], axis=1)
        return np.asarray(self.center, dtype=float)[None, :] + offsets


@dataclass
class RoomScene:
    dims: np.ndarray
    t60: float
    sources: np.ndarray
    array: ArrayGeometry
    sample_rate: int = CANONICAL_RATE

    @property
    def mics(self) -> np.ndarray:
        return self.array.mic_positions

    def to_dict(self) -> dict:
        return {
            "room_dims": [float(v) for v in self.dims],
            "t60": float(self.t60),
            "sources": np.asarray(self.sources).tolist(),
            "array_center": [float(v) for v in self.array.center],
            "array_orientation": float(self.array.orientation),
            "sample_rate": self.sample_rate,
        }


@dataclass
class RIRSet:
    h: np.ndarray            # [sources, mics, taps]
    sample_rate: int


@dataclass
class MixtureExample:
    mixture: MultiChannelSignal
    references: np.ndarray   # [2, T], reverberant images at the reference mic
    scene: RoomScene | None = None
    angle_diff_deg: float = 0.0
    source_ids: tuple = ()


def surface_and_volume(dims) -> tuple[float, float]:
    lx, ly, lz = dims
    return 2.0 * (lx * ly + lx * lz + ly * lz), lx * ly * lz


def t60_to_reflection(scene_or_dims, t60: float | None = None) -> float:
    """Uniform wall reflection coefficient from Sabine's formula.

    ``alpha = 0.161 V / (T60 S)``, ``beta = sqrt(1 - alpha)``.
    """
    if isinstance(scene_or_dims, RoomScene):
        dims, t60 = scene_or_dims.dims, scene_or_dims.t60
    else:
        dims = scene_or_dims
    if t60 is None or t60 <= 0:
        raise ConfigError(f"T60 must be positive, got {t60}")
    surface, volume = surface_and_volume(dims)
    alpha = 0.161 * volume / (t60 * surface)
    if alpha >= 1.0:
        raise ConfigError(
            f"unachievable T60: {t60:.3f} s needs absorption {alpha:.3f} >= 1 in a "
            f"{'x'.join(f'{d:g}' for d in dims)} m room")
    return math.sqrt(1.0 - alpha)


def default_max_order(beta: float) -> int:
    """Smallest order whose attenuation beta**order is below -60 dB, capped."""
    if beta <= 0.0:
        return 0
    if beta >= 1.0:
        return MAX_ORDER_CAP
    return int(min(MAX_ORDER_CAP, math.ceil(math.log(1e-3) / math.log(beta))))


def angle_difference(scene_or_center, sources=None) -> float:
    """Planar angle in degrees between the two source directions seen from the array center."""
    if isinstance(scene_or_center, RoomScene):
        center, sources = scene_or_center.array.center, scene_or_center.sources
    else:
        center = scene_or_center
    center = np.asarray(center, dtype=float)
    v = [np.asarray(s, dtype=float)[:2] - center[:2] for s in sources]
    n0, n1 = np.linalg.norm(v[0]), np.linalg.norm(v[1])
    if n0 == 0.0 or n1 == 0.0:
        raise DataError("source coincides with the array center")
    cos = np.clip(np.dot(v[0], v[1]) / (n0 * n1), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def _max_ray_length(origin, direction, dims) -> float:
    """Distance along ``direction`` from ``origin`` before leaving the wall margin box."""
    t = np.inf
    for axis in range(2):
        d = direction[axis]
        if d > 0:
            t = min(t, (dims[axis] - WALL_MARGIN - origin[axis]) / d)
        elif d < 0:
            t = min(t, (WALL_MARGIN - origin[axis]) / d)
    return t


def sample_scene(rng: np.random.Generator, t60_range=T60_RANGE,
                 sample_rate: int = CANONICAL_RATE) -> RoomScene:
    """Draw a room, reverberation time, array pose and two source positions.

    The angle difference is drawn first (bucket by target share, then
    uniform inside the bucket) and geometry is rejection-sampled around it,
    so bucket frequencies are exact in distribution.
    """
    lo, hi = t60_range
    if not 0 < lo <= hi:
        raise ConfigError(f"invalid T60 range {t60_range}")
    bucket = rng.choice(len(BUCKET_PROBS), p=BUCKET_PROBS)
    b_lo, b_hi = ANGLE_BUCKETS[bucket]
    angle = rng.uniform(b_lo, b_hi)
    sign = 1.0 if rng.random() < 0.5 else -1.0
    r = ARRAY_DIAMETER / 2.0

    for _ in range(MAX_ATTEMPTS):
        dims = np.array([rng.uniform(a, b) for a, b in DIM_RANGE])
        t60 = rng.uniform(lo, hi)
        surface, volume = surface_and_volume(dims)
        if 0.161 * volume / (t60 * surface) >= 1.0:
            continue
        z = rng.uniform(*PLANE_HEIGHT)
        center = np.array([rng.uniform(WALL_MARGIN + r, dims[0] - WALL_MARGIN - r),
                           rng.uniform(WALL_MARGIN + r, dims[1] - WALL_MARGIN - r), z])
        src1 = np.array([rng.uniform(WALL_MARGIN, dims[0] - WALL_MARGIN),
                         rng.uniform(WALL_MARGIN, dims[1] - WALL_MARGIN), z])
        offset = src1[:2] - center[:2]
        if np.linalg.norm(offset) < MIN_SOURCE_DISTANCE:
            continue
        phi2 = math.atan2(offset[1], offset[0]) + sign * math.radians(angle)
        direction = np.array([math.cos(phi2), math.sin(phi2)])
        reach = _max_ray_length(center, direction, dims)
        if reach < MIN_SOURCE_DISTANCE:
            continue
        dist2 = rng.uniform(MIN_SOURCE_DISTANCE, reach)
        src2 = np.array([center[0] + dist2 * direction[0], center[1] + dist2 * direction[1], z])
        array = ArrayGeometry(center, rng.uniform(0.0, 2.0 * np.pi))
        return RoomScene(dims, float(t60), np.stack([src1, src2]), array, sample_rate)
    raise DataError(f"scene sampling failed after {MAX_ATTEMPTS} attempts")


def image_sources(source, dims, max_order: int) -> tuple[np.ndarray, np.ndarray]:
    """Image positions ``[K, 3]`` and reflection counts ``[K]`` up to ``max_order``.

    Images are indexed per axis by an integer ``i`` (``|i|`` reflections on
    that axis); the total reflection count ``|i|+|j|+|k|`` is bounded by
    ``max_order``.
    """
    n = np.arange(-max_order, max_order + 1)
    i, j, k = np.meshgrid(n, n, n, indexing="ij")
    order = np.abs(i) + np.abs(j) + np.abs(k)
    keep = order <= max_order
    idx = np.stack([i[keep], j[keep], k[keep]], axis=1)
    source = np.asarray(source, dtype=float)
    dims = np.asarray(dims, dtype=float)
    odd = idx % 2 != 0
    pos = np.where(odd, (idx + 1) * dims - source, idx * dims + source)
    return pos, order[keep]


def fractional_delay_taps(delay: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Hann-windowed sinc interpolation taps centered at each (fractional) delay.

    Returns integer tap indices and weights, both ``[K, 81]``.
    """
    half = SINC_TAPS // 2
    base = np.floor(delay).astype(np.int64)
    idx = base[:, None] + np.arange(-half, half + 1)[None, :]
    u = idx - delay[:, None]
    window = 0.5 * (1.0 + np.cos(2.0 * np.pi * u / SINC_TAPS))
    window[np.abs(u) > SINC_TAPS / 2.0] = 0.0
    return idx, np.sinc(u) * window


def image_method_rir(scene: RoomScene, beta: float | None = None,
                     max_order: int | None = None) -> RIRSet:
    """Room impulse responses ``[2 sources, 6 mics, taps]`` by the image method."""
    if beta is None:
        beta = t60_to_reflection(scene)
    if max_order is None:
        max_order = default_max_order(beta)
    if max_order < 0:
        raise ConfigError("max_order must be >= 0")
    fs = scene.sample_rate
    mics = scene.mics
    images = [image_sources(s, scene.dims, max_order) for s in scene.sources]
    longest = 0.0
    for pos, _ in images:
        d = np.linalg.norm(pos[:, None, :] - mics[None, :, :], axis=-1)
        longest = max(longest, d.max())
    length = int(math.ceil(longest / SPEED_OF_SOUND * fs)) + SINC_TAPS // 2 + 2
    h = np.zeros((len(images), len(mics), length))
    for si, (pos, order) in enumerate(images):
        gain = np.power(float(beta), order) if beta != 0.0 else (order == 0).astype(float)
        for mi, mic in enumerate(mics):
            dist = np.linalg.norm(pos - mic[None, :], axis=1)
            amp = gain / (4.0 * np.pi * dist)
            live = amp != 0.0
            idx, taps = fractional_delay_taps(dist[live] / SPEED_OF_SOUND * fs)
            weights = taps * amp[live][:, None]
            valid = (idx >= 0) & (idx < length)
            h[si, mi] = np.bincount(idx[valid], weights=weights[valid], minlength=length)
    return RIRSet(h, fs)


def render_mixture(scene: RoomScene, rirs: RIRSet, dry_sources, sample_rate: int | None = None,
                   reference_mic: int = 0) -> MixtureExample:
    """Convolve each dry source with its RIRs and sum at every microphone.

    Sources are cut to a common length ``T`` first; each spatialized image
    is cut to ``T`` as well. References are the per-source images at the
    reference microphone.
    """
    fs = scene.sample_rate if sample_rate is None else sample_rate
    if fs != rirs.sample_rate or fs != scene.sample_rate:
        raise DataError(f"sample-rate mismatch: sources {fs}, RIRs {rirs.sample_rate}, "
                        f"scene {scene.sample_rate}")
    images = spatialize(rirs, dry_sources)
    mixture = images.sum(axis=0)
    refs = images[:, reference_mic]
    return MixtureExample(MultiChannelSignal(mixture, fs), refs, scene,
                          angle_difference(scene) if scene is not None else 0.0)


def spatialize(rirs: RIRSet, dry_sources) -> np.ndarray:
    """Per-source multichannel images ``[sources, mics, T]``."""
    dry = [np.asarray(s, dtype=np.float64).reshape(-1) for s in dry_sources]
    if len(dry) != rirs.h.shape[0]:
        raise DataError(f"{len(dry)} dry sources for {rirs.h.shape[0]} RIR sets")
    t = min(len(s) for s in dry)
    out = np.zeros((len(dry), rirs.h.shape[1], t))
    for si, src in enumerate(dry):
        out[si] = fftconvolve(src[None, :t], rirs.h[si], axes=-1)[:, :t]
    return out


# Reverberation-time estimation

def schroeder_decay(rir) -> np.ndarray:
    """Energy decay curve in dB (0 dB at t=0) by backward integration."""
    energy = np.cumsum(np.asarray(rir, dtype=float)[::-1] ** 2)[::-1]
    with np.errstate(divide="ignore"):
        return 10.0 * np.log10(energy / energy[0])


def schroeder_t60(rir, sample_rate: int = CANONICAL_RATE, fit_range=(-5.0, -25.0)) -> float:
    """T60 extrapolated from a line fit to the decay curve between two levels."""
    edc = schroeder_decay(rir)
    hi, lo = fit_range
    sel = np.where((edc <= hi) & (edc >= lo))[0]
    if sel.size < 2:
        raise DataError("decay curve does not cover the fit range")
    t = sel / sample_rate
    slope, _ = np.polyfit(t, edc[sel], 1)
    if slope >= 0:
        raise DataError("decay curve is not decaying")
    return -60.0 / slope


# Dataset generation

def example_rng(seed: int, index: int) -> np.random.Generator:
    """Per-example generator that depends only on (seed, index)."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(index)]))


def simulate_example(dry_sources, rng: np.random.Generator, t60_range=T60_RANGE,
                     max_order: int | None = None,
                     sample_rate: int = CANONICAL_RATE) -> MixtureExample:
    scene = sample_scene(rng, t60_range, sample_rate)
    rirs = image_method_rir(scene, max_order=max_order)
    return render_mixture(scene, rirs, dry_sources)


def read_manifest(path) -> list[dict]:
    entries = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataError(f"{os.fspath(path)}:{line_no}: invalid JSON ({exc})") from exc
    if not entries:
        raise DataError(f"manifest {os.fspath(path)} is empty")
    return entries


def write_manifest(path, entries) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(json.dumps(e, sort_keys=True) + "\n")


def resolve_entry_paths(entry: dict, base_dir) -> tuple[str, list[str]]:
    def fix(p):
        return p if os.path.isabs(p) else os.path.join(base_dir, p)
    return fix(entry["mixture_path"]), [fix(p) for p in entry["ref_paths"]]


def manifest_entry(example_id: str, example: MixtureExample, mixture_path: str,
                   ref_paths, seed: int) -> dict:
    scene = example.scene
    return {
        "id": example_id,
        "mixture_path": mixture_path,
        "ref_paths": list(ref_paths),
        "t60": round(float(scene.t60), 6),
        "room_dims": [round(float(d), 6) for d in scene.dims],
        "angle_diff_deg": round(float(example.angle_diff_deg), 6),
        "seed": int(seed),
        "source_ids": list(example.source_ids),
    }


