"""Writing simulated two-speaker datasets to disk."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from .errors import DataError
from .room import T60_RANGE, example_rng, manifest_entry, simulate_example, write_manifest
from .signal import CANONICAL_RATE, MultiChannelSignal
from .synth import speech_like
from .wav import read_wav, write_wav


def list_dry_sources(dry_dir) -> list[str]:
    """Sorted ``*.wav`` paths in ``dry_dir`` (sorted so seeds mean the same thing everywhere)."""
    if not os.path.isdir(dry_dir):
        raise DataError(f"dry source directory {os.fspath(dry_dir)!r} does not exist")
    paths = sorted(os.path.join(dry_dir, f) for f in os.listdir(dry_dir) if f.lower().endswith(".wav"))
    if len(paths) < 2:
        raise DataError(f"need at least 2 dry WAVs in {os.fspath(dry_dir)!r}, found {len(paths)}")
    return paths


def _load_dry(path, sample_rate: int) -> np.ndarray:
    sig = read_wav(path)
    if sig.sample_rate != sample_rate:
        raise DataError(f"{path}: sample rate {sig.sample_rate} Hz, expected {sample_rate} Hz")
    if sig.num_channels != 1:
        raise DataError(f"{path}: dry sources must be mono, found {sig.num_channels} channels")
    return sig.samples[0]


def simulate_dataset(dry_dir, out_dir, count: int, seed: int, t60_range=T60_RANGE,
                     max_order: int | None = None, jobs: int = 1,
                     sample_rate: int = CANONICAL_RATE) -> str:
    """Simulate ``count`` mixtures and write WAVs plus ``manifest.jsonl``.

    Example ``i`` draws its two dry sources and its scene from a generator
    seeded by ``(seed, i)``, so the output does not depend on ``jobs``.
    Returns the manifest path.
    """
    if count < 1:
        raise DataError("count must be at least 1")
    dry_paths = list_dry_sources(dry_dir)
    os.makedirs(out_dir, exist_ok=True)
    width = max(4, len(str(count - 1)))

    def one(i: int) -> dict:
        rng = example_rng(seed, i)
        picks = rng.choice(len(dry_paths), size=2, replace=False)
        dry = [_load_dry(dry_paths[p], sample_rate) for p in picks]
        ex = simulate_example(dry, rng, t60_range=t60_range, max_order=max_order,
                              sample_rate=sample_rate)
        ex.source_ids = tuple(os.path.splitext(os.path.basename(dry_paths[p]))[0] for p in picks)
        ex_id = f"ex{i:0{width}d}"
        mix_rel = f"{ex_id}_mix.wav"
        ref_rel = [f"{ex_id}_s{k + 1}.wav" for k in range(2)]
        write_wav(os.path.join(out_dir, mix_rel), ex.mixture)
        for k, rel in enumerate(ref_rel):
            write_wav(os.path.join(out_dir, rel), MultiChannelSignal(ex.references[k][None], sample_rate))
        return manifest_entry(ex_id, ex, mix_rel, ref_rel, seed)

    try:
        if jobs > 1:
            with ThreadPoolExecutor(max_workers=jobs) as pool:
                entries = list(pool.map(one, range(count)))
        else:
            entries = [one(i) for i in range(count)]
    except OSError as exc:
        raise DataError(f"cannot write dataset to {os.fspath(out_dir)!r}: {exc}") from exc
    manifest = os.path.join(out_dir, "manifest.jsonl")
    write_manifest(manifest, entries)
    return manifest


def make_dry_sources(out_dir, count: int, seed: int, seconds: float = 4.0,
                     sample_rate: int = CANONICAL_RATE) -> list[str]:
    """Write ``count`` synthetic speech-like mono WAVs for demos without a corpus."""
    os.makedirs(out_dir, exist_ok=True)
    paths = []
    for i in range(count):
        rng = example_rng(seed, i)
        x = speech_like(rng, seconds, sample_rate)
        path = os.path.join(out_dir, f"dry{i:03d}.wav")
        write_wav(path, MultiChannelSignal(x[None], sample_rate))
        paths.append(path)
    return paths
