"""Speech-like dry test signals.

No corpus ships with the toolkit, so demos and tests use voiced
pulse-train sources with a wandering pitch, a few formant resonances and a
syllabic on/off envelope. Two draws with different seeds are spectrally
distinct enough for separation experiments.
"""
from __future__ import annotations

import numpy as np
from scipy.signal import lfilter

from .signal import CANONICAL_RATE


def _resonator(freq: float, bandwidth: float, fs: int):
    r = np.exp(-np.pi * bandwidth / fs)
    theta = 2.0 * np.pi * freq / fs
    return [1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r]


def speech_like(rng: np.random.Generator, seconds: float = 4.0,
                sample_rate: int = CANONICAL_RATE, rms: float = 0.05) -> np.ndarray:
    n = int(round(seconds * sample_rate))
    t = np.arange(n) / sample_rate
    f0_base = rng.uniform(90.0, 240.0)
    f0 = f0_base * (1.0 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.2, 0.8) * t + rng.uniform(0, 6.3)))
    phase = np.cumsum(f0) / sample_rate
    pulses = np.diff(np.floor(phase), prepend=0.0)
    excitation = pulses + 0.05 * rng.standard_normal(n)

    out = np.zeros(n)
    for _ in range(3):
        b, a = _resonator(rng.uniform(300.0, 3500.0), rng.uniform(80.0, 250.0), sample_rate)
        out += lfilter(b, a, excitation)

    # Syllable-rate gating with smooth edges.
    rate = rng.uniform(3.0, 6.0)
    env = 0.5 * (1.0 + np.sin(2 * np.pi * rate * t + rng.uniform(0, 6.3)))
    env = np.clip(1.6 * env - 0.3, 0.0, 1.0)
    out *= env
    out -= out.mean()
    return out * (rms / (np.sqrt(np.mean(out ** 2)) + 1e-12))
