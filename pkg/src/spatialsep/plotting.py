"""Figure and heatmap output for the CLI report commands.

Everything renders straight to files through the Agg backend; nothing is
shown on screen.
"""
from __future__ import annotations

import math
import re

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_pgm(path, matrix) -> tuple[int, int]:
    """Write a binary (P5) 8-bit grayscale image, one pixel per matrix entry.

    Rows of ``matrix`` become image rows. Values are scaled so the maximum
    maps to 255; an all-zero matrix gives a black image. Returns
    ``(height, width)``.
    """
    m = np.asarray(matrix, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ValueError(f"PGM needs a non-empty 2-D matrix, got shape {m.shape}")
    peak = float(np.max(np.abs(m)))
    scaled = np.zeros(m.shape) if peak == 0.0 else np.abs(m) / peak
    pixels = np.round(scaled * 255.0).astype(np.uint8)
    height, width = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{width} {height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return height, width


def read_pgm(path) -> np.ndarray:
    """Inverse of :func:`write_pgm` (used by tests and quick checks)."""
    with open(path, "rb") as fh:
        data = fh.read()
    match = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", data)
    if match is None:
        raise ValueError(f"{path} is not a binary PGM")
    width, height, maxval = (int(g) for g in match.groups())
    if maxval != 255:
        raise ValueError("only 8-bit PGM is supported")
    # Exactly one whitespace byte separates the header from the pixels.
    pixels = np.frombuffer(data[match.end():match.end() + width * height], dtype=np.uint8)
    return pixels.reshape(height, width)


def plot_filters(taps, magnitudes, path, title: str = "filters", sample_rate: int = 16000) -> None:
    """Two panels: sorted filter taps (image) and their FFT magnitudes (heatmap).

    ``taps`` is ``[N, L]`` (multi-channel banks should be passed one channel
    or flattened by the caller) and ``magnitudes`` is ``[N, bins]``, both
    already in display order.
    """
    taps = np.asarray(taps, dtype=np.float64)
    mags = np.asarray(magnitudes, dtype=np.float64)
    n_bins = mags.shape[1]
    nyquist_khz = sample_rate / 2000.0
    fig, (ax_t, ax_f) = plt.subplots(1, 2, figsize=(10, 4.5), constrained_layout=True)
    lim = float(np.max(np.abs(taps))) or 1.0
    im = ax_t.imshow(taps, aspect="auto", cmap="RdBu_r", vmin=-lim, vmax=lim,
                     interpolation="nearest", origin="lower")
    ax_t.set_xlabel("tap")
    ax_t.set_ylabel("filter (sorted)")
    ax_t.set_title(f"{title}: taps")
    fig.colorbar(im, ax=ax_t)
    im = ax_f.imshow(mags, aspect="auto", cmap="magma", interpolation="nearest", origin="lower",
                     extent=(0.0, nyquist_khz, -0.5, mags.shape[0] - 0.5))
    ax_f.set_xlabel(f"frequency (kHz), {n_bins} bins")
    ax_f.set_ylabel("filter (sorted)")
    ax_f.set_title(f"{title}: |FFT|")
    fig.colorbar(im, ax=ax_f)
    fig.savefig(path, dpi=100)
    plt.close(fig)


def plot_report(report, path, title: str = "SI-SDRi by angle difference") -> None:
    """Bar chart of per-bucket mean SI-SDRi with example counts on top."""
    labels = ["<15°", "15°-45°", "45°-90°", ">90°"]
    means = [m if math.isfinite(m) else 0.0 for m in report.bucket_means]
    fig, ax = plt.subplots(figsize=(6, 4), constrained_layout=True)
    bars = ax.bar(labels, means, color="#4c72b0")
    for bar, count, raw in zip(bars, report.bucket_counts, report.bucket_means):
        note = f"n={count}" if math.isfinite(raw) else "n=0"
        ax.annotate(note, (bar.get_x() + bar.get_width() / 2, bar.get_height()),
                    ha="center", va="bottom", fontsize=8)
    if math.isfinite(report.overall_mean):
        ax.axhline(report.overall_mean, color="k", lw=1, ls="--",
                   label=f"overall {report.overall_mean:.2f} dB")
        ax.legend(loc="best", fontsize=8)
    ax.set_ylabel("SI-SDRi (dB)")
    ax.set_title(title)
    fig.savefig(path, dpi=100)
    plt.close(fig)
