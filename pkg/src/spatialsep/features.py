"""Spatial features: IPD, multi-channel convolution sum (MCS) and
inter-channel convolution differences (ICD).

MCS and ICD are differentiable; both are realized as a single-plane 2D
convolution over the ``[channels, time]`` waveform matrix. IPD is a fixed
transform of the mixture and is returned as plain arrays.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import signal as sig
from .autodiff import Parameter, Tensor
from .autodiff import ops
from .errors import ConfigError, DataError

FEATURE_CONFIGS = ("encoder", "ipd", "mcs", "icd", "icd_ipd")
W2_MODES = ("fix -1", "init. -1", "init. randomly")


@dataclass(frozen=True)
class PairSpec:
    """Microphone pairs swept by a height-2 kernel with the given dilation/stride.

    Indices are 1-based. ``count`` defaults to as many pairs as fit in
    ``channels``; an explicit count that overruns the array is rejected.
    """

    dilation: int
    stride: int
    channels: int
    count: int | None = None

    @property
    def pairs(self) -> list[tuple[int, int]]:
        return pair_indices(self)

    def to_dict(self) -> dict:
        return {"dilation": self.dilation, "stride": self.stride,
                "channels": self.channels, "count": self.count}

    @classmethod
    def from_dict(cls, d: dict) -> "PairSpec":
        return cls(int(d["dilation"]), int(d["stride"]), int(d["channels"]), d.get("count"))


def pair_indices(spec: PairSpec) -> list[tuple[int, int]]:
    """``m1 = 1 + (m-1)*stride``, ``m2 = m1 + dilation``.

    >>> pair_indices(PairSpec(dilation=3, stride=1, channels=6))
    [(1, 4), (2, 5), (3, 6)]
    """
    d, s, c = spec.dilation, spec.stride, spec.channels
    if d < 1 or s < 1 or c < 2:
        raise ConfigError(f"invalid pair spec {spec}")
    fit = (c - d - 1) // s + 1 if c - d - 1 >= 0 else 0
    count = fit if spec.count is None else spec.count
    pairs = [(1 + (m - 1) * s, 1 + (m - 1) * s + d) for m in range(1, count + 1)]
    bad = [p for p in pairs if p[1] > c]
    if bad:
        raise ConfigError(f"pairs out of range for {c} channels: {bad}")
    if not pairs:
        raise ConfigError(f"no microphone pair fits {c} channels with dilation {d}")
    return pairs


def all_pairs(specs) -> list[tuple[int, int]]:
    out = []
    for spec in specs:
        out.extend(pair_indices(spec))
    return out


@dataclass
class FeatureTensor:
    """Stacked ``[B, features, frames]`` separator input plus its block layout."""

    values: Tensor
    layout: list[tuple[str, int, int]] = field(default_factory=list)

    @property
    def num_features(self) -> int:
        return self.values.shape[1]

    @property
    def num_frames(self) -> int:
        return self.values.shape[2]

    def block(self, name: str) -> np.ndarray:
        for block_name, start, stop in self.layout:
            if block_name == name:
                return self.values.value[:, start:stop]
        raise KeyError(name)


def _as_batch(x) -> Tensor:
    """Coerce a signal, ``[C, T]`` or ``[B, C, T]`` input to a ``[B, C, T]`` tensor."""
    if isinstance(x, sig.MultiChannelSignal):
        x = x.samples
    if isinstance(x, Tensor):
        return x if x.ndim == 3 else ops.reshape(x, (1,) + x.shape)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise DataError(f"expected [C, T] or [B, C, T] samples, got shape {x.shape}")
    return Tensor(x)


# IPD

def compute_ipd(signal, pairs, window_len: int = 40, hop: int = 20, n_fft: int = 64):
    """cos/sin of inter-channel phase differences.

    ``pairs`` are 1-based ``(m1, m2)`` tuples. Returns two arrays of shape
    ``[B, pairs, n_fft // 2 + 1, frames]`` (batch axis dropped for
    unbatched input). Bins with zero magnitude get phase 0.
    """
    x = signal.samples if isinstance(signal, sig.MultiChannelSignal) else np.asarray(signal, float)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    frames = sig.frame_signal(x, window_len, hop)        # [B, C, F, L]
    spec = sig.rdft(frames, n_fft)                       # [B, C, F, bins]
    phase = np.where(np.abs(spec) > 0, np.angle(spec), 0.0)
    first = np.array([p[0] - 1 for p in pairs])
    second = np.array([p[1] - 1 for p in pairs])
    if first.size == 0 or max(first.max(), second.max()) >= x.shape[1] or min(first.min(), second.min()) < 0:
        raise DataError(f"pairs {pairs} out of range for {x.shape[1]} channels")
    ipd = np.transpose(phase[:, first] - phase[:, second], (0, 1, 3, 2))  # [B, P, bins, F]
    cos_ipd, sin_ipd = np.cos(ipd), np.sin(ipd)
    if squeeze:
        return cos_ipd[0], sin_ipd[0]
    return cos_ipd, sin_ipd


# MCS

class McsFilterBank:
    """Learnable ``[N, C, L]`` filters spanning every signal channel."""

    def __init__(self, num_filters: int, channels: int, window_len: int = 40,
                 rng: np.random.Generator | None = None, name: str = "mcs.K"):
        if num_filters < 1 or channels < 1:
            raise ConfigError("MCS bank needs at least one filter and one channel")
        rng = np.random.default_rng(0) if rng is None else rng
        init = rng.standard_normal((num_filters, channels, window_len)) / np.sqrt(channels * window_len)
        self.K = Parameter(name, init)

    @property
    def shape(self):
        return self.K.shape

    def parameters(self):
        return [self.K]


def compute_mcs(x, bank: McsFilterBank, hop: int | None = None) -> Tensor:
    """``MCS[n, t] = sum_c (y_c * k_c^(n))[t]`` -> ``[B, N, frames]``."""
    x = _as_batch(x)
    n, c, length = bank.shape
    if x.shape[1] != c:
        raise DataError(f"MCS bank spans {c} channels but the signal has {x.shape[1]}")
    hop = length // 2 if hop is None else hop
    out = ops.conv2d(x, bank.K, stride=(1, hop))       # [B, N, 1, F]
    return ops.reshape(out, (out.shape[0], n, out.shape[3]))


# ICD

class IcdFilterBank:
    """Shared ``[N, L]`` filters with the fixed all-ones ``w1`` and a window ``w2``.

    ``w2_mode`` is one of ``"fix -1"`` (constant -1, frozen),
    ``"init. -1"`` (learnable, starts at -1) or ``"init. randomly"``.
    """

    def __init__(self, num_filters: int, window_len: int = 40, w2_mode: str = "init. -1",
                 rng: np.random.Generator | None = None, name: str = "icd"):
        if w2_mode not in W2_MODES:
            raise ConfigError(f"unknown w2 mode {w2_mode!r}; expected one of {W2_MODES}")
        rng = np.random.default_rng(0) if rng is None else rng
        self.K = Parameter(f"{name}.K",
                           rng.standard_normal((num_filters, window_len)) / np.sqrt(window_len))
        if w2_mode == "init. randomly":
            w2 = rng.uniform(-1.0, 1.0, window_len)
        else:
            w2 = -np.ones(window_len)
        self.w2 = Parameter(f"{name}.w2", w2, trainable=w2_mode != "fix -1")
        self.w1 = np.ones(window_len)
        self.w2_mode = w2_mode

    @property
    def num_filters(self) -> int:
        return self.K.shape[0]

    @property
    def window_len(self) -> int:
        return self.K.shape[1]

    def parameters(self):
        return [self.K, self.w2]

    def kernel(self) -> Tensor:
        """The ``[N, 2, L]`` conv2d kernel: rows ``w1*k'`` and ``w2*k'``."""
        return ops.stack([ops.mul(self.K, self.w1), ops.mul(self.K, self.w2)], axis=1)


def compute_icd(x, bank: IcdFilterBank, pair_specs, hop: int | None = None) -> Tensor:
    """ICDs for every pair of every spec, shape ``[B, pairs, N, frames]``.

    Each spec runs the height-2 kernel with its own dilation/stride on the
    channel axis; all specs share the same filters.
    """
    x = _as_batch(x)
    if isinstance(pair_specs, PairSpec):
        pair_specs = [pair_specs]
    hop = bank.window_len // 2 if hop is None else hop
    kernel = bank.kernel()
    blocks = []
    for spec in pair_specs:
        pairs = pair_indices(spec)
        if spec.channels != x.shape[1] or pairs[-1][1] > x.shape[1]:
            raise DataError(f"pair spec {spec} does not match a {x.shape[1]}-channel signal")
        out = ops.conv2d(x, kernel, stride=(spec.stride, hop), dilation=(spec.dilation, 1))
        # conv2d gives [B, N, H_out, F]; a count below the fit keeps the first pairs.
        out = ops.getitem(out, (slice(None), slice(None), slice(0, len(pairs))))
        blocks.append(ops.transpose(out, (0, 2, 1, 3)))
    return blocks[0] if len(blocks) == 1 else ops.concat(blocks, axis=1)


# Assembly

def assemble_features(blocks) -> FeatureTensor:
    """Concatenate named ``[B, rows, frames]`` blocks along the feature axis.

    ``blocks`` is a sequence of ``(name, tensor)``; higher-rank blocks are
    flattened into rows. Every block is cut to the shortest frame count.
    """
    blocks = list(blocks)
    if not blocks:
        raise DataError("no feature blocks to assemble")
    flat = []
    for name, t in blocks:
        t = t if isinstance(t, Tensor) else Tensor(t)
        if t.ndim == 2:
            t = ops.reshape(t, (1,) + t.shape)
        if t.ndim > 3:
            t = ops.reshape(t, (t.shape[0], int(np.prod(t.shape[1:-1])), t.shape[-1]))
        flat.append((name, t))
    frames = min(t.shape[-1] for _, t in flat)
    if frames < 1:
        raise DataError("zero frames after aligning feature blocks")
    layout = []
    parts = []
    row = 0
    for name, t in flat:
        if t.shape[-1] != frames:
            t = ops.getitem(t, (Ellipsis, slice(0, frames)))
        layout.append((name, row, row + t.shape[1]))
        row += t.shape[1]
        parts.append(t)
    values = parts[0] if len(parts) == 1 else ops.concat(parts, axis=1)
    return FeatureTensor(values, layout)


# Filter inspection

def sort_filters_by_peak_bin(filters, n_fft: int = 64):
    """Order filters by the FFT bin holding their peak magnitude.

    ``filters`` is ``[N, L]`` (or ``[N, C, L]``, magnitudes averaged over
    channels). Returns ``(permutation, magnitudes[N, n_fft//2 + 1])`` where
    the magnitudes are in original filter order. Ties keep filter order;
    an all-zero filter peaks at bin 0.
    """
    filters = np.asarray(filters, dtype=np.float64)
    mags = np.abs(sig.rdft(filters, n_fft))
    if mags.ndim == 3:
        mags = mags.mean(axis=1)
    peaks = np.argmax(mags, axis=1)
    return np.argsort(peaks, kind="stable"), mags


# Feature dumps

def write_feature_dump(prefix, features: FeatureTensor, meta: dict | None = None) -> tuple[str, str]:
    """Write ``<prefix>.f64`` (raw little-endian values) and ``<prefix>.json`` (layout)."""
    values = np.ascontiguousarray(features.values.value, dtype="<f8")
    bin_path, json_path = f"{prefix}.f64", f"{prefix}.json"
    with open(bin_path, "wb") as fh:
        fh.write(values.tobytes())
    sidecar = {
        "dtype": "float64-le",
        "shape": list(values.shape),
        "axes": ["batch", "feature", "frame"],
        "blocks": [{"name": n, "start": a, "stop": b} for n, a, b in features.layout],
    }
    sidecar.update(meta or {})
    with open(json_path, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    return bin_path, json_path


def read_feature_dump(prefix) -> tuple[np.ndarray, dict]:
    with open(f"{prefix}.json") as fh:
        sidecar = json.load(fh)
    values = np.fromfile(f"{prefix}.f64", dtype="<f8").reshape(sidecar["shape"])
    return values.astype(np.float64), sidecar
