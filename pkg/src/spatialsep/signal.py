"""Numeric kernels for multichannel signals.

Everything here works on float64 numpy arrays and is a pure function of its
inputs. Convolutions follow the cross-correlation convention used by learned
filter layers (no kernel flip) with "valid" padding.

The ``*_batched`` kernels carry the extra batch/channel axes needed by the
differentiable layers in :mod:`spatialsep.autodiff`; the unbatched functions
are the plain single-signal forms.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DataError

CANONICAL_RATE = 16000


@dataclass
class MultiChannelSignal:
    """A C x T block of samples at a fixed sample rate."""

    samples: np.ndarray
    sample_rate: int = CANONICAL_RATE

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim == 1:
            samples = samples[None, :]
        if samples.ndim != 2 or samples.shape[0] < 1 or samples.shape[1] < 1:
            raise DataError(f"expected a non-empty C x T matrix, got shape {samples.shape}")
        if int(self.sample_rate) <= 0:
            raise DataError(f"sample rate must be positive, got {self.sample_rate}")
        self.samples = samples
        self.sample_rate = int(self.sample_rate)

    @property
    def num_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def num_samples(self) -> int:
        return self.samples.shape[1]

    def channel(self, index: int) -> np.ndarray:
        return self.samples[index]


def conv_output_len(input_len: int, kernel_len: int, stride: int = 1, dilation: int = 1) -> int:
    """Output length of a valid convolution; raises if it would be empty."""
    if kernel_len < 1:
        raise DataError("empty kernel")
    if stride < 1 or dilation < 1:
        raise DataError(f"stride and dilation must be >= 1 (got {stride}, {dilation})")
    span = dilation * (kernel_len - 1) + 1
    if input_len < span:
        raise DataError(
            f"input of length {input_len} is shorter than the kernel span {span}")
    return (input_len - span) // stride + 1


def num_frames(num_samples: int, window_len: int, hop: int) -> int:
    if hop < 1 or window_len < hop:
        raise DataError(f"need 1 <= hop <= window_len (got hop={hop}, window_len={window_len})")
    if num_samples < window_len:
        raise DataError("signal shorter than window")
    return (num_samples - window_len) // hop + 1


def frame_signal(x, window_len: int, hop: int) -> np.ndarray:
    """Split ``x`` into ``[frames, window_len]`` without padding or windowing.

    Works on the last axis, so a ``[C, T]`` input gives ``[C, frames, L]``.
    """
    x = np.asarray(x, dtype=np.float64)
    n = num_frames(x.shape[-1], window_len, hop)
    frames = sliding_window_view(x, window_len, axis=-1)[..., ::hop, :]
    return frames[..., :n, :]


def _windows(x: np.ndarray, kernel_len: int, stride: int, dilation: int) -> np.ndarray:
    """View of the last axis as ``[..., out_len, kernel_len]`` taps."""
    n_out = conv_output_len(x.shape[-1], kernel_len, stride, dilation)
    span = dilation * (kernel_len - 1) + 1
    win = sliding_window_view(x, span, axis=-1)[..., ::stride, ::dilation]
    return win[..., :n_out, :]


def conv1d(x, k, stride: int = 1, dilation: int = 1) -> np.ndarray:
    """``out[t] = sum_l x[t*stride + l*dilation] * k[l]``."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    if k.ndim != 1 or k.size == 0:
        raise DataError("empty kernel")
    return _windows(x, k.size, stride, dilation) @ k


def conv2d(x, kernels, stride_h: int = 1, stride_w: int = 1,
           dilation_h: int = 1, dilation_w: int = 1) -> np.ndarray:
    """Single-input-plane 2D cross-correlation.

    ``x`` is ``[C, T]`` (rows are signal channels), ``kernels`` is
    ``[N, h, L]``; the result is ``[N, H_out, T_out]``.
    """
    x = np.asarray(x, dtype=np.float64)
    kernels = np.asarray(kernels, dtype=np.float64)
    if kernels.ndim == 2:
        kernels = kernels[None]
    return conv2d_batched(x[None], kernels, stride_h, stride_w, dilation_h, dilation_w)[0]


def transposed_conv1d(coeffs, basis, hop: int) -> np.ndarray:
    """Synthesize frames ``coeffs @ basis`` and overlap-add them at ``hop``.

    ``coeffs`` is ``[frames, N]``, ``basis`` is ``[N, L]``; the output has
    ``(frames - 1) * hop + L`` samples.
    """
    coeffs = np.asarray(coeffs, dtype=np.float64)
    basis = np.asarray(basis, dtype=np.float64)
    if coeffs.size == 0 or basis.size == 0:
        raise DataError("empty input to transposed convolution")
    if coeffs.ndim == 1:
        coeffs = coeffs[:, None]
    if basis.ndim == 1:
        basis = basis[None, :]
    if hop < 1 or hop > basis.shape[-1]:
        raise DataError(f"hop must be in [1, L], got {hop}")
    return overlap_add(coeffs @ basis, hop)


def overlap_add(frames: np.ndarray, hop: int) -> np.ndarray:
    """Overlap-add ``[..., F, L]`` frames into ``[..., (F-1)*hop + L]``."""
    n_frames, length = frames.shape[-2:]
    out = np.zeros(frames.shape[:-2] + ((n_frames - 1) * hop + length,))
    stop = hop * (n_frames - 1) + 1
    # Loop over taps (L is small) rather than frames.
    for l in range(length):
        out[..., l:l + stop:hop] += frames[..., :, l]
    return out


def rdft(frame, n_fft: int) -> np.ndarray:
    """Half-spectrum DFT of a real frame zero-padded to ``n_fft`` points."""
    frame = np.asarray(frame, dtype=np.float64)
    if n_fft < frame.shape[-1]:
        raise DataError(f"n_fft={n_fft} is smaller than the frame length {frame.shape[-1]}")
    return np.fft.rfft(frame, n=n_fft, axis=-1)


# Batched kernels used by the differentiable layers.

def conv1d_batched(x: np.ndarray, w: np.ndarray, stride: int = 1, dilation: int = 1,
                   groups: int = 1) -> np.ndarray:
    """``x [B, Cin, T]`` with ``w [Cout, Cin/groups, K]`` -> ``[B, Cout, T_out]``."""
    b, cin, t = x.shape
    cout, cin_g, k = w.shape
    if cin != cin_g * groups or cout % groups:
        raise DataError(f"channel mismatch: input {cin}, weight {w.shape}, groups {groups}")
    t_out = conv_output_len(t, k, stride, dilation)
    if groups == 1 and k == 1:
        return np.matmul(w[:, :, 0], x[..., ::stride][..., :t_out])
    if groups == cin and cin_g == 1 and cout == cin:
        out = np.zeros((b, cout, t_out))
        stop = stride * (t_out - 1) + 1
        for j in range(k):
            start = j * dilation
            out += w[None, :, 0, j, None] * x[..., start:start + stop:stride]
        return out
    if groups != 1:
        raise DataError("only dense or depthwise grouping is supported")
    cols = _windows(x, k, stride, dilation)                 # [B, Cin, T_out, K]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(b, t_out, cin * k)
    return np.matmul(w.reshape(cout, cin * k), cols.transpose(0, 2, 1))


def conv1d_batched_grad_input(grad: np.ndarray, w: np.ndarray, input_len: int,
                              stride: int = 1, dilation: int = 1, groups: int = 1) -> np.ndarray:
    b, cout, t_out = grad.shape
    _, cin_g, k = w.shape
    cin = cin_g * groups
    out = np.zeros((b, cin, input_len))
    stop = stride * (t_out - 1) + 1
    if groups == 1 and k == 1:
        out[..., 0:stop:stride] = np.matmul(w[:, :, 0].T, grad)
        return out
    if groups == cin and cin_g == 1 and cout == cin:
        for j in range(k):
            start = j * dilation
            out[..., start:start + stop:stride] += w[None, :, 0, j, None] * grad
        return out
    cols = np.matmul(w.reshape(cout, cin * k).T, grad).reshape(b, cin, k, t_out)
    for j in range(k):
        start = j * dilation
        out[..., start:start + stop:stride] += cols[:, :, j]
    return out


def conv1d_batched_grad_weight(grad: np.ndarray, x: np.ndarray, kernel_len: int,
                               stride: int = 1, dilation: int = 1, groups: int = 1) -> np.ndarray:
    b, cout, t_out = grad.shape
    cin = x.shape[1]
    stop = stride * (t_out - 1) + 1
    if groups == 1 and kernel_len == 1:
        xs = x[..., 0:stop:stride]
        return np.matmul(grad, xs.transpose(0, 2, 1)).sum(axis=0)[:, :, None]
    if groups == cin and cout == cin:
        out = np.empty((cout, 1, kernel_len))
        for j in range(kernel_len):
            start = j * dilation
            out[:, 0, j] = (grad * x[..., start:start + stop:stride]).sum(axis=(0, 2))
        return out
    cols = _windows(x, kernel_len, stride, dilation)        # [B, Cin, T_out, K]
    cols = np.ascontiguousarray(cols.transpose(0, 2, 1, 3)).reshape(b * t_out, cin * kernel_len)
    g = grad.transpose(0, 2, 1).reshape(b * t_out, cout)
    return (g.T @ cols).reshape(cout, cin, kernel_len)


def _row_index(height: int, kernel_h: int, stride_h: int, dilation_h: int) -> np.ndarray:
    span = dilation_h * (kernel_h - 1) + 1
    if kernel_h < 1 or height < span:
        raise DataError(
            f"kernel of height {kernel_h} (dilation {dilation_h}) is taller than the "
            f"{height}-row input")
    h_out = (height - span) // stride_h + 1
    return np.arange(h_out)[:, None] * stride_h + np.arange(kernel_h)[None, :] * dilation_h


def _patches2d(x, kernel_shape, stride_h, stride_w, dilation_h, dilation_w):
    """Contiguous ``[B, H_out, W_out, h*L]`` patch matrix."""
    _, kh, kw = kernel_shape
    rows = _row_index(x.shape[1], kh, stride_h, dilation_h)
    patches = _windows(x[:, rows, :], kw, stride_w, dilation_w)   # [B, H_out, h, W_out, L]
    b, h_out, _, w_out, _ = patches.shape
    return np.ascontiguousarray(patches.transpose(0, 1, 3, 2, 4)).reshape(b, h_out, w_out, kh * kw)


def conv2d_batched(x: np.ndarray, kernels: np.ndarray, stride_h: int = 1, stride_w: int = 1,
                   dilation_h: int = 1, dilation_w: int = 1) -> np.ndarray:
    """``x [B, H, W]`` with ``kernels [N, h, L]`` -> ``[B, N, H_out, W_out]``.

    Kernel rows are accumulated one at a time, so swapping two input rows
    under a kernel whose rows are negatives of each other negates the
    output bit for bit.
    """
    _, kh, kw = kernels.shape
    rows = _row_index(x.shape[1], kh, stride_h, dilation_h)
    out = None
    for i in range(kh):
        win = _windows(x[:, rows[:, i], :], kw, stride_w, dilation_w)   # [B, H_out, W_out, L]
        part = win @ kernels[:, i, :].T                                 # [B, H_out, W_out, N]
        out = part if out is None else out + part
    return out.transpose(0, 3, 1, 2)


def conv2d_batched_grad_input(grad: np.ndarray, kernels: np.ndarray, input_shape,
                              stride_h: int = 1, stride_w: int = 1,
                              dilation_h: int = 1, dilation_w: int = 1) -> np.ndarray:
    b, height, width = input_shape
    n, kh, kw = kernels.shape
    rows = _row_index(height, kh, stride_h, dilation_h)
    # [B, H_out, W_out, N] @ [N, h*L] -> per-patch input gradients
    cols = grad.transpose(0, 2, 3, 1) @ kernels.reshape(n, kh * kw)
    cols = cols.reshape(b, rows.shape[0], grad.shape[-1], kh, kw)
    w_out = grad.shape[-1]
    stop = stride_w * (w_out - 1) + 1
    out = np.zeros((b, height, width))
    for r in range(rows.shape[0]):
        for i, row in enumerate(rows[r]):
            for j in range(kw):
                start = j * dilation_w
                out[:, row, start:start + stop:stride_w] += cols[:, r, :, i, j]
    return out


def conv2d_batched_grad_kernels(grad: np.ndarray, x: np.ndarray, kernel_shape,
                                stride_h: int = 1, stride_w: int = 1,
                                dilation_h: int = 1, dilation_w: int = 1) -> np.ndarray:
    n, kh, kw = kernel_shape
    patches = _patches2d(x, kernel_shape, stride_h, stride_w, dilation_h, dilation_w)
    g = grad.transpose(0, 2, 3, 1).reshape(-1, n)
    return (g.T @ patches.reshape(-1, kh * kw)).reshape(n, kh, kw)
