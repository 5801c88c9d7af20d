"""RIFF/WAVE reading and writing.

Reads PCM-16 and IEEE float-32 (plain or WAVE_FORMAT_EXTENSIBLE) with any
channel count, writes float-32. The stdlib ``wave`` module has no float
support, hence the small hand-rolled chunk parser.
"""
from __future__ import annotations

import os
import struct

import numpy as np

from .errors import DataError
from .signal import MultiChannelSignal

_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavError(DataError):
    pass


def _chunks(data: bytes):
    pos = 12
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise WavError(f"malformed WAV: chunk {cid!r} truncated")
        yield cid, body
        pos += 8 + size + (size & 1)


def read_wav(path) -> MultiChannelSignal:
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavError(f"malformed WAV: {os.fspath(path)} has no RIFF/WAVE header")

    fmt = None
    payload = None
    for cid, body in _chunks(data):
        if cid == b"fmt ":
            if len(body) < 16:
                raise WavError("malformed WAV: short fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
            if fmt[0] == _EXTENSIBLE:
                if len(body) < 26:
                    raise WavError("malformed WAV: short extensible fmt chunk")
                sub = struct.unpack_from("<H", body, 24)[0]
                fmt = (sub,) + fmt[1:]
        elif cid == b"data":
            payload = body
    if fmt is None or payload is None:
        raise WavError("malformed WAV: missing fmt or data chunk")

    codec, channels, rate, _, block_align, bits = fmt
    if channels < 1 or rate < 1:
        raise WavError("malformed WAV: bad channel count or sample rate")
    if codec == _PCM and bits == 16:
        dtype, scale = np.dtype("<i2"), 1.0 / 32768.0
    elif codec == _FLOAT and bits == 32:
        dtype, scale = np.dtype("<f4"), 1.0
    else:
        raise WavError(f"unsupported codec: format {codec} with {bits} bits")
    if not payload:
        raise WavError("zero-length data chunk")
    frame_bytes = channels * dtype.itemsize
    n = len(payload) // frame_bytes
    if n == 0:
        raise WavError("malformed WAV: data chunk smaller than one frame")
    samples = np.frombuffer(payload[:n * frame_bytes], dtype=dtype).reshape(n, channels)
    return MultiChannelSignal(samples.T.astype(np.float64) * scale, rate)


def write_wav(path, signal: MultiChannelSignal) -> None:
    """Write ``signal`` as little-endian IEEE float-32."""
    samples = np.ascontiguousarray(signal.samples.T, dtype="<f4")
    channels = signal.num_channels
    payload = samples.tobytes()
    fmt = struct.pack("<HHIIHH", _FLOAT, channels, signal.sample_rate,
                      signal.sample_rate * channels * 4, channels * 4, 32)
    header = b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(payload)) + b"WAVE"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        fh.write(b"data" + struct.pack("<I", len(payload)) + payload)


def write_pcm16(path, signal: MultiChannelSignal) -> None:
    """Write ``signal`` as clipped 16-bit PCM (used for test fixtures)."""
    ints = np.clip(np.round(signal.samples.T * 32768.0), -32768, 32767).astype("<i2")
    payload = ints.tobytes()
    channels = signal.num_channels
    fmt = struct.pack("<HHIIHH", _PCM, channels, signal.sample_rate,
                      signal.sample_rate * channels * 2, channels * 2, 16)
    with open(path, "wb") as fh:
        fh.write(b"RIFF" + struct.pack("<I", 4 + 8 + len(fmt) + 8 + len(payload)) + b"WAVE")
        fh.write(b"fmt " + struct.pack("<I", len(fmt)) + fmt)
        fh.write(b"data" + struct.pack("<I", len(payload)) + payload)
