"""WAV I/O, fixed-length framing and silent-frame detection.

Only canonical PCM16 mono RIFF/WAVE files are handled. Samples live in
memory as float64 in [-1, 1].
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from os import PathLike
from typing import Sequence, Union

import numpy as np

DEFAULT_SAMPLE_RATE = 44100
DEFAULT_FRAME_LEN = 2756
SILENCE_THRESHOLD = 1e-5

PCM_SCALE = 32767

_PathLike = Union[str, PathLike]


class WavError(ValueError):
    """Base class for WAV decoding problems."""


class WavHeaderError(WavError):
    """Missing, malformed or truncated RIFF structure."""


class WavFormatError(WavError):
    """The fmt chunk declares a format code other than integer PCM."""


class WavLayoutError(WavError):
    """Channel count or bit depth we do not read."""


@dataclass
class AudioBuffer:
    samples: np.ndarray
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1)
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples.size and np.max(np.abs(self.samples)) > 1.0:
            raise ValueError("samples must lie in [-1, 1]")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class FrameSpec:
    frame_len: int = DEFAULT_FRAME_LEN
    sample_rate: int = DEFAULT_SAMPLE_RATE

    def __post_init__(self):
        if self.frame_len < 1:
            raise ValueError("frame_len must be >= 1")

    @property
    def frame_dur(self) -> float:
        return self.frame_len / self.sample_rate

    def n_frames(self, n_samples: int) -> int:
        return -(-n_samples // self.frame_len)


@dataclass
class FrameIndexSet:
    kept: np.ndarray
    total: int

    def __post_init__(self):
        self.kept = np.asarray(self.kept, dtype=np.int64).reshape(-1)
        if self.kept.size:
            if self.kept[0] < 0 or self.kept[-1] >= self.total:
                raise ValueError("kept indices out of range")
            if np.any(np.diff(self.kept) <= 0):
                raise ValueError("kept indices must be strictly increasing")

    @classmethod
    def all(cls, total: int) -> "FrameIndexSet":
        return cls(np.arange(total), total)

    def __len__(self) -> int:
        return self.kept.size


def read_wav(path: _PathLike) -> AudioBuffer:
    """Read a 16-bit PCM mono WAV file.

    Sample values are mapped back with the same 32767 scale that
    :func:`write_wav` uses, so a written buffer reads back unchanged up to
    quantization. The one code without a positive twin, -32768, is clamped
    to -1.0.
    """
    with open(path, "rb") as f:
        data = f.read()

    if len(data) < 12:
        raise WavHeaderError(f"{path}: file too short for a RIFF header")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise WavHeaderError(f"{path}: not a RIFF/WAVE file")

    fmt = None
    pcm = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id, size = struct.unpack_from("<4sI", data, pos)
        body = pos + 8
        if chunk_id == b"fmt ":
            if size < 16 or body + 16 > len(data):
                raise WavHeaderError(f"{path}: truncated fmt chunk")
            fmt = struct.unpack_from("<HHIIHH", data, body)
        elif chunk_id == b"data":
            if body + size > len(data):
                raise WavHeaderError(f"{path}: data chunk truncated "
                                     f"({len(data) - body} of {size} bytes)")
            pcm = data[body:body + size]
            break
        pos = body + size + (size & 1)

    if fmt is None:
        raise WavHeaderError(f"{path}: no fmt chunk")
    if pcm is None:
        raise WavHeaderError(f"{path}: no data chunk")

    audio_format, channels, sample_rate, _, _, bits = fmt
    if audio_format != 1:
        raise WavFormatError(f"{path}: format code {audio_format} is not PCM")
    if channels != 1:
        raise WavLayoutError(f"{path}: {channels} channels, only mono is supported")
    if bits != 16:
        raise WavLayoutError(f"{path}: {bits}-bit samples, only 16-bit is supported")
    if sample_rate == 0:
        raise WavHeaderError(f"{path}: zero sample rate")

    codes = np.frombuffer(pcm[:len(pcm) // 2 * 2], dtype="<i2")
    samples = np.maximum(codes.astype(np.float64) / PCM_SCALE, -1.0)
    return AudioBuffer(samples, sample_rate)


def encode_pcm16(samples: np.ndarray) -> np.ndarray:
    codes = np.round(np.asarray(samples, dtype=np.float64) * PCM_SCALE)
    return np.clip(codes, -32768, 32767).astype("<i2")


def write_wav(path: _PathLike, buf: AudioBuffer) -> None:
    pcm = encode_pcm16(buf.samples).tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, 1, 1, buf.sample_rate, buf.sample_rate * 2, 2, 16,
        b"data", len(pcm),
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(pcm)


def frame_signal(buf: Union[AudioBuffer, np.ndarray], spec: FrameSpec = FrameSpec()) -> np.ndarray:
    """Cut the signal into non-overlapping frames, zero-padding the last one.

    Returns an array of shape ``(ceil(n / frame_len), frame_len)``.
    """
    samples = buf.samples if isinstance(buf, AudioBuffer) else np.asarray(buf, dtype=np.float64)
    n_frames = spec.n_frames(samples.size)
    out = np.zeros(n_frames * spec.frame_len, dtype=np.float64)
    out[:samples.size] = samples
    return out.reshape(n_frames, spec.frame_len)


def frame_std(frame: Sequence[float]) -> float:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.size == 0:
        raise ValueError("frame_std of an empty frame")
    return float(np.std(frame))


def filter_silent(frames: Sequence[Sequence[float]], threshold: float = SILENCE_THRESHOLD) -> FrameIndexSet:
    """Keep the frames whose standard deviation is not below ``threshold``."""
    if threshold < 0 or math.isnan(threshold):
        raise ValueError("threshold must be nonnegative")
    frames = np.asarray(frames, dtype=np.float64)
    if frames.size == 0:
        return FrameIndexSet(np.zeros(0, dtype=np.int64), len(frames))
    stds = np.std(frames, axis=1)
    return FrameIndexSet(np.flatnonzero(stds >= threshold), frames.shape[0])
