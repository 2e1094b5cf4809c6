"""Constant-Q magnitudes, one vector per audio frame.

Each bin ``k`` correlates a Hann-windowed complex exponential of length
``N_k = ceil(Q * sr / f_k)`` against the signal, centred on the frame
centre. Windows may reach far outside the frame (N_0 is ~34k samples at
the defaults); samples beyond either end of the signal count as zero.

:func:`cqt_direct` evaluates the sum bin by bin and serves as the oracle.
:func:`cqt_fast` groups bins into blocks that share one zero-padded window
length so that all frames of a song are handled by a few matrix products.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Union

import numpy as np

from .audio import AudioBuffer, FrameSpec
from .midi import midi_to_freq

FEATURE_MAGIC = b"CQTF"
FEATURE_VERSION = 1

# rows per matrix product; bounds the window copy to ~ROW_CHUNK * N_0 doubles
ROW_CHUNK = 128


class SampleRateMismatch(ValueError):
    pass


class FeatureFormatError(ValueError):
    pass


@dataclass(frozen=True)
class CqtParams:
    f_min: float = midi_to_freq(36)
    bins_per_octave: int = 36
    n_bins: int = 216
    sample_rate: int = 44100
    max_kernel_len: int = 2 ** 18

    def __post_init__(self):
        if self.freqs[-1] >= self.sample_rate / 2:
            raise ValueError(f"top bin {self.freqs[-1]:.1f} Hz is above Nyquist")

    @property
    def Q(self) -> float:
        return 1.0 / (2.0 ** (1.0 / self.bins_per_octave) - 1.0)

    @property
    def freqs(self) -> np.ndarray:
        return self.f_min * 2.0 ** (np.arange(self.n_bins) / self.bins_per_octave)

    @property
    def lengths(self) -> np.ndarray:
        return np.ceil(self.Q * self.sample_rate / self.freqs).astype(np.int64)


def hann(n: int) -> np.ndarray:
    """Periodic Hann window of length n."""
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def cqt_direct(signal, center: int, params: CqtParams) -> np.ndarray:
    """Reference CQT at one centre sample by explicit summation per bin."""
    x = np.asarray(signal.samples if isinstance(signal, AudioBuffer) else signal, dtype=np.float64)
    Q = params.Q
    out = np.zeros(params.n_bins)
    for k in range(params.n_bins):
        n_k = int(math.ceil(Q * params.sample_rate / (params.f_min * 2.0 ** (k / params.bins_per_octave))))
        start = center - n_k // 2
        seg = np.zeros(n_k)
        lo, hi = max(start, 0), min(start + n_k, x.size)
        if hi > lo:
            seg[lo - start:hi - start] = x[lo:hi]
        n = np.arange(n_k)
        w = 0.5 - 0.5 * np.cos(2.0 * np.pi * n / n_k)
        acc = np.sum(seg * w * np.exp(-2j * np.pi * Q * n / n_k)) / n_k
        out[k] = abs(acc)
    return out


@dataclass
class KernelBank:
    """Kernels grouped into blocks of bins sharing a padded window length.

    ``blocks[i]`` is ``(first_bin, width, kernels)`` where ``kernels`` has
    shape ``(width, 2 * n)``: the real parts of the ``n`` bins in the block
    followed by their imaginary parts, each kernel centred in the window.
    """
    params: CqtParams
    blocks: List[tuple] = field(default_factory=list)

    @property
    def sample_rate(self) -> int:
        return self.params.sample_rate

    @property
    def max_width(self) -> int:
        return max(width for _, width, _ in self.blocks)


def build_kernels(params: CqtParams, block_size: int = 12) -> KernelBank:
    lengths = params.lengths
    if lengths[0] > params.max_kernel_len:
        raise ValueError(f"longest kernel ({lengths[0]} samples) exceeds the cap of "
                         f"{params.max_kernel_len}")
    Q = params.Q
    bank = KernelBank(params)
    for first in range(0, params.n_bins, block_size):
        ks = range(first, min(first + block_size, params.n_bins))
        width = int(lengths[first])
        kern = np.zeros((width, 2 * len(ks)))
        for j, k in enumerate(ks):
            n_k = int(lengths[k])
            off = width // 2 - n_k // 2
            n = np.arange(n_k)
            atom = hann(n_k) * np.exp(-2j * np.pi * Q * n / n_k) / n_k
            kern[off:off + n_k, j] = atom.real
            kern[off:off + n_k, len(ks) + j] = atom.imag
        bank.blocks.append((first, width, kern))
    return bank


def _check_rate(signal, bank: KernelBank) -> np.ndarray:
    if isinstance(signal, AudioBuffer):
        if signal.sample_rate != bank.sample_rate:
            raise SampleRateMismatch(f"signal at {signal.sample_rate} Hz, kernels built for "
                                     f"{bank.sample_rate} Hz")
        return signal.samples
    return np.asarray(signal, dtype=np.float64)


def cqt_frames(signal, centers, bank: KernelBank) -> np.ndarray:
    """CQT magnitudes at many centre samples at once, shape (len(centers), n_bins)."""
    x = _check_rate(signal, bank)
    centers = np.asarray(centers, dtype=np.int64).reshape(-1)
    pad = bank.max_width
    padded = np.concatenate([np.zeros(pad), x, np.zeros(pad)])
    out = np.zeros((centers.size, bank.params.n_bins))
    for first, width, kern in bank.blocks:
        nb = kern.shape[1] // 2
        offsets = np.arange(width)
        for lo in range(0, centers.size, ROW_CHUNK):
            c = centers[lo:lo + ROW_CHUNK]
            starts = c - width // 2 + pad
            windows = padded[starts[:, None] + offsets]
            z = windows @ kern
            out[lo:lo + c.size, first:first + nb] = np.hypot(z[:, :nb], z[:, nb:])
    return out


def cqt_fast(signal, center: int, bank: KernelBank) -> np.ndarray:
    return cqt_frames(signal, [center], bank)[0]


def frame_centers(n_samples: int, spec: FrameSpec) -> np.ndarray:
    n = spec.n_frames(n_samples)
    return np.arange(n) * spec.frame_len + spec.frame_len // 2


def cqt_matrix(buf: AudioBuffer, spec: FrameSpec = FrameSpec(),
               params: Union[CqtParams, KernelBank] = CqtParams()) -> np.ndarray:
    bank = params if isinstance(params, KernelBank) else build_kernels(params)
    if buf.sample_rate != bank.sample_rate:
        raise SampleRateMismatch(f"buffer at {buf.sample_rate} Hz, CQT configured for "
                                 f"{bank.sample_rate} Hz")
    return cqt_frames(buf, frame_centers(len(buf), spec), bank)


def pool_semitones(mags: np.ndarray, bins_per_octave: int = 36) -> np.ndarray:
    """Max over each group of bins_per_octave/12 adjacent bins."""
    per = bins_per_octave // 12
    mags = np.asarray(mags)
    n = mags.shape[-1] // per
    return mags[..., :n * per].reshape(*mags.shape[:-1], n, per).max(axis=-1)


# -- feature files ------------------------------------------------------------

def write_features(path, mags: np.ndarray) -> None:
    mags = np.asarray(mags, dtype="<f4")
    t, n_bins = mags.shape
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC + struct.pack("<III", FEATURE_VERSION, t, n_bins))
        f.write(mags.tobytes())


def read_features(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16 or data[:4] != FEATURE_MAGIC:
        raise FeatureFormatError(f"{path}: not a CQTF feature file")
    version, t, n_bins = struct.unpack_from("<III", data, 4)
    if version != FEATURE_VERSION:
        raise FeatureFormatError(f"{path}: unsupported feature version {version}")
    if len(data) != 16 + 4 * t * n_bins:
        raise FeatureFormatError(f"{path}: expected {t}x{n_bins} values, file is truncated")
    return np.frombuffer(data, dtype="<f4", offset=16).reshape(t, n_bins).copy()
