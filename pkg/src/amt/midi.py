"""Standard MIDI File reading/writing and frame-aligned pitch labels."""

from __future__ import annotations

import bisect
import logging
import math
import struct
from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Iterable, List, Tuple

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_TPQ = 480
DEFAULT_TEMPO = 500000  # us per quarter, 120 BPM


class MidiError(ValueError):
    pass


class MidiHeaderError(MidiError):
    """Bad MThd/MTrk magic or malformed header."""


class MidiTruncatedError(MidiError):
    """Data ended in the middle of a chunk, event or variable-length quantity."""


class MidiDivisionError(MidiError):
    """SMPTE time division, which we do not support."""


def midi_to_freq(pitch):
    """Equal-tempered frequency in Hz, A4 (69) = 440 Hz. Accepts scalars or arrays."""
    p = np.asarray(pitch)
    if np.any(p < 0) or np.any(p > 127):
        raise ValueError(f"MIDI pitch out of range: {pitch}")
    f = 440.0 * 2.0 ** ((p - 69) / 12.0)
    return float(f) if np.ndim(f) == 0 else f


@dataclass(frozen=True)
class NoteEvent:
    pitch: int
    onset: float
    offset: float
    velocity: int = 100

    def __post_init__(self):
        if not 0 <= self.pitch <= 127:
            raise ValueError(f"pitch {self.pitch} outside [0, 127]")
        if self.onset < 0 or not self.offset > self.onset:
            raise ValueError(f"bad interval [{self.onset}, {self.offset})")
        if not 1 <= self.velocity <= 127:
            raise ValueError(f"velocity {self.velocity} outside [1, 127]")


@dataclass
class NoteEventList:
    events: List[NoteEvent] = field(default_factory=list)
    ticks_per_quarter: int = DEFAULT_TPQ
    tempo_us_per_quarter: int = DEFAULT_TEMPO

    def __post_init__(self):
        self.events = sorted(self.events, key=lambda e: (e.onset, e.pitch, e.offset))

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self):
        return iter(self.events)


@dataclass(frozen=True)
class PitchRange:
    low: int = 36
    count: int = 72

    def __post_init__(self):
        if self.low < 0 or self.count < 1 or self.low + self.count - 1 > 127:
            raise ValueError(f"invalid pitch range low={self.low} count={self.count}")

    @property
    def high(self) -> int:
        return self.low + self.count - 1

    def __contains__(self, pitch: int) -> bool:
        return self.low <= pitch <= self.high

    def bin(self, pitch: int) -> int:
        return pitch - self.low


# -- variable-length quantities ------------------------------------------------

def encode_vlq(value: int) -> bytes:
    if value < 0:
        raise ValueError("VLQ must be nonnegative")
    out = [value & 0x7F]
    value >>= 7
    while value:
        out.append(0x80 | (value & 0x7F))
        value >>= 7
    return bytes(reversed(out))


def decode_vlq(data: bytes, pos: int, end: int = None) -> Tuple[int, int]:
    """Return (value, new position)."""
    end = len(data) if end is None else end
    value = 0
    for i in range(4):
        if pos >= end:
            raise MidiTruncatedError("truncated variable-length quantity")
        b = data[pos]
        pos += 1
        value = (value << 7) | (b & 0x7F)
        if not b & 0x80:
            return value, pos
    raise MidiError("variable-length quantity longer than 4 bytes")


# -- parsing ------------------------------------------------------------------

def _read_track(data: bytes, pos: int, end: int):
    """Yield (abs_tick, kind, payload) for one MTrk body.

    kind is 'on', 'off' (payload = (channel, pitch, velocity)) or 'tempo'
    (payload = us per quarter) or 'eot'.
    """
    tick = 0
    status = None
    while pos < end:
        delta, pos = decode_vlq(data, pos, end)
        tick += delta
        if pos >= end:
            raise MidiTruncatedError("event missing after delta time")
        b = data[pos]
        if b == 0xFF:
            if pos + 2 > end:
                raise MidiTruncatedError("truncated meta event")
            mtype = data[pos + 1]
            length, pos = decode_vlq(data, pos + 2, end)
            if pos + length > end:
                raise MidiTruncatedError("truncated meta event")
            body = data[pos:pos + length]
            pos += length
            if mtype == 0x51 and length == 3:
                yield tick, "tempo", int.from_bytes(body, "big")
            elif mtype == 0x2F:
                yield tick, "eot", None
                return
            continue
        if b in (0xF0, 0xF7):
            length, pos = decode_vlq(data, pos + 1, end)
            pos += length
            if pos > end:
                raise MidiTruncatedError("truncated sysex event")
            continue
        if b & 0x80:
            status = b
            pos += 1
        elif status is None:
            raise MidiError("running status without a preceding status byte")
        kind = status & 0xF0
        n_data = 1 if kind in (0xC0, 0xD0) else 2
        if pos + n_data > end:
            raise MidiTruncatedError("truncated channel event")
        args = data[pos:pos + n_data]
        pos += n_data
        channel = status & 0x0F
        if kind == 0x90 and args[1] > 0:
            yield tick, "on", (channel, args[0], args[1])
        elif kind == 0x80 or kind == 0x90:
            yield tick, "off", (channel, args[0], 0)
    yield tick, "eot", None


class _TempoMap:
    def __init__(self, changes: Iterable[Tuple[int, int]], tpq: int):
        self.tpq = tpq
        merged = {0: DEFAULT_TEMPO}
        for tick, tempo in sorted(changes, key=lambda c: c[0]):
            merged[tick] = tempo
        self.ticks = sorted(merged)
        self.tempos = [merged[t] for t in self.ticks]
        # elapsed microseconds * tpq at each change point, kept integral
        self.elapsed = [0]
        for i in range(1, len(self.ticks)):
            span = self.ticks[i] - self.ticks[i - 1]
            self.elapsed.append(self.elapsed[-1] + span * self.tempos[i - 1])

    def seconds(self, tick: int) -> float:
        i = bisect.bisect_right(self.ticks, tick) - 1
        scaled = self.elapsed[i] + (tick - self.ticks[i]) * self.tempos[i]
        return scaled / (self.tpq * 1e6)


def parse_midi(data: bytes) -> NoteEventList:
    if data[:4] != b"MThd":
        raise MidiHeaderError(f"bad header magic {bytes(data[:4])!r}")
    if len(data) < 14:
        raise MidiTruncatedError("file shorter than an MThd chunk")
    hlen, fmt, ntracks, division = struct.unpack_from(">IHHH", data, 4)
    if hlen < 6:
        raise MidiHeaderError("MThd chunk too short")
    if fmt not in (0, 1):
        raise MidiHeaderError(f"unsupported SMF format {fmt}")
    if division & 0x8000:
        raise MidiDivisionError("SMPTE time division is not supported")
    if division == 0:
        raise MidiHeaderError("zero ticks per quarter")

    pos = 8 + hlen
    tempo_changes = []
    notes = []  # (start_tick, end_tick, pitch, velocity)
    for _ in range(ntracks):
        if pos + 8 > len(data):
            raise MidiTruncatedError("missing track chunk")
        if data[pos:pos + 4] != b"MTrk":
            raise MidiHeaderError(f"bad track magic {data[pos:pos + 4]!r}")
        (tlen,) = struct.unpack_from(">I", data, pos + 4)
        start = pos + 8
        end = start + tlen
        if end > len(data):
            raise MidiTruncatedError("track chunk extends past end of file")

        active = defaultdict(deque)
        last_tick = 0
        for tick, kind, payload in _read_track(data, start, end):
            last_tick = tick
            if kind == "tempo":
                tempo_changes.append((tick, payload))
            elif kind == "on":
                channel, pitch, vel = payload
                active[channel, pitch].append((tick, vel))
            elif kind == "off":
                channel, pitch, _ = payload
                queue = active.get((channel, pitch))
                if queue:
                    on_tick, vel = queue.popleft()
                    notes.append((on_tick, tick, pitch, vel))
        for (channel, pitch), queue in active.items():
            for on_tick, vel in queue:
                notes.append((on_tick, last_tick, pitch, vel))
        pos = end

    tmap = _TempoMap(tempo_changes, division)
    events = []
    for on_tick, off_tick, pitch, vel in notes:
        if off_tick <= on_tick:
            continue
        events.append(NoteEvent(pitch, tmap.seconds(on_tick), tmap.seconds(off_tick), vel))
    first_tempo = min(tempo_changes)[1] if tempo_changes else DEFAULT_TEMPO
    return NoteEventList(events, ticks_per_quarter=division, tempo_us_per_quarter=first_tempo)


# -- writing ------------------------------------------------------------------

def write_midi(events: NoteEventList) -> bytes:
    """Encode as SMF format 0 with 480 ticks/quarter at a fixed 120 BPM."""
    ticks_per_second = DEFAULT_TPQ * 1e6 / DEFAULT_TEMPO
    messages = []
    for ev in events:
        on = int(round(ev.onset * ticks_per_second))
        off = max(int(round(ev.offset * ticks_per_second)), on + 1)
        # offs sort before ons at the same tick so repeated notes stay distinct
        messages.append((on, 1, ev.pitch, bytes([0x90, ev.pitch, ev.velocity])))
        messages.append((off, 0, ev.pitch, bytes([0x80, ev.pitch, 0])))
    messages.sort(key=lambda m: m[:3])

    track = bytearray()
    track += b"\x00\xFF\x51\x03" + DEFAULT_TEMPO.to_bytes(3, "big")
    now = 0
    for tick, _, _, msg in messages:
        track += encode_vlq(tick - now) + msg
        now = tick
    track += b"\x00\xFF\x2F\x00"

    header = b"MThd" + struct.pack(">IHHH", 6, 0, 1, DEFAULT_TPQ)
    return header + b"MTrk" + struct.pack(">I", len(track)) + bytes(track)


# -- labels -------------------------------------------------------------------

def song_duration(events: NoteEventList) -> float:
    return max((e.offset for e in events), default=0.0)


def n_label_frames(duration: float, frame_dur: float) -> int:
    return int(math.ceil(duration / frame_dur)) if duration > 0 else 0


def events_to_labels(events: NoteEventList, frame_dur: float,
                     pitch_range: PitchRange = PitchRange()) -> np.ndarray:
    """Binary (T, count) piano roll; a note marks every frame it overlaps at all."""
    if frame_dur <= 0:
        raise ValueError("frame_dur must be positive")
    n_frames = n_label_frames(song_duration(events), frame_dur)
    labels = np.zeros((n_frames, pitch_range.count), dtype=np.uint8)
    dropped = 0
    for ev in events:
        if ev.pitch not in pitch_range:
            dropped += 1
            continue
        first = int(math.floor(ev.onset / frame_dur))
        # frame t overlaps [onset, offset) iff t*fd < offset and (t+1)*fd > onset
        last = int(math.ceil(ev.offset / frame_dur)) - 1
        if (first + 1) * frame_dur <= ev.onset:
            first += 1
        labels[first:min(last, n_frames - 1) + 1, pitch_range.bin(ev.pitch)] = 1
    if dropped:
        log.warning("dropped %d note events outside MIDI %d..%d",
                    dropped, pitch_range.low, pitch_range.high)
    return labels


# -- label files --------------------------------------------------------------

LABEL_MAGIC = b"LBLF"


class LabelFormatError(ValueError):
    pass


def write_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    if labels.ndim != 2 or labels.shape[1] != PitchRange().count:
        raise ValueError(f"label matrix must be (T, {PitchRange().count}), got {labels.shape}")
    with open(path, "wb") as f:
        f.write(LABEL_MAGIC + struct.pack("<I", labels.shape[0]))
        f.write(labels.tobytes())


def read_labels(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < 8 or data[:4] != LABEL_MAGIC:
        raise LabelFormatError(f"{path}: not an LBLF label file")
    (n_frames,) = struct.unpack_from("<I", data, 4)
    width = PitchRange().count
    if len(data) != 8 + n_frames * width:
        raise LabelFormatError(f"{path}: expected {n_frames} rows of {width} bytes")
    labels = np.frombuffer(data, dtype=np.uint8, offset=8).reshape(n_frames, width).copy()
    if labels.max(initial=0) > 1:
        raise LabelFormatError(f"{path}: label values must be 0 or 1")
    return labels
