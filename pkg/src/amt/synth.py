"""Additive piano-like synthesis and seeded random corpus generation."""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .audio import DEFAULT_SAMPLE_RATE, AudioBuffer, write_wav
from .midi import NoteEvent, NoteEventList, PitchRange, midi_to_freq, write_midi

log = logging.getLogger(__name__)

PIANO_RANGE = PitchRange()


@dataclass(frozen=True)
class ChordType:
    name: str
    intervals: Tuple[int, ...]

    def __post_init__(self):
        if 0 not in self.intervals or not all(0 <= i <= 12 for i in self.intervals):
            raise ValueError(f"bad intervals for chord {self.name}: {self.intervals}")


CHORDS: Dict[str, ChordType] = {c.name: c for c in [
    ChordType("major", (0, 4, 7)),
    ChordType("minor", (0, 3, 7)),
    ChordType("dom7", (0, 4, 7, 10)),
    ChordType("min7", (0, 3, 7, 10)),
    ChordType("maj7", (0, 4, 7, 11)),
    ChordType("fifth", (0, 7)),
    ChordType("maj6", (0, 4, 7, 9)),
    ChordType("min6", (0, 3, 7, 9)),
    ChordType("dim", (0, 3, 6)),
    ChordType("sus2", (0, 2, 7)),
    ChordType("sus4", (0, 5, 7)),
    ChordType("aug", (0, 4, 8)),
    ChordType("aug7", (0, 4, 8, 10)),
]}


@dataclass(frozen=True)
class SynthParams:
    n_harmonics: int = 8
    tau_ref: float = 1.0
    f_ref: float = 440.0
    alpha: float = 0.7
    attack: float = 0.005
    release: float = 0.05
    master_peak: float = 0.9

    def decay_tau(self, f0: float) -> float:
        """Amplitude decay time constant; higher notes die away faster."""
        return self.tau_ref * (self.f_ref / f0) ** self.alpha


@dataclass(frozen=True)
class SongSpec:
    duration: float = 180.0
    event_dur_choices: Tuple[float, ...] = (0.25, 0.5, 1.0)
    gap: float = 0.0


def chord_pitches(root: int, chord: ChordType, pitch_range: PitchRange = PIANO_RANGE) -> List[int]:
    pitches = sorted(root + i for i in chord.intervals)
    if pitches[0] not in pitch_range or pitches[-1] not in pitch_range:
        raise ValueError(f"{chord.name} on {root} leaves MIDI "
                         f"{pitch_range.low}..{pitch_range.high}")
    return pitches


def render_note(pitch: int, dur: float, params: SynthParams = SynthParams(),
                sr: int = DEFAULT_SAMPLE_RATE, release: float = 0.0) -> np.ndarray:
    """Render one note as decaying harmonics under a linear attack ramp.

    Returns ``round(dur * sr)`` samples. With ``release > 0`` the note keeps
    sounding for another ``round(release * sr)`` samples while a linear ramp
    fades it to zero.
    """
    if not dur > 0:
        raise ValueError(f"note duration must be positive, got {dur}")
    n_body = int(round(dur * sr))
    n_tail = int(round(release * sr))
    t = np.arange(n_body + n_tail) / sr
    f0 = midi_to_freq(pitch)

    wave = np.zeros_like(t)
    for h in range(1, params.n_harmonics + 1):
        if h * f0 >= sr / 2:
            break
        wave += np.sin(2 * np.pi * h * f0 * t) / h

    env = np.exp(-t / params.decay_tau(f0))
    if params.attack > 0:
        env *= np.minimum(t / params.attack, 1.0)
    if n_tail:
        env[n_body:] *= 1.0 - np.arange(1, n_tail + 1) / n_tail
    return wave * env


def render_events(events: NoteEventList, params: SynthParams = SynthParams(),
                  sr: int = DEFAULT_SAMPLE_RATE) -> AudioBuffer:
    notes = []
    length = 0
    for ev in events:
        start = int(round(ev.onset * sr))
        wave = render_note(ev.pitch, ev.offset - ev.onset, params, sr, release=params.release)
        notes.append((start, wave))
        length = max(length, start + wave.size)

    mix = np.zeros(length)
    for start, wave in notes:
        mix[start:start + wave.size] += wave
    peak = np.max(np.abs(mix)) if length else 0.0
    if peak > 0:
        mix *= params.master_peak / peak
    return AudioBuffer(mix, sr)


def event_vocabulary(chords: Sequence[ChordType] = tuple(CHORDS.values()),
                     pitch_range: PitchRange = PIANO_RANGE) -> List[Tuple[int, ...]]:
    """Every single note in range, then every in-range (root, chord) pair."""
    vocab = [(p,) for p in range(pitch_range.low, pitch_range.high + 1)]
    for chord in chords:
        top = max(chord.intervals)
        for root in range(pitch_range.low, pitch_range.high - top + 1):
            vocab.append(tuple(chord_pitches(root, chord, pitch_range)))
    return vocab


def generate_song(spec: SongSpec, chords: Sequence[ChordType] = tuple(CHORDS.values()),
                  seed: int = 0) -> NoteEventList:
    rng = np.random.default_rng(seed)
    vocab = event_vocabulary(chords)
    events = []
    t = 0.0
    while t < spec.duration:
        pitches = vocab[rng.integers(len(vocab))]
        dur = min(float(rng.choice(spec.event_dur_choices)), spec.duration - t)
        events.extend(NoteEvent(p, t, t + dur) for p in pitches)
        t += dur + spec.gap
    return NoteEventList(events)


@dataclass(frozen=True)
class CorpusEntry:
    index: int
    seed: int
    wav: Path
    midi: Path
    duration: float


MANIFEST_NAME = "manifest.tsv"
_MANIFEST_COLUMNS = ["index", "seed", "wav", "midi", "duration"]


def _make_song(index: int, seed: int, spec: SongSpec, params: SynthParams,
               sr: int, out_dir: Path) -> CorpusEntry:
    events = generate_song(spec, seed=seed)
    midi_path = out_dir / f"song_{index}.mid"
    wav_path = out_dir / f"song_{index}.wav"
    midi_path.write_bytes(write_midi(events))
    write_wav(wav_path, render_events(events, params, sr))
    return CorpusEntry(index, seed, wav_path, midi_path, spec.duration)


def generate_corpus(n_songs: int, spec: SongSpec, out_dir, base_seed: int = 0,
                    params: SynthParams = SynthParams(), sr: int = DEFAULT_SAMPLE_RATE,
                    jobs: int = 1) -> List[CorpusEntry]:
    """Write ``song_<i>.mid``/``song_<i>.wav`` pairs plus ``manifest.tsv``.

    Song ``i`` is generated from seed ``base_seed + i``, so any song can be
    regenerated from its manifest row alone.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    args = [(i, base_seed + i, spec, params, sr, out_dir) for i in range(n_songs)]
    if jobs > 1:
        with ProcessPoolExecutor(jobs) as pool:
            entries = list(pool.map(_make_song, *zip(*args)))
    else:
        entries = [_make_song(*a) for a in args]
    write_manifest(out_dir / MANIFEST_NAME, entries)
    log.info("wrote %d songs to %s", n_songs, out_dir)
    return entries


def write_manifest(path, entries: Sequence[CorpusEntry]) -> None:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(_MANIFEST_COLUMNS)
        for e in entries:
            w.writerow([e.index, e.seed, e.wav.name, e.midi.name, repr(float(e.duration))])


def read_manifest(path) -> List[CorpusEntry]:
    """Parse a manifest; relative paths resolve against its directory."""
    path = Path(path)
    entries = []
    with open(path, newline="") as f:
        for row in csv.DictReader(f, delimiter="\t"):
            entries.append(CorpusEntry(int(row["index"]), int(row["seed"]),
                                       path.parent / row["wav"], path.parent / row["midi"],
                                       float(row["duration"])))
    return entries

