"""Command-line pipeline: gen -> extract -> train -> eval, plus transcribe.

Everything a run produces lives under one output directory::

    <out>/corpus/{trainval,test,timing}/   song_<i>.wav, song_<i>.mid, manifest.tsv
    <out>/features/{trainval,test}/        song_<i>.cqtf, .lblf, .kept, index.tsv
    <out>/model/                           checkpoint.amtm, history.csv, split.tsv,
                                           summary.tsv, timing.tsv
    <out>/eval/                            report.tsv, timing.tsv, svg/

Files whose content depends on wall-clock time are kept apart (``timing.tsv``)
so that every other artifact is byte-identical across repeated runs.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, List, Optional

import numpy as np

from . import audio, cqt, evaluation, midi, model, synth

log = logging.getLogger("amt")

TEST_SEED_OFFSET = 1_000_000
TIMING_SEED_OFFSET = 2_000_000


@dataclass
class PipelineConfig:
    # [audio]
    sample_rate: int = 44100
    frame_len: int = 2756
    label_frame_dur: float = 0.0625
    silence_threshold: float = 1e-5
    v2: bool = False
    # [corpus]
    n_trainval: int = 40
    n_test: int = 8
    song_duration: float = 30.0
    event_durations: str = "0.25,0.5,1.0"
    gap: float = 0.0
    timing_song_duration: float = 120.0
    seed: int = 0
    jobs: int = 1
    corpus_dir: str = ""
    # [synth]
    n_harmonics: int = 8
    tau_ref: float = 1.0
    f_ref: float = 440.0
    alpha: float = 0.7
    attack: float = 0.005
    release: float = 0.05
    master_peak: float = 0.9
    # [cqt]
    f_min: float = midi.midi_to_freq(36)
    bins_per_octave: int = 36
    n_bins: int = 216
    # [model]
    conv1_kernel: int = 25
    conv1_filters: int = 32
    conv2_kernel: int = 5
    conv2_filters: int = 64
    pool: int = 3
    hidden: int = 256
    dropout: float = 0.25
    log_gain: float = 1000.0
    # [train]
    split_fraction: float = 0.8
    batch_size: int = 64
    max_epochs: int = 100
    patience: int = 10
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    threshold: float = 0.5

    def __post_init__(self):
        if not 0 < self.split_fraction < 1:
            raise ValueError("split_fraction must be in (0, 1)")

    # derived objects
    @property
    def frame_spec(self) -> audio.FrameSpec:
        return audio.FrameSpec(self.frame_len, self.sample_rate)

    @property
    def song_spec(self) -> synth.SongSpec:
        durs = tuple(float(d) for d in self.event_durations.split(","))
        return synth.SongSpec(self.song_duration, durs, self.gap)

    @property
    def synth_params(self) -> synth.SynthParams:
        return synth.SynthParams(self.n_harmonics, self.tau_ref, self.f_ref, self.alpha,
                                 self.attack, self.release, self.master_peak)

    @property
    def cqt_params(self) -> cqt.CqtParams:
        return cqt.CqtParams(self.f_min, self.bins_per_octave, self.n_bins, self.sample_rate)

    @property
    def architecture(self) -> model.Architecture:
        return model.Architecture(
            self.n_bins, ((self.conv1_kernel, self.conv1_filters),
                          (self.conv2_kernel, self.conv2_filters)),
            self.pool, self.hidden, midi.PitchRange().count, self.dropout, self.log_gain)

    @property
    def train_config(self) -> model.TrainConfig:
        return model.TrainConfig(self.batch_size, self.max_epochs, self.patience, self.threshold,
                                 self.seed, model.AdamConfig(self.lr, self.beta1, self.beta2, self.eps))


SECTIONS = {
    "audio": ["sample_rate", "frame_len", "label_frame_dur", "silence_threshold", "v2"],
    "corpus": ["n_trainval", "n_test", "song_duration", "event_durations", "gap",
               "timing_song_duration", "seed", "jobs", "corpus_dir"],
    "synth": ["n_harmonics", "tau_ref", "f_ref", "alpha", "attack", "release", "master_peak"],
    "cqt": ["f_min", "bins_per_octave", "n_bins"],
    "model": ["conv1_kernel", "conv1_filters", "conv2_kernel", "conv2_filters", "pool",
              "hidden", "dropout", "log_gain"],
    "train": ["split_fraction", "batch_size", "max_epochs", "patience", "lr", "beta1",
              "beta2", "eps", "threshold"],
}

PRESETS = {
    "desk": {},
    "full": {"n_trainval": 830, "n_test": 166, "song_duration": 180.0},
}


def _coerce(name: str, raw: str):
    kind = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}[name]
    if kind in (bool, "bool"):
        lowered = raw.strip().lower()
        if lowered not in ("true", "false", "1", "0", "yes", "no"):
            raise ValueError(f"{name}: expected a boolean, got {raw!r}")
        return lowered in ("true", "1", "yes")
    if kind in (int, "int"):
        return int(raw)
    if kind in (float, "float"):
        return float(raw)
    return raw.strip()


def load_config(path: Optional[Path] = None, preset: str = "desk", **overrides) -> PipelineConfig:
    values = dict(PRESETS[preset])
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path) as f:
            parser.read_file(f)
        for section in parser.sections():
            if section not in SECTIONS:
                raise ValueError(f"{path}: unknown section [{section}]")
            for key, raw in parser.items(section):
                if key not in SECTIONS[section]:
                    raise ValueError(f"{path}: unknown key {key!r} in [{section}]")
                values[key] = _coerce(key, raw)
    values.update({k: v for k, v in overrides.items() if v is not None})
    return PipelineConfig(**values)


def dump_config(config: PipelineConfig) -> str:
    parser = configparser.ConfigParser()
    for section, keys in SECTIONS.items():
        parser[section] = {k: repr(getattr(config, k)) if isinstance(getattr(config, k), float)
                           else str(getattr(config, k)) for k in keys}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


# -- layout -------------------------------------------------------------------

@dataclass(frozen=True)
class Layout:
    out: Path
    config: PipelineConfig

    @property
    def corpus(self) -> Path:
        return Path(self.config.corpus_dir) if self.config.corpus_dir else self.out / "corpus"

    def corpus_split(self, split: str) -> Path:
        return self.corpus / split

    def features(self, split: str) -> Path:
        return self.out / "features" / split

    @property
    def model_dir(self) -> Path:
        return self.out / "model"

    @property
    def checkpoint(self) -> Path:
        return self.model_dir / "checkpoint.amtm"

    @property
    def eval_dir(self) -> Path:
        return self.out / "eval"


def _write_tsv(path: Path, header: List[str], rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def _read_tsv(path: Path) -> List[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f, delimiter="\t"))


# -- gen ------------------------------------------------------------------------

def cmd_gen(config: PipelineConfig, out: Path) -> Layout:
    lay = Layout(Path(out), config)
    spec = config.song_spec
    params = config.synth_params
    kw = dict(params=params, sr=config.sample_rate, jobs=config.jobs)
    synth.generate_corpus(config.n_trainval, spec, lay.corpus_split("trainval"),
                          base_seed=config.seed, **kw)
    synth.generate_corpus(config.n_test, spec, lay.corpus_split("test"),
                          base_seed=config.seed + TEST_SEED_OFFSET, **kw)
    if config.timing_song_duration > 0:
        timing_spec = dataclasses.replace(spec, duration=config.timing_song_duration)
        synth.generate_corpus(1, timing_spec, lay.corpus_split("timing"),
                              base_seed=config.seed + TIMING_SEED_OFFSET, **kw)
    return lay


# -- extract --------------------------------------------------------------------

INDEX_COLUMNS = ["song", "features", "labels", "kept", "audio_frames", "label_frames",
                 "frames", "kept_frames"]


def write_kept(path: Path, kept: audio.FrameIndexSet) -> None:
    with open(path, "w") as f:
        f.write(f"# total={kept.total}\n")
        for i in kept.kept:
            f.write(f"{i}\n")


def read_kept(path: Path) -> audio.FrameIndexSet:
    with open(path) as f:
        header = f.readline().strip()
        if not header.startswith("# total="):
            raise ValueError(f"{path}: missing total header")
        kept = [int(line) for line in f if line.strip()]
    return audio.FrameIndexSet(np.array(kept, dtype=np.int64), int(header.split("=", 1)[1]))


def extract_song(wav: Path, mid: Path, config: PipelineConfig, bank: cqt.KernelBank):
    """Return (features, labels, kept) reconciled to a common frame count."""
    buf = audio.read_wav(wav)
    feats = cqt.cqt_matrix(buf, config.frame_spec, bank)
    events = midi.parse_midi(Path(mid).read_bytes())
    labels = midi.events_to_labels(events, config.label_frame_dur)
    n = min(len(feats), len(labels))
    frames = audio.frame_signal(buf, config.frame_spec)[:n]
    if config.v2:
        kept = audio.filter_silent(frames, config.silence_threshold)
    else:
        kept = audio.FrameIndexSet.all(n)
    return feats, labels, kept, n


def cmd_extract(config: PipelineConfig, out: Path, splits=("trainval", "test")) -> Layout:
    lay = Layout(Path(out), config)
    bank = cqt.build_kernels(config.cqt_params)
    for split in splits:
        manifest = lay.corpus_split(split) / synth.MANIFEST_NAME
        if not manifest.exists():
            raise FileNotFoundError(f"no corpus manifest at {manifest}; run `gen` first")
        dest = lay.features(split)
        dest.mkdir(parents=True, exist_ok=True)
        rows = []
        for entry in synth.read_manifest(manifest):
            feats, labels, kept, n = extract_song(entry.wav, entry.midi, config, bank)
            name = f"song_{entry.index}"
            cqt.write_features(dest / f"{name}.cqtf", feats[:n])
            midi.write_labels(dest / f"{name}.lblf", labels[:n])
            write_kept(dest / f"{name}.kept", kept)
            rows.append([name, f"{name}.cqtf", f"{name}.lblf", f"{name}.kept",
                         len(feats), len(labels), n, len(kept)])
            log.info("%s/%s: %d frames, %d kept", split, name, n, len(kept))
        _write_tsv(dest / "index.tsv", INDEX_COLUMNS, rows)
    return lay


@dataclass
class SongData:
    name: str
    features: np.ndarray
    labels: np.ndarray
    kept: np.ndarray


def load_split(lay: Layout, split: str) -> List[SongData]:
    dest = lay.features(split)
    index = dest / "index.tsv"
    if not index.exists():
        raise FileNotFoundError(f"no dataset index at {index}; run `extract` first")
    songs = []
    for row in _read_tsv(index):
        feats = cqt.read_features(dest / row["features"])
        labels = midi.read_labels(dest / row["labels"])
        kept = read_kept(dest / row["kept"])
        if len(feats) != len(labels) or kept.total != len(labels):
            raise ValueError(f"{row['song']}: feature/label/kept frame counts disagree")
        songs.append(SongData(row["song"], feats, labels, kept.kept))
    return songs


def _stack(songs: List[SongData]):
    x = np.concatenate([s.features[s.kept] for s in songs]) if songs else np.zeros((0, 0))
    y = np.concatenate([s.labels[s.kept] for s in songs]) if songs else np.zeros((0, 0))
    return x, y


# -- train ----------------------------------------------------------------------

def split_songs(n_songs: int, fraction: float, seed: int):
    """Song-level shuffle split; returns (train indices, validation indices)."""
    if n_songs < 2:
        raise ValueError("need at least two songs to split into train and validation")
    n_train = min(max(int(round(fraction * n_songs)), 1), n_songs - 1)
    order = np.random.default_rng(seed).permutation(n_songs)
    return np.sort(order[:n_train]), np.sort(order[n_train:])


def cmd_train(config: PipelineConfig, out: Path):
    lay = Layout(Path(out), config)
    songs = load_split(lay, "trainval")
    tr_idx, va_idx = split_songs(len(songs), config.split_fraction, config.seed)
    train_set = _stack([songs[i] for i in tr_idx])
    val_set = _stack([songs[i] for i in va_idx])
    if len(train_set[0]) == 0 or len(val_set[0]) == 0:
        raise ValueError("empty training or validation split after silence filtering")

    start = time.perf_counter()
    params, history = model.train(train_set, val_set, config.train_config, config.architecture)
    elapsed = time.perf_counter() - start

    lay.model_dir.mkdir(parents=True, exist_ok=True)
    model.save_model(params, lay.checkpoint)
    _write_tsv(lay.model_dir / "split.tsv", ["song", "split"],
               [[songs[i].name, "train"] for i in tr_idx] + [[songs[i].name, "val"] for i in va_idx])
    with open(lay.model_dir / "history.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["epoch", "loss", "train_acc", "val_acc"])
        for rec in history.epochs:
            w.writerow([rec.epoch, repr(rec.loss), repr(rec.train_acc), repr(rec.val_acc)])
    _write_tsv(lay.model_dir / "summary.tsv", ["key", "value"], [
        ["initial_loss", repr(history.initial_loss)],
        ["epochs", len(history)],
        ["best_epoch", history.best_epoch],
        ["best_val_acc", repr(max(r.val_acc for r in history.epochs))],
        ["train_frames", len(train_set[0])],
        ["val_frames", len(val_set[0])],
        ["mode", "v2" if config.v2 else "v1"],
    ])
    _write_tsv(lay.model_dir / "timing.tsv", ["epoch", "seconds"],
               [[r.epoch, f"{r.seconds:.3f}"] for r in history.epochs] + [["total", f"{elapsed:.3f}"]])
    log.info("trained %d epochs in %.1f s; best val acc %.4f at epoch %d", len(history),
             elapsed, max(r.val_acc for r in history.epochs), history.best_epoch)
    return params, history


# -- eval -----------------------------------------------------------------------

Predictor = Callable[[SongData], np.ndarray]


def cmd_eval(config: PipelineConfig, out: Path, checkpoint: Optional[Path] = None,
             svg: bool = False, predictor: Optional[Predictor] = None) -> evaluation.EvalReport:
    """Score the test split. ``predictor`` replaces the model (used for self-checks)."""
    lay = Layout(Path(out), config)
    params = None
    if predictor is None:
        params = model.load_model(checkpoint or lay.checkpoint)

        def predictor(song: SongData) -> np.ndarray:
            return model.predict(params, song.features[song.kept], config.threshold)

    songs = load_split(lay, "test")
    lay.eval_dir.mkdir(parents=True, exist_ok=True)
    if svg:
        (lay.eval_dir / "svg").mkdir(exist_ok=True)
    total = evaluation.EvalReport(0, 0, evaluation.Confusion(*(np.zeros(72, np.int64),) * 3))
    for song in songs:
        pred = predictor(song)
        truth = song.labels[song.kept]
        rep = evaluation.evaluate(pred, truth)
        total.n_samples += rep.n_samples
        total.n_correct += rep.n_correct
        total.confusion = total.confusion + rep.confusion
        total.per_song.append((song.name, rep.n_samples, rep.subset_accuracy))
        if svg:
            evaluation.render_pianoroll(pred, truth, out=lay.eval_dir / "svg" / f"{song.name}.svg",
                                        title=song.name)
    evaluation.write_report(total, lay.eval_dir / "report.tsv")

    timing_rows = []
    timing_wav = lay.corpus_split("timing") / "song_0.wav"
    if params is not None and timing_wav.exists():
        buf = audio.read_wav(timing_wav)
        feats = cqt.cqt_matrix(buf, config.frame_spec, config.cqt_params)
        _, seconds = evaluation.time_inference(params, feats, config.threshold)
        total.inference_seconds = seconds
        timing_rows = [["inference_seconds", f"{seconds:.6f}"],
                       ["inference_song_seconds", f"{buf.duration:.3f}"],
                       ["inference_frames", len(feats)]]
    _write_tsv(lay.eval_dir / "timing.tsv", ["key", "value"], timing_rows)
    log.info("test subset accuracy %.4f over %d frames", total.subset_accuracy, total.n_samples)
    return total


# -- transcribe -----------------------------------------------------------------

def cmd_transcribe(config: PipelineConfig, checkpoint: Path, wav_path: Path, out: Path):
    params = model.load_model(checkpoint)
    buf = audio.read_wav(wav_path)
    feats = cqt.cqt_matrix(buf, config.frame_spec, config.cqt_params)
    labels = model.predict(params, feats, config.threshold)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(wav_path).stem
    midi.write_labels(out / f"{stem}.lblf", labels)
    evaluation.render_pianoroll(labels, out=out / f"{stem}.svg", title=stem)
    return labels


# -- entry point ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value config file with sections")
    common.add_argument("--preset", choices=sorted(PRESETS), default="desk")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory")
    common.add_argument("--seed", type=int, help="master seed (corpus, split, training)")
    common.add_argument("--v2", action="store_true", default=None,
                        help="drop silent frames from training and testing")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="amt", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("extract", parents=[common], help="compute CQT features and labels")
    sub.add_parser("train", parents=[common], help="train the frame-wise CNN")
    p = sub.add_parser("eval", parents=[common], help="score the test corpus")
    p.add_argument("--checkpoint", type=Path)
    p.add_argument("--svg", action="store_true", help="write a piano roll per test song")
    p = sub.add_parser("transcribe", parents=[common], help="transcribe one WAV file")
    p.add_argument("wav", type=Path)
    p.add_argument("--checkpoint", type=Path)
    sub.add_parser("config-dump", parents=[common], help="print the effective configuration")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    config = load_config(args.config, args.preset, seed=args.seed, v2=args.v2)

    if args.command == "config-dump":
        sys.stdout.write(dump_config(config))
    elif args.command == "gen":
        cmd_gen(config, args.out)
    elif args.command == "extract":
        cmd_extract(config, args.out)
    elif args.command == "train":
        cmd_train(config, args.out)
    elif args.command == "eval":
        report = cmd_eval(config, args.out, args.checkpoint, svg=args.svg)
        print(f"subset_accuracy\t{report.subset_accuracy:.6f}")
        print(f"n_samples\t{report.n_samples}")
        if report.inference_seconds == report.inference_seconds:
            print(f"inference_seconds\t{report.inference_seconds:.6f}")
    elif args.command == "transcribe":
        ckpt = args.checkpoint or Layout(args.out, config).checkpoint
        labels = cmd_transcribe(config, ckpt, args.wav, args.out / "transcriptions")
        print(f"frames\t{len(labels)}\nactive_cells\t{int(labels.sum())}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
