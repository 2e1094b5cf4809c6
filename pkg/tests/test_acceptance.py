"""End-to-end acceptance checks, one test per criterion.

The desk-scale pipeline runs (v1, v2 and a repeat of v1) are shared through
module fixtures; a full pass takes roughly twenty minutes on one core.
Run with ``pytest -s tests/test_acceptance.py`` to watch the PASS/FAIL lines
as they happen; they are also collected in the terminal summary.
"""

import csv
import math
import time
import xml.etree.ElementTree as ET

import numpy as np
import pytest

from amt import cli
from amt.audio import AudioBuffer, read_wav, write_wav
from amt.cqt import CqtParams, build_kernels, cqt_direct, cqt_fast, cqt_matrix, pool_semitones
from amt.evaluation import confusion_counts, read_report, render_pianoroll, subset_accuracy
from amt.midi import NoteEvent, NoteEventList, parse_midi, write_midi
from amt.model import init_model, load_model, save_model
from amt.synth import render_events

from conftest import finite_difference_error, random_small_instance

pytestmark = pytest.mark.slow


# -- shared desk runs -------------------------------------------------------------

def _pipeline(config, out):
    timings = {}
    start = time.perf_counter()
    if not config.corpus_dir:
        cli.cmd_gen(config, out)
    timings["gen"] = time.perf_counter() - start
    cli.cmd_extract(config, out)
    timings["extract"] = time.perf_counter() - start - timings["gen"]
    cli.cmd_train(config, out)
    timings["train"] = time.perf_counter() - start - timings["gen"] - timings["extract"]
    t0 = time.perf_counter()
    report = cli.cmd_eval(config, out)
    timings["eval"] = time.perf_counter() - t0
    timings["total"] = time.perf_counter() - start
    return report, timings


@pytest.fixture(scope="module")
def desk_v1(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk_v1")
    config = cli.load_config()
    report, timings = _pipeline(config, out)
    return config, out, report, timings


@pytest.fixture(scope="module")
def desk_v2(desk_v1, tmp_path_factory):
    _, v1_out, _, _ = desk_v1
    out = tmp_path_factory.mktemp("desk_v2")
    config = cli.load_config(v2=True, corpus_dir=str(v1_out / "corpus"))
    report, timings = _pipeline(config, out)
    return config, out, report, timings


# -- 1 ------------------------------------------------------------------------------

def test_c01_cqt_oracle_equivalence(acceptance_log):
    start = time.perf_counter()
    params = CqtParams()
    bank = build_kernels(params)
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(100):
        x = rng.uniform(-1, 1, params.sample_rate)
        center = int(rng.integers(0, x.size))
        ref = cqt_direct(x, center, params)
        got = cqt_fast(x, center, bank)
        mask = ref > 1e-9
        worst = max(worst, float(np.max(np.abs(got[mask] - ref[mask]) / ref[mask])))
    elapsed = time.perf_counter() - start
    ok = worst < 1e-6 and elapsed < 120
    acceptance_log(1, "CQT oracle equivalence", ok,
                   f"max rel err {worst:.2e}, {elapsed:.1f} s")
    assert ok


# -- 2 ------------------------------------------------------------------------------

def test_c02_pitch_localization(acceptance_log, kernel_bank):
    misses = []
    for p in range(36, 108):
        buf = render_events(NoteEventList([NoteEvent(p, 0.0, 1.0)]))
        mags = cqt_matrix(buf, params=kernel_bank)
        frame = int(0.5 * buf.sample_rate) // 2756
        if int(np.argmax(pool_semitones(mags[frame]))) != p - 36:
            misses.append(p)
    ok = len(misses) <= 2
    acceptance_log(2, "pitch localization", ok, f"{72 - len(misses)}/72 correct, misses {misses}")
    assert ok


# -- 3 ------------------------------------------------------------------------------

def test_c03_gradient_exactness(acceptance_log):
    start = time.perf_counter()
    errors = [finite_difference_error(*random_small_instance(seed), h=1e-4) for seed in range(5)]
    elapsed = time.perf_counter() - start
    ok = max(errors) < 1e-4 and elapsed < 60
    acceptance_log(3, "gradient exactness", ok, f"max rel err {max(errors):.2e}, {elapsed:.1f} s")
    assert ok


# -- 4 ------------------------------------------------------------------------------

def _brute_subset(pred, truth):
    hits = 0
    for i in range(len(truth)):
        if all(int(pred[i][k]) == int(truth[i][k]) for k in range(len(truth[i]))):
            hits += 1
    return hits / len(truth)


def _brute_counts(pred, truth):
    tp, fp, fn = [0] * 72, [0] * 72, [0] * 72
    for i in range(len(truth)):
        for k in range(72):
            p, t = int(pred[i][k]), int(truth[i][k])
            tp[k] += p and t
            fp[k] += p and not t
            fn[k] += t and not p
    return tp, fp, fn


def _random_pair(rng):
    t = int(rng.integers(1, 40))
    truth = (rng.random((t, 72)) < rng.uniform(0, 0.2)).astype(np.uint8)
    flips = rng.random((t, 72)) < rng.uniform(0, 0.05)
    pred = np.where(flips, 1 - truth, truth).astype(np.uint8)
    return pred, truth


def test_c04_metric_oracle(acceptance_log):
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(50):
        pred, truth = _random_pair(rng)
        c = confusion_counts(pred, truth)
        tp, fp, fn = _brute_counts(pred, truth)
        if (subset_accuracy(pred, truth) != _brute_subset(pred, truth)
                or c.tp.tolist() != tp or c.fp.tolist() != fp or c.fn.tolist() != fn):
            bad += 1
    acceptance_log(4, "metric oracle", bad == 0, f"{50 - bad}/50 pairs exact")
    assert bad == 0


# -- 5 ------------------------------------------------------------------------------

def test_c05_round_trips(acceptance_log, tmp_path):
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, 44100)
    write_wav(tmp_path / "a.wav", AudioBuffer(x))
    wav_err = float(np.max(np.abs(read_wav(tmp_path / "a.wav").samples - x)))

    tick = 0.5 / 480
    # notes on one pitch never overlap, so note-on/note-off pairing is unambiguous
    events, free_at = [], {}
    for _ in range(200):
        pitch = int(rng.integers(36, 108))
        on = free_at.get(pitch, 0.0) + float(rng.uniform(0, 1))
        off = on + float(rng.uniform(0.01, 2))
        free_at[pitch] = off
        events.append(NoteEvent(pitch, on, off, int(rng.integers(1, 128))))
    back = parse_midi(write_midi(NoteEventList(events)))
    key = lambda e: (e.pitch, e.onset, e.offset)
    midi_err = max(max(abs(a.onset - b.onset), abs(a.offset - b.offset))
                   for a, b in zip(sorted(events, key=key), sorted(back.events, key=key)))
    midi_ok = len(back.events) == len(events) and midi_err <= tick + 1e-12

    params = init_model(seed=5)
    save_model(params, tmp_path / "m.amtm")
    loaded = load_model(tmp_path / "m.amtm")
    save_model(loaded, tmp_path / "n.amtm")
    ckpt_ok = ((tmp_path / "m.amtm").read_bytes() == (tmp_path / "n.amtm").read_bytes()
               and all(params[k].tobytes() == loaded[k].tobytes() for k in params.tensors))

    ok = wav_err <= 1 / 32767 and midi_ok and ckpt_ok
    acceptance_log(5, "round trips", ok, f"wav err {wav_err * 32767:.3f}/32767, "
                   f"midi err {midi_err / tick:.3f} ticks, checkpoint identical {ckpt_ok}")
    assert ok


# -- 6 ------------------------------------------------------------------------------

def _silent_baseline(config, out):
    songs = cli.load_split(cli.Layout(out, config), "test")
    rows = np.concatenate([s.labels[s.kept] for s in songs])
    return float(np.mean(rows.sum(axis=1) == 0))


def test_c06_desk_training(acceptance_log, desk_v1):
    config, out, report, timings = desk_v1
    summary = dict(r.values() for r in cli._read_tsv(out / "model" / "summary.tsv"))
    val_acc = float(summary["best_val_acc"])
    baseline = _silent_baseline(config, out)
    test_acc = report.subset_accuracy
    ok = val_acc >= 0.80 and test_acc >= baseline + 0.30 and timings["total"] < 45 * 60
    acceptance_log(6, "desk-scale training", ok,
                   f"val {val_acc:.4f}, test {test_acc:.4f}, silent baseline {baseline:.4f}, "
                   f"{summary['epochs']} epochs, {timings['total'] / 60:.1f} min")
    assert ok


# -- 7 ------------------------------------------------------------------------------

def test_c07_v2_not_worse(acceptance_log, desk_v1, desk_v2):
    v1 = desk_v1[2].subset_accuracy
    v2 = desk_v2[2].subset_accuracy
    dropped = desk_v1[2].n_samples - desk_v2[2].n_samples
    ok = v2 >= v1
    acceptance_log(7, "v1/v2 direction", ok,
                   f"v1 {v1:.4f}, v2 {v2:.4f}, {dropped} silent test frames dropped")
    assert ok


# -- 8 ------------------------------------------------------------------------------

def test_c08_training_curve(acceptance_log, desk_v1):
    _, out, _, _ = desk_v1
    summary = dict(r.values() for r in cli._read_tsv(out / "model" / "summary.tsv"))
    with open(out / "model" / "history.csv", newline="") as f:
        losses = np.array([float(r["loss"]) for r in csv.DictReader(f)])
    initial = float(summary["initial_loss"])
    smooth = np.convolve(losses, np.ones(3) / 3, mode="valid")
    window_ok = all(smooth[t + 10] <= smooth[t] for t in range(len(smooth) - 10))
    start_ok = abs(initial - math.log(2)) <= 0.15
    ok = start_ok and window_ok
    rises = int(np.sum(np.diff(smooth) > 0))
    acceptance_log(8, "training-curve shape", ok,
                   f"loss at initialization {initial:.4f}, first-epoch mean {losses[0]:.4f}, "
                   f"{len(smooth)} smoothed points, {rises} single-step rises")
    assert ok


# -- 9 ------------------------------------------------------------------------------

def test_c09_pianoroll_counts(acceptance_log):
    rng = np.random.default_rng(9)
    bad = 0
    for _ in range(20):
        pred, truth = _random_pair(rng)
        root = ET.fromstring(render_pianoroll(pred, truth))
        counts = {}
        for g in root.iter("{http://www.w3.org/2000/svg}g"):
            if g.get("class"):
                counts[g.get("class")] = len(g.findall("{http://www.w3.org/2000/svg}rect"))
        c = confusion_counts(pred, truth)
        if counts != {"tp": c.tp.sum(), "fn": c.fn.sum(), "fp": c.fp.sum()}:
            bad += 1
    acceptance_log(9, "piano-roll consistency", bad == 0, f"{20 - bad}/20 pairs exact")
    assert bad == 0


# -- 10 -----------------------------------------------------------------------------

def test_c10_inference_timing(acceptance_log, desk_v1):
    _, out, report, timings = desk_v1
    rows = dict(r.values() for r in cli._read_tsv(out / "eval" / "timing.tsv"))
    song_s = float(rows["inference_song_seconds"])
    ok = song_s >= 120 and math.isfinite(report.inference_seconds) and timings["eval"] < 10
    acceptance_log(10, "inference timing", ok,
                   f"{float(rows['inference_seconds']) * 1000:.0f} ms for {song_s:.2f} s of audio, "
                   f"cmd_eval {timings['eval']:.1f} s")
    assert ok


# -- 11 -----------------------------------------------------------------------------

def test_c11_end_to_end_determinism(acceptance_log, desk_v1, tmp_path_factory):
    config, out, _, _ = desk_v1
    again = tmp_path_factory.mktemp("desk_v1_again")
    _pipeline(config, again)
    same = {name: (out / name).read_bytes() == (again / name).read_bytes()
            for name in ("model/history.csv", "eval/report.tsv")}
    ok = all(same.values())
    acceptance_log(11, "end-to-end determinism", ok,
                   ", ".join(f"{k} {'identical' if v else 'differs'}" for k, v in same.items()))
    assert ok
