import numpy as np
import pytest

from amt.audio import FrameSpec
from amt.cqt import CqtParams, build_kernels, cqt_matrix
from amt.midi import events_to_labels
from amt.synth import SongSpec, generate_song, render_events

SMALL_ARCH_KW = dict(n_input=20, convs=((5, 2), (3, 2)), hidden=8)


@pytest.fixture(scope="session")
def kernel_bank():
    return build_kernels(CqtParams())


def song_frames(bank, seed, duration, chords=None):
    """(features, labels) for one synthetic song, reconciled to equal length."""
    kw = {} if chords is None else {"chords": chords}
    events = generate_song(SongSpec(duration=duration), seed=seed, **kw)
    feats = cqt_matrix(render_events(events), FrameSpec(), bank).astype(np.float32)
    labels = events_to_labels(events, 0.0625)
    n = min(len(feats), len(labels))
    return feats[:n], labels[:n]


def finite_difference_error(params, x, y, h=1e-4):
    """Max relative error between backprop and central differences over all parameters."""
    from amt.model import bce_loss, forward, loss_and_grads
    _, _, grads = loss_and_grads(params, x, y)
    worst = 0.0
    for name, tensor in params.tensors.items():
        for idx in np.ndindex(tensor.shape):
            old = tensor[idx]
            tensor[idx] = old + h
            up = bce_loss(forward(params, x), y)
            tensor[idx] = old - h
            down = bce_loss(forward(params, x), y)
            tensor[idx] = old
            fd = (up - down) / (2 * h)
            g = grads[name][idx]
            worst = max(worst, abs(g - fd) / (abs(g) + abs(fd) + 1e-8))
    return worst


def random_small_instance(seed, batch=4):
    from amt.model import Architecture, init_model
    rng = np.random.default_rng(seed)
    params = init_model(Architecture(**SMALL_ARCH_KW), seed, dtype=np.float64)
    for name, t in params.tensors.items():
        if name.endswith(".b"):  # nonzero biases keep units away from ReLU kinks
            params.tensors[name] = rng.normal(0, 0.1, t.shape)
    x = rng.uniform(0, 0.01, (batch, 20))
    y = (rng.random((batch, 72)) < 0.1).astype(np.float64)
    return params, x, y


# -- acceptance summary ---------------------------------------------------------

_ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_log():
    """Callable recording one PASS/FAIL line per acceptance criterion."""
    def record(number, name, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}" + (f"  [{detail}]" if detail else "")
        _ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
