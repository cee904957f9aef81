import logging
import sys
import warnings

import numpy as np
import pytest

from conjnet.errors import ClampWarning, LabelWarning
from conjnet.models import DelayModel, make_model
from conjnet.pipeline import prepare_for_grid
from conjnet.synth import SynthConfig, generate_trial
from conjnet.tracks import TRACK_COLUMNS, parse_tracks

HEADER = ",".join(TRACK_COLUMNS)


def row(frame, cid, parent="", typ="R", rfp=None, x=0.0, y=0.0, half_len=1.0, half_wid=0.5, angle=0.0):
    if rfp is None:
        rfp = 0 if typ == "R" else 1
    return f"{frame},{cid},{parent},{typ},{rfp},{x},{y},{half_len},{half_wid},{angle}"


def persist(cid, frames, typ="R", x=0.0, y=0.0, first_parent="", types=None, **kw):
    """Rows for one cell seen in every frame of ``frames`` (its own parent after the first)."""
    out = []
    for i, f in enumerate(frames):
        t = types[i] if types is not None else typ
        out.append(row(f, cid, first_parent if i == 0 else cid, t, x=x, y=y, **kw))
    return out


def make_trial(rows, trial_id="t", dt=5.0):
    return parse_tracks("\n".join([HEADER, *rows]) + "\n", trial_id=trial_id, frame_interval_min=dt)


def small_model(i):
    """Short-delay models that fit the few-frame instances below."""
    return make_model("Edge" if i % 2 else "Base", (5, 20), (5, 15 + 5 * (i % 3)))


def small_instance(seed):
    """A tiny random synthetic trial and a model for it."""
    rng = np.random.default_rng(seed)
    cfg = SynthConfig(seed=seed, n_donors=int(rng.integers(1, 3)), n_recipients=int(rng.integers(1, 4)),
                      frames=int(rng.integers(8, 14)), conj_rate=0.6, division_interval=40.0,
                      true_expr_delay=DelayModel.uniform(5, 20), true_mat_delay=DelayModel.uniform(5, 20),
                      seed_spread=2.0)
    ds, _ = generate_trial(cfg, f"s{seed}")
    m = small_model(seed)
    return prepare_for_grid(ds, [m]), m


@pytest.fixture(autouse=True)
def _quiet():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ClampWarning)
        warnings.simplefilter("ignore", LabelWarning)
        logging.getLogger("conjnet").setLevel(logging.ERROR)
        yield


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.acceptance_lines():
        terminalreporter.write_line(line)
