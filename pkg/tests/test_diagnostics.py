import csv
import io

import numpy as np
import pytest

from vcclab import autograd as ag
from vcclab.compressor import IDENTITY
from vcclab.diagnostics import (
    PROFILE_SCHEMA,
    SWEEP_SCHEMA,
    attention_probe,
    compression_sweep,
    sweep_csv,
    sweep_point,
)
from vcclab.errors import ProbeError, SpecError
from vcclab.model import ModelConfig, build_model, forward
from vcclab.tasks import Role, gen_dataset, render_sequence
from vcclab.trainer import evaluate

TINY = ModelConfig(n_layers=2, d_model=16, n_heads=2, d_ff=32, visual_len=4, max_seq=24, code_dim=4, dtype="float64")


@pytest.fixture(scope="module")
def setup():
    return build_model(TINY, 3), gen_dataset(0, 24, 2, 4, 0.5, ["lookup", "count", "majority"], "eval")


def test_sweep_point_arithmetic():
    p = sweep_point(8, 64, 2, 8, 0.5)
    assert p.tokens == 2 * 64 + 6 * 8
    assert p.retained_pct == pytest.approx(100 * 176 / 512)
    assert p.cr_pct == 291 and not p.degenerate


def test_sweep_point_after_last_layer_is_degenerate():
    p = sweep_point(8, 64, 8, 4, 1.0)
    assert p.degenerate and p.retained_pct == 100.0
    assert not sweep_point(8, 64, 8, 1, 1.0).degenerate


def test_sweep_grid_sorted_and_consistent(setup):
    model, ds = setup
    pts = compression_sweep(model, ds, [1, 2], [1, 2, 4])
    assert len(pts) == 6
    keys = [(p.retained_pct, p.K, p.S) for p in pts]
    assert keys == sorted(keys)
    base = evaluate(model, ds, IDENTITY)["overall"]
    for p in pts:
        if p.S == 1:
            assert p.accuracy == base and p.retained_pct == 100.0
    assert {p.degenerate for p in pts if p.K == 2} == {False, True}


def test_sweep_csv_layout(setup):
    pts = compression_sweep(*setup, [1], [2, 4])
    text = sweep_csv(pts)
    assert text.splitlines()[0] == SWEEP_SCHEMA
    rows = list(csv.DictReader(io.StringIO(text.split("\n", 1)[1])))
    assert list(rows[0]) == ["K", "S", "retained_pct", "cr_pct", "tokens", "accuracy", "degenerate"]
    assert len(rows) == 2


def test_empty_sweep_rejected(setup):
    with pytest.raises(SpecError):
        compression_sweep(*setup, [], [2])


def test_sweep_rejects_bad_layer(setup):
    with pytest.raises(ValueError):
        compression_sweep(*setup, [3], [2])


def _probe_one(model, sample):
    """Reference: one sample, one forward, explicit loops."""
    seq = render_sequence(sample)
    with ag.no_grad():
        res = forward(model, seq, capture=True)
    ans = int(np.flatnonzero(seq.roles == Role.ANSWER)[0])
    vis, sys_ = [], []
    for probs in res.capture.probs:
        H = probs.shape[1]
        v = s = 0.0
        for h in range(H):
            for t in range(len(seq)):
                if seq.roles[t] == Role.VISUAL:
                    v += probs[0, h, ans, t]
                elif seq.roles[t] == Role.SYSTEM:
                    s += probs[0, h, ans, t]
        vis.append(v / H)
        sys_.append(s / H)
    return np.array(vis), np.array(sys_)


def test_probe_matches_per_sample_reference(setup):
    model, ds = setup
    prof = attention_probe(model, ds, 10)
    refs = [_probe_one(model, s) for s in ds[:10]]
    np.testing.assert_allclose(prof.visual_mass, np.mean([r[0] for r in refs], axis=0), atol=1e-12)
    np.testing.assert_allclose(prof.system_mass, np.mean([r[1] for r in refs], axis=0), atol=1e-12)
    assert prof.n_samples == 10 and prof.n_layers == 2


def test_probe_masses_are_fractions(setup):
    prof = attention_probe(*setup)
    v, s = np.array(prof.visual_mass), np.array(prof.system_mass)
    assert np.all(v >= 0) and np.all(s >= 0) and np.all(v + s <= 1 + 1e-12)


def test_probe_csv(setup):
    text = attention_probe(setup[0], setup[1], 4).to_csv()
    lines = text.splitlines()
    assert lines[0] == PROFILE_SCHEMA and lines[1] == "layer,visual_mass,system_mass"
    assert [ln.split(",")[0] for ln in lines[2:]] == ["1", "2"]
    assert text == attention_probe(setup[0], setup[1], 4).to_csv()


def test_probe_errors(setup):
    model, ds = setup
    with pytest.raises(ProbeError):
        attention_probe(model, [])
    with pytest.raises(ProbeError):
        attention_probe(model, ds, 4, system_prompt_len=0)
