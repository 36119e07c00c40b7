import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from synapse_sync import cli
from synapse_sync.cli import (
    FAMILY_RANGES,
    SplitMix64,
    load_config,
    main,
    parse_config,
    seeded_population,
    slow_manifold_init,
)
from synapse_sync.errors import ConfigError, NonConvergenceError
from synapse_sync.neuron import compute_geometry, piecewise_neuron


def test_splitmix_reference_vector():
    g = SplitMix64(1234567)
    assert [g.next_u64() for _ in range(3)] == [
        0x599ED017FB08FC85, 0x2C73F08458540FA5, 0x883EBCE5A3F27C77]


def test_doubles_use_the_top_53_bits():
    a, b = SplitMix64(99), SplitMix64(99)
    for _ in range(100):
        u = a.random()
        assert 0.0 <= u < 1.0 and u == (b.next_u64() >> 11) / 2.0**53


def test_uniform_draws_in_row_major_order():
    lo = np.array([0.0, 10.0, 20.0])
    got = SplitMix64(5).uniform(lo, lo + 1.0, size=(2, 3))
    ref = SplitMix64(5)
    want = np.array([[l + ref.random() for l in lo] for _ in range(2)])
    assert np.array_equal(got, want)
    assert isinstance(SplitMix64(5).uniform(), float)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**64 - 1), st.integers(1, 1000))
def test_integers_in_range(seed, n):
    g = SplitMix64(seed)
    assert all(0 <= g.integers(n) < n for _ in range(20))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**63))
def test_population_is_deterministic_and_in_range(seed):
    a = seeded_population(FAMILY_RANGES, seed, 7)
    assert a == seeded_population(FAMILY_RANGES, seed, 7)
    for triple in a:
        for val, key in zip(triple, ("g_L", "g_Ca", "g_K")):
            lo, hi = FAMILY_RANGES[key]
            assert lo <= val < hi


def test_ten_thousand_draws_stay_in_range():
    pop = np.array(seeded_population(FAMILY_RANGES, 2024, 10_000))
    for col, key in enumerate(("g_L", "g_Ca", "g_K")):
        lo, hi = FAMILY_RANGES[key]
        assert pop[:, col].min() >= lo and pop[:, col].max() < hi
        # means sit near the centre of each range
        assert abs(pop[:, col].mean() - 0.5 * (lo + hi)) < 0.02 * (hi - lo)


def test_population_draw_order():
    ref = SplitMix64(3)
    want = [tuple(ref.uniform(*FAMILY_RANGES[k]) for k in ("g_L", "g_Ca", "g_K")) for _ in range(2)]
    assert seeded_population(FAMILY_RANGES, 3, 2) == want


def test_collapsed_and_empty_ranges():
    ranges = dict(FAMILY_RANGES, g_Ca=(2.0, 2.0))
    assert {p[1] for p in seeded_population(ranges, 1, 5)} == {2.0}
    with pytest.raises(ConfigError):
        seeded_population(dict(FAMILY_RANGES, g_K=(3.0, 2.0)), 1, 1)


def test_slow_manifold_init_sits_on_the_lower_branch():
    models = [piecewise_neuron(0.4, 2.0, 3.0), piecewise_neuron(0.7, 1.8, 3.2)]
    x0, v0 = slow_manifold_init(models, SplitMix64(11))
    for m, x, v in zip(models, x0, v0):
        geo = compute_geometry(m, 0.0)
        assert geo.x_left <= x <= geo.x_right
        assert v <= geo.v_left
        assert float(m.f(x, v)) == pytest.approx(0.0, abs=1e-10)


@pytest.mark.parametrize("doc", [
    {"mode": "if", "n_cycles": 3, "population": {"n": 2}, "colour": 1},
    {"mode": "if", "n_cycles": 3, "population": {"n": 2, "size": 3}},
    {"mode": "if", "n_cycles": 3, "population": {"n": 2}, "graph": {"kind": "star"}},
    {"mode": "if", "population": {"n": 2}},
    {"mode": "ode", "population": {"n": 2}},
    {"mode": "dance", "population": {"n": 2}},
    {"population": {"n": 2}},
    {"mode": "check"},
])
def test_bad_configs_rejected(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_arguments_override_the_file(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"mode": "if", "seed": 4, "n_cycles": 2, "population": {"n": 2}}))
    cfg = load_config(path, mode="check", seed=9)
    assert cfg.mode == "check" and cfg.seed == 9 and cfg.population.n == 2
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")


def _write(tmp_path, doc):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(doc))
    return str(path)


def test_check_mode_flags_overdriven_coupling(tmp_path):
    cfg = _write(tmp_path, {"mode": "check", "population": {"n": 4},
                            "graph": {"kind": "ring", "k": 3, "gain": 0.13}})
    assert main(["check", "--config", cfg, "--out", str(tmp_path)]) == 2
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["status"] == 2 and rep["error"]["kind"] == "validation"
    assert rep["strongly_connected"] is True


def test_check_mode_passes(tmp_path):
    cfg = _write(tmp_path, {"mode": "check", "population": {"n": 4},
                            "graph": {"kind": "ring", "k": 3, "gain": 0.1}})
    assert main(["check", "--config", cfg, "--out", str(tmp_path)]) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    assert all(c["passed"] for a in rep["assumptions"] for c in a.values())


def test_if_mode_raster_format_and_determinism(tmp_path):
    doc = {"mode": "if", "seed": 3, "n_cycles": 5, "population": {"n": 4},
           "graph": {"kind": "ring", "k": 2, "gain": 0.05}, "min_nodes": 2001}
    cfg = _write(tmp_path, doc)
    outs = []
    for name in ("a", "b"):
        assert main(["if", "--config", cfg, "--out", str(tmp_path / name)]) == 0
        outs.append((tmp_path / name / "raster.csv").read_bytes())
    assert outs[0] == outs[1]
    text = outs[0].decode()
    assert "\r" not in text and text.endswith("\n")
    lines = text.splitlines()
    assert lines[0] == "neuron_id,cycle,time"
    rows = [line.split(",") for line in lines[1:]]
    times = [float(r[2]) for r in rows]
    assert times == sorted(times)
    for r in rows:
        assert float(r[2]) == float(repr(float(r[2])))
    assert {int(r[0]) for r in rows} == set(range(4))
    other = tmp_path / "c"
    assert main(["if", "--config", cfg, "--seed", "4", "--out", str(other)]) == 0
    assert (other / "raster.csv").read_bytes() != outs[0]


def test_numeric_failures_exit_three(tmp_path, monkeypatch):
    def boom(*_a, **_k):
        raise NonConvergenceError("forced")

    monkeypatch.setattr(cli, "_run_if", boom)
    cfg = _write(tmp_path, {"mode": "if", "n_cycles": 1, "population": {"n": 2}})
    assert main(["if", "--config", cfg, "--out", str(tmp_path)]) == 3
    rep = json.loads((tmp_path / "report.json").read_text())
    assert rep["error"]["kind"] == "NonConvergenceError"


def test_unreadable_config_exits_two(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["if", "--config", str(bad), "--out", str(tmp_path)]) == 2
