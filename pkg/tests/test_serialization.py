from __future__ import annotations

import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import random_instance
from hybrid_pdp import (
    FluorescenceParams,
    PureHybridState,
    TimeGrid,
    TrajectoryConfig,
    build_fluorescence,
    build_telegraph,
    parse_model,
    run_ensemble,
    serialize_model,
    simulate_trajectory,
)
from hybrid_pdp.errors import ValidationError
from hybrid_pdp.serialization import (
    fmt,
    manifest_path,
    parse_initial_state,
    read_event_logs,
    write_event_logs,
    write_manifest,
    write_stats_csv,
)

seeds = st.integers(0, 2**32 - 1)


def _write(tmp_path, obj, name="m.json"):
    p = tmp_path / name
    p.write_text(obj if isinstance(obj, str) else json.dumps(obj))
    return p


TELEGRAPH = {
    "sectors": [{"name": "up", "dim": 1}, {"name": "down", "dim": 1}],
    "hamiltonians": [[[0]], [[[0, 0]]]],
    "couplings": [
        {"to": "down", "from": "up", "matrix": [[[1.5, 0]]]},
        {"to": 0, "from": 1, "matrix": [[1.5]]},
    ],
}


class TestParseModel:
    def test_telegraph(self, tmp_path):
        m = parse_model(_write(tmp_path, TELEGRAPH))
        assert m.n_sectors == 2 and m.sector_name(0) == "up"
        for a in (0, 1):
            assert m.jump_operator(a)[0, 0] == pytest.approx(2.25)

    def test_diagonal_coupling_named(self, tmp_path):
        cfg = dict(TELEGRAPH, couplings=[{"to": 1, "from": 1, "matrix": [[1.0]]}])
        with pytest.raises(ValidationError, match=r"\(1, 1\)"):
            parse_model(_write(tmp_path, cfg))

    def test_chain_round_trip(self, tmp_path):
        ref = build_fluorescence(FluorescenceParams(1.0, 2.0))
        m = parse_model(_write(tmp_path, serialize_model(ref)))
        assert m.is_chain and m.digest == ref.digest
        for n in range(6):
            assert np.array_equal(m.generator(n), ref.generator(n))
            assert [b for b, _ in m.outgoing(n)] == [n + 1]
            assert np.array_equal(m.coupling(n + 1, n), ref.coupling(n + 1, n))

    def test_syntax_error_has_position(self, tmp_path):
        with pytest.raises(ValidationError, match=r"m\.json:3:"):
            parse_model(_write(tmp_path, '{\n "sectors": [],\n oops\n}'))

    def test_field_context(self, tmp_path):
        cfg = json.loads(json.dumps(TELEGRAPH))
        cfg["couplings"][1]["matrix"] = [["x"]]
        with pytest.raises(ValidationError, match=r"couplings\[1\]\.matrix\[0\]\[0\]"):
            parse_model(_write(tmp_path, cfg))
        cfg = dict(TELEGRAPH, couplings=[{"to": "sideways", "from": 0, "matrix": [[1]]}])
        with pytest.raises(ValidationError, match="unknown sector 'sideways'"):
            parse_model(_write(tmp_path, cfg))
        with pytest.raises(ValidationError, match="missing field 'hamiltonians'"):
            parse_model(_write(tmp_path, {"sectors": []}))
        with pytest.raises(ValidationError, match="does not match dim"):
            parse_model(_write(tmp_path, dict(TELEGRAPH, hamiltonians=[[[0]], [[0, 0], [0, 0]]])))

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            parse_model(tmp_path / "absent.json")

    def test_initial_state(self, tmp_path):
        cfg = dict(TELEGRAPH, initial={"sector": 1, "psi": [[0, 2]]})
        p = _write(tmp_path, cfg)
        x = parse_initial_state(p, parse_model(p))
        assert x.sector == 1 and x.psi[0] == pytest.approx(1j)
        x0 = parse_initial_state(_write(tmp_path, TELEGRAPH, "n.json"), build_telegraph(1.0))
        assert x0.sector == 0 and x0.psi.tolist() == [1.0]

    @given(seed=seeds)
    @settings(max_examples=30)
    def test_round_trip_digest(self, seed, tmp_path_factory):
        m, x = random_instance(seed)
        p = tmp_path_factory.mktemp("rt") / "m.json"
        p.write_text(serialize_model(m, x))
        again = parse_model(p)
        assert again.digest == m.digest
        assert serialize_model(again) == serialize_model(m)
        y = parse_initial_state(p, again)
        assert np.array_equal(y.psi, x.psi)


@given(st.floats(allow_nan=False, allow_infinity=False))
def test_seventeen_digits_round_trip(x):
    assert float(fmt(x)) == x


def test_fmt_rejects_nonfinite():
    with pytest.raises(ValueError):
        fmt(math.inf)


class TestEventLogs:
    def test_round_trip_exact(self, tmp_path, fluorescence, ground):
        cfg = TrajectoryConfig(t_max=15.0, seed=9)
        logs = [simulate_trajectory(fluorescence, ground, cfg, i) for i in range(3)]
        p = tmp_path / "e.jsonl"
        write_event_logs(logs, p)
        back = read_event_logs(p, fluorescence)
        for a, b in zip(logs, back):
            assert (a.model_id, a.master_seed, a.trajectory_index, a.t_end) == \
                   (b.model_id, b.master_seed, b.trajectory_index, b.t_end)
            assert [r.t for r in a.records] == [r.t for r in b.records]
            assert all(np.array_equal(r.psi, s.psi) and r.sector == s.sector for r, s in zip(a.records, b.records))

    def test_record_fields(self, tmp_path, telegraph):
        log = simulate_trajectory(telegraph, PureHybridState(0, np.array([1.0 + 0j])), TrajectoryConfig(t_max=3.0))
        p = tmp_path / "e.jsonl"
        write_event_logs([log], p)
        lines = [json.loads(l) for l in p.read_text().splitlines()]
        assert lines[0]["n_records"] == len(log.records)
        assert set(lines[1]) == {"trajectory_index", "n", "t", "sector", "psi"}

    @given(seed=seeds)
    @settings(max_examples=30)
    def test_validator_accepts_engine_output(self, seed, tmp_path_factory):
        m, x = random_instance(seed)
        logs = [simulate_trajectory(m, x, TrajectoryConfig(t_max=5.0, seed=seed), i) for i in range(2)]
        p = tmp_path_factory.mktemp("ev") / "e.jsonl"
        write_event_logs(logs, p)
        assert len(read_event_logs(p, m)) == 2

    def _lines(self, tmp_path, telegraph):
        log = simulate_trajectory(telegraph, PureHybridState(0, np.array([1.0 + 0j])),
                                  TrajectoryConfig(t_max=10.0, seed=1))
        p = tmp_path / "e.jsonl"
        write_event_logs([log], p)
        return p, p.read_text().splitlines()

    def test_rejects_decreasing_times(self, tmp_path, telegraph):
        p, lines = self._lines(tmp_path, telegraph)
        lines[2], lines[3] = lines[3], lines[2]
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError):
            read_event_logs(p)

    def test_rejects_bad_norm(self, tmp_path, telegraph):
        p, lines = self._lines(tmp_path, telegraph)
        rec = json.loads(lines[1])
        rec["psi"] = [[0.5, 0]]
        lines[1] = json.dumps(rec)
        p.write_text("\n".join(lines) + "\n")
        with pytest.raises(ValidationError, match=":2:.*unit"):
            read_event_logs(p)

    def test_rejects_truncated_file(self, tmp_path, telegraph):
        p, lines = self._lines(tmp_path, telegraph)
        p.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ValidationError, match="header announced"):
            read_event_logs(p)

    def test_rejects_foreign_model(self, tmp_path, telegraph):
        p, _ = self._lines(tmp_path, telegraph)
        with pytest.raises(ValidationError, match="another model"):
            read_event_logs(p, build_telegraph(2.0))

    def test_rejects_garbage(self, tmp_path):
        p = tmp_path / "e.jsonl"
        p.write_text("not json\n")
        with pytest.raises(ValidationError, match=":1:"):
            read_event_logs(p)


def test_stats_csv(tmp_path, telegraph):
    grid = TimeGrid.span(1.0, 0.25)
    stats = run_ensemble(telegraph, PureHybridState(0, np.array([1.0 + 0j])), TrajectoryConfig(t_max=1.0), 10, grid)
    p = tmp_path / "s.csv"
    write_stats_csv(stats, p)
    rows = list(csv.reader(p.open()))
    assert rows[0][:3] == ["t", "occupation_0", "occupation_1"]
    assert len(rows) == 1 + grid.n_points
    assert float(rows[-1][0]) == 1.0


def test_manifest_location(tmp_path):
    out = tmp_path / "run.csv"
    out.write_text("x\n")
    p = write_manifest(out, {"b": 1, "a": 2})
    assert p == manifest_path(out) == tmp_path / "run.csv.manifest.json"
    assert json.loads(p.read_text()) == {"a": 2, "b": 1}
